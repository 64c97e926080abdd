"""Command-line front end: generate -> train -> evaluate -> report.

Each experiment is described by one JSON config (see ``configs/``).  Commands
validate their inputs before touching the filesystem, mark output
directories with a ``.partial`` file until they complete, and use a fixed
exit-code contract: 0 ok, 2 usage/validation error, 3 training divergence,
4 artifact corruption.  ``APHYNITY_LOG`` (error/info/debug) controls
verbosity.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .augments import ConvNetSpec, MlpSpec, ConvNetAugmentation, MlpAugmentation
from .datagen import (
    Dataset, DatasetError, gen_pendulum, gen_reacdiff, gen_wave,
    load_dataset, save_dataset,
)
from .metrics import (
    evaluate, load_metrics_rows, write_metrics_csv, write_metrics_json,
)
from .models import AugmentedDynamics, CheckpointError, load_checkpoint, save_checkpoint
from .physics import make_family
from .training import TrainConfig, fit

log = logging.getLogger("aphynity.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CORRUPT = 4

SPLITS = ("train", "valid", "test")


class UsageError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("APHYNITY_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# configs

def builtin_config_dir() -> Path:
    return Path(__file__).parent / "configs"


def load_config(path, downscale: bool = False) -> dict:
    path = Path(path)
    if not path.exists():
        candidate = builtin_config_dir() / path.name
        if candidate.exists():
            path = candidate
        else:
            raise UsageError(f"config not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if downscale:
        overrides = cfg.get("downscale")
        if not overrides:
            raise UsageError("config has no downscale section")
        cfg = copy.deepcopy(cfg)
        for section, values in overrides.items():
            if isinstance(values, dict):
                cfg.setdefault(section, {}).update(values)
            else:
                cfg[section] = values
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    system = cfg.get("system")
    if system not in ("pendulum", "reacdiff", "wave"):
        raise UsageError(f"unknown system {system!r}")
    physics = cfg.get("physics", "none")
    if physics not in ("none", "incomplete", "complete", "true"):
        raise UsageError(f"unknown physics level {physics!r}")
    augmentation = cfg.get("augmentation", "none")
    if augmentation not in ("none", "mlp", "convnet"):
        raise UsageError(f"unknown augmentation {augmentation!r}")
    if physics == "none" and augmentation == "none":
        raise UsageError("enable at least one of physics or augmentation")
    if system == "pendulum" and augmentation == "convnet":
        raise UsageError("pendulum states are vectors; use the mlp augmentation")
    if system in ("reacdiff", "wave") and augmentation == "mlp":
        raise UsageError(f"{system} states are fields; use the convnet augmentation")
    mode = cfg.get("mode", "aphynity")
    try:
        TrainConfig(mode=mode, **cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train section: {exc}") from exc


_FAMILY_VARIANTS = {
    ("pendulum", "incomplete"): "omega0",
    ("pendulum", "complete"): "omega0_alpha",
    ("pendulum", "true"): "omega0_alpha",
    ("reacdiff", "incomplete"): "ab",
    ("reacdiff", "complete"): "abk",
    ("reacdiff", "true"): "abk",
    ("wave", "incomplete"): "c",
    ("wave", "complete"): "ck",
    ("wave", "true"): "ck",
}


def build_model(cfg: dict, train_ds: Dataset, seed: int) -> AugmentedDynamics:
    system = cfg["system"]
    physics_level = cfg.get("physics", "none")
    physical = None
    if physics_level != "none":
        variant = _FAMILY_VARIANTS[(system, physics_level)]
        dx = train_ds.grid["dx"] if train_ds.grid else None
        if physics_level == "true":
            init = {k: v for k, v in train_ds.true_params.items() if k != "t0_period"}
            physical = make_family(system, variant, dx=dx, init=init, trainable=False)
        else:
            init = cfg.get("physics_init") or None
            physical = make_family(system, variant, dx=dx, init=init)
    augmentation = None
    aug_kind = cfg.get("augmentation", "none")
    if aug_kind == "mlp":
        augmentation = MlpAugmentation(MlpSpec(), seed=seed)
    elif aug_kind == "convnet":
        padding = "circular" if system == "reacdiff" else "zero"
        augmentation = ConvNetAugmentation(ConvNetSpec(padding=padding), seed=seed)
    return AugmentedDynamics(physical, augmentation)


# ---------------------------------------------------------------------------
# partial-output markers

class _partial_marker:
    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".partial"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch()
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None and self.path.exists():
            self.path.unlink()
        return False


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.downscale)
    seed = cfg.get("seed", 0) if args.seed is None else args.seed
    out = Path(args.out)
    ds_cfg = cfg.get("dataset", {})
    system = cfg["system"]
    with _partial_marker(out):
        for split in SPLITS:
            ds = _generate_split(system, ds_cfg, split, seed)
            if ds is None:
                continue
            save_dataset(ds, out / split)
            log.info("%s: wrote %d trajectories of %d steps to %s",
                     split, ds.n_traj, ds.n_steps, out / split)
    return EXIT_OK


def _generate_split(system: str, ds_cfg: dict, split: str, seed: int):
    if system == "pendulum":
        sigma = ds_cfg.get("sigma", 0.01)
        if split == "test":
            sigma = ds_cfg.get("sigma_test", 0.0)
        return gen_pendulum(
            n_traj=ds_cfg.get("n_traj_per_split", 25),
            steps=ds_cfg.get("steps", 40), dt=ds_cfg.get("dt", 0.5),
            t0_period=ds_cfg.get("t0_period", 12.0), alpha=ds_cfg.get("alpha", 0.2),
            sigma=sigma, seed=seed, split=split)
    if system == "reacdiff":
        counts = {"train": ds_cfg.get("n_train", 1440),
                  "valid": ds_cfg.get("n_valid", 160),
                  "test": ds_cfg.get("n_test", 320)}
        if counts[split] == 0:
            return None
        return gen_reacdiff(
            n_seq=counts[split], grid=ds_cfg.get("grid", 32),
            a=ds_cfg.get("a", 1e-3), b=ds_cfg.get("b", 5e-3), k=ds_cfg.get("k", 5e-3),
            dt_sim=ds_cfg.get("dt_sim", 1e-3), dt_data=ds_cfg.get("dt_data", 0.1),
            horizon=ds_cfg.get("horizon", 2.5), t_init=ds_cfg.get("t_init", -0.5),
            seed=seed, split=split)
    if system == "wave":
        counts = {"train": ds_cfg.get("n_train", 200),
                  "valid": ds_cfg.get("n_valid", 25),
                  "test": ds_cfg.get("n_test", 25)}
        if counts[split] == 0:
            return None
        return gen_wave(
            n_seq=counts[split], grid=ds_cfg.get("grid", 64), c=ds_cfg.get("c", 330.0),
            k=ds_cfg.get("k", 50.0), dt=ds_cfg.get("dt", 1e-3),
            n_steps=ds_cfg.get("n_steps", 25),
            sigma_range=(ds_cfg.get("sigma_lo", 10.0), ds_cfg.get("sigma_hi", 100.0)),
            seed=seed, split=split)
    raise UsageError(f"unknown system {system!r}")


def _train_one_seed(cfg: dict, data_dir: Path, out_dir: Path, seed: int) -> int:
    train_ds = load_dataset(data_dir / "train")
    valid_path = data_dir / "valid"
    valid_ds = load_dataset(valid_path) if (valid_path / "meta.json").exists() else None
    model = build_model(cfg, train_ds, seed)
    tc = TrainConfig(mode=cfg.get("mode", "aphynity"), seed=seed, **cfg.get("train", {}))
    marker = _partial_marker(out_dir)
    marker.__enter__()
    report = fit(model, train_ds, tc, valid=valid_ds)
    report.save(out_dir)
    save_checkpoint(model, out_dir / "checkpoint", extra={
        "config_name": cfg.get("name"), "mode": tc.mode, "seed": seed,
        "system": cfg["system"], "physics_level": cfg.get("physics", "none"),
        "fa_norm_sq": report.final_fa_norm_sq,
        "dataset_dt": train_ds.dt,
    })
    if not report.diverged:
        # a diverged run keeps its .partial marker: the artifacts are a
        # salvaged prefix of the intended training, not a finished run
        marker.__exit__(None, None, None)
    last = report.records[-1] if report.records else None
    print(f"[seed {seed}] mode={tc.mode} epochs={len(report.records)} "
          f"steps={report.total_steps} lambda={report.final_lambda:.6g} "
          f"train_loss={last.train_loss if last else float('nan'):.6g} "
          f"fa_norm_sq={report.final_fa_norm_sq if report.final_fa_norm_sq is not None else 'n/a'} "
          f"params={ {k: float(f'{v:.6g}') for k, v in report.final_params.items()} }")
    if report.diverged:
        log.error("training diverged; partial report kept in %s", out_dir)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.downscale)
    data_dir = Path(args.data)
    if not (data_dir / "train" / "meta.json").exists():
        raise UsageError(f"no training dataset under {data_dir}")
    seeds = _parse_seeds(args, cfg)
    out = Path(args.out)
    if len(seeds) == 1:
        return _train_one_seed(cfg, data_dir, out, seeds[0])
    jobs = {seed: out / f"seed-{seed}" for seed in seeds}
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = {seed: pool.submit(_train_one_seed, cfg, data_dir, path, seed)
                       for seed, path in jobs.items()}
            codes = [f.result() for f in futures.values()]
    else:
        codes = [_train_one_seed(cfg, data_dir, path, seed)
                 for seed, path in jobs.items()]
    return max(codes)


def _parse_seeds(args, cfg) -> list[int]:
    if getattr(args, "seeds", None):
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        except ValueError as exc:
            raise UsageError(f"bad --seeds list: {args.seeds!r}") from exc
    if args.seed is not None:
        return [args.seed]
    return [cfg.get("seed", 0)]


def cmd_evaluate(args) -> int:
    model, extra = load_checkpoint(Path(args.checkpoint))
    test_ds = load_dataset(Path(args.data))
    train_ds = load_dataset(Path(args.train_data)) if args.train_data else None
    _check_compatibility(model, test_ds)
    horizon = args.horizon if args.horizon is not None else test_ds.n_steps
    if horizon < 1 or horizon > test_ds.n_steps:
        raise UsageError(
            f"horizon {horizon} outside 1..{test_ds.n_steps} for this dataset")
    run_id = extra.get("config_name") or "run"
    seed = int(extra.get("seed", 0))
    record = evaluate(model, test_ds, horizon, train=train_ds,
                      fa_norm_sq=extra.get("fa_norm_sq"),
                      run_id=f"{run_id}-seed{seed}", mode=extra.get("mode", "n/a"),
                      seed=seed)
    out = Path(args.out)
    with _partial_marker(out):
        write_metrics_csv([record], out / "metrics.csv")
        write_metrics_json([record], out / "metrics.json")
    print(f"log_mse={record.log_mse:.4f} "
          f"param_err_avg_pct={record.param_err_avg_pct if record.param_err_avg_pct is not None else 'n/a'} "
          f"fa_norm_sq={record.fa_norm_sq if record.fa_norm_sq is not None else 'n/a'} "
          f"excluded={record.excluded_trajectories}")
    return EXIT_OK


def _check_compatibility(model: AugmentedDynamics, ds: Dataset) -> None:
    desc = model.describe()
    if desc["physics"] is not None and desc["physics"]["system"] != ds.system:
        raise UsageError(
            f"checkpoint is for {desc['physics']['system']!r}, data is {ds.system!r}")
    if desc["augmentation"] is not None:
        kind = desc["augmentation"]["kind"]
        if kind == "mlp" and ds.spec.kind != "vector":
            raise UsageError("mlp checkpoint cannot evaluate field states")
        if kind == "convnet" and ds.spec.kind != "field":
            raise UsageError("convnet checkpoint cannot evaluate vector states")
        if kind == "mlp" and ds.spec.shape[0] != desc["augmentation"]["in_dim"]:
            raise UsageError("state width differs from checkpoint")
        if kind == "convnet" and ds.spec.shape[0] != desc["augmentation"]["in_channels"]:
            raise UsageError("channel count differs from checkpoint")


def cmd_report(args) -> int:
    results = Path(args.results)
    rows = []
    for csv_path in sorted(results.rglob("metrics.csv")):
        rows.extend(load_metrics_rows(csv_path))
    if not rows:
        raise UsageError(f"no metrics.csv files under {results}")
    groups: dict = {}
    for row in rows:
        key = (row["system"], row["method"], row["mode"])
        groups.setdefault(key, []).append(row)

    def agg(values: list[str]):
        nums = [float(v) for v in values if v not in ("n/a", "")]
        if not nums or any(not np.isfinite(x) for x in nums):
            return "n/a", "n/a"
        mean = float(np.mean(nums))
        std = float(np.std(nums, ddof=1)) if len(nums) > 1 else 0.0
        return repr(mean), repr(std)

    out = Path(args.out)
    lines = []
    table_rows = []
    for (system, method, mode), members in sorted(groups.items()):
        lm, lm_std = agg([m["log_mse"] for m in members])
        pe, pe_std = agg([m["param_err_avg_pct"] for m in members])
        fa, fa_std = agg([m["fa_norm_sq"] for m in members])
        table_rows.append({
            "system": system, "method": method, "mode": mode,
            "n_seeds": len(members), "log_mse_mean": lm, "log_mse_std": lm_std,
            "param_err_avg_pct_mean": pe, "param_err_avg_pct_std": pe_std,
            "fa_norm_sq_mean": fa, "fa_norm_sq_std": fa_std,
        })

    def cell(mean, std):
        if mean == "n/a":
            return "n/a"
        return f"{float(mean):.4g} ± {float(std):.2g}"

    current_system = None
    for row in table_rows:
        if row["system"] != current_system:
            current_system = row["system"]
            lines.append(f"== {current_system} ==")
            lines.append(f"{'method':42s} {'mode':24s} {'log MSE':>18s} "
                         f"{'%Err param':>18s} {'|Fa|^2':>18s}")
        lines.append(
            f"{row['method']:42s} {row['mode']:24s} "
            f"{cell(row['log_mse_mean'], row['log_mse_std']):>18s} "
            f"{cell(row['param_err_avg_pct_mean'], row['param_err_avg_pct_std']):>18s} "
            f"{cell(row['fa_norm_sq_mean'], row['fa_norm_sq_std']):>18s}")
    text = "\n".join(lines) + "\n"

    with _partial_marker(out):
        import csv as _csv
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=list(table_rows[0]),
                                     lineterminator="\n")
            writer.writeheader()
            writer.writerows(table_rows)
        (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aphynity",
        description="Hybrid physical/data-driven dynamics: generate, train, "
                    "evaluate, report.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="simulate train/valid/test datasets")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--downscale", action="store_true")
    gen.set_defaults(fn=cmd_generate)

    tr = sub.add_parser("train", help="fit a model on a generated dataset")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--seeds", default=None, help="comma-separated seed list")
    tr.add_argument("--parallel", type=int, default=1)
    tr.add_argument("--downscale", action="store_true")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a test dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="test dataset directory")
    ev.add_argument("--train-data", default=None,
                    help="training dataset for the residual-norm report")
    ev.add_argument("--out", required=True)
    ev.add_argument("--horizon", type=int, default=None)
    ev.set_defaults(fn=cmd_evaluate)

    rep = sub.add_parser("report", help="aggregate metrics files into one table")
    rep.add_argument("--results", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
