"""Forecast evaluation and comparison tables.

``evaluate`` rolls every test trajectory out from its initial state with the
fixed-step training solver at the dataset resolution and scores base-10 log
mean squared error over a fixed horizon, physical-parameter error
percentages, and the residual norm over the training states.

Pendulum frequency errors are reported on the period (``t0_period``) rather
than on the squared pulsation, so "5% off" means 5% off the period.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .integrators import BlowUpError, integrate
from .models import AugmentedDynamics
from .training import augmentation_norm_sq

__all__ = ["MetricsRecord", "log_mse", "param_error_pct", "evaluate",
           "write_metrics_csv", "write_metrics_json", "load_metrics_rows"]

CSV_COLUMNS = [
    "run_id", "system", "method", "physics", "augmentation", "mode", "seed",
    "horizon", "log_mse", "param_err_avg_pct", "param_err_detail",
    "fa_norm_sq", "fa_norm_source", "excluded_trajectories",
]


@dataclass
class MetricsRecord:
    run_id: str
    system: str
    method: str
    physics: str | None
    augmentation: str | None
    mode: str
    seed: int
    horizon: int
    log_mse: float
    param_err_pct: dict[str, float] = field(default_factory=dict)
    param_err_avg_pct: float | None = None
    fa_norm_sq: float | None = None
    fa_norm_source: str | None = None
    excluded_trajectories: int = 0
    estimated_params: dict[str, float] = field(default_factory=dict)

    def to_row(self) -> dict:
        detail = json.dumps(
            {k: _round_sig(v) for k, v in sorted(self.param_err_pct.items())},
            sort_keys=True) if self.param_err_pct else "n/a"
        return {
            "run_id": self.run_id,
            "system": self.system,
            "method": self.method,
            "physics": self.physics or "n/a",
            "augmentation": self.augmentation or "n/a",
            "mode": self.mode,
            "seed": self.seed,
            "horizon": self.horizon,
            "log_mse": _fmt(self.log_mse),
            "param_err_avg_pct": _fmt(self.param_err_avg_pct),
            "param_err_detail": detail,
            "fa_norm_sq": _fmt(self.fa_norm_sq),
            "fa_norm_source": self.fa_norm_source or "n/a",
            "excluded_trajectories": self.excluded_trajectories,
        }

    def to_json_dict(self) -> dict:
        d = {
            "run_id": self.run_id, "system": self.system, "method": self.method,
            "physics": self.physics, "augmentation": self.augmentation,
            "mode": self.mode, "seed": self.seed, "horizon": self.horizon,
            "log_mse": _json_float(self.log_mse),
            "param_err_pct": {k: _json_float(v) for k, v in self.param_err_pct.items()},
            "param_err_avg_pct": _json_float(self.param_err_avg_pct),
            "fa_norm_sq": _json_float(self.fa_norm_sq),
            "fa_norm_source": self.fa_norm_source,
            "excluded_trajectories": self.excluded_trajectories,
            "estimated_params": {k: _json_float(v)
                                 for k, v in self.estimated_params.items()},
        }
        return d


def _round_sig(x: float, digits: int = 6) -> float:
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    x = float(x)
    if x == float("-inf"):
        return "-inf"
    if x == float("inf"):
        return "inf"
    return repr(x)


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    if math.isfinite(x):
        return x
    return {float("inf"): "inf", float("-inf"): "-inf"}.get(x, "nan")


def log_mse(pred: np.ndarray, truth: np.ndarray, horizon: int) -> float:
    """Base-10 log of the MSE over predicted steps 1..horizon, all entries.

    ``pred``/``truth`` are (N, T+1, ...) stacks sharing the initial state.
    A perfect forecast returns ``-inf``.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if horizon < 1 or horizon > truth.shape[1] - 1:
        raise ValueError(f"horizon {horizon} outside 1..{truth.shape[1] - 1}")
    mse = float(np.mean((pred[:, 1:horizon + 1] - truth[:, 1:horizon + 1]) ** 2))
    if mse == 0.0:
        return float("-inf")
    return math.log10(mse)


def param_error_pct(estimated: dict[str, float],
                    true: dict[str, float]) -> tuple[dict[str, float], float]:
    """Per-parameter ``100 |est - true| / |true|`` and the arithmetic mean."""
    if not estimated:
        raise ValueError("no parameters to compare")
    errors = {}
    for name, est in estimated.items():
        if name not in true:
            raise ValueError(f"no true value for parameter {name!r}")
        ref = true[name]
        if ref == 0:
            raise ValueError(f"true value of {name!r} is zero")
        errors[name] = 100.0 * abs(est - ref) / abs(ref)
    return errors, float(np.mean(list(errors.values())))


def reported_params(values: dict[str, float]) -> dict[str, float]:
    """Map native parameters to their reported form (pendulum period)."""
    out = dict(values)
    if "omega0_sq" in out:
        out["t0_period"] = 2.0 * np.pi / np.sqrt(out.pop("omega0_sq"))
    return out


def _rollout(model: AugmentedDynamics, x0: np.ndarray, n_steps: int, dt: float):
    with dc.no_grad():
        states = integrate(model.rhs, Tensor(x0), n_steps, dt)
        return np.stack([s.values for s in states], axis=1)


def evaluate(model: AugmentedDynamics, test, horizon: int, train=None,
             fa_norm_sq: float | None = None, run_id: str = "run",
             mode: str = "n/a", seed: int = 0) -> MetricsRecord:
    """Score a trained model on a test dataset.

    All test trajectories are rolled out in one batch (batch-norm residuals
    see the full test batch, keeping evaluation deterministic).  If the batch
    blows up, trajectories are retried one by one and the diverging ones are
    excluded and counted.  The residual norm is computed over ``train``'s
    states when given, else taken from ``fa_norm_sq`` (a value recorded at
    train time), else left unset.
    """
    n_steps = test.n_steps
    if horizon < 1 or horizon > n_steps:
        raise ValueError(f"horizon {horizon} exceeds trajectory length {n_steps}")
    truth = test.trajectories
    excluded = 0
    try:
        pred = _rollout(model, truth[:, 0], n_steps, test.dt)
        kept = np.ones(truth.shape[0], dtype=bool)
    except BlowUpError:
        preds, kept = [], np.zeros(truth.shape[0], dtype=bool)
        for i in range(truth.shape[0]):
            try:
                preds.append(_rollout(model, truth[i:i + 1, 0], n_steps, test.dt)[0])
                kept[i] = True
            except BlowUpError:
                excluded += 1
        if not preds:
            raise
        pred = np.stack(preds)
    lm = log_mse(pred, truth[kept], horizon)

    desc = model.describe()
    physics = f"{desc['physics']['system']}:{desc['physics']['variant']}" \
        if desc["physics"] else None
    augmentation = desc["augmentation"]["kind"] if desc["augmentation"] else None

    errors: dict[str, float] = {}
    avg = None
    estimated = {}
    if model.physical is not None and len(model.physical.params) > 0:
        estimated = reported_params(model.physical_param_values())
        truth_params = reported_params(dict(test.true_params))
        comparable = {k: v for k, v in estimated.items() if k in truth_params}
        if comparable:
            errors, avg = param_error_pct(
                comparable, {k: truth_params[k] for k in comparable})

    norm_val, norm_src = None, None
    if model.augmentation is not None:
        if train is not None:
            with dc.no_grad():
                norm_val = float(augmentation_norm_sq(
                    model.augmentation, train.all_states()).values)
            norm_src = "train_states"
        elif fa_norm_sq is not None:
            norm_val = float(fa_norm_sq)
            norm_src = "checkpoint"

    method_bits = []
    if desc["physics"]:
        method_bits.append(physics)
    if augmentation:
        method_bits.append(augmentation)
    return MetricsRecord(
        run_id=run_id, system=test.system, method="+".join(method_bits),
        physics=physics, augmentation=augmentation, mode=mode, seed=seed,
        horizon=horizon, log_mse=lm, param_err_pct=errors, param_err_avg_pct=avg,
        fa_norm_sq=norm_val, fa_norm_source=norm_src,
        excluded_trajectories=excluded, estimated_params=estimated)


def write_metrics_csv(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_row())


def write_metrics_json(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [rec.to_json_dict() for rec in records]
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_metrics_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
