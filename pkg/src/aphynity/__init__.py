"""Hybrid physical/data-driven dynamics forecasting.

Decomposes observed dynamics into a parametric physical term plus a learned
residual, trained so the residual stays as small as the trajectory-fit
constraint allows.
"""

__version__ = "0.1.0"
