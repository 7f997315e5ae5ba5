"""Conditional Gaussian probability path and the flow-matching regression target.

The path interpolates from a standard normal at t=0 to a near-delta at the
data point at t=1: mean(t) = t * x1, std(t) = 1 - (1 - sigma_min) * t.
The target field below uses the time-dependent denominator
1 - (1 - sigma_min) * t; this is the unique choice consistent with the linear
schedule (the consistency test pins it down), see docs/notes in the README.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, mean, mul, sub

DEFAULT_SIGMA_MIN = 1e-7


@dataclass(frozen=True)
class PathParams:
    sigma_min: float = DEFAULT_SIGMA_MIN

    def __post_init__(self):
        if not (0.0 < self.sigma_min < 1.0):
            raise ValueError(f"sigma_min must be in (0,1), got {self.sigma_min}")


@dataclass(frozen=True)
class PathPoint:
    """A sampled point on the conditional path: time, noisy state, target field."""
    t: float
    x: np.ndarray
    u: np.ndarray


def _check_t(t: float) -> None:
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0,1], got {t}")


def mean_schedule(t: float, x1: np.ndarray) -> np.ndarray:
    """Path mean: linear interpolation 0 -> x1."""
    _check_t(t)
    return t * x1


def std_schedule(t: float, p: PathParams) -> float:
    """Path std: linear interpolation 1 -> sigma_min; strictly positive on [0,1]."""
    _check_t(t)
    return 1.0 - (1.0 - p.sigma_min) * t


def sample_conditional(t: float, x1: np.ndarray, p: PathParams,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw x ~ N(mean_schedule(t, x1), std_schedule(t)^2 I)."""
    _check_t(t)
    eps = rng.standard_normal(x1.shape)
    return (mean_schedule(t, x1) + std_schedule(t, p) * eps).astype(x1.dtype, copy=False)


def target_field(t: float, x: np.ndarray, x1: np.ndarray, p: PathParams) -> np.ndarray:
    """Analytic field transporting the conditional path:
    (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)."""
    if not (0.0 <= t < 1.0):
        raise ValueError(f"t must lie in [0,1), got {t}")
    if x.shape != x1.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs x1 {x1.shape}")
    denom = 1.0 - (1.0 - p.sigma_min) * t
    if denom <= 0.0:
        raise ValueError(f"degenerate path denominator {denom} at t={t}")
    return ((x1 - (1.0 - p.sigma_min) * x) / denom).astype(x.dtype, copy=False)


def sample_path_point(t: float, x1: np.ndarray, p: PathParams,
                      rng: np.random.Generator) -> PathPoint:
    x = sample_conditional(t, x1, p, rng)
    return PathPoint(t=t, x=x, u=target_field(t, x, x1, p))


def cfm_loss(v_pred: Tensor, u_target: Tensor) -> Tensor:
    """Mean squared error between predicted and target fields.

    Reduction is the mean over all elements (and hence over any batch axis),
    so the loss magnitude is independent of resolution and batch size.
    """
    if v_pred.shape != u_target.shape:
        raise ValueError(f"shape mismatch: {v_pred.shape} vs {u_target.shape}")
    d = sub(v_pred, u_target)
    return mean(mul(d, d))
