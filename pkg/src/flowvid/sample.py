"""Generation: numerical integration of the learned flow with per-step random
past-frame conditioning, autoregressive rollout, warm-start initialization,
and bidirectional frame infilling.

All frame indices are 1-based; `history` holds frames 1..T-1 when frame T is
being generated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flow import PathParams, sample_conditional
from .model import ModelConfig, ModelParams, build_tokens, forward, tokenize
from .rngutil import substream


class ModeMismatchError(ValueError):
    """Checkpoint was trained for a different generation mode."""


class IntegrationDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at integration step {step}")
        self.step = step


@dataclass(frozen=True)
class SampleConfig:
    n_steps: int = 32
    warm_start_s: float = 0.0
    context_limit: int | None = None  # None = unlimited
    seed: int = 0
    solver: str = "euler"  # or "midpoint"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not (0.0 <= self.warm_start_s < 1.0):
            raise ValueError("warm_start_s must lie in [0,1)")
        if self.context_limit is not None and self.context_limit < 2:
            raise ValueError("context_limit must be >= 2")
        if self.solver not in ("euler", "midpoint"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def steps_per_frame(self) -> int:
        return math.ceil(self.n_steps * (1.0 - self.warm_start_s))

    @property
    def evals_per_step(self) -> int:
        return 1 if self.solver == "euler" else 2


@dataclass
class Rollout:
    frames: list = field(default_factory=list)
    network_evals: int = 0
    per_frame_conditions: list = field(default_factory=list)


def integrate_field(x0: np.ndarray, fld, t0: float, t1: float, steps: int,
                    solver: str = "euler") -> np.ndarray:
    """Fixed-step integration of dx/dt = fld(t, x) over [t0, t1].

    Euler makes one field evaluation per step, midpoint two. The field may be
    stateful (the learned field redraws its condition on every evaluation).
    """
    x = x0
    dt = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * dt
        k1 = fld(t, x)
        if solver == "euler":
            x = x + dt * k1
        else:
            k2 = fld(t + 0.5 * dt, x + 0.5 * dt * k1)
            x = x + dt * k2
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(i)
    return x


def warm_start_init(prev_frame: np.ndarray, s: float, p: PathParams,
                    rng: np.random.Generator) -> np.ndarray:
    """Initial ODE state drawn from the conditional path at time s around the
    previous frame; s=0 degenerates to a pure standard-normal draw."""
    if not (0.0 <= s < 1.0):
        raise ValueError("s must lie in [0,1)")
    return sample_conditional(s, prev_frame, p, rng)


def _condition_window(t_index: int, context_limit: int | None) -> tuple[int, int]:
    """Legal condition indices {lo..T-2} when generating frame T. A context
    limit of k restricts conditioning to the k most recent frames (the
    reference T-1 plus conditions from {T-k..T-2}); k=2 pins the condition
    to frame T-2."""
    hi = t_index - 2
    lo = 1 if context_limit is None else max(1, t_index - context_limit)
    return lo, hi


def predict_next_frame(history: list[np.ndarray], params: ModelParams,
                       mcfg: ModelConfig, scfg: SampleConfig,
                       p: PathParams, rng: np.random.Generator
                       ) -> tuple[np.ndarray, list[int]]:
    """Generate frame T = len(history)+1 by integrating the learned field
    from the warm-start state, redrawing the condition index at every
    network evaluation."""
    if len(history) < 2:
        raise ValueError("need at least 2 history frames (reference + condition)")
    t_index = len(history) + 1
    ref = history[-1]
    lo, hi = _condition_window(t_index, scfg.context_limit)
    conditions: list[int] = []

    def fld(t: float, x: np.ndarray) -> np.ndarray:
        c = int(rng.integers(lo, hi + 1))
        conditions.append(c)
        seq = tokenize(x, ref if mcfg.use_reference else None,
                       history[c - 1], min(t, 1.0), t_index - c, mcfg, params)
        return forward(seq, mcfg, params).data

    x0 = warm_start_init(ref, scfg.warm_start_s, p, rng)
    x1 = integrate_field(x0, fld, scfg.warm_start_s, 1.0,
                         scfg.steps_per_frame, scfg.solver)
    return x1, conditions


def rollout(context: list[np.ndarray], n_future: int, params: ModelParams,
            mcfg: ModelConfig, scfg: SampleConfig,
            p: PathParams | None = None,
            rng: np.random.Generator | None = None) -> Rollout:
    """Autoregressive generation: each new frame joins the history that the
    next one conditions on."""
    if len(context) < 2:
        raise ValueError("context must hold at least 2 frames")
    if n_future < 0:
        raise ValueError("n_future must be >= 0")
    p = p or PathParams()
    rng = rng if rng is not None else substream(scfg.seed, "sample")
    history = list(context)
    out = Rollout()
    for _ in range(n_future):
        frame, conds = predict_next_frame(history, params, mcfg, scfg, p, rng)
        history.append(frame)
        out.frames.append(frame)
        out.per_frame_conditions.append(conds)
        out.network_evals += len(conds)
    return out


def interpolate(source: np.ndarray, target: np.ndarray, n_between: int,
                params: ModelParams, mcfg: ModelConfig, scfg: SampleConfig,
                p: PathParams | None = None,
                rng: np.random.Generator | None = None) -> Rollout:
    """Sequentially infill n_between frames between source and target.

    Requires an interpolation-mode model (no reference, two condition slots).
    At every network evaluation one condition is drawn from the fixed frames
    at or before the slot and one from at or after (here: the target);
    distances are slot-relative signed offsets, positive toward the past.
    """
    if mcfg.use_reference or mcfg.condition_slots != 2:
        raise ModeMismatchError(
            "interpolation needs a model with use_reference=false and "
            "condition_slots=2")
    if n_between < 0:
        raise ValueError("n_between must be >= 0")
    p = p or PathParams()
    rng = rng if rng is not None else substream(scfg.seed, "interp")
    fixed = [source]  # frames 1..s-1 once slot s is being generated
    target_index = n_between + 2
    out = Rollout()
    for slot in range(2, n_between + 2):
        conds_used: list[int] = []

        def fld(t: float, x: np.ndarray) -> np.ndarray:
            c_past = int(rng.integers(1, slot))
            conds_used.extend((c_past, target_index))
            conds = [(fixed[c_past - 1], slot - c_past),
                     (target, slot - target_index)]
            seq = build_tokens(x, conds, min(t, 1.0), mcfg, params)
            return forward(seq, mcfg, params).data

        x0 = warm_start_init(fixed[-1], scfg.warm_start_s, p, rng)
        frame = integrate_field(x0, fld, scfg.warm_start_s, 1.0,
                                scfg.steps_per_frame, scfg.solver)
        fixed.append(frame)
        out.frames.append(frame)
        out.per_frame_conditions.append(conds_used)
        out.network_evals += len(conds_used) // 2
    return out
