"""PSNR, SSIM, trivial baselines, and the evaluation protocol (metrics
averaged over all samples of all test clips, not best-of-k)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7   # uniform window; the standard 11x11 Gaussian barely fits 16 px
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max_val^2 / MSE), capped at 100 dB when MSE is zero."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_val * max_val / err))


def _window_means(img: np.ndarray, win: int) -> np.ndarray:
    """Mean over all win x win windows (valid positions) via summed-area."""
    cs = np.cumsum(np.cumsum(np.pad(img, ((1, 0), (1, 0))), axis=0), axis=1)
    s = cs[win:, win:] - cs[:-win, win:] - cs[win:, :-win] + cs[:-win, :-win]
    return s / (win * win)


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0,
         window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM with a uniform window; channels averaged.

    Accepts [h, w] or [c, h, w]; spatial extent must cover the window.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than {window}x{window} window")
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    vals = []
    for ca, cb in zip(a.astype(np.float64), b.astype(np.float64)):
        mu_a = _window_means(ca, window)
        mu_b = _window_means(cb, window)
        var_a = _window_means(ca * ca, window) - mu_a * mu_a
        var_b = _window_means(cb * cb, window) - mu_b * mu_b
        cov = _window_means(ca * cb, window) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def copy_last_baseline(context: list[np.ndarray], n_future: int) -> list[np.ndarray]:
    """Repeat the last context frame; the floor any learned model must beat."""
    if not context:
        raise ValueError("context must be non-empty")
    return [context[-1].copy() for _ in range(n_future)]


@dataclass
class EvalReport:
    """Per-clip and aggregate metrics plus per-frame horizon curves."""
    n_clips: int = 0
    n_frames: int = 0
    per_clip: list[dict] = field(default_factory=list)
    per_frame_psnr: list[float] = field(default_factory=list)
    per_frame_ssim: list[float] = field(default_factory=list)
    per_frame_mse: list[float] = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    mean_mse: float = 0.0
    config_echo: dict = field(default_factory=dict)

    def as_kv_text(self) -> str:
        lines = [f"clips={self.n_clips}", f"frames_per_clip={self.n_frames}",
                 f"samples={self.n_clips * self.n_frames}",
                 f"mean_psnr={self.mean_psnr:.6f}",
                 f"mean_ssim={self.mean_ssim:.6f}",
                 f"mean_mse={self.mean_mse:.8f}",
                 f"ssim_window={SSIM_WINDOW}", "ssim_weights=uniform"]
        lines += [f"{k}={v}" for k, v in sorted(self.config_echo.items())]
        return "\n".join(lines) + "\n"

    def curves_csv(self) -> str:
        rows = ["horizon,psnr,ssim,mse"]
        for i, (p, s, m) in enumerate(zip(self.per_frame_psnr,
                                          self.per_frame_ssim,
                                          self.per_frame_mse), start=1):
            rows.append(f"{i},{p:.6f},{s:.6f},{m:.8f}")
        return "\n".join(rows) + "\n"


def evaluate_predictions(predicted: list[list[np.ndarray]],
                         truth: list[list[np.ndarray]],
                         max_val: float = 1.0) -> EvalReport:
    """Aggregate metrics over predicted vs. ground-truth frames.

    `predicted[i][j]` is frame j of clip i. Aggregates are the arithmetic
    mean over every (clip, frame) sample.
    """
    if len(predicted) != len(truth):
        raise ValueError("clip count mismatch")
    report = EvalReport(n_clips=len(predicted),
                        n_frames=len(truth[0]) if truth else 0)
    horizon = report.n_frames
    frame_psnr = np.zeros(horizon)
    frame_ssim = np.zeros(horizon)
    frame_mse = np.zeros(horizon)
    all_psnr, all_ssim, all_mse = [], [], []
    for pred_clip, true_clip in zip(predicted, truth):
        if len(pred_clip) != horizon:
            raise ValueError("inconsistent prediction horizon")
        ps, ss, ms = [], [], []
        for j, (pf, tf) in enumerate(zip(pred_clip, true_clip)):
            p, s, m = psnr(pf, tf, max_val), ssim(pf, tf, max_val), mse(pf, tf)
            ps.append(p); ss.append(s); ms.append(m)
            frame_psnr[j] += p; frame_ssim[j] += s; frame_mse[j] += m
        report.per_clip.append({"psnr": float(np.mean(ps)),
                                "ssim": float(np.mean(ss)),
                                "mse": float(np.mean(ms))})
        all_psnr += ps; all_ssim += ss; all_mse += ms
    n = max(report.n_clips, 1)
    report.per_frame_psnr = list(frame_psnr / n)
    report.per_frame_ssim = list(frame_ssim / n)
    report.per_frame_mse = list(frame_mse / n)
    report.mean_psnr = float(np.mean(all_psnr)) if all_psnr else 0.0
    report.mean_ssim = float(np.mean(all_ssim)) if all_ssim else 0.0
    report.mean_mse = float(np.mean(all_mse)) if all_mse else 0.0
    return report
