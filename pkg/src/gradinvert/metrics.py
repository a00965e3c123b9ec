"""Image-quality metrics and paired ours-vs-baseline reports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CSV_HEADER = (
    "victim_id,prior_id,restart_id,mse_ours,mse_base,psnr_ours,psnr_base,"
    "ssim_ours,ssim_base,d_mse,d_psnr,d_ssim"
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img, window):
    # valid-mode weighted mean over every 11x11 patch
    patches = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows, averaged over channels.

    ``a`` and ``b`` are (C, H, W) or (H, W) arrays.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise MetricError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    window = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    values = []
    for x, y in zip(a, b):
        mx, my = _filter(x, window), _filter(y, window)
        sxx = _filter(x * x, window) - mx * mx
        syy = _filter(y * y, window) - my * my
        sxy = _filter(x * y, window) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


@dataclass(frozen=True)
class PairRow:
    victim_id: int
    prior_id: int | None
    restart_id: int
    mse_ours: float
    mse_base: float
    psnr_ours: float
    psnr_base: float
    ssim_ours: float
    ssim_base: float

    @property
    def d_mse(self):
        return self.mse_ours - self.mse_base

    @property
    def d_psnr(self):
        return _diff(self.psnr_ours, self.psnr_base)

    @property
    def d_ssim(self):
        return self.ssim_ours - self.ssim_base


def _diff(a, b):
    # inf - inf is a tie, not NaN
    if a == b:
        return 0.0
    return a - b


def fmt(v) -> str:
    """Shortest round-trip decimal; ``inf``/``-inf`` spelled out, ``None`` empty."""
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def direction(value: float) -> str:
    if value > 0:
        return "up"
    if value < 0:
        return "down"
    return "same"


@dataclass
class DiffReport:
    rows: list

    def _column(self, name):
        return [getattr(r, name) for r in self.rows]

    def mean(self, name: str) -> float:
        vals = self._column(name)
        return float(sum(vals) / len(vals)) if vals else math.nan

    def max(self, name: str) -> float:
        vals = self._column(name)
        return float(max(vals)) if vals else math.nan

    def summary(self) -> dict:
        out = {}
        for metric in ("mse", "psnr", "ssim"):
            m = self.mean(f"d_{metric}")
            out[metric] = {"mean": m, "max": self.max(f"d_{metric}"), "direction": direction(m)}
        return out

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            vals = [r.victim_id, r.prior_id, r.restart_id, r.mse_ours, r.mse_base, r.psnr_ours, r.psnr_base,
                    r.ssim_ours, r.ssim_base, r.d_mse, r.d_psnr, r.d_ssim]
            lines.append(",".join(fmt(v) for v in vals))
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["metric,mean_diff,max_diff,direction"]
        for metric, s in self.summary().items():
            lines.append(f"{metric},{fmt(s['mean'])},{fmt(s['max'])},{s['direction']}")
        return "\n".join(lines) + "\n"


def paired_report(results_ours, results_baseline, ground_truths, victim_ids=None) -> DiffReport:
    """Per-victim metric differences (ours minus baseline).

    Each result is a reconstruction (anything with ``image``; ``prior_id`` and
    ``restart`` are used when present) or a bare image array. Lists are
    index-aligned on the same victims.
    """
    n = len(ground_truths)
    if len(results_ours) != n or len(results_baseline) != n:
        raise MetricError(
            f"misaligned inputs: {len(results_ours)} ours, {len(results_baseline)} baseline, {n} ground truths"
        )
    if victim_ids is None:
        victim_ids = list(range(n))
    rows = []
    for vid, ours, base, truth in zip(victim_ids, results_ours, results_baseline, ground_truths):
        img_o = getattr(ours, "image", ours)
        img_b = getattr(base, "image", base)
        rows.append(PairRow(
            victim_id=int(vid),
            prior_id=getattr(ours, "prior_id", None),
            restart_id=int(getattr(ours, "restart", 0)),
            mse_ours=mse(img_o, truth), mse_base=mse(img_b, truth),
            psnr_ours=psnr(img_o, truth), psnr_base=psnr(img_b, truth),
            ssim_ours=ssim(img_o, truth), ssim_base=ssim(img_b, truth),
        ))
    return DiffReport(rows)
