"""Full-reference quality measures for fused hyperspectral cubes.

All functions take ``(est, ref)`` as arrays or :class:`HyperImage` of shape
``(bands, rows, cols)``.  Degenerate bands, pixels or windows are skipped
with a :class:`MetricWarning` instead of producing NaNs.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import DimensionError

__all__ = ["MetricWarning", "MetricReport", "psnr", "sam", "ergas", "uiqi", "evaluate"]


class MetricWarning(UserWarning):
    pass


def _pair(est, ref):
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise DimensionError(f"shape mismatch: est {est.shape} vs ref {ref.shape}")
    if est.ndim != 3:
        raise DimensionError(f"expected (bands, rows, cols), got {est.shape}")
    return est, ref


def psnr(est, ref) -> float:
    """Band-averaged ``10 log10(M max(ref)^2 / ||est - ref||^2)`` in dB.

    Returns ``inf`` when some band is reproduced exactly.  Bands whose
    reference maximum is zero are skipped.
    """
    est, ref = _pair(est, ref)
    vals = []
    for b in range(ref.shape[0]):
        peak = ref[b].max()
        if peak == 0:
            warnings.warn(f"band {b}: zero reference maximum, skipped", MetricWarning, stacklevel=2)
            continue
        err = np.sum((est[b] - ref[b]) ** 2)
        vals.append(math.inf if err == 0 else 10 * np.log10(ref[b].size * peak**2 / err))
    if not vals:
        raise ValueError("no band with a nonzero reference maximum")
    return float(np.mean(vals))


def sam(est, ref) -> float:
    """Mean spectral angle in radians; zero-norm pixels are skipped."""
    est, ref = _pair(est, ref)
    e = est.reshape(est.shape[0], -1)
    r = ref.reshape(ref.shape[0], -1)
    ne = np.sum(e * e, axis=0)
    nr = np.sum(r * r, axis=0)
    ok = (ne > 0) & (nr > 0)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero pixel vectors skipped", MetricWarning, stacklevel=2)
    if not ok.any():
        raise ValueError("every pixel vector is zero")
    e, r = e[:, ok], r[:, ok]
    # dot product and squared norms share one reduction order, and
    # sqrt(fl(x*x)) == x, so identical spectra give an angle of exactly zero
    c = np.sum(e * r, axis=0) / np.sqrt(np.sum(e * e, axis=0) * np.sum(r * r, axis=0))
    return float(np.mean(np.arccos(np.clip(c, -1.0, 1.0))))


def ergas(est, ref, m_hr_pixels: int, n_lr_pixels: int, conventional: bool = False) -> float:
    """Relative dimensionless global error.

    The default follows the displayed formula literally::

        (M/N) * sqrt(1e4 / L * sum_l ||est_l - ref_l||^2 / mean(est_l)^2)

    ``conventional=True`` gives ``100/d * sqrt(mean_l (rmse_l / mean(ref_l))^2)``
    with ``d = sqrt(M/N)`` the linear resolution ratio.  Bands with a zero
    mean are skipped.
    """
    est, ref = _pair(est, ref)
    if m_hr_pixels <= 0 or n_lr_pixels <= 0:
        raise ValueError("pixel counts must be positive")
    ratio = m_hr_pixels / n_lr_pixels
    L = est.shape[0]
    mean = (ref if conventional else est).mean(axis=(1, 2))
    ok = mean != 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-mean bands skipped", MetricWarning, stacklevel=2)
    err = np.sum((est - ref) ** 2, axis=(1, 2))[ok]
    if conventional:
        rmse2 = err / (est.shape[1] * est.shape[2])
        return float(100 / np.sqrt(ratio) * np.sqrt(np.mean(rmse2 / mean[ok] ** 2)))
    return float(ratio * np.sqrt(1e4 / L * np.sum(err / mean[ok] ** 2)))


def uiqi(est, ref, window: int = 8) -> float:
    """Universal image quality index on sliding ``window x window`` blocks.

    Per window ``Q = 4 s_xy m_x m_y / ((s_x^2 + s_y^2)(m_x^2 + m_y^2))``; the
    window average of each band is then averaged over bands.  Windows with a
    zero denominator are skipped.
    """
    est, ref = _pair(est, ref)
    if min(est.shape[1:]) < window:
        raise DimensionError(f"image smaller than the {window}x{window} window")
    per_band = []
    for b in range(est.shape[0]):
        x = sliding_window_view(est[b], (window, window))
        y = sliding_window_view(ref[b], (window, window))
        mx = x.mean(axis=(2, 3))
        my = y.mean(axis=(2, 3))
        xc = x - mx[..., None, None]
        yc = y - my[..., None, None]
        # the 1/n normalisation cancels between numerator and denominator
        sxy = np.sum(xc * yc, axis=(2, 3))
        sxx = np.sum(xc * xc, axis=(2, 3))
        syy = np.sum(yc * yc, axis=(2, 3))
        den = (sxx + syy) * (mx**2 + my**2)
        ok = den != 0
        if ok.any():
            per_band.append(np.mean(4 * sxy[ok] * mx[ok] * my[ok] / den[ok]))
        else:
            warnings.warn(f"band {b}: every window degenerate, skipped", MetricWarning, stacklevel=2)
    if not per_band:
        raise ValueError("no band has a non-degenerate window")
    return float(np.mean(per_band))


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    sam: float
    ergas: float
    uiqi: float

    @property
    def sam_degrees(self) -> float:
        return math.degrees(self.sam)

    def to_text(self) -> str:
        """One ``key=value`` pair per line, values printed with ``repr`` for exact round trips."""
        rows = [("psnr_db", self.psnr_db), ("sam_rad", self.sam), ("sam_deg", self.sam_degrees),
                ("ergas", self.ergas), ("uiqi", self.uiqi)]
        return "".join(f"{k}={v!r}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(float(kv["psnr_db"]), float(kv["sam_rad"]), float(kv["ergas"]),
                   float(kv["uiqi"]))

    def to_json(self) -> str:
        d = asdict(self)
        d["sam_deg"] = self.sam_degrees
        # JSON has no infinity; the PSNR sentinel is written as the string "inf"
        d = {k: (repr(v) if not math.isfinite(v) else v) for k, v in d.items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(*(float(d[k]) for k in ("psnr_db", "sam", "ergas", "uiqi")))


def evaluate(est, ref, ratio: int) -> MetricReport:
    """All four measures; *ratio* is the HR-to-LR pixel-count ratio ``M/N`` (``d**2``)."""
    est, ref = _pair(est, ref)
    return MetricReport(psnr(est, ref), sam(est, ref), ergas(est, ref, ratio, 1), uiqi(est, ref))
