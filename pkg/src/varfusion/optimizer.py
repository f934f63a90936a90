"""Iteratively reweighted fusion with half-quadratic splitting and RED priors.

The outer loop alternates

1. a matrix-free CG solve for ``Z_h`` and one for ``Z_m`` (weights fixed),
2. a refresh of the coupling weights from the new high-pass residuals,
3. a RED fixed-point step for each auxiliary variable ``V_h`` / ``V_m``,
   using an image-specific denoiser that is (re)trained on the fly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .imaging import (
    DimensionError,
    GradientOperator,
    SensorModel,
    _blur_decimate,
    _blur_decimate_adjoint,
    _cube,
    _laplacian,
    _laplacian_adjoint,
    upsample_interpolate,
)

log = logging.getLogger(__name__)

__all__ = [
    "FusionConfig",
    "FusionState",
    "FusionError",
    "CGInfo",
    "conjugate_gradient",
    "update_weights",
    "zh_operator",
    "zm_operator",
    "solve_zh",
    "solve_zm",
    "red_update",
    "objective_value",
    "initial_state",
    "run_fusion",
    "bicubic_baseline",
]


class FusionError(RuntimeError):
    """A fusion run failed; the message carries the outer iteration index."""


@dataclass
class FusionConfig:
    """Scalars of the fusion objective and solver controls.

    Defaults are the moderate-variability preset (p=1.5, lambda=0.01,
    lambda_h=lambda_m=0.1, rho=0.1, epsilon=1e-6, 20 outer iterations).
    """

    p: float = 1.5
    lam: float = 0.01
    lambda_h: float = 0.1
    lambda_m: float = 0.1
    rho: float = 0.1
    epsilon: float = 1e-6
    bcd_iters: int = 20
    cg_iters: int = 200
    cg_tol: float = 1e-6
    red_steps: int = 1
    stop_tol: float = 1e-5
    seed: int = 0

    PRESETS = {
        "moderate": dict(p=1.5, lam=0.01, lambda_h=0.1, lambda_m=0.1),
        "significant": dict(p=1.8, lam=0.002, lambda_h=0.01, lambda_m=0.01),
    }

    def __post_init__(self):
        if not 0 < self.p <= 2:
            raise ValueError(f"p must lie in (0, 2], got {self.p}")
        if self.epsilon <= 0 or self.rho <= 0:
            raise ValueError("epsilon and rho must be positive")
        if min(self.lam, self.lambda_h, self.lambda_m) < 0:
            raise ValueError("regularisation weights must be nonnegative")
        if self.bcd_iters < 0 or self.cg_iters < 1 or self.red_steps < 1:
            raise ValueError("iteration counts must be positive (bcd_iters may be 0)")
        if self.cg_tol <= 0 or self.stop_tol < 0:
            raise ValueError("cg_tol must be positive and stop_tol nonnegative")

    @classmethod
    def preset(cls, name: str, **overrides) -> "FusionConfig":
        try:
            values = dict(cls.PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(cls.PRESETS)}") from None
        values.update(overrides)
        return cls(**values)

    def replace(self, **changes) -> "FusionConfig":
        return replace(self, **changes)


@dataclass
class FusionState:
    z_h: np.ndarray
    z_m: np.ndarray
    v_h: np.ndarray
    v_m: np.ndarray
    w: np.ndarray
    iteration: int = 0
    objective_trace: list = field(default_factory=list)
    cg_history: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {a.shape for a in (self.z_h, self.z_m, self.v_h, self.v_m, self.w)}
        if len(shapes) != 1:
            raise DimensionError(f"state arrays disagree in shape: {sorted(shapes)}")


# -- conjugate gradient -----------------------------------------------------

@dataclass
class CGInfo:
    iterations: int
    initial_residual: float
    residual: float
    converged: bool


def conjugate_gradient(apply_A, b, x0, maxiter: int = 200, tol: float = 1e-6):
    """Solve ``A x = b`` for symmetric positive-definite ``A`` given as a callable.

    Stops when ``||b - A x|| / ||b|| <= tol`` or after *maxiter* steps and
    returns the iterate with the smallest residual seen (never worse than
    *x0*) together with a :class:`CGInfo`.
    """
    bnorm = np.sqrt(np.vdot(b, b).real)
    if bnorm == 0.0:
        return np.zeros_like(b), CGInfo(0, 0.0, 0.0, True)
    x = np.array(x0, dtype=np.float64, copy=True)
    r = b - apply_A(x)
    rs = np.vdot(r, r).real
    res0 = res = np.sqrt(rs) / bnorm
    if not np.isfinite(res0):
        raise FloatingPointError("CG: non-finite initial residual")
    best_x, best_res = x.copy(), res
    p = r.copy()
    it = 0
    while it < maxiter and res > tol:
        Ap = apply_A(p)
        pAp = np.vdot(p, Ap).real
        if not np.isfinite(pAp):
            raise FloatingPointError(f"CG step {it}: non-finite curvature p^T A p")
        if pAp <= 0:
            log.warning("CG step %d: non-positive curvature %.3e, stopping", it, pAp)
            break
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = np.vdot(r, r).real
        it += 1
        res = np.sqrt(rs_new) / bnorm
        if not np.isfinite(res):
            raise FloatingPointError(f"CG step {it}: non-finite residual")
        if res < best_res:
            best_x, best_res = x.copy(), res
        p *= rs_new / rs
        p += r
        rs = rs_new
    return best_x, CGInfo(it, float(res0), float(best_res), bool(best_res <= tol))


# -- weights and system operators -------------------------------------------

def update_weights(dh, dm, p: float, epsilon: float) -> np.ndarray:
    """Square roots of the IRLS weights, ``((|dh - dm| + eps)^(p-2))^(1/2)``."""
    dh = np.asarray(dh, dtype=np.float64)
    dm = np.asarray(dm, dtype=np.float64)
    if dh.shape != dm.shape:
        raise DimensionError(f"high-pass residual shapes differ: {dh.shape} vs {dm.shape}")
    if not 0 < p <= 2:
        raise ValueError(f"p must lie in (0, 2], got {p}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return (np.abs(dh - dm) + epsilon) ** ((p - 2.0) / 2.0)


def _coupling(x, w2, lam):
    return lam * _laplacian_adjoint(w2 * _laplacian(x))


def zh_operator(w, sensor: SensorModel, cfg: FusionConfig, hr_dims):
    """``x -> (FD)(FD)^T x + lam G^T diag(W)^2 G x + rho x`` as a callable on cubes."""
    w2 = np.asarray(w) ** 2
    rows, cols = hr_dims

    def apply(x):
        out = _blur_decimate_adjoint(_blur_decimate(x, sensor), sensor, rows, cols)
        if cfg.lam:
            out += _coupling(x, w2, cfg.lam)
        out += cfg.rho * x
        return out

    return apply


def zm_operator(w, sensor: SensorModel, cfg: FusionConfig):
    """``x -> R^T R x + lam G^T diag(W)^2 G x + rho x`` as a callable on cubes."""
    w2 = np.asarray(w) ** 2
    RtR = sensor.srf.T @ sensor.srf

    def apply(x):
        out = np.tensordot(RtR, x, axes=1)
        if cfg.lam:
            out += _coupling(x, w2, cfg.lam)
        out += cfg.rho * x
        return out

    return apply


def _check_state(state, sensor, y_h=None, y_m=None):
    L, rows, cols = state.z_h.shape
    if L != sensor.n_hs:
        raise DimensionError(f"state has {L} bands, srf expects {sensor.n_hs}")
    if y_h is not None:
        lr = sensor.lr_dims(rows, cols)
        if np.shape(y_h) != (L,) + lr:
            raise DimensionError(f"HI shape {np.shape(y_h)} != expected {(L,) + lr}")
    if y_m is not None and np.shape(y_m) != (sensor.n_ms, rows, cols):
        raise DimensionError(f"MI shape {np.shape(y_m)} != expected {(sensor.n_ms, rows, cols)}")


def solve_zh(state: FusionState, y_h, sensor: SensorModel, grad: GradientOperator | None,
             cfg: FusionConfig):
    """CG solve of the ``Z_h`` normal equations, warm-started from ``state.z_h``."""
    y_h = _cube(y_h, "y_h")
    _check_state(state, sensor, y_h=y_h)
    rows, cols = state.z_h.shape[1:]
    b = _blur_decimate_adjoint(y_h, sensor, rows, cols) + cfg.rho * state.v_h
    if cfg.lam:
        b += _coupling(state.z_m, state.w ** 2, cfg.lam)
    A = zh_operator(state.w, sensor, cfg, (rows, cols))
    return conjugate_gradient(A, b, state.z_h, cfg.cg_iters, cfg.cg_tol)


def solve_zm(state: FusionState, y_m, sensor: SensorModel, grad: GradientOperator | None,
             cfg: FusionConfig):
    """CG solve of the ``Z_m`` normal equations, warm-started from ``state.z_m``."""
    y_m = _cube(y_m, "y_m")
    _check_state(state, sensor, y_m=y_m)
    b = np.tensordot(sensor.srf.T, y_m, axes=1) + cfg.rho * state.v_m
    if cfg.lam:
        b += _coupling(state.z_h, state.w ** 2, cfg.lam)
    A = zm_operator(state.w, sensor, cfg)
    return conjugate_gradient(A, b, state.z_m, cfg.cg_iters, cfg.cg_tol)


def red_update(z, v, denoiser, rho: float, lambda_reg: float, steps: int = 1) -> np.ndarray:
    """Fixed-point RED step(s): ``V <- (rho Z + lambda D(V)) / (rho + lambda)``."""
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if z.shape != v.shape:
        raise DimensionError(f"z {z.shape} and v {v.shape} differ")
    if rho + lambda_reg <= 0:
        raise ValueError("rho + lambda must be positive")
    if lambda_reg == 0:
        return z.copy()
    for _ in range(steps):
        dv = np.asarray(denoiser(v), dtype=np.float64)
        if dv.shape != v.shape:
            raise DimensionError(f"denoiser returned {dv.shape}, expected {v.shape}")
        v = (rho * z + lambda_reg * dv) / (rho + lambda_reg)
    return v


def objective_value(state: FusionState, y_h, y_m, sensor: SensorModel,
                    grad: GradientOperator | None, cfg: FusionConfig) -> float:
    """Data terms plus the epsilon-smoothed L_p coupling (RED priors excluded)."""
    _check_state(state, sensor, y_h=y_h, y_m=y_m)
    rh = np.asarray(y_h) - _blur_decimate(state.z_h, sensor)
    rm = np.asarray(y_m) - np.tensordot(sensor.srf, state.z_m, axes=1)
    diff = np.abs(_laplacian(state.z_h) - _laplacian(state.z_m))
    return float(0.5 * np.sum(rh * rh) + 0.5 * np.sum(rm * rm)
                 + 0.5 * cfg.lam * np.sum((diff + cfg.epsilon) ** cfg.p))


# -- outer loop -------------------------------------------------------------

def bicubic_baseline(y_h, sensor: SensorModel) -> np.ndarray:
    """Interpolate the HI to the HR grid, aligned with the blur/decimation geometry."""
    cr, cc = sensor.kernel_centroid()
    o = sensor.decim_offset
    return upsample_interpolate(y_h, sensor.decim_factor, (o + cr, o + cc))


def initial_state(y_h, sensor: SensorModel, cfg: FusionConfig) -> FusionState:
    """Interpolated HI for both latent images and their splitting variables.

    The MI has too few bands to seed ``Z_m``, so both latent images start
    from the interpolated HI.
    """
    z0 = bicubic_baseline(y_h, sensor)
    dh = _laplacian(z0)
    w = update_weights(dh, dh, cfg.p, cfg.epsilon)
    return FusionState(z0.copy(), z0.copy(), z0.copy(), z0.copy(), w)


def _fit(denoiser, v):
    fit = getattr(denoiser, "fit", None)
    if fit is not None:
        fit(v)


def run_fusion(y_h, y_m, sensor: SensorModel, grad: GradientOperator | None = None,
               cfg: FusionConfig | None = None, denoiser_h=None, denoiser_m=None,
               callback=None):
    """Recover the two latent HR images from an (HI, MI) pair.

    Parameters
    ----------
    y_h : array (L_h, rows/d, cols/d)
    y_m : array (L_m, rows, cols)
    denoiser_h, denoiser_m : callables ``v -> D(v)`` or None
        Objects with a ``fit(v)`` method are (re)trained on the current
        auxiliary variable before each RED step.  ``None`` or a zero
        ``lambda_h``/``lambda_m`` disables the corresponding prior.
    callback : callable(state), optional
        Called after every outer iteration.

    Returns
    -------
    (z_h, z_m, state)
    """
    cfg = cfg or FusionConfig()
    grad = grad or GradientOperator()
    y_h = _cube(y_h, "y_h")
    y_m = _cube(y_m, "y_m")
    if y_h.shape[0] != sensor.n_hs or y_m.shape[0] != sensor.n_ms:
        raise DimensionError(
            f"band counts (HI {y_h.shape[0]}, MI {y_m.shape[0]}) do not match srf "
            f"{sensor.srf.shape}")
    d = sensor.decim_factor
    if y_m.shape[1:] != (y_h.shape[1] * d, y_h.shape[2] * d):
        raise DimensionError(f"MI dims {y_m.shape[1:]} are not {d}x the HI dims {y_h.shape[1:]}")

    state = initial_state(y_h, sensor, cfg)
    for k in range(cfg.bcd_iters):
        try:
            zh_old, zm_old = state.z_h, state.z_m
            state.z_h, info_h = solve_zh(state, y_h, sensor, grad, cfg)
            state.z_m, info_m = solve_zm(state, y_m, sensor, grad, cfg)
            state.cg_history.append((info_h, info_m))
            for name, info in (("Z_h", info_h), ("Z_m", info_m)):
                if not info.converged:
                    log.info("iteration %d: CG for %s stopped at residual %.2e after %d steps",
                             k, name, info.residual, info.iterations)
            state.w = update_weights(_laplacian(state.z_h), _laplacian(state.z_m),
                                     cfg.p, cfg.epsilon)
            if denoiser_h is not None and cfg.lambda_h > 0:
                _fit(denoiser_h, state.v_h)
                state.v_h = red_update(state.z_h, state.v_h, denoiser_h, cfg.rho,
                                       cfg.lambda_h, cfg.red_steps)
            else:
                state.v_h = state.z_h.copy()
            if denoiser_m is not None and cfg.lambda_m > 0:
                _fit(denoiser_m, state.v_m)
                state.v_m = red_update(state.z_m, state.v_m, denoiser_m, cfg.rho,
                                       cfg.lambda_m, cfg.red_steps)
            else:
                state.v_m = state.z_m.copy()
            for name in ("z_h", "z_m", "v_h", "v_m"):
                if not np.all(np.isfinite(getattr(state, name))):
                    raise FloatingPointError(f"non-finite values in {name}")
        except FusionError:
            raise
        except Exception as exc:
            raise FusionError(f"fusion failed at iteration {k}: {exc}") from exc

        state.iteration = k + 1
        state.objective_trace.append(objective_value(state, y_h, y_m, sensor, grad, cfg))
        change = np.sqrt((np.sum((state.z_h - zh_old) ** 2) + np.sum((state.z_m - zm_old) ** 2))
                         / max(np.sum(zh_old ** 2) + np.sum(zm_old ** 2), 1e-300))
        log.info("iteration %d: objective %.6e, relative change %.3e",
                 k + 1, state.objective_trace[-1], change)
        if callback is not None:
            callback(state)
        if change < cfg.stop_tol:
            log.info("relative change below %.1e, stopping", cfg.stop_tol)
            break
    return state.z_h, state.z_m, state
