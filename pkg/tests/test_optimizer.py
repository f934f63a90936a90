import numpy as np
import pytest

from oracles import dense_blur_decimate, dense_laplacian, dense_spectral
from varfusion.imaging import SensorModel, averaging_srf, gaussian_kernel, simulate_pair
from varfusion.imaging import synthetic_scene, upsample_interpolate
from varfusion.optimizer import (
    FusionConfig,
    FusionError,
    FusionState,
    bicubic_baseline,
    conjugate_gradient,
    initial_state,
    objective_value,
    red_update,
    run_fusion,
    solve_zh,
    solve_zm,
    update_weights,
    zh_operator,
    zm_operator,
)


def small_problem(seed=0, bands=3, n_ms=2, rows=6, cols=6, d=2):
    rng = np.random.default_rng(seed)
    sensor = SensorModel(gaussian_kernel(3, 1.0), d, averaging_srf(bands, n_ms))
    shape = (bands, rows, cols)
    state = FusionState(*(rng.uniform(size=shape) for _ in range(4)),
                        w=rng.uniform(0.5, 2.0, size=shape))
    y_h = rng.uniform(size=(bands, rows // d, cols // d))
    y_m = rng.uniform(size=(n_ms, rows, cols))
    return sensor, state, y_h, y_m


def dense_systems(sensor, state, y_h, y_m, cfg):
    L, r, c = state.z_h.shape
    S = dense_blur_decimate(sensor.blur_kernel, sensor.decim_factor, sensor.decim_offset, L, r, c)
    M = dense_spectral(sensor.srf, r, c)
    G = dense_laplacian(L, r, c)
    C = cfg.lam * G.T @ np.diag(state.w.ravel() ** 2) @ G
    I = np.eye(L * r * c)
    Ah = S.T @ S + C + cfg.rho * I
    bh = S.T @ y_h.ravel() + C @ state.z_m.ravel() + cfg.rho * state.v_h.ravel()
    Am = M.T @ M + C + cfg.rho * I
    bm = M.T @ y_m.ravel() + C @ state.z_h.ravel() + cfg.rho * state.v_m.ravel()
    return (Ah, bh), (Am, bm)


# -- configuration ---------------------------------------------------------------

def test_presets():
    m = FusionConfig.preset("moderate")
    assert (m.p, m.lam, m.lambda_h, m.lambda_m, m.rho) == (1.5, 0.01, 0.1, 0.1, 0.1)
    s = FusionConfig.preset("significant", bcd_iters=3)
    assert (s.p, s.lam, s.lambda_h, s.lambda_m, s.bcd_iters) == (1.8, 0.002, 0.01, 0.01, 3)
    assert FusionConfig() == m
    with pytest.raises(ValueError):
        FusionConfig.preset("extreme")


@pytest.mark.parametrize("bad", [dict(p=0), dict(p=2.5), dict(rho=0), dict(epsilon=0),
                                 dict(lam=-1), dict(cg_iters=0), dict(red_steps=0),
                                 dict(cg_tol=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        FusionConfig(**bad)


# -- conjugate gradient -----------------------------------------------------------

def test_cg_matches_direct_solve():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((30, 30))
    A = B @ B.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    x, info = conjugate_gradient(lambda v: A @ v, b, np.zeros(30), 200, 1e-13)
    assert info.converged and info.residual <= 1e-13
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-10)


def test_cg_zero_rhs_and_budget():
    A = np.diag(np.arange(1.0, 11.0))
    x, info = conjugate_gradient(lambda v: A @ v, np.zeros(10), np.ones(10))
    assert np.all(x == 0) and info.converged
    b = np.ones(10)
    x, info = conjugate_gradient(lambda v: A @ v, b, np.zeros(10), maxiter=2, tol=1e-12)
    assert info.iterations == 2 and not info.converged
    assert info.residual < info.initial_residual


def test_cg_rejects_nonfinite_operator():
    with pytest.raises(FloatingPointError):
        conjugate_gradient(lambda v: v * np.nan, np.ones(3), np.zeros(3))


# -- weights --------------------------------------------------------------------

def test_weights_formula():
    rng = np.random.default_rng(1)
    dh, dm = rng.standard_normal((2, 3, 4, 4))
    for p in (0.5, 1.0, 1.5, 1.8):
        w = update_weights(dh, dm, p, 1e-3)
        np.testing.assert_allclose(w**2, (np.abs(dh - dm) + 1e-3) ** (p - 2), rtol=1e-14)
    np.testing.assert_array_equal(update_weights(dh, dm, 2.0, 1e-6), 1.0)
    with pytest.raises(ValueError):
        update_weights(dh, dm, 0.0, 1e-6)


# -- linear systems against dense assembly ------------------------------------------

@pytest.mark.parametrize("seed", [0, 1])
def test_solves_match_dense(seed):
    sensor, state, y_h, y_m = small_problem(seed, rows=4, cols=6)
    cfg = FusionConfig(lam=0.3, rho=0.2, cg_iters=500, cg_tol=1e-14)
    (Ah, bh), (Am, bm) = dense_systems(sensor, state, y_h, y_m, cfg)
    zh, _ = solve_zh(state, y_h, sensor, None, cfg)
    zm, _ = solve_zm(state, y_m, sensor, None, cfg)
    xh, xm = np.linalg.solve(Ah, bh), np.linalg.solve(Am, bm)
    assert np.linalg.norm(zh.ravel() - xh) <= 1e-10 * np.linalg.norm(xh)
    assert np.linalg.norm(zm.ravel() - xm) <= 1e-10 * np.linalg.norm(xm)


def test_system_operators_are_symmetric_positive():
    sensor, state, _, _ = small_problem(2)
    cfg = FusionConfig(lam=0.5, rho=0.1)
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2,) + state.z_h.shape)
    for A in (zh_operator(state.w, sensor, cfg, (6, 6)), zm_operator(state.w, sensor, cfg)):
        assert abs(np.vdot(A(x), y) - np.vdot(x, A(y))) <= 1e-12 * np.linalg.norm(A(x)) * 10
        assert np.vdot(x, A(x)) > 0


def test_objective_matches_dense_formula():
    sensor, state, y_h, y_m = small_problem(4)
    cfg = FusionConfig(p=1.3, lam=0.7, epsilon=1e-3)
    L, r, c = state.z_h.shape
    S = dense_blur_decimate(sensor.blur_kernel, 2, 0, L, r, c)
    M = dense_spectral(sensor.srf, r, c)
    G = dense_laplacian(L, r, c)
    zh, zm = state.z_h.ravel(), state.z_m.ravel()
    ref = (0.5 * np.sum((y_h.ravel() - S @ zh) ** 2) + 0.5 * np.sum((y_m.ravel() - M @ zm) ** 2)
           + 0.35 * np.sum((np.abs(G @ zh - G @ zm) + 1e-3) ** 1.3))
    assert objective_value(state, y_h, y_m, sensor, None, cfg) == pytest.approx(ref, rel=1e-12)


# -- RED step ---------------------------------------------------------------------

def test_red_update_formula_and_limits():
    rng = np.random.default_rng(5)
    z, v = rng.standard_normal((2, 2, 3, 3))
    out = red_update(z, v, lambda a: 0.5 * a, rho=0.1, lambda_reg=0.3)
    np.testing.assert_allclose(out, (0.1 * z + 0.3 * 0.5 * v) / 0.4, rtol=1e-14)
    np.testing.assert_array_equal(red_update(z, v, lambda a: a / 0, 0.1, 0.0), z)
    # with the identity as denoiser the fixed point is z
    many = red_update(z, v, lambda a: a, rho=1.0, lambda_reg=1.0, steps=60)
    np.testing.assert_allclose(many, z, atol=1e-12)
    with pytest.raises(ValueError):
        red_update(z, v[:1], lambda a: a, 0.1, 0.1)


# -- outer loop ---------------------------------------------------------------------

def scene_pair(seed=0, snr=np.inf, size=16, bands=6):
    z = synthetic_scene(size, size, bands, seed=seed).data
    sensor = SensorModel.default(bands, 2)
    y_h, y_m = simulate_pair(z, z, sensor, snr, seed)
    return z, sensor, y_h, y_m


def test_initialisation_is_sensor_aligned_bicubic():
    _, sensor, y_h, _ = scene_pair()
    base = bicubic_baseline(y_h, sensor)
    np.testing.assert_array_equal(base, upsample_interpolate(y_h, 4, (0.5, 0.5)))
    st = initial_state(y_h, sensor, FusionConfig())
    for a in (st.z_h, st.z_m, st.v_h, st.v_m):
        np.testing.assert_array_equal(a, base)


def test_zero_iterations_returns_initialisation():
    _, sensor, y_h, y_m = scene_pair()
    zh, zm, st = run_fusion(y_h, y_m, sensor, cfg=FusionConfig(bcd_iters=0))
    base = bicubic_baseline(y_h, sensor)
    np.testing.assert_array_equal(zh, base)
    np.testing.assert_array_equal(zm, base)
    assert st.objective_trace == []


def test_fusion_improves_on_interpolation_without_priors():
    z, sensor, y_h, y_m = scene_pair(1)
    cfg = FusionConfig(bcd_iters=8, lambda_h=0, lambda_m=0)
    calls = []
    zh, _, st = run_fusion(y_h, y_m, sensor, cfg=cfg, callback=lambda s: calls.append(s.iteration))
    base = bicubic_baseline(y_h, sensor)
    assert np.linalg.norm(zh - z) < 0.7 * np.linalg.norm(base - z)
    assert calls == list(range(1, len(st.objective_trace) + 1))


def test_objective_trace_is_monotone_without_priors():
    _, sensor, y_h, y_m = scene_pair(2, snr=30)
    cfg = FusionConfig(bcd_iters=8, lambda_h=0, lambda_m=0, cg_tol=1e-10, cg_iters=1000,
                       stop_tol=0)
    _, _, st = run_fusion(y_h, y_m, sensor, cfg=cfg)
    assert np.all(np.diff(st.objective_trace) <= 1e-8 * abs(st.objective_trace[0]))


def test_early_stop():
    _, sensor, y_h, y_m = scene_pair(3)
    cfg = FusionConfig(bcd_iters=50, lambda_h=0, lambda_m=0, stop_tol=1e-2)
    _, _, st = run_fusion(y_h, y_m, sensor, cfg=cfg)
    assert st.iteration < 50


class ExplodingDenoiser:
    def __init__(self):
        self.calls = 0

    def fit(self, v):
        self.calls += 1
        if self.calls == 2:
            raise FloatingPointError("boom")

    def __call__(self, v):
        return v


def test_errors_carry_iteration_index():
    _, sensor, y_h, y_m = scene_pair(4)
    with pytest.raises(FusionError, match="iteration 1"):
        run_fusion(y_h, y_m, sensor, cfg=FusionConfig(bcd_iters=3), denoiser_h=ExplodingDenoiser())


def test_input_validation():
    _, sensor, y_h, y_m = scene_pair(5)
    with pytest.raises(ValueError):
        run_fusion(y_h[:-1], y_m, sensor)
    with pytest.raises(ValueError):
        run_fusion(y_h, y_m[:, :-4], sensor)


def test_denoisers_are_fitted_and_applied():
    _, sensor, y_h, y_m = scene_pair(6)
    seen = []

    class Shrink:
        def fit(self, v):
            seen.append(v.shape)

        def __call__(self, v):
            return 0.9 * v

    cfg = FusionConfig(bcd_iters=2, stop_tol=0)
    _, _, st = run_fusion(y_h, y_m, sensor, cfg=cfg, denoiser_h=Shrink(), denoiser_m=Shrink())
    assert len(seen) == 4
    # V is pulled towards the shrunken image, away from Z
    assert not np.allclose(st.v_h, st.z_h)
