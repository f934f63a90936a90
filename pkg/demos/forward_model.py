"""The observation model: blur + decimation for the HI, spectral mixing for the MI.

Builds a synthetic scene, gives the MI-side image some inter-image
variability, degrades both and checks that every operator's adjoint is
consistent.  Run with ``python demos/forward_model.py``.
"""
# %%
import numpy as np

from varfusion import SensorModel, simulate_pair, synthetic_scene
from varfusion.imaging import (
    apply_gradient,
    apply_gradient_adjoint,
    spatial_degrade,
    spatial_degrade_adjoint,
    spectral_degrade,
    spectral_degrade_adjoint,
    synthesize_variability,
)

# %% A 64x64 scene with 20 bands between 0.4 and 2.5 um
scene = synthetic_scene(64, 64, 20, seed=0)
z_h = scene.data
print("scene", z_h.shape, "wavelengths", scene.wavelengths[[0, -1]])

# %% The MI sees a changed scene: smooth per-band gains plus a local bump
z_m = synthesize_variability(z_h, scaling=0.1, patch_size=12, patch_amplitude=0.2, seed=0)
print("relative change between the latent images: %.3f"
      % (np.linalg.norm(z_m - z_h) / np.linalg.norm(z_h)))

# %% Default sensors: 8x8 Gaussian blur (sigma 4), d = 4, 4 MI bands averaging the HI bands
sensor = SensorModel.default(20, 4)
y_h, y_m = simulate_pair(z_h, z_m, sensor, snr_db=35.0, seed=0)
print("HI", y_h.shape, "MI", y_m.shape)

# %% Dot-product test <A x, y> = <x, A^T y> for the three operators
rng = np.random.default_rng(1)
x = rng.standard_normal(z_h.shape)
for name, fwd, adj in [
    ("blur+decimate", lambda v: spatial_degrade(v, sensor),
     lambda v: spatial_degrade_adjoint(v, sensor, (64, 64))),
    ("spectral", lambda v: spectral_degrade(v, sensor), lambda v: spectral_degrade_adjoint(v, sensor)),
    ("laplacian", apply_gradient, apply_gradient_adjoint),
]:
    ax = fwd(x)
    y = rng.standard_normal(ax.shape)
    gap = abs(np.vdot(ax, y) - np.vdot(x, adj(y))) / (np.linalg.norm(ax) * np.linalg.norm(y))
    print(f"{name:14s} adjoint gap {gap:.1e}")
