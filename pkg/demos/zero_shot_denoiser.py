"""Zero-shot denoising of one cube.

The cube is projected on its leading singular vectors, a small separable
DnCNN is trained on the coefficients alone (noisy copies of themselves as
inputs), and the cleaned coefficients are mapped back.
Pass ``--epochs`` to shorten the run; a few hundred epochs leave the
freshly initialised network far from trained and its output can be worse
than the noisy input.
"""
# %%
import argparse

import numpy as np

from varfusion.denoiser import DenoiserModel, TrainConfig, denoise, estimate_noise_sigma
from varfusion.denoiser import separable_param_count, subspace_decompose
from varfusion.imaging import synthetic_scene
from varfusion.metrics import psnr

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=2000)
args = ap.parse_args()

# %% A smooth cube and a noisy copy
clean = synthetic_scene(64, 64, 20, smoothness=3.0, seed=0).data
noisy = clean + 0.05 * np.random.default_rng(0).standard_normal(clean.shape)

# %% Most of the energy sits in a handful of spectral components
sub = subspace_decompose(noisy, 5)
print("subspace coefficients", sub.coeffs.shape)
print("estimated noise per coefficient channel",
      np.round([estimate_noise_sigma(c) for c in sub.coeffs], 4))
print("network parameters for 5 channels:", separable_param_count(5))

# %% Train on this image only, then denoise it
history = []
out, model = denoise(noisy, None, 5, TrainConfig(epochs_initial=args.epochs, seed=0), history)
print("training loss %.4f -> %.4f over %d epochs" % (history[0], history[-1], len(history)))
print("PSNR noisy %.2f dB, denoised %.2f dB" % (psnr(noisy, clean), psnr(out, clean)))
assert isinstance(model, DenoiserModel) and model.trained
