"""Quality metrics, the HSC raster format and RGB composites.

Writes its files to a temporary directory (or ``--out``).
"""
# %%
import argparse
import tempfile
from pathlib import Path

import numpy as np

from varfusion.imaging import synthetic_scene
from varfusion.io import hsc_bytes, read_hsc, render_composite, write_hsc, write_report
from varfusion.metrics import ergas, evaluate, psnr, sam, uiqi

ap = argparse.ArgumentParser()
ap.add_argument("--out", default=None)
args = ap.parse_args()
out = Path(args.out or tempfile.mkdtemp(prefix="varfusion-"))
out.mkdir(parents=True, exist_ok=True)

# %% Four measures on a reference and a perturbed copy
ref = synthetic_scene(64, 64, 20, seed=1)
est = ref.with_data(ref.data * 1.02 + 0.01 * np.random.default_rng(0).standard_normal(ref.shape))
print("PSNR %.2f dB  SAM %.4f rad  ERGAS %.3f  UIQI %.4f" % (
    psnr(est, ref), sam(est, ref), ergas(est, ref, 16, 1), uiqi(est, ref)))
# ERGAS as printed sums squared errors over pixels; the usual form uses the RMSE
print("ERGAS, conventional form: %.3f" % ergas(est, ref, 16, 1, conventional=True))
print("identical images:", evaluate(ref, ref, 16))

# %% HSC stores float32 samples band by band, with optional wavelengths
write_hsc(est, out / "est.hsc")
back = read_hsc(out / "est.hsc")
print("file size", (out / "est.hsc").stat().st_size, "bytes;",
      "re-serialised identically:", hsc_bytes(back) == (out / "est.hsc").read_bytes())

# %% Composites and a report
render_composite(ref, "visible", out / "visible.png")
render_composite(ref, "infrared", out / "infrared.png")
write_report(evaluate(est, ref, 16), out / "report.json")
print("wrote", sorted(p.name for p in out.iterdir()), "to", out)
