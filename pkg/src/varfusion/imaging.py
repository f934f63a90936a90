"""Image cube container and the linear operators of the observation model.

Cubes are band-major numpy arrays of shape ``(bands, rows, cols)``.  Every
operator accepts an array or a :class:`HyperImage` and returns a plain
``float64`` array; :class:`HyperImage` is the validated container used at
file and CLI boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HyperImage",
    "SensorModel",
    "GradientOperator",
    "DimensionError",
    "gaussian_kernel",
    "averaging_srf",
    "spatial_degrade",
    "spatial_degrade_adjoint",
    "spectral_degrade",
    "spectral_degrade_adjoint",
    "apply_gradient",
    "apply_gradient_adjoint",
    "add_noise_snr",
    "simulate_pair",
    "upsample_interpolate",
    "bicubic_matrix",
    "synthetic_scene",
    "spectral_scaling",
    "additive_patch",
    "synthesize_variability",
]


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operator."""


def _cube(x, name="image"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise DimensionError(f"{name} must be 3-D (bands, rows, cols), got shape {a.shape}")
    return a


def _finite(a, name="image"):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite samples")
    return a


@dataclass
class HyperImage:
    """A band-major image cube with optional band-centre wavelengths (micrometres)."""

    data: np.ndarray
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        self.data = _finite(_cube(self.data, "HyperImage data"), "HyperImage data")
        if min(self.data.shape) < 1:
            raise DimensionError(f"empty cube of shape {self.data.shape}")
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64).ravel()
            if wl.size != self.data.shape[0]:
                raise DimensionError(
                    f"{wl.size} wavelengths given for {self.data.shape[0]} bands")
            if not np.all(np.isfinite(wl)) or np.any(np.diff(wl) <= 0):
                raise ValueError("wavelengths must be finite and strictly increasing")
            self.wavelengths = wl

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def with_data(self, data) -> "HyperImage":
        """Same metadata, new samples (band count must agree when wavelengths are set)."""
        return HyperImage(data, self.wavelengths)


def gaussian_kernel(size: int = 8, sigma: float = 4.0) -> np.ndarray:
    """Normalised ``size x size`` Gaussian, centred on the middle of the grid."""
    if size < 1 or sigma <= 0:
        raise ValueError("size must be >= 1 and sigma > 0")
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def averaging_srf(n_hs: int, n_ms: int) -> np.ndarray:
    """Row-stochastic ``n_ms x n_hs`` response of contiguous equal-width band windows."""
    if not 1 <= n_ms <= n_hs:
        raise ValueError(f"need 1 <= n_ms <= n_hs, got n_ms={n_ms}, n_hs={n_hs}")
    srf = np.zeros((n_ms, n_hs))
    for i, idx in enumerate(np.array_split(np.arange(n_hs), n_ms)):
        srf[i, idx] = 1.0 / idx.size
    return srf


@dataclass
class SensorModel:
    """Blur kernel, decimation and spectral response of the two sensors.

    The blur is a circular convolution whose tap ``(k//2, k//2)`` sits on the
    output pixel; decimation keeps rows/cols ``offset, offset + d, ...``.
    """

    blur_kernel: np.ndarray
    decim_factor: int
    srf: np.ndarray
    decim_offset: int = 0
    boundary: str = "circular"
    _otf_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        k = np.asarray(self.blur_kernel, dtype=np.float64)
        if k.ndim != 2 or min(k.shape) < 1:
            raise DimensionError(f"blur kernel must be a non-empty 2-D array, got {k.shape}")
        if np.any(k < 0) or not np.all(np.isfinite(k)):
            raise ValueError("blur kernel must be finite and nonnegative")
        if abs(k.sum() - 1.0) > 1e-12:
            raise ValueError(f"blur kernel must sum to 1 (sums to {k.sum():.15g})")
        self.blur_kernel = k
        d = int(self.decim_factor)
        if d != self.decim_factor or d < 1:
            raise ValueError(f"decimation factor must be a positive integer, got {self.decim_factor}")
        self.decim_factor = d
        if not 0 <= int(self.decim_offset) < d:
            raise ValueError(f"decimation offset must lie in [0, {d}), got {self.decim_offset}")
        self.decim_offset = int(self.decim_offset)
        r = np.asarray(self.srf, dtype=np.float64)
        if r.ndim != 2:
            raise DimensionError(f"srf must be a 2-D (L_m x L_h) matrix, got {r.shape}")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("srf must be finite and nonnegative")
        if np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("each srf row must sum to 1")
        self.srf = r
        if self.boundary != "circular":
            raise ValueError(f"unsupported blur boundary {self.boundary!r}")

    @classmethod
    def default(cls, n_hs: int, n_ms: int, kernel_size: int = 8, sigma: float = 4.0,
                decim_factor: int = 4, decim_offset: int = 0) -> "SensorModel":
        """8x8 Gaussian blur (sigma 4), decimation by 4 and band-averaging SRF."""
        return cls(gaussian_kernel(kernel_size, sigma), decim_factor,
                   averaging_srf(n_hs, n_ms), decim_offset)

    @property
    def n_hs(self) -> int:
        return self.srf.shape[1]

    @property
    def n_ms(self) -> int:
        return self.srf.shape[0]

    def lr_dims(self, rows: int, cols: int) -> tuple[int, int]:
        d = self.decim_factor
        if rows % d or cols % d:
            raise DimensionError(
                f"decimation factor {d} does not divide HR dims {rows}x{cols}")
        return rows // d, cols // d

    def kernel_centroid(self) -> tuple[float, float]:
        """Offset of the blur's centre of mass relative to the output pixel."""
        k = self.blur_kernel
        kr, kc = k.shape
        r = np.arange(kr) - kr // 2
        c = np.arange(kc) - kc // 2
        # circular convolution places tap a at displacement -(a - k//2)
        return float(-(k.sum(axis=1) @ r)), float(-(k.sum(axis=0) @ c))

    def otf(self, rows: int, cols: int) -> np.ndarray:
        key = (rows, cols)
        if key not in self._otf_cache:
            k = self.blur_kernel
            kr, kc = k.shape
            if kr > rows or kc > cols:
                raise DimensionError(f"blur kernel {k.shape} larger than image {rows}x{cols}")
            psf = np.zeros((rows, cols))
            psf[:kr, :kc] = k
            psf = np.roll(psf, (-(kr // 2), -(kc // 2)), axis=(0, 1))
            self._otf_cache[key] = np.fft.rfft2(psf)
        return self._otf_cache[key]


@dataclass(frozen=True)
class GradientOperator:
    """6-neighbour spatio-spectral Laplacian with reflective (edge-replicating) borders."""

    mode: str = "spatio-spectral-laplacian"
    boundary: str = "reflective"

    def __post_init__(self):
        if self.mode != "spatio-spectral-laplacian":
            raise ValueError(f"unsupported gradient mode {self.mode!r}")
        if self.boundary != "reflective":
            raise ValueError(f"unsupported gradient boundary {self.boundary!r}")


# -- spatial operator F D ---------------------------------------------------

def _blur_decimate(z, sensor):
    rows, cols = z.shape[1:]
    blurred = np.fft.irfft2(np.fft.rfft2(z) * sensor.otf(rows, cols), s=(rows, cols))
    o, d = sensor.decim_offset, sensor.decim_factor
    return np.ascontiguousarray(blurred[:, o::d, o::d])


def _blur_decimate_adjoint(y, sensor, rows, cols):
    up = np.zeros((y.shape[0], rows, cols))
    o, d = sensor.decim_offset, sensor.decim_factor
    up[:, o::d, o::d] = y
    return np.fft.irfft2(np.fft.rfft2(up) * np.conj(sensor.otf(rows, cols)), s=(rows, cols))


def spatial_degrade(z, sensor: SensorModel) -> np.ndarray:
    """Blur every band (circular convolution) and decimate: ``Z F D``."""
    z = _finite(_cube(z))
    sensor.lr_dims(*z.shape[1:])
    return _blur_decimate(z, sensor)


def spatial_degrade_adjoint(y, sensor: SensorModel, hr_dims) -> np.ndarray:
    """Exact adjoint of :func:`spatial_degrade`: zero-fill upsampling then correlation."""
    y = _finite(_cube(y))
    rows, cols = hr_dims
    lr = sensor.lr_dims(rows, cols)
    if y.shape[1:] != lr:
        raise DimensionError(f"LR dims {y.shape[1:]} do not match {lr} for HR dims {hr_dims}")
    return _blur_decimate_adjoint(y, sensor, rows, cols)


# -- spectral operator R ----------------------------------------------------

def spectral_degrade(z, sensor: SensorModel) -> np.ndarray:
    """Apply the spectral response pixel-wise: ``R Z``."""
    z = _finite(_cube(z))
    if z.shape[0] != sensor.n_hs:
        raise DimensionError(f"image has {z.shape[0]} bands, srf expects {sensor.n_hs}")
    return np.tensordot(sensor.srf, z, axes=1)


def spectral_degrade_adjoint(y, sensor: SensorModel) -> np.ndarray:
    """``R^T Y`` pixel-wise."""
    y = _finite(_cube(y))
    if y.shape[0] != sensor.n_ms:
        raise DimensionError(f"image has {y.shape[0]} bands, srf has {sensor.n_ms} rows")
    return np.tensordot(sensor.srf.T, y, axes=1)


# -- spatio-spectral Laplacian G --------------------------------------------
#
# Each of the six neighbours is a shift along one axis whose out-of-range
# index is replaced by the voxel itself, so G z = sum_k (S_k z - z) and
# G^T d = sum_k (S_k^T d - d).

def _shift_fwd(z, axis, step):
    out = np.empty_like(z)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if step > 0:
        dst[axis], src[axis] = slice(0, -1), slice(1, None)
        edge = slice(-1, None)
    else:
        dst[axis], src[axis] = slice(1, None), slice(0, -1)
        edge = slice(0, 1)
    out[tuple(dst)] = z[tuple(src)]
    e = [slice(None)] * 3
    e[axis] = edge
    out[tuple(e)] = z[tuple(e)]
    return out


def _shift_adj(d, axis, step):
    out = np.zeros_like(d)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if step > 0:
        src[axis], dst[axis] = slice(0, -1), slice(1, None)
        edge = slice(-1, None)
    else:
        src[axis], dst[axis] = slice(1, None), slice(0, -1)
        edge = slice(0, 1)
    out[tuple(dst)] += d[tuple(src)]
    e = [slice(None)] * 3
    e[axis] = edge
    out[tuple(e)] += d[tuple(e)]
    return out


def _check_grad_dims(z):
    if z.shape[1] < 2 or z.shape[2] < 2:
        raise DimensionError(f"spatial Laplacian needs rows, cols >= 2, got {z.shape[1:]}")


def _laplacian(z):
    out = -6.0 * z
    for axis in (0, 1, 2):
        for step in (1, -1):
            out += _shift_fwd(z, axis, step)
    return out


def _laplacian_adjoint(d):
    out = -6.0 * d
    for axis in (0, 1, 2):
        for step in (1, -1):
            out += _shift_adj(d, axis, step)
    return out


def apply_gradient(z, g: GradientOperator | None = None) -> np.ndarray:
    """High-pass spatio-spectral filter ``G(Z)`` (6-neighbour Laplacian)."""
    z = _finite(_cube(z))
    _check_grad_dims(z)
    return _laplacian(z)


def apply_gradient_adjoint(d, g: GradientOperator | None = None) -> np.ndarray:
    """Exact adjoint ``G^T`` of :func:`apply_gradient`."""
    d = _finite(_cube(d))
    _check_grad_dims(d)
    return _laplacian_adjoint(d)


# -- noise and simulation ---------------------------------------------------

def add_noise_snr(z, snr_db: float, seed=0) -> np.ndarray:
    """Add i.i.d. Gaussian noise with one variance for the whole cube.

    ``sigma^2 = ||z||^2 / (z.size * 10**(snr_db/10))``.  ``snr_db = inf``
    disables the noise.  *seed* is an int or a ``numpy.random.Generator``.
    """
    z = _finite(_cube(z))
    if np.isnan(snr_db) or snr_db == -np.inf:
        raise ValueError(f"invalid SNR {snr_db}")
    if snr_db == np.inf:
        return z.copy()
    energy = float(np.sum(z * z))
    if energy == 0.0:
        raise ValueError("SNR is undefined for an all-zero image")
    sigma = np.sqrt(energy / (z.size * 10.0 ** (snr_db / 10.0)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return z + sigma * rng.standard_normal(z.shape)


def simulate_pair(z_h, z_m, sensor: SensorModel, snr_db: float = 35.0, seed: int = 0):
    """Degrade a pair of HR cubes into an (HI, MI) observation pair."""
    z_h = _cube(z_h, "z_h")
    z_m = _cube(z_m, "z_m")
    if z_h.shape != z_m.shape:
        raise DimensionError(f"z_h {z_h.shape} and z_m {z_m.shape} differ")
    rng_h, rng_m = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    y_h = add_noise_snr(spatial_degrade(z_h, sensor), snr_db, rng_h)
    y_m = add_noise_snr(spectral_degrade(z_m, sensor), snr_db, rng_m)
    return y_h, y_m


# -- interpolation ----------------------------------------------------------

def _keys(x, a=-0.5):
    x = np.abs(x)
    return np.where(
        x <= 1, (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0))


def bicubic_matrix(n_in: int, n_out: int, factor: int, shift: float) -> np.ndarray:
    """Cubic-convolution interpolation matrix mapping ``n_in`` samples to ``n_out``.

    Output sample ``p`` sits at input coordinate ``(p - shift) / factor``;
    out-of-range taps replicate the edge sample.
    """
    u = (np.arange(n_out) - shift) / factor
    base = np.floor(u).astype(int)
    A = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for t in (-1, 0, 1, 2):
        idx = base + t
        np.add.at(A, (rows, np.clip(idx, 0, n_in - 1)), _keys(u - idx))
    return A


def upsample_interpolate(y, factor: int, shift: float | tuple | None = None) -> np.ndarray:
    """Per-band bicubic upsampling by an integer *factor*, clipped to each band's range.

    *shift* is the HR coordinate of LR sample 0 (scalar or ``(row, col)``);
    the default ``(factor - 1) / 2`` is the usual pixel-centre alignment.
    """
    y = _finite(_cube(y))
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if shift is None:
        shift = (factor - 1) / 2.0
    sr, sc = (shift, shift) if np.isscalar(shift) else shift
    if factor == 1 and sr == 0 and sc == 0:
        return y.copy()
    _, r, c = y.shape
    Ar = bicubic_matrix(r, r * factor, factor, sr)
    Ac = bicubic_matrix(c, c * factor, factor, sc)
    out = np.einsum("pr,brc,qc->bpq", Ar, y, Ac, optimize=True)
    lo = y.min(axis=(1, 2))[:, None, None]
    hi = y.max(axis=(1, 2))[:, None, None]
    return np.clip(out, lo, hi)


# -- synthetic scenes and variability ----------------------------------------

def _smooth_spectrum(rng, wl, n_bumps=3):
    s = np.full(wl.shape, rng.uniform(0.05, 0.3))
    for _ in range(n_bumps):
        mu = rng.uniform(wl[0], wl[-1])
        width = rng.uniform(0.1, 0.6) * (wl[-1] - wl[0])
        s += rng.uniform(0.1, 0.6) * np.exp(-0.5 * ((wl - mu) / width) ** 2)
    return s


def synthetic_scene(rows: int = 64, cols: int = 64, bands: int = 20, n_materials: int = 4,
                    smoothness: float = 1.0, seed: int = 0) -> HyperImage:
    """Linear-mixing scene: smooth spectra over Voronoi-like abundance maps.

    *smoothness* is the Gaussian blur (pixels) applied to the abundance maps;
    small values keep sharp region boundaries, large values give a smooth cube.
    Samples are scaled so the cube maximum is 1.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    wl = np.linspace(0.4, 2.5, bands)
    spectra = np.stack([_smooth_spectrum(rng, wl) for _ in range(n_materials)])
    n_sites = max(3 * n_materials, 6)
    sites = rng.uniform(0, 1, size=(n_sites, 2)) * (rows, cols)
    label = rng.integers(0, n_materials, n_sites)
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    dist = (ii[None] - sites[:, 0, None, None]) ** 2 + (jj[None] - sites[:, 1, None, None]) ** 2
    region = label[np.argmin(dist, axis=0)]
    ab = np.stack([(region == k).astype(float) for k in range(n_materials)])
    ab += 0.15 * rng.uniform(size=(n_materials, 1, 1)) * np.sin(
        2 * np.pi * (rng.uniform(0.5, 2.0, (n_materials, 1, 1)) * ii[None] / rows
                     + rng.uniform(0.5, 2.0, (n_materials, 1, 1)) * jj[None] / cols))
    ab = np.clip(ab, 0, None)
    if smoothness > 0:
        ab = np.stack([gaussian_filter(a, smoothness, mode="wrap") for a in ab])
    ab /= ab.sum(axis=0, keepdims=True) + 1e-12
    cube = np.tensordot(spectra.T, ab, axes=1)
    return HyperImage(cube / cube.max(), wl)


def spectral_scaling(z, amplitude: float = 0.1, seed=0) -> np.ndarray:
    """Multiply each band by a smooth random factor in ``1 +/- amplitude``."""
    z = _cube(z)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, z.shape[0])
    curve = sum(rng.normal() * np.cos(np.pi * k * t) / k for k in range(1, 4))
    curve = curve / max(np.max(np.abs(curve)), 1e-12)
    return z * (1.0 + amplitude * curve)[:, None, None]


def additive_patch(z, size: int = 12, amplitude: float = 0.2, seed=0) -> np.ndarray:
    """Add a localised bump with a smooth random spectral signature (clipped at zero)."""
    z = _cube(z)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    _, rows, cols = z.shape
    size = min(size, rows, cols)
    r0 = rng.integers(0, rows - size + 1)
    c0 = rng.integers(0, cols - size + 1)
    t = np.linspace(-1.0, 1.0, size)
    bump = np.outer(np.cos(0.5 * np.pi * t) ** 2, np.cos(0.5 * np.pi * t) ** 2)
    sig = _smooth_spectrum(rng, np.linspace(0.0, 1.0, z.shape[0]), n_bumps=2)
    sig = amplitude * (sig / sig.max()) * rng.choice([-1.0, 1.0])
    out = z.copy()
    out[:, r0:r0 + size, c0:c0 + size] += sig[:, None, None] * bump[None]
    return np.clip(out, 0.0, None)


def synthesize_variability(z_h, scaling: float = 0.1, patch_size: int = 12,
                           patch_amplitude: float = 0.2, seed: int = 0) -> np.ndarray:
    """Build an MI-side latent cube from ``z_h``: smooth spectral scaling plus one local patch."""
    rng = np.random.default_rng(seed)
    z_m = _cube(z_h)
    if scaling:
        z_m = spectral_scaling(z_m, scaling, rng)
    if patch_amplitude and patch_size:
        z_m = additive_patch(z_m, patch_size, patch_amplitude, rng)
    return z_m
