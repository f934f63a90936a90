"""File formats: HSC raster cubes, YAML run configs, RGB composites and reports.

HSC layout (little-endian)::

    offset  size          field
    0       4             magic b"HSC1"
    4       2   u16       version (1)
    6       4   u32       bands
    10      4   u32       rows
    14      4   u32       cols
    18      1   u8        wavelength flag (0 or 1)
    19      8*bands f64   wavelengths in micrometres, only when the flag is 1
    ..      4*b*r*c f32   samples, band-sequential, row-major within a band

Samples are stored as 32-bit floats, so writing a float64 cube rounds it once;
a cube read from an HSC file round-trips bit-exactly.
"""
from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .denoiser import TrainConfig
from .imaging import HyperImage, SensorModel, averaging_srf, gaussian_kernel
from .metrics import MetricReport
from .optimizer import FusionConfig

__all__ = [
    "HscError", "read_hsc", "write_hsc", "hsc_bytes", "parse_hsc", "atomic_write",
    "ConfigError", "SensorSettings", "RunConfig", "load_config",
    "quantile_normalize", "composite_rgb", "render_composite",
    "write_report", "read_report", "COMPOSITES",
]

HSC_MAGIC = b"HSC1"
HSC_VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")


class HscError(ValueError):
    """Malformed HSC data; the message names the byte offset involved."""


def atomic_write(path, data: bytes) -> None:
    """Write *data* to a temporary file next to *path* and rename it into place."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".",
                                   prefix=path.name + ".", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        if isinstance(exc, OSError):
            raise OSError(f"cannot write {path}: {exc}") from exc
        raise


def hsc_bytes(img) -> bytes:
    if not isinstance(img, HyperImage):
        img = HyperImage(img)
    b, r, c = img.shape
    wl = img.wavelengths
    head = _HEADER.pack(HSC_MAGIC, HSC_VERSION, b, r, c, int(wl is not None))
    parts = [head]
    if wl is not None:
        parts.append(np.asarray(wl, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(img.data, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_hsc(blob: bytes) -> HyperImage:
    if len(blob) < _HEADER.size:
        raise HscError(f"truncated header: expected {_HEADER.size} bytes at offset 0, "
                       f"got {len(blob)}")
    magic, version, b, r, c, flag = _HEADER.unpack_from(blob, 0)
    if magic != HSC_MAGIC:
        raise HscError(f"bad magic {magic!r} at offset 0, expected {HSC_MAGIC!r}")
    if version != HSC_VERSION:
        raise HscError(f"unsupported version {version} at offset 4, expected {HSC_VERSION}")
    if min(b, r, c) == 0:
        raise HscError(f"empty dimensions {b}x{r}x{c} at offset 6")
    if flag not in (0, 1):
        raise HscError(f"bad wavelength flag {flag} at offset 18")
    off = _HEADER.size
    wl = None
    if flag:
        need = 8 * b
        if len(blob) - off < need:
            raise HscError(f"truncated wavelength table at offset {off}: expected {need} bytes, "
                           f"got {len(blob) - off}")
        wl = np.frombuffer(blob, "<f8", b, off).astype(np.float64)
        off += need
    need = 4 * b * r * c
    have = len(blob) - off
    if have != need:
        kind = "truncated" if have < need else "oversized"
        raise HscError(f"{kind} payload at offset {off}: expected {need} bytes, got {have}")
    data = np.frombuffer(blob, "<f4", b * r * c, off).astype(np.float32).reshape(b, r, c)
    return HyperImage(data, wl)


def write_hsc(img, path) -> None:
    """Serialise *img* (HyperImage or array) to *path*, replacing it atomically."""
    atomic_write(path, hsc_bytes(img))


def read_hsc(path) -> HyperImage:
    """Read an HSC file (float32 samples, widened exactly to float64 in memory)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    try:
        return parse_hsc(blob)
    except HscError as exc:
        raise HscError(f"{path}: {exc}") from None


# -- run configuration ----------------------------------------------------------

class ConfigError(ValueError):
    pass


@dataclass
class SensorSettings:
    """Parameters from which a default :class:`SensorModel` is built."""

    n_ms: int = 4
    kernel_size: int = 8
    sigma: float = 4.0
    decim_factor: int = 4
    decim_offset: int = 0
    snr_db: float = 35.0

    def build(self, n_hs: int) -> SensorModel:
        return SensorModel(gaussian_kernel(self.kernel_size, self.sigma), self.decim_factor,
                           averaging_srf(n_hs, self.n_ms), self.decim_offset)


@dataclass
class RunConfig:
    """Everything a CLI run needs; sections mirror the YAML document.

    Missing keys take the dataclass defaults (the moderate preset); unknown
    keys are errors.
    """

    fusion: FusionConfig = field(default_factory=FusionConfig)
    sensor: SensorSettings = field(default_factory=SensorSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    l_h: int = 5

    _SECTIONS = {"fusion": FusionConfig, "sensor": SensorSettings, "train": TrainConfig}

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
        known = {"fusion", "sensor", "train", "paths", "seed", "l_h", "preset"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        kw = {}
        for name, typ in cls._SECTIONS.items():
            sec = doc.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            fields = {f.name for f in dataclasses.fields(typ) if f.init}
            bad = sorted(set(sec) - fields)
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {', '.join(bad)}")
            try:
                if name == "fusion" and "preset" in doc:
                    kw[name] = FusionConfig.preset(doc["preset"], **sec)
                else:
                    kw[name] = typ(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from None
        paths = doc.get("paths") or {}
        if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
            raise ConfigError("section 'paths' must map names to path strings")
        kw["paths"] = dict(paths)
        for key in ("seed", "l_h"):
            if key in doc:
                if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                    raise ConfigError(f"{key!r} must be an integer")
                kw[key] = doc[key]
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "fusion": dataclasses.asdict(self.fusion),
            "sensor": dataclasses.asdict(self.sensor),
            "train": dataclasses.asdict(self.train),
            "paths": dict(self.paths),
            "seed": self.seed,
            "l_h": self.l_h,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return RunConfig.from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# -- composites ---------------------------------------------------------------

COMPOSITES = {"visible": (0.66, 0.56, 0.45), "infrared": (2.20, 1.50, 0.80)}


def quantile_normalize(img, q: float = 0.999):
    """Divide every sample by the *q*-quantile of the whole cube."""
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    data = np.asarray(img, dtype=np.float64)
    scale = np.quantile(data, q)
    if scale == 0:
        raise ValueError(f"the {q} quantile of the cube is zero")
    out = data / scale
    return img.with_data(out) if isinstance(img, HyperImage) else out


def composite_rgb(img: HyperImage, mode: str = "visible", q: float = 0.999) -> np.ndarray:
    """8-bit ``(rows, cols, 3)`` composite of the bands nearest the mode's wavelengths."""
    if mode not in COMPOSITES:
        raise ValueError(f"unknown composite {mode!r}; choose from {sorted(COMPOSITES)}")
    if img.wavelengths is None:
        raise ValueError("composite rendering needs band wavelengths")
    wl = img.wavelengths
    idx = []
    for target in COMPOSITES[mode]:
        i = int(np.argmin(np.abs(wl - target)))
        if abs(wl[i] - target) > 0.05:
            warnings.warn(f"nearest band to {target} um is {wl[i]:.3f} um", UserWarning,
                          stacklevel=2)
        idx.append(i)
    norm = np.clip(np.asarray(quantile_normalize(img, q)), 0.0, 1.0)
    rgb = np.stack([norm[i] for i in idx], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def render_composite(img: HyperImage, mode: str, path) -> None:
    """Write the composite as a PNG file."""
    from io import BytesIO

    from PIL import Image

    buf = BytesIO()
    Image.fromarray(composite_rgb(img, mode), "RGB").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


# -- reports --------------------------------------------------------------------

def write_report(report: MetricReport, path) -> None:
    """``.json`` paths get the structured form, anything else the key=value text."""
    path = Path(path)
    text = report.to_json() if path.suffix == ".json" else report.to_text()
    atomic_write(path, text.encode())


def read_report(path) -> MetricReport:
    path = Path(path)
    text = path.read_text()
    return MetricReport.from_json(text) if path.suffix == ".json" else MetricReport.from_text(text)
