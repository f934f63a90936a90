"""Lightweight separable-convolution residual denoiser and its zero-shot training."""
from __future__ import annotations

import io
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm, DepthwiseConv3x3, Pointwise, ReLU, l1_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"DFVM"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Zero-shot training controls.

    The epoch defaults are desk-scale; :meth:`full` gives 10000 initial and
    2000 fine-tuning epochs.
    """

    lr: float = 2e-4
    epochs_initial: int = 2000
    epochs_finetune: int = 400
    resample_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs_initial < 1 or self.epochs_finetune < 1:
            raise ValueError("epoch counts must be positive")

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs_initial": 10000, "epochs_finetune": 2000, **overrides})


class DenoiserModel:
    """8-layer separable DnCNN predicting the noise residual.

    Layer 1 is ``S-Conv + ReLU``, layers 2..depth-1 are ``S-Conv + BN + ReLU``
    and the last layer is ``S-Conv`` back to ``channels`` outputs, where an
    S-Conv is a 3x3 depthwise filter followed by a 1x1 pointwise filter.
    Hidden layers carry ``channels * width_factor`` feature maps.

    *dtype* is the working precision of parameters, activations and optimiser
    moments; float32 trains about twice as fast, gradient checks need float64.
    """

    def __init__(self, channels: int, depth: int = 8, width_factor: int = 4,
                 dtype=np.float32):
        if channels < 1 or depth < 2 or width_factor < 1:
            raise ValueError("need channels >= 1, depth >= 2, width_factor >= 1")
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {self.dtype}")
        self.channels = channels
        self.depth = depth
        self.width = channels * width_factor
        self.blocks = []  # (c_in, c_out, has_bn)
        self.layers = []
        for i in range(depth):
            c_in = channels if i == 0 else self.width
            c_out = channels if i == depth - 1 else self.width
            has_bn = 0 < i < depth - 1
            self.blocks.append((c_in, c_out, has_bn))
            self.layers += [DepthwiseConv3x3(c_in, self.dtype),
                            Pointwise(c_in, c_out, self.dtype)]
            if has_bn:
                self.layers.append(BatchNorm(c_out, dtype=self.dtype))
            if i < depth - 1:
                self.layers.append(ReLU())
        self.trained = False
        self.step = 0
        self._m = [np.zeros_like(p) for p in self.parameters()]
        self._v = [np.zeros_like(p) for p in self.parameters()]

    # -- parameters ---------------------------------------------------------

    def _param_slots(self):
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    def parameters(self) -> list:
        return [layer.params[name] for layer, name in self._param_slots()]

    def gradients(self) -> list:
        return [layer.grads[name] for layer, name in self._param_slots()]

    def set_parameters(self, values) -> None:
        for (layer, name), v in zip(self._param_slots(), values):
            layer.params[name] = np.array(v, dtype=self.dtype).reshape(layer.params[name].shape)

    def batchnorms(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def init(self, rng) -> None:
        """He (fan-in) normal initialisation; biases and BN shifts start at zero."""
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(rng)
        self._m = [np.zeros_like(p) for p in self.parameters()]
        self._v = [np.zeros_like(p) for p in self.parameters()]
        self.step = 0

    # -- forward / backward ---------------------------------------------------

    def residual(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def forward(self, x, training=False):
        """Denoised output ``x - residual(x)``."""
        x = np.asarray(x, dtype=self.dtype)
        return x - self.residual(x, training)

    def backward(self, dout):
        """Back-propagate ``dL/d(output)``; returns ``dL/dx`` and fills layer grads."""
        dout = np.asarray(dout, dtype=self.dtype)
        g = -dout
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return dout + g

    # -- optimiser ------------------------------------------------------------

    def adam_step(self, lr: float) -> None:
        self.step += 1
        t = self.step
        c1 = 1.0 - ADAM_BETA1**t
        c2 = 1.0 - ADAM_BETA2**t
        eps = self.dtype.type(ADAM_EPS)
        for (layer, name), g, m, v in zip(self._param_slots(), self.gradients(), self._m, self._v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            layer.params[name] = layer.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def separable_param_count(channels: int, depth: int = 8, width_factor: int = 4) -> int:
    """Closed-form count: ``sum 9*c_in + c_in*c_out + c_out`` plus ``2*c_out`` per BN."""
    w = channels * width_factor
    total = 0
    for i in range(depth):
        c_in = channels if i == 0 else w
        c_out = channels if i == depth - 1 else w
        total += 9 * c_in + c_in * c_out + c_out
        if 0 < i < depth - 1:
            total += 2 * c_out
    return total


def dense_param_count(channels: int, depth: int = 8, width_factor: int = 4) -> int:
    """Same network with dense 3x3 convolutions (``9*c_in*c_out + c_out`` per layer)."""
    w = channels * width_factor
    total = 0
    for i in range(depth):
        c_in = channels if i == 0 else w
        c_out = channels if i == depth - 1 else w
        total += 9 * c_in * c_out + c_out
        if 0 < i < depth - 1:
            total += 2 * c_out
    return total


def network_forward(model: DenoiserModel, x, training: bool = False) -> np.ndarray:
    """Denoise a coefficient image ``(channels, rows, cols)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != model.channels:
        raise ValueError(f"expected ({model.channels}, rows, cols) input, got {x.shape}")
    if not training and not model.trained:
        warnings.warn("inference with an untrained denoiser", RuntimeWarning, stacklevel=2)
    return model.forward(x, training).astype(np.float64)


def train_zero_shot(model: DenoiserModel, x, sigmas, tc: TrainConfig, epochs: int,
                    history: list | None = None) -> DenoiserModel:
    """Train on ``(x + E, x)`` pairs with ``E ~ N(0, sigmas^2)`` per channel.

    One Adam step on the whole image per epoch; the L1 loss of every epoch
    is appended to *history* when given.  Parameters are initialised on the
    first call only.
    """
    x = np.asarray(x, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if x.ndim != 3 or x.shape[0] != model.channels:
        raise ValueError(f"expected ({model.channels}, rows, cols) input, got {x.shape}")
    if sigmas.size != model.channels or np.any(sigmas < 0):
        raise ValueError("need one nonnegative sigma per channel")
    if not np.all(np.isfinite(x)):
        raise ValueError("training image contains non-finite values")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if model.step == 0 and not model.trained:
        model.init(np.random.default_rng([tc.seed, 0]))
    # noise stream keyed on the optimiser step so reloaded checkpoints continue identically
    rng = np.random.default_rng([tc.seed, 1, model.step])
    dt = model.dtype
    x = x.astype(dt)
    scale = sigmas.astype(dt)[:, None, None]
    noise = scale * rng.standard_normal(x.shape, dtype=dt)
    for epoch in range(epochs):
        if tc.resample_noise and epoch > 0:
            noise = scale * rng.standard_normal(x.shape, dtype=dt)
        out = model.forward(x + noise, training=True)
        loss, g = l1_loss(out, x)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        model.backward(g)
        model.adam_step(tc.lr)
        if history is not None:
            history.append(loss)
    model.trained = True
    return model


# -- checkpoints ----------------------------------------------------------------
#
# Layout (little-endian):
#   4s magic "DFVM" | u16 version | u32 channels | u8 precision (4 or 8 bytes)
#   u32 n_blocks
#   n_blocks x (u32 c_in, u32 c_out, u8 has_bn)
#   u8 trained | u64 adam step | u64 n_params
#   f64[n_params] parameters | f64[n_params] first moments | f64[n_params] second moments
#   u64 n_bn | f64[n_bn] running means (concatenated) | f64[n_bn] running variances

def _flat(arrays):
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays]).astype("<f8")


def checkpoint_bytes(model: DenoiserModel) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHIBI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                          model.channels, model.dtype.itemsize, len(model.blocks)))
    for c_in, c_out, has_bn in model.blocks:
        buf.write(struct.pack("<IIB", c_in, c_out, int(has_bn)))
    params = _flat(model.parameters())
    buf.write(struct.pack("<BQQ", int(model.trained), model.step, params.size))
    buf.write(params.tobytes())
    buf.write(_flat(model._m).tobytes())
    buf.write(_flat(model._v).tobytes())
    bns = model.batchnorms()
    means = _flat([b.running_mean for b in bns])
    buf.write(struct.pack("<Q", means.size))
    buf.write(means.tobytes())
    buf.write(_flat([b.running_var for b in bns]).tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def model_from_bytes(blob: bytes) -> DenoiserModel:
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {size} bytes at offset {off}, "
                                  f"have {len(blob) - off}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    def take_f64(n):
        nonlocal off
        if off + 8 * n > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {8 * n} bytes at offset {off}, "
                                  f"have {len(blob) - off}")
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return a

    magic, version, channels, itemsize, n_blocks = take("<4sHIBI")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    if itemsize not in (4, 8):
        raise CheckpointError(f"bad precision byte {itemsize} at offset 10")
    blocks = [take("<IIB") for _ in range(n_blocks)]
    width = blocks[0][1] if n_blocks > 1 else channels
    model = DenoiserModel(channels, depth=n_blocks, width_factor=max(width // channels, 1),
                          dtype=np.float32 if itemsize == 4 else np.float64)
    if [(a, b, bool(c)) for a, b, c in blocks] != model.blocks:
        raise CheckpointError(f"unsupported layer layout {blocks}")
    trained, step, n = take("<BQQ")
    if n != model.n_params():
        raise CheckpointError(f"checkpoint holds {n} parameters, layout needs {model.n_params()}")

    def split(flat):
        out, i = [], 0
        for p in model.parameters():
            out.append(flat[i:i + p.size].reshape(p.shape))
            i += p.size
        return out

    model.set_parameters(split(take_f64(n)))
    model._m = [a.astype(model.dtype) for a in split(take_f64(n))]
    model._v = [a.astype(model.dtype) for a in split(take_f64(n))]
    (n_bn,) = take("<Q")
    means = take_f64(n_bn)
    variances = take_f64(n_bn)
    i = 0
    for bn in model.batchnorms():
        bn.running_mean = means[i:i + bn.channels].astype(model.dtype)
        bn.running_var = variances[i:i + bn.channels].astype(model.dtype)
        i += bn.channels
    if i != n_bn:
        raise CheckpointError(f"checkpoint holds {n_bn} BN statistics, layout needs {i}")
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after offset {off}")
    model.trained = bool(trained)
    model.step = step
    return model


def save_checkpoint(model: DenoiserModel, path) -> None:
    path = os.fspath(path)
    blob = checkpoint_bytes(model)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> DenoiserModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
