"""Subspace-domain zero-shot denoising of hyperspectral cubes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import huber_loss
from .network import DenoiserModel, TrainConfig, network_forward, train_zero_shot

log = logging.getLogger(__name__)


def estimate_noise_sigma(x) -> float:
    """Robust noise level of one channel: ``median(|HH|) / 0.6745``.

    ``HH`` are the finest-scale diagonal coefficients of an orthonormal Haar
    transform (odd trailing rows/cols are dropped).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 4:
        raise ValueError(f"need a 2-D channel with at least 4 pixels per side, got {x.shape}")
    r, c = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:r, :c]
    hh = (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2]) / 2.0
    return float(np.median(np.abs(hh)) / 0.6745)


@dataclass
class SubspaceModel:
    """Orthonormal spectral basis ``q`` (L x l) and coefficients (l x rows x cols)."""

    q: np.ndarray
    coeffs: np.ndarray

    @property
    def l_h(self) -> int:
        return self.q.shape[1]

    def reconstruct(self, coeffs=None) -> np.ndarray:
        c = self.coeffs if coeffs is None else np.asarray(coeffs)
        return np.tensordot(self.q, c, axes=1)


def subspace_decompose(v, l_h: int = 5) -> SubspaceModel:
    """Truncated SVD of the band-by-pixel unfolding of *v*.

    Each basis vector's sign is fixed so its largest-magnitude entry is
    positive, which keeps the coefficient images stable across calls.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected a (bands, rows, cols) cube, got {v.shape}")
    L, r, c = v.shape
    if not 1 <= l_h <= min(L, r * c):
        raise ValueError(f"subspace dimension {l_h} outside [1, {min(L, r * c)}]")
    V = v.reshape(L, -1)
    U, _, _ = np.linalg.svd(V, full_matrices=False)
    q = U[:, :l_h]
    piv = np.argmax(np.abs(q), axis=0)
    q = q * np.sign(q[piv, np.arange(l_h)])
    return SubspaceModel(q, (q.T @ V).reshape(l_h, r, c))


def channel_sigmas(x) -> np.ndarray:
    return np.array([estimate_noise_sigma(ch) for ch in np.asarray(x)])


def denoise(v, model: DenoiserModel | None = None, l_h: int = 5,
            tc: TrainConfig | None = None, history: list | None = None):
    """Project, train (or fine-tune), denoise the coefficients and map back.

    An untrained or missing *model* gets ``tc.epochs_initial`` epochs, a
    trained one ``tc.epochs_finetune``.  Returns ``(D(v), model)``.
    """
    tc = tc or TrainConfig()
    sub = subspace_decompose(v, l_h)
    if model is None:
        model = DenoiserModel(l_h)
    if model.channels != l_h:
        raise ValueError(f"model has {model.channels} channels, subspace has {l_h}")
    epochs = tc.epochs_finetune if model.trained else tc.epochs_initial
    sig = channel_sigmas(sub.coeffs)
    log.debug("training %d epochs, channel sigmas %s", epochs, np.array2string(sig, precision=4))
    train_zero_shot(model, sub.coeffs, sig, tc, epochs, history)
    return sub.reconstruct(network_forward(model, sub.coeffs)), model


@dataclass
class ZeroShotDenoiser:
    """Stateful image-specific denoiser for the fusion loop.

    ``fit(v)`` trains on the first call and fine-tunes afterwards;
    calling the object denoises with the current parameters.
    """

    l_h: int = 5
    tc: TrainConfig = field(default_factory=TrainConfig)
    model: DenoiserModel | None = None
    history: list = field(default_factory=list)

    def fit(self, v) -> "ZeroShotDenoiser":
        sub = subspace_decompose(v, self.l_h)
        if self.model is None:
            self.model = DenoiserModel(self.l_h)
        epochs = self.tc.epochs_finetune if self.model.trained else self.tc.epochs_initial
        train_zero_shot(self.model, sub.coeffs, channel_sigmas(sub.coeffs), self.tc, epochs,
                        self.history)
        return self

    def __call__(self, v) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("denoiser has not been fitted")
        sub = subspace_decompose(v, self.l_h)
        return sub.reconstruct(network_forward(self.model, sub.coeffs))


def make_denoisers(l_h: int = 5, tc: TrainConfig | None = None, seed: int = 0):
    """Independent denoisers for ``V_h`` and ``V_m`` seeded ``2*seed`` and ``2*seed + 1``."""
    tc = tc or TrainConfig()
    return (ZeroShotDenoiser(l_h, replace(tc, seed=2 * seed)),
            ZeroShotDenoiser(l_h, replace(tc, seed=2 * seed + 1)))


# -- gradient checks ------------------------------------------------------------

def _rel_err(a, b, floor=1e-300):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def _bn_snapshot(model):
    return [(bn.running_mean.copy(), bn.running_var.copy(), bn.track_running)
            for bn in model.batchnorms()]


def _bn_restore(model, snap):
    for bn, (m, v, t) in zip(model.batchnorms(), snap):
        bn.running_mean, bn.running_var, bn.track_running = m, v, t


def gradient_check(model: DenoiserModel, x, direction=None, target=None, training: bool = True,
                   step: float = 1e-6, delta: float = 1e-4) -> float:
    """Compare back-propagated parameter gradients with central differences.

    The loss is the Huber-smoothed L1 distance between ``model(x)`` and
    *target*.  The default target sits a random ``0.5..1.5`` away from every
    output so no residual is near the Huber corner, where a central
    difference straddling it would be inaccurate.  With *direction* (a list shaped like
    ``model.parameters()``) a single directional derivative is checked;
    otherwise every parameter is perturbed.  Returns the worst relative
    error ``max|g - g_fd| / max(|g|, |g_fd|, floor)`` over parameter tensors,
    where ``floor = 1e-2 * max|g|`` over the whole network so tensors with an
    exactly vanishing gradient (biases feeding a batch norm) are judged
    against the network's gradient scale rather than round-off.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    x = np.asarray(x, dtype=np.float64)
    snap = _bn_snapshot(model)
    for bn in model.batchnorms():
        bn.track_running = False
    try:
        if target is None:
            rng = np.random.default_rng(0)
            off = rng.uniform(0.5, 1.5, x.shape) * rng.choice([-1.0, 1.0], x.shape)
            target = model.forward(x, training) + off
        target = np.asarray(target, dtype=np.float64)
        def loss():
            return huber_loss(model.forward(x, training), target, delta)[0]

        _, g = huber_loss(model.forward(x, training), target, delta)
        model.backward(g)
        analytic = [gr.copy() for gr in model.gradients()]
        params = model.parameters()
        if direction is not None:
            base = [p.copy() for p in params]
            model.set_parameters([p + step * d for p, d in zip(base, direction)])
            fp = loss()
            model.set_parameters([p - step * d for p, d in zip(base, direction)])
            fm = loss()
            model.set_parameters(base)
            fd = (fp - fm) / (2 * step)
            an = sum(float(np.vdot(a, d)) for a, d in zip(analytic, direction))
            return _rel_err(np.array(an), np.array(fd))
        floor = 1e-2 * max(float(np.max(np.abs(a))) for a in analytic)
        worst = 0.0
        for p, a in zip(params, analytic):
            fd = np.empty_like(p)
            flat, fdf = p.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                fp = loss()
                flat[i] = old - step
                fm = loss()
                flat[i] = old
                fdf[i] = (fp - fm) / (2 * step)
            worst = max(worst, _rel_err(a, fd, floor))
        return worst
    finally:
        _bn_restore(model, snap)


def layer_gradient_check(layer, x, training: bool = True, step: float = 1e-6,
                         seed: int = 0) -> dict:
    """Check one layer's input and parameter gradients on a random linear functional.

    Returns ``{"input": err, "<param>": err, ...}`` relative errors.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    rng = np.random.default_rng(seed)
    track = getattr(layer, "track_running", None)
    if track is not None:
        layer.track_running = False
    try:
        out = layer.forward(x, training)
        c = rng.standard_normal(out.shape)

        def f():
            return float(np.vdot(c, layer.forward(x, training)))

        layer.forward(x, training)
        dx = layer.backward(c)
        grads = {k: v.copy() for k, v in layer.grads.items()}
        errs = {}
        targets = [("input", x, dx)] + [(k, layer.params[k], grads[k]) for k in layer.params]
        for name, arr, an in targets:
            fd = np.empty_like(arr)
            flat, fdf = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                fp = f()
                flat[i] = old - step
                fm = f()
                flat[i] = old
                fdf[i] = (fp - fm) / (2 * step)
            errs[name] = _rel_err(an, fd)
        return errs
    finally:
        if track is not None:
            layer.track_running = track
