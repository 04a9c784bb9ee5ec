"""Feedforward ReLU^2 network with layer normalization.

Each hidden block is ``affine -> layer norm -> relu^2``; the output layer is
affine. Input gradients are propagated as forward-mode tangents (one per input
coordinate) built from :mod:`autodiff` operations, so a reverse sweep over
any loss of ``(u, grad u)`` gives exact parameter gradients.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
LAYER_NORM_EPS = 1e-5


def relu2(x):
    """Squared ReLU, ``max(0, x)**2``."""
    return np.maximum(x, 0.0) ** 2


def relu2_prime(x):
    return 2.0 * np.maximum(x, 0.0)


class StructureError(ValueError):
    """Inconsistent layer sizes, parameter shapes or input dimensions."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    gain: np.ndarray | None = None  # layer-norm gain, hidden layers only
    shift: np.ndarray | None = None  # layer-norm bias

    def arrays(self):
        return [a for a in (self.weight, self.bias, self.gain, self.shift) if a is not None]


@dataclass
class EvalResult:
    """Network values and exact input gradients at a batch of points."""

    value: np.ndarray  # (B,)
    input_gradient: np.ndarray  # (B, input_dim)


@dataclass
class Network:
    layers: list[Layer]
    layer_norm: bool = True
    seed: int | None = None
    eps: float = LAYER_NORM_EPS
    _sizes: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise StructureError("network needs at least one layer")
        sizes = [self.layers[0].weight.shape[1]]
        for k, layer in enumerate(self.layers):
            out, inp = layer.weight.shape
            if inp != sizes[-1]:
                raise StructureError(f"layer {k} expects {inp} inputs, previous layer gives {sizes[-1]}")
            if layer.bias.shape != (out,):
                raise StructureError(f"layer {k} bias shape {layer.bias.shape} != ({out},)")
            hidden = k < len(self.layers) - 1
            if hidden and self.layer_norm:
                if layer.gain is None or layer.shift is None:
                    raise StructureError(f"hidden layer {k} is missing layer-norm parameters")
                if layer.gain.shape != (out,) or layer.shift.shape != (out,):
                    raise StructureError(f"layer {k} norm parameter shape mismatch")
            elif layer.gain is not None or layer.shift is not None:
                raise StructureError(f"layer {k} carries unused layer-norm parameters")
            sizes.append(out)
        self._sizes = sizes

    @property
    def layer_sizes(self):
        return list(self._sizes)

    @property
    def input_dim(self):
        return self._sizes[0]

    @property
    def output_dim(self):
        return self._sizes[-1]

    def parameters(self):
        """Parameter arrays in a fixed order (per layer: W, b, gain, shift)."""
        return [a for layer in self.layers for a in layer.arrays()]

    def num_parameters(self):
        return sum(a.size for a in self.parameters())

    def copy(self):
        layers = [Layer(*(None if a is None else a.copy()
                          for a in (l.weight, l.bias, l.gain, l.shift)))
                  for l in self.layers]
        return Network(layers, layer_norm=self.layer_norm, seed=self.seed, eps=self.eps)

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.parameters())

    def __call__(self, x):
        return forward(self, x)


INIT_SCHEMES = ("he", "uniform")


def init(seed, layer_sizes, layer_norm=True, scheme="he"):
    """Random network parameters, deterministic in ``seed``.

    ``"he"``: Gaussian weights with variance 2/fan_in and zero biases.
    ``"uniform"``: weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Norm gains start at one and norm shifts at zero under both schemes.

    With zero biases the first layer is odd in x, so after normalization its
    features depend only on the direction of x; the uniform scheme breaks that.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise StructureError("layer_sizes needs an input and an output size")
    if any(s < 1 for s in sizes):
        raise StructureError(f"layer sizes must be positive: {sizes}")
    if scheme not in INIT_SCHEMES:
        raise StructureError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    layers = []
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        if scheme == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            b = np.zeros(fan_out)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
        if k < n_layers - 1 and layer_norm:
            layers.append(Layer(w, b, np.ones(fan_out), np.zeros(fan_out)))
        else:
            layers.append(Layer(w, b))
    return Network(layers, layer_norm=layer_norm, seed=seed)


def _as_points(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        # a single point in d dimensions, or a batch of 1-D points
        x = x.reshape(1, -1) if net.input_dim > 1 else x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise StructureError(f"points of shape {x.shape} do not match input_dim={net.input_dim}")
    return x


def propagate(net, x, params, with_tangents=True):
    """Value and input-gradient tangents as graph tensors.

    ``params`` is a list of tensors aligned with ``net.parameters()``.
    Returns ``(u, [du/dx_0, du/dx_1, ...])`` with shapes ``(B, 1)``; the
    tangent list is empty when ``with_tangents`` is false.

    Values and tangents travel together as one ``(1 + dim, B, width)`` state
    through fused affine and normalization blocks.
    """
    x = _as_points(net, x)
    batch, dim = x.shape
    k = 1 + dim if with_tangents else 1
    s0 = np.zeros((k, batch, dim))
    s0[0] = x
    for j in range(k - 1):
        s0[1 + j, :, j] = 1.0
    state = ad.constant(s0)
    it = iter(params)
    n_layers = len(net.layers)
    for i in range(n_layers):
        w = next(it)
        b = next(it)
        state = ad.affine(state, w, b)
        if i == n_layers - 1:
            break
        if net.layer_norm:
            gain, shift = next(it), next(it)
            state = ad.norm_relu2(state, gain, shift, net.eps)
        else:
            state = ad.norm_relu2(state)
    u = state[0]
    return u, [state[1 + j] for j in range(k - 1)]


def propagate_reference(net, x, params, with_tangents=True):
    """Same as :func:`propagate`, composed from elementary graph operations.

    Slower; kept as an independent route for checking the fused blocks.
    """
    x = _as_points(net, x)
    batch, dim = x.shape
    it = iter(params)
    h = ad.constant(x)
    tangents = None  # None means the identity tangent of the raw input
    n_layers = len(net.layers)
    for k, layer in enumerate(net.layers):
        w = next(it)
        b = next(it)
        wt = w.T
        z = h @ wt + b
        if not with_tangents:
            dz = []
        elif tangents is None:
            dz = [wt[j:j + 1, :] for j in range(dim)]
        else:
            dz = [t @ wt for t in tangents]
        if k == n_layers - 1:
            h, tangents = z, dz
            break
        if net.layer_norm:
            gain = next(it)
            shift = next(it)
            zc = z - z.mean(axis=1, keepdims=True)
            inv = ad.power((zc * zc).mean(axis=1, keepdims=True) + net.eps, -0.5)
            zhat = zc * inv
            y = zhat * gain + shift
            dy = []
            for t in dz:
                tc = t - t.mean(axis=1, keepdims=True)
                dzhat = (tc - zhat * (zhat * tc).mean(axis=1, keepdims=True)) * inv
                dy.append(dzhat * gain)
        else:
            y, dy = z, dz
        r = ad.relu(y)
        h = r * r
        two_r = r * 2.0
        tangents = [two_r * t for t in dy]
    zeros = np.zeros((batch, 1))
    tangents = [t + zeros if t.shape[0] != batch else t for t in tangents]
    return h, tangents


def forward(net, x):
    """Evaluate values and exact input gradients (no graph recorded)."""
    x = _as_points(net, x)
    params = [ad.constant(a) for a in net.parameters()]
    with ad.no_grad():
        u, du = propagate(net, x, params)
    grad = np.concatenate([t.value for t in du], axis=1)
    return EvalResult(u.value[:, 0].copy(), grad)


def evaluate(net, x, chunk=8192):
    """Values only, chunked for large evaluation grids."""
    x = _as_points(net, x)
    params = [ad.constant(a) for a in net.parameters()]
    out = np.empty(x.shape[0])
    with ad.no_grad():
        for start in range(0, x.shape[0], chunk):
            u, _ = propagate(net, x[start:start + chunk], params, with_tangents=False)
            out[start:start + chunk] = u.value[:, 0]
    return out


class Tape:
    """Records evaluations of ``net`` so parameter gradients can be taken.

    >>> tape = Tape(net)
    >>> u, du = tape.propagate(x)
    >>> loss = (u * u).mean()
    >>> grads = tape.backward(loss)
    """

    def __init__(self, net):
        self.net = net
        self.params = [ad.parameter(a) for a in net.parameters()]

    def propagate(self, x, with_tangents=True):
        return propagate(self.net, x, self.params, with_tangents)

    def backward(self, loss):
        """Exact gradient of scalar ``loss`` w.r.t. every network parameter."""
        if not isinstance(loss, Tensor):
            raise ad.GraphError("loss is not a graph tensor")
        for p in self.params:
            p.grad = None
        loss.backward()
        return [np.zeros_like(p.value) if p.grad is None else np.array(p.grad)
                for p in self.params]


def backward(tape, loss):
    return tape.backward(loss)


def save_checkpoint(net, path):
    """Write parameters atomically to an ``.npz`` file (bit-exact round trip)."""
    path = os.fspath(path)
    arrays = {f"p{i}": a for i, a in enumerate(net.parameters())}
    meta = dict(
        version=np.array(CHECKPOINT_VERSION),
        layer_sizes=np.array(net.layer_sizes),
        layer_norm=np.array(net.layer_norm),
        eps=np.array(net.eps),
        seed=np.array(-1 if net.seed is None else net.seed),
    )
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(suffix=".npz", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **meta, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise StructureError(f"unsupported checkpoint version {version}")
        sizes = [int(s) for s in data["layer_sizes"]]
        layer_norm = bool(data["layer_norm"])
        seed = int(data["seed"])
        net = init(0, sizes, layer_norm=layer_norm)
        net.eps = float(data["eps"])
        net.seed = None if seed < 0 else seed
        for i, a in enumerate(net.parameters()):
            stored = data[f"p{i}"]
            if stored.shape != a.shape:
                raise StructureError(f"checkpoint parameter {i} has shape {stored.shape}, expected {a.shape}")
            a[...] = stored
    return net
