"""The learnable field: encodings, shallow MLPs, and density/signal queries.

A field model couples a raw-density grid and a feature grid with two small
networks: a deformation net that turns the transmitter position into a
per-sample feature correction, and a radiance net that maps the corrected
feature plus emission direction to an emitted power in (0, 1). Forward and
backward passes are explicit so gradients are exact and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .voxel_grid import Aabb, VoxelGrid, init_grid, interpolate, interpolate_backward


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z: np.ndarray) -> np.ndarray:
    """ln(1 + e^z), stable for large |z|."""
    return np.logaddexp(0.0, np.asarray(z, dtype=np.float64))


@dataclass
class PositionalEncodingConfig:
    levels: int

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("encoding needs at least one level")

    def width(self, input_width: int) -> int:
        return 2 * self.levels * input_width


def positional_encode(p: np.ndarray, cfg: PositionalEncodingConfig) -> np.ndarray:
    """Sinusoidal encoding (sin(2^l pi p), cos(2^l pi p)) for l = 0..L-1.

    Applied independently to each input component; the raw components are not
    passed through. A (D,) input yields (2*L*D,), an (N, D) batch (N, 2*L*D);
    layout is component-major, then level, with sin before cos.
    """
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim <= 1
    arr = np.atleast_2d(arr)
    freqs = np.pi * (2.0 ** np.arange(cfg.levels))
    ang = arr[:, :, None] * freqs  # (N, D, L)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(arr.shape[0], -1)
    return out[0] if single else out


_ACTIVATIONS = ("relu", "identity", "sigmoid")


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    if name == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(z)
    if name == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    """Fully connected layers; weights are (out, in), biases (out,)."""

    weights: list
    biases: list
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must pair up")
        for act in (self.hidden_activation, self.output_activation):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i} weight/bias shapes inconsistent")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input width {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]


def mlp_init(layer_sizes, rng: np.random.Generator, hidden_activation: str = "relu",
             output_activation: str = "identity") -> Mlp:
    """Glorot-uniform weights, zero biases, drawn in layer order."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases, hidden_activation=hidden_activation,
               output_activation=output_activation)


def mlp_forward(mlp: Mlp, x: np.ndarray, want_cache: bool = False):
    """Evaluate the network on (N, in) rows; optionally keep the cache
    (per-layer inputs, pre-activations and outputs) needed for backprop."""
    a = np.asarray(x, dtype=np.float64)
    cache = []
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ w.T + b
        act = mlp.output_activation if i == last else mlp.hidden_activation
        out = _activate(act, z)
        if want_cache:
            cache.append((a, z, out, act))
        a = out
    return (a, cache) if want_cache else a


def mlp_backward(mlp: Mlp, cache, d_out: np.ndarray):
    """Backprop through a cached forward pass.

    Returns (weight_grads, bias_grads, d_input); gradients are fresh arrays in
    layer order.
    """
    grad_w = [None] * len(mlp.weights)
    grad_b = [None] * len(mlp.biases)
    delta = np.asarray(d_out, dtype=np.float64)
    for i in reversed(range(len(mlp.weights))):
        a, z, out, act = cache[i]
        delta = delta * _activate_grad(act, z, out)
        grad_w[i] = delta.T @ a
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ mlp.weights[i]
    return grad_w, grad_b, delta


@dataclass
class FieldModel:
    """Full learnable state: two grids, two shallow MLPs, and encodings."""

    density_grid: VoxelGrid
    feature_grid: VoxelGrid
    deform_net: Mlp
    radiance_net: Mlp
    enc_pos: PositionalEncodingConfig
    enc_dir: PositionalEncodingConfig
    density_bias: float = -3.0
    deform_enabled: bool = True

    def __post_init__(self):
        if self.density_grid.channels != 1:
            raise ValueError("density grid must have one channel")
        f = self.feature_grid.channels
        pos_w = self.enc_pos.width(3)
        dir_w = self.enc_dir.width(3)
        if self.deform_net.input_width != 2 * pos_w:
            raise ValueError(f"deformation net expects input {2 * pos_w}, "
                             f"got {self.deform_net.input_width}")
        if self.deform_net.output_width != f:
            raise ValueError("deformation net output width must equal feature dim")
        if self.radiance_net.input_width != f + dir_w:
            raise ValueError(f"radiance net expects input {f + dir_w}, "
                             f"got {self.radiance_net.input_width}")
        if self.radiance_net.output_width != 1:
            raise ValueError("radiance net must emit a single value")

    @property
    def feature_dim(self) -> int:
        return self.feature_grid.channels

    @property
    def bbox(self) -> Aabb:
        return self.density_grid.bbox

    def normalize_positions(self, p: np.ndarray) -> np.ndarray:
        """Map world positions into [-1, 1]^3 via the grid bbox (positions
        outside the box map outside the cube, which the encoding tolerates)."""
        box = self.bbox
        return 2.0 * (np.asarray(p, dtype=np.float64) - box.min_corner) / box.extent - 1.0

    def parameters(self) -> dict:
        """Named parameter tensors in the fixed optimizer/checkpoint order."""
        params = {
            "density_grid": self.density_grid.values,
            "feature_grid": self.feature_grid.values,
        }
        for tag, net in (("deform", self.deform_net), ("radiance", self.radiance_net)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                params[f"{tag}.w{i}"] = w
                params[f"{tag}.b{i}"] = b
        return params


@dataclass
class GradientSet:
    """One gradient buffer per FieldModel parameter tensor."""

    buffers: dict

    @classmethod
    def zeros_like(cls, model: FieldModel) -> "GradientSet":
        return cls({name: np.zeros_like(p) for name, p in model.parameters().items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self.buffers:
            raise KeyError(name)
        self.buffers[name] = value

    def check_finite(self):
        for name, g in self.buffers.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient in tensor {name!r}")


def init_field_model(bbox: Aabb, dims, feature_dim: int, hidden_width: int,
                     seed: int, density_bias: float = -3.0,
                     enc_pos_levels: int = 5, enc_dir_levels: int = 4) -> FieldModel:
    """Seeded construction: zero grids, Glorot MLPs, fixed draw order."""
    rng = np.random.default_rng(seed)
    enc_pos = PositionalEncodingConfig(enc_pos_levels)
    enc_dir = PositionalEncodingConfig(enc_dir_levels)
    pos_w = enc_pos.width(3)
    dir_w = enc_dir.width(3)
    deform = mlp_init([2 * pos_w, hidden_width, feature_dim], rng)
    radiance = mlp_init([feature_dim + dir_w, hidden_width, 1], rng,
                        output_activation="sigmoid")
    return FieldModel(
        density_grid=init_grid(dims, 1, bbox),
        feature_grid=init_grid(dims, feature_dim, bbox),
        deform_net=deform,
        radiance_net=radiance,
        enc_pos=enc_pos,
        enc_dir=enc_dir,
        density_bias=density_bias,
    )


def query_density(model: FieldModel, x: np.ndarray) -> np.ndarray:
    """Volume density softplus(raw + bias) at one point (scalar) or a batch (N,)."""
    single = np.asarray(x).ndim == 1
    raw = interpolate(model.density_grid, np.atleast_2d(x))[:, 0]
    sig = softplus(raw + model.density_bias)
    return float(sig[0]) if single else sig


def _check_unit(dirs: np.ndarray):
    norms = np.linalg.norm(np.atleast_2d(dirs), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"directions must be unit vectors, |dir| in "
                         f"[{norms.min():.8f}, {norms.max():.8f}]")


def signal_forward(model: FieldModel, feat: np.ndarray, enc_tx: np.ndarray,
                   enc_x: np.ndarray, enc_dir: np.ndarray, want_cache: bool = False):
    """Emitted power from pre-interpolated features and pre-computed encodings.

    The deformation net corrects the static feature for the transmitter
    position; the radiance net maps corrected feature plus emission-direction
    encoding through a sigmoid. Shapes: feat (N, F), enc_* (N, width).
    """
    if model.deform_enabled:
        de_in = np.concatenate([enc_tx, enc_x], axis=1)
        res = mlp_forward(model.deform_net, de_in, want_cache=want_cache)
        dfeat, de_cache = res if want_cache else (res, None)
        feat_sum = feat + dfeat
    else:
        de_cache = None
        feat_sum = feat
    rad_in = np.concatenate([feat_sum, enc_dir], axis=1)
    res = mlp_forward(model.radiance_net, rad_in, want_cache=want_cache)
    s, rad_cache = res if want_cache else (res, None)
    s = s[:, 0]
    if want_cache:
        return s, (de_cache, rad_cache)
    return s


def signal_backward(model: FieldModel, cache, d_signal: np.ndarray, grads: GradientSet):
    """Adjoint of signal_forward; accumulates MLP gradients, returns d_feat.

    The gradient of the corrected feature flows both to the static feature
    (returned, for the grid scatter) and through the deformation net.
    """
    de_cache, rad_cache = cache
    gw, gb, d_rad_in = mlp_backward(model.radiance_net, rad_cache,
                                    np.asarray(d_signal)[:, None])
    for i in range(len(gw)):
        grads[f"radiance.w{i}"] += gw[i]
        grads[f"radiance.b{i}"] += gb[i]
    f = model.feature_dim
    d_feat = d_rad_in[:, :f]
    if model.deform_enabled:
        gw, gb, _ = mlp_backward(model.deform_net, de_cache, d_feat)
        for i in range(len(gw)):
            grads[f"deform.w{i}"] += gw[i]
            grads[f"deform.b{i}"] += gb[i]
    return d_feat


def query_signal(model: FieldModel, x: np.ndarray, tx: np.ndarray,
                 direction: np.ndarray) -> np.ndarray:
    """Emitted power S in (0, 1) at sample x toward `direction` (the emission
    direction: from the sample toward the receiver, i.e. the negated ray
    direction), conditioned on transmitter position tx.

    x, tx, direction broadcast between (3,) and (N, 3); scalar in, scalar out.
    """
    single = np.asarray(x).ndim == 1 and np.asarray(direction).ndim == 1
    _check_unit(direction)
    xs = np.atleast_2d(x)
    n = xs.shape[0]
    txs = np.broadcast_to(np.atleast_2d(tx), (n, 3))
    dirs = np.broadcast_to(np.atleast_2d(direction), (n, 3))
    feat = interpolate(model.feature_grid, xs)
    enc_tx = positional_encode(model.normalize_positions(txs), model.enc_pos)
    enc_x = positional_encode(model.normalize_positions(xs), model.enc_pos)
    enc_d = positional_encode(dirs, model.enc_dir)
    s = signal_forward(model, feat, enc_tx, enc_x, enc_d)
    return float(s[0]) if single else s


def model_backward(model: FieldModel, x: np.ndarray, tx: np.ndarray,
                   direction: np.ndarray, d_sigma: np.ndarray, d_signal: np.ndarray,
                   grads: GradientSet) -> None:
    """Accumulate parameter gradients for a batch of samples.

    d_sigma and d_signal are the loss gradients with respect to the density
    and signal outputs of each sample; both propagate through the activation
    derivatives, the MLPs, and the trilinear scatters.
    """
    _check_unit(direction)
    xs = np.atleast_2d(x)
    n = xs.shape[0]
    d_sigma = np.broadcast_to(np.asarray(d_sigma, dtype=np.float64).reshape(-1), (n,))
    d_signal = np.broadcast_to(np.asarray(d_signal, dtype=np.float64).reshape(-1), (n,))
    txs = np.broadcast_to(np.atleast_2d(tx), (n, 3))
    dirs = np.broadcast_to(np.atleast_2d(direction), (n, 3))

    # density path: d(raw) = d_sigma * softplus'(raw + bias)
    raw = interpolate(model.density_grid, xs)[:, 0]
    d_raw = d_sigma * sigmoid(raw + model.density_bias)
    interpolate_backward(model.density_grid, xs, d_raw[:, None], grads["density_grid"])

    # signal path
    feat = interpolate(model.feature_grid, xs)
    enc_tx = positional_encode(model.normalize_positions(txs), model.enc_pos)
    enc_x = positional_encode(model.normalize_positions(xs), model.enc_pos)
    enc_d = positional_encode(dirs, model.enc_dir)
    _, cache = signal_forward(model, feat, enc_tx, enc_x, enc_d, want_cache=True)
    d_feat = signal_backward(model, cache, d_signal, grads)
    interpolate_backward(model.feature_grid, xs, d_feat, grads["feature_grid"])
