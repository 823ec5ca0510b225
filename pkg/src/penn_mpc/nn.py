"""Minimal dense-network engine: forward pass, exact backprop, Adam.

Sized for small MLPs in double precision with no ML-framework dependency.
Every operation is pure: inputs are never mutated and fresh arrays are
returned, so read-only parameter sharing across concurrent evaluations is
safe by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class LayerParams:
    """One affine layer: ``y = W x + b`` with W of shape (out_dim, in_dim)."""

    weights: np.ndarray
    biases: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy())


@dataclass
class MlpParams:
    """Stack of affine layers with one hidden activation applied between them.

    The final layer is always linear; ``activation`` applies to every hidden
    layer. ``seed`` records the value used at initialization.
    """

    layers: list[LayerParams]
    activation: str = "tanh"
    seed: int = 0

    @property
    def layer_sizes(self) -> list[int]:
        sizes = [self.layers[0].in_dim]
        sizes.extend(layer.out_dim for layer in self.layers)
        return sizes

    def copy(self) -> "MlpParams":
        return MlpParams([l.copy() for l in self.layers], self.activation, self.seed)


@dataclass
class ForwardCache:
    """Per-layer intermediates from one forward pass, enough for exact backprop.

    ``inputs[k]`` is the input to layer k, ``pre_acts[k]`` its affine output
    before the activation. ``squeeze`` records whether the original input was
    a single vector rather than a batch.
    """

    inputs: list[np.ndarray]
    pre_acts: list[np.ndarray]
    squeeze: bool


@dataclass
class AdamState:
    """Adam accumulators mirroring the parameter shapes, plus hyperparameters."""

    m: list[LayerParams]
    v: list[LayerParams]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        zeros = [LayerParams(np.zeros_like(l.weights), np.zeros_like(l.biases))
                 for l in params.layers]
        zeros2 = [l.copy() for l in zeros]
        return cls(m=zeros, v=zeros2, step=0, lr=lr, beta1=beta1, beta2=beta2,
                   epsilon=epsilon)


def init_params(layer_sizes: list[int], activation: str = "tanh",
                seed: int = 0) -> MlpParams:
    """Initialize an MLP with fan-in scaled uniform weights and zero biases.

    Weights are drawn from U(-sqrt(3/fan_in), +sqrt(3/fan_in)), which has
    variance exactly 1/fan_in. Deterministic given ``seed``.
    """
    if len(layer_sizes) < 2:
        raise ConfigError(f"need at least input and output sizes, got {layer_sizes}")
    if any(int(s) < 1 for s in layer_sizes):
        raise ConfigError(f"all layer sizes must be >= 1, got {layer_sizes}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(3.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(LayerParams(w, np.zeros(fan_out)))
    return MlpParams(layers=layers, activation=activation, seed=seed)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a vector or a (batch, in_dim) matrix.

    Returns the output (matching the input's ndim) and a cache for
    ``mlp_backward``.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layers[0].in_dim:
        raise ShapeError(
            f"input dim {x.shape[-1]} != first layer in_dim {params.layers[0].in_dim}")
    inputs, pre_acts = [], []
    h = x
    last = len(params.layers) - 1
    for k, layer in enumerate(params.layers):
        inputs.append(h)
        z = h @ layer.weights.T + layer.biases
        pre_acts.append(z)
        h = z if k == last else _activate(z, params.activation)
    out = h[0] if squeeze else h
    return out, ForwardCache(inputs=inputs, pre_acts=pre_acts, squeeze=squeeze)


def mlp_backward(params: MlpParams, cache: ForwardCache,
                 output_grad: np.ndarray) -> tuple[list[LayerParams], np.ndarray]:
    """Exact reverse-mode gradients for the scalar whose output gradient is given.

    ``output_grad`` has the shape of the forward output; for batches the
    parameter gradients are summed over the batch. Returns per-layer grads
    (in LayerParams containers) and the gradient w.r.t. the input.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    n_layers = len(params.layers)
    if len(cache.inputs) != n_layers:
        raise ShapeError("cache does not match network depth")
    if g.shape != cache.pre_acts[-1].shape:
        raise ShapeError(
            f"output_grad shape {g.shape} != output shape {cache.pre_acts[-1].shape}")
    grads: list[LayerParams] = [None] * n_layers  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        layer = params.layers[k]
        if cache.inputs[k].shape[1] != layer.in_dim:
            raise ShapeError("cache does not match layer shapes")
        if k != n_layers - 1:
            a = _activate(cache.pre_acts[k], params.activation)
            g = g * _activate_grad(cache.pre_acts[k], a, params.activation)
        grads[k] = LayerParams(g.T @ cache.inputs[k], g.sum(axis=0))
        g = g @ layer.weights
    input_grad = g[0] if cache.squeeze else g
    return grads, input_grad


def adam_step(params: MlpParams, grads: list[LayerParams],
              state: AdamState) -> tuple[MlpParams, AdamState]:
    """One Adam update with bias correction. Pure: returns new params/state.

    Raises TrainingError on non-finite gradients rather than clamping them.
    """
    if len(grads) != len(params.layers):
        raise ShapeError("gradient list does not match layer count")
    for g, p in zip(grads, params.layers):
        if g.weights.shape != p.weights.shape or g.biases.shape != p.biases.shape:
            raise ShapeError("gradient shapes do not mirror parameter shapes")
        if not (np.all(np.isfinite(g.weights)) and np.all(np.isfinite(g.biases))):
            raise TrainingError("non-finite gradient passed to adam_step")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_layers, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.layers, grads, state.m, state.v):
        mw = b1 * m.weights + (1 - b1) * g.weights
        mb = b1 * m.biases + (1 - b1) * g.biases
        vw = b2 * v.weights + (1 - b2) * g.weights ** 2
        vb = b2 * v.biases + (1 - b2) * g.biases ** 2
        w = p.weights - state.lr * (mw / corr1) / (np.sqrt(vw / corr2) + state.epsilon)
        b = p.biases - state.lr * (mb / corr1) / (np.sqrt(vb / corr2) + state.epsilon)
        new_layers.append(LayerParams(w, b))
        new_m.append(LayerParams(mw, mb))
        new_v.append(LayerParams(vw, vb))
    new_params = MlpParams(new_layers, params.activation, params.seed)
    new_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, epsilon=state.epsilon)
    return new_params, new_state
