"""Dense feedforward networks with exact analytic gradients.

This is the gradient engine the rest of the package is built on. It is
deliberately small: dense layers only, float64 only, and gradients are
computed both for parameters and for inputs (input gradients are what the
sampling-time guidance differentiates through). `forward` is pure; a
`ForwardCache` from one forward call feeds exactly one `backward` call.

Conventions: samples are rows, so a network mapping R^a -> R^b consumes
(n, a) arrays and produces (n, b). Weights are stored (out, in).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("identity", "tanh", "relu", "sigmoid")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("dense layer expects 2-D weights and 1-D bias")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match "
                f"output dim {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class FeedforwardNet:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        """Flat list [W1, b1, W2, b2, ...]; entries are live views."""
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out


@dataclass
class ForwardCache:
    x: np.ndarray
    inputs: list[np.ndarray]  # input to each layer
    pres: list[np.ndarray]  # pre-activation of each layer
    out: np.ndarray


@dataclass
class GradCheckReport:
    max_rel_error: float
    argmax_index: int
    step: float
    n_checked: int
    n_excluded: int


def init_net(dims, activations, rng: np.random.Generator) -> FeedforwardNet:
    """Build a net with Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out)))."""
    if len(activations) != len(dims) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return FeedforwardNet(layers)


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-pre))
    raise ShapeError(f"unknown activation {name!r}")


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """d(post)/d(pre), elementwise. ReLU subgradient at 0 is defined as 0."""
    if name == "identity":
        return np.ones_like(pre)
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "sigmoid":
        return post * (1.0 - post)
    raise ShapeError(f"unknown activation {name!r}")


def forward(net: FeedforwardNet, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the net on a batch of row vectors.

    Pure function of (net, x): no RNG, no mutation; repeated calls are
    bit-identical. The returned cache is sufficient for one exact
    backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(
            f"input shape {x.shape} incompatible with input dim {net.input_dim}"
        )
    inputs, pres = [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        pre = h @ layer.weights.T + layer.bias
        pres.append(pre)
        h = _activate(layer.activation, pre)
    return h, ForwardCache(x=x, inputs=inputs, pres=pres, out=h)


def backward(
    net: FeedforwardNet, cache: ForwardCache, dl_dy: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact gradients of a scalar loss given dL/d(output).

    Returns (param_grads, dL/dx) where param_grads[i] = (dW_i, db_i).
    No batch averaging happens here; the gradient is exact for whatever
    scalar produced `dl_dy`.
    """
    if len(cache.inputs) != len(net.layers):
        raise ShapeError("cache does not match this network (layer count)")
    dl_dy = np.asarray(dl_dy, dtype=np.float64)
    if dl_dy.shape != cache.out.shape:
        raise ShapeError(
            f"dl_dy shape {dl_dy.shape} does not match output {cache.out.shape}"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    g = dl_dy
    post = cache.out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        pre = cache.pres[i]
        if pre.shape[1] != layer.out_dim or cache.inputs[i].shape[1] != layer.in_dim:
            raise ShapeError("cache does not match this network (layer shapes)")
        dpre = g * _activation_grad(layer.activation, pre, post)
        grads[i] = (dpre.T @ cache.inputs[i], dpre.sum(axis=0))
        g = dpre @ layer.weights
        post = cache.inputs[i]
    return grads, g


def zeros_like_params(net: FeedforwardNet) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in net.params()]


def add_param_grads(total, grads):
    """Accumulate backward() output into a flat [dW1, db1, ...] list."""
    flat = []
    for dw, db in grads:
        flat.append(dw)
        flat.append(db)
    for acc, g in zip(total, flat):
        acc += g
    return total


def get_params_flat(net: FeedforwardNet) -> np.ndarray:
    return np.concatenate([p.ravel() for p in net.params()])


def set_params_flat(net: FeedforwardNet, vec: np.ndarray) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    for p in net.params():
        p[...] = vec[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != vec.size:
        raise ShapeError("parameter vector length mismatch")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeError("adam buffers/params/grads length mismatch")
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def sgd_step(lr: float, params: list[np.ndarray],
             grads: list[np.ndarray]) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise ShapeError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        p -= lr * g
    return params


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of 1-based timesteps.

    Frequencies are omega_k = 10000^(-2k/dim) for k = 0..dim/2-1 and the
    output is [sin(omega*t), cos(omega*t)] concatenated, so its norm is
    sqrt(dim/2). Accepts a scalar (returns (dim,)) or a vector of
    timesteps (returns (len(t), dim)).
    """
    if dim < 2 or dim % 2 != 0:
        raise ShapeError("embedding dim must be even and >= 2")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 1):
        raise ShapeError("timesteps are 1-based; got t < 1")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    phase = np.multiply.outer(t_arr, omega)
    emb = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
    return emb


def finite_diff_check(loss_and_grad, x: np.ndarray, step: float = 1e-5,
                      exclude: np.ndarray | None = None,
                      atol: float = 1e-7) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    `loss_and_grad(x)` must return (scalar loss, gradient array of x.shape)
    and be deterministic. `exclude` optionally masks coordinates (e.g. ones
    within a kink of a piecewise-linear activation) out of the comparison;
    they are counted, not failed. Coordinates where both gradients are
    below `atol` count as agreeing: for an exactly-invariant direction the
    finite-difference estimate is rounding noise and the relative error
    would compare noise against noise.
    """
    x = np.asarray(x, dtype=np.float64)
    loss0, g_analytic = loss_and_grad(x)
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite at the expansion point")
    g_analytic = np.asarray(g_analytic, dtype=np.float64)
    if g_analytic.shape != x.shape:
        raise ShapeError("analytic gradient shape does not match input")
    if exclude is None:
        exclude = np.zeros(x.shape, dtype=bool)
    flat_x = x.ravel()
    flat_ex = np.asarray(exclude, dtype=bool).ravel()
    g_fd = np.zeros_like(flat_x)
    for i in range(flat_x.size):
        if flat_ex[i]:
            continue
        xp = flat_x.copy()
        xp[i] += step
        lp, _ = loss_and_grad(xp.reshape(x.shape))
        xm = flat_x.copy()
        xm[i] -= step
        lm, _ = loss_and_grad(xm.reshape(x.shape))
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        g_fd[i] = (lp - lm) / (2.0 * step)
    rel = np.abs(g_analytic.ravel() - g_fd) / np.maximum(1e-12, np.abs(g_fd))
    rel[flat_ex] = 0.0
    both_tiny = (np.abs(g_analytic.ravel()) < atol) & (np.abs(g_fd) < atol)
    rel[both_tiny] = 0.0
    checked = int((~flat_ex).sum())
    if checked == 0:
        return GradCheckReport(0.0, -1, step, 0, int(flat_ex.sum()))
    idx = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_error=float(rel[idx]),
        argmax_index=idx,
        step=step,
        n_checked=checked,
        n_excluded=int(flat_ex.sum()),
    )


def relu_kink_mask(net: FeedforwardNet, x: np.ndarray, tol: float) -> np.ndarray:
    """Mark input coordinates whose perturbation may cross a ReLU kink.

    A coordinate is suspect when some ReLU pre-activation sits within
    `tol * (1 + |row weight sum|)` of zero; used to exclude kink
    coordinates from finite-difference comparisons.
    """
    _, cache = forward(net, x)
    mask = np.zeros_like(np.asarray(x, dtype=np.float64), dtype=bool)
    for layer, pre in zip(net.layers, cache.pres):
        if layer.activation != "relu":
            continue
        near = np.abs(pre) < tol * (1.0 + np.abs(layer.weights).sum())
        if near.any():
            mask[np.any(near, axis=1), :] = True
    return mask
