"""Fully connected networks with hand-written reverse-mode differentiation.

Everything runs in float64. A forward pass returns a :class:`Tape` holding the
activations needed to backpropagate to both parameters and inputs. The
gradient-penalty path (:func:`grad_norm_penalty`) differentiates the norm of an
input gradient with respect to the parameters, which is the only second-order
pattern the adversarial objectives need.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, TrainingError, UsageError

HEADS = ("sigmoid", "linear")
OPTIMIZERS = ("adam", "rmsprop")

# guard inside the penalty's sqrt so the derivative at a zero gradient stays finite
NORM_EPS = 1e-12
# float64 expit rounds to exactly 0 or 1 for |logit| > ~37; keep the head open
_P_LO = np.finfo(np.float64).tiny
_P_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation_slope: float = 0.01
    output_head: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}")
        if not 0.0 < self.activation_slope < 1.0:
            raise ConfigError(f"activation_slope must be in (0, 1), got {self.activation_slope}")
        if self.output_head not in HEADS:
            raise ConfigError(f"output_head must be one of {HEADS}, got {self.output_head!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class ParamStore:
    """Ordered ``(weight, bias)`` blocks; weight is ``out x in``.

    Gradients and optimizer moments reuse this type so they line up with the
    parameters they belong to.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]

    def arrays(self) -> Iterator[np.ndarray]:
        for w, b in self.layers:
            yield w
            yield b

    def copy(self) -> "ParamStore":
        return ParamStore([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> "ParamStore":
        return ParamStore([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def iadd(self, other: "ParamStore", alpha: float = 1.0) -> "ParamStore":
        for (w, b), (ow, ob) in zip(self.layers, other.layers):
            w += alpha * ow
            b += alpha * ob
        return self

    def scale(self, alpha: float) -> "ParamStore":
        for w, b in self.layers:
            w *= alpha
            b *= alpha
        return self

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "ParamStore") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        return all(a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.arrays(), other.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def update_digest(self, h) -> None:
        for a in self.arrays():
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())

    def checksum(self) -> str:
        h = hashlib.sha256()
        self.update_digest(h)
        return h.hexdigest()


def leaky_relu(x, slope: float = 0.01):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def mlp_init(spec: MlpSpec, seed: int) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if not isinstance(spec, MlpSpec):
        raise ConfigError("mlp_init expects an MlpSpec")
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return ParamStore(layers)


class Tape:
    """Activations recorded by :func:`forward`; single use."""

    def __init__(self, params: ParamStore, spec: MlpSpec, inputs: list[np.ndarray],
                 masks: list[np.ndarray], logits: np.ndarray, output: np.ndarray):
        self.params = params
        self.spec = spec
        self.inputs = inputs      # input to each layer
        self.masks = masks        # leaky-relu derivative of each hidden layer
        self.logits = logits      # last layer before the output head
        self.output = output
        self.consumed = False

    def backward(self, grad_output, *, wrt: str = "output",
                 need_param_grads: bool = True) -> tuple[ParamStore | None, np.ndarray]:
        """Vector-Jacobian product for a loss whose gradient w.r.t. the output is
        ``grad_output`` (a scalar broadcasts, i.e. loss = seed * sum(output)).

        ``wrt="logits"`` treats ``grad_output`` as the gradient with respect to
        the pre-head values, which lets log-losses skip the sigmoid derivative.
        """
        if self.consumed:
            raise UsageError("backward called twice on the same tape")
        self.consumed = True
        g = np.broadcast_to(np.asarray(grad_output, dtype=np.float64), self.output.shape)
        if wrt == "output":
            if self.spec.output_head == "sigmoid":
                g = g * self.output * (1.0 - self.output)
        elif wrt != "logits":
            raise ContractError(f"wrt must be 'output' or 'logits', got {wrt!r}")
        return _backprop(self.params, self.inputs, self.masks, np.array(g), need_param_grads)


def _backprop(params: ParamStore, inputs, masks, g, need_param_grads):
    grads = [None] * len(params.layers) if need_param_grads else None
    for i in range(len(params.layers) - 1, -1, -1):
        w = params.layers[i][0]
        if need_param_grads:
            grads[i] = (g.T @ inputs[i], g.sum(axis=0))
        g = g @ w
        if i > 0:
            g = g * masks[i - 1]
    return (ParamStore(grads) if need_param_grads else None), g


def forward(params: ParamStore, spec: MlpSpec, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ContractError(f"expected input of shape (B, {spec.in_dim}), got {x.shape}")
    if len(params.layers) != spec.n_layers:
        raise ContractError("parameter store does not match the network spec")
    slope = spec.activation_slope
    last = spec.n_layers - 1
    inputs, masks = [x], []
    h = x
    for i, (w, b) in enumerate(params.layers):
        a = h @ w.T + b
        if i < last:
            m = np.where(a >= 0, 1.0, slope)
            h = a * m
            masks.append(m)
            inputs.append(h)
        else:
            logits = a
    if spec.output_head == "sigmoid":
        output = np.clip(expit(logits), _P_LO, _P_HI)
    else:
        output = logits
    return output, Tape(params, spec, inputs, masks, logits, output)


def backward(tape: Tape, loss_grad=1.0, **kwargs) -> tuple[ParamStore | None, np.ndarray]:
    return tape.backward(loss_grad, **kwargs)


class PenaltyTape:
    """Reverse pass for the gradient-norm penalty with respect to parameters."""

    def __init__(self, params: ParamStore, spec: MlpSpec, tape: Tape,
                 deltas: list[np.ndarray], dpen_dg: np.ndarray):
        self.params = params
        self.spec = spec
        self._tape = tape
        self._deltas = deltas
        self._dpen_dg = dpen_dg
        self.consumed = False

    def backward(self, seed: float = 1.0) -> ParamStore:
        if self.consumed:
            raise UsageError("backward called twice on the same penalty tape")
        self.consumed = True
        tape, layers = self._tape, self.params.layers
        n = len(layers)
        gw = [np.zeros_like(w) for w, _ in layers]
        gb = [np.zeros_like(b) for _, b in layers]

        # Input gradient chain: e_{i} = delta_{i} @ W_i, delta_{i-1} = e_i * mask_{i-1}.
        # Leaky-relu masks are piecewise constant, so only W and the head
        # curvature carry second-order terms.
        e_bar = seed * self._dpen_dg
        delta_bar_last = None
        for i in range(n):
            w = layers[i][0]
            gw[i] += self._deltas[i].T @ e_bar
            d_bar = e_bar @ w.T
            if i < n - 1:
                e_bar = d_bar * tape.masks[i]
            else:
                delta_bar_last = d_bar

        if self.spec.output_head == "sigmoid":
            s = tape.output
            logit_bar = delta_bar_last * s * (1.0 - s) * (1.0 - 2.0 * s)
            more, _ = _backprop(self.params, tape.inputs, tape.masks, logit_bar, True)
            for i, (w, b) in enumerate(more.layers):
                gw[i] += w
                gb[i] += b
        return ParamStore(list(zip(gw, gb)))


def input_gradient(params: ParamStore, spec: MlpSpec, x) -> tuple[np.ndarray, Tape, list[np.ndarray]]:
    """Gradient of a scalar-output network w.r.t. each input row.

    Also returns the per-layer backward signals, which the penalty needs.
    """
    if spec.out_dim != 1:
        raise ContractError("input gradient requires a scalar-output network")
    out, tape = forward(params, spec, x)
    if spec.output_head == "sigmoid":
        delta = out * (1.0 - out)
    else:
        delta = np.ones_like(out)
    n = spec.n_layers
    deltas = [None] * n
    deltas[n - 1] = delta
    for i in range(n - 1, -1, -1):
        e = delta @ params.layers[i][0]
        if i > 0:
            delta = e * tape.masks[i - 1]
            deltas[i - 1] = delta
    return e, tape, deltas


def grad_norm_penalty(params: ParamStore, spec: MlpSpec, points, target: float = 1.0
                      ) -> tuple[float, PenaltyTape]:
    """mean_b (||grad_x D(x_b)|| - target)^2, with a tape for d/d(params)."""
    g, tape, deltas = input_gradient(params, spec, points)
    norm = np.sqrt(np.sum(g * g, axis=1, keepdims=True) + NORM_EPS)
    dev = norm - target
    value = float(np.mean(dev ** 2))
    dpen_dg = (2.0 / g.shape[0]) * dev / norm * g
    return value, PenaltyTape(params, spec, tape, deltas, dpen_dg)


@dataclass
class OptimizerState:
    kind: str
    lr: float
    first_moment: ParamStore | None
    second_moment: ParamStore
    step_count: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.99

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            kind=self.kind, lr=self.lr,
            first_moment=None if self.first_moment is None else self.first_moment.copy(),
            second_moment=self.second_moment.copy(), step_count=self.step_count,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, decay=self.decay,
        )

    def reset(self) -> None:
        if self.first_moment is not None:
            self.first_moment.scale(0.0)
        self.second_moment.scale(0.0)
        self.step_count = 0

    def update_digest(self, h) -> None:
        h.update(f"{self.kind}:{self.step_count}".encode())
        if self.first_moment is not None:
            self.first_moment.update_digest(h)
        self.second_moment.update_digest(h)


def make_optimizer(kind: str, params: ParamStore, lr: float = 1e-5, *, beta1: float = 0.5,
                   beta2: float = 0.999, eps: float = 1e-8, decay: float = 0.99) -> OptimizerState:
    if kind not in OPTIMIZERS:
        raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    return OptimizerState(
        kind=kind, lr=lr,
        first_moment=params.zeros_like() if kind == "adam" else None,
        second_moment=params.zeros_like(),
        beta1=beta1, beta2=beta2, eps=eps, decay=decay,
    )


def optimizer_step(state: OptimizerState, params: ParamStore, grads: ParamStore,
                   *, context: dict | None = None) -> tuple[ParamStore, OptimizerState]:
    """Apply one Adam or RMSProp step in place; returns ``(params, state)``."""
    if not grads.is_finite():
        ctx = context or {}
        raise TrainingError(
            f"non-finite gradient at optimizer step {state.step_count + 1}",
            pair_index=ctx.get("pair_index"), iteration=ctx.get("iteration"),
            phase=ctx.get("phase"),
        )
    state.step_count += 1
    t = state.step_count
    if state.kind == "adam":
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for (p_w, p_b), (g_w, g_b), (m_w, m_b), (v_w, v_b) in zip(
                params.layers, grads.layers, state.first_moment.layers, state.second_moment.layers):
            for p, g, m, v in ((p_w, g_w, m_w, v_w), (p_b, g_b, m_b, v_b)):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    else:
        rho = state.decay
        for (p_w, p_b), (g_w, g_b), (v_w, v_b) in zip(
                params.layers, grads.layers, state.second_moment.layers):
            for p, g, v in ((p_w, g_w, v_w), (p_b, g_b, v_b)):
                v *= rho
                v += (1.0 - rho) * (g * g)
                p -= state.lr * g / (np.sqrt(v) + state.eps)
    return params, state


def clone_params(params: ParamStore, state: OptimizerState) -> tuple[ParamStore, OptimizerState]:
    return params.copy(), state.copy()


@dataclass
class Net:
    """A network bundled with its optimizer state."""

    spec: MlpSpec
    params: ParamStore
    opt: OptimizerState
    name: str = field(default="", compare=False)

    def __call__(self, x) -> np.ndarray:
        return forward(self.params, self.spec, x)[0]

    def forward(self, x) -> tuple[np.ndarray, Tape]:
        return forward(self.params, self.spec, x)

    def step(self, grads: ParamStore, context: dict | None = None) -> None:
        optimizer_step(self.opt, self.params, grads, context=context)

    def clone(self, name: str | None = None) -> "Net":
        params, opt = clone_params(self.params, self.opt)
        return Net(self.spec, params, opt, self.name if name is None else name)

    def checksum(self) -> str:
        """Digest over parameters, moments and step count."""
        h = hashlib.sha256()
        self.params.update_digest(h)
        self.opt.update_digest(h)
        return h.hexdigest()


def build_net(spec: MlpSpec, seed: int, optimizer: str = "adam", lr: float = 1e-5,
              name: str = "", **opt_kwargs) -> Net:
    params = mlp_init(spec, seed)
    return Net(spec, params, make_optimizer(optimizer, params, lr, **opt_kwargs), name)
