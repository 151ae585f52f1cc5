"""Minimal dense network with hand-derived reverse-mode gradients.

This is the only differentiable substrate in the repo: a fully connected
tanh MLP whose parameters live in one flat float64 vector, a taped
forward pass, an exact backward pass, an AdamW-style optimizer and
gradient-norm clipping. Everything is batched over the leading axis and
pure: forward/backward never mutate the parameter vector, and the
optimizer returns fresh arrays instead of updating in place.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, TapeError

Array = np.ndarray

ACTIVATIONS = ("tanh",)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network; fixed after construction."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}"
            )

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i + 1] * (dims[i] + 1) for i in range(len(dims) - 1))


def unflatten_params(spec: MlpSpec, params: Array) -> list[tuple[Array, Array]]:
    """Views (W, b) per layer from the flat vector.

    Layout is layer-major: for each layer, W (out x in, row-major) then b.
    The returned arrays are views into ``params``; the mapping is a
    bijection with (layer, row, col) indices.
    """
    params = np.asarray(params)
    if params.shape != (spec.param_count,):
        raise ShapeError(
            f"expected flat parameter vector of length {spec.param_count}, "
            f"got shape {params.shape}"
        )
    layers = []
    dims = spec.layer_dims
    off = 0
    for i in range(len(dims) - 1):
        n_out, n_in = dims[i + 1], dims[i]
        w = params[off : off + n_out * n_in].reshape(n_out, n_in)
        off += n_out * n_in
        b = params[off : off + n_out]
        off += n_out
        layers.append((w, b))
    return layers


def flatten_params(spec: MlpSpec, layers: list[tuple[Array, Array]]) -> Array:
    """Inverse of :func:`unflatten_params`; concatenates (W, b) pairs."""
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    flat = np.concatenate(parts)
    if flat.shape != (spec.param_count,):
        raise ShapeError("layer shapes do not match the spec")
    return flat


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Array:
    """Gaussian fan-in scaled weights, zero biases."""
    dims = spec.layer_dims
    layers = []
    for i in range(len(dims) - 1):
        n_out, n_in = dims[i + 1], dims[i]
        w = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
        layers.append((w, np.zeros(n_out)))
    return flatten_params(spec, layers)


@dataclass
class Tape:
    """Activation record from one forward call, consumed by mlp_backward."""

    spec: MlpSpec
    layers: list[tuple[Array, Array]]
    activations: list[Array]  # layer inputs: x, then each post-tanh hidden
    output: Array
    squeezed: bool


def mlp_forward(spec: MlpSpec, params: Array, x: Array) -> tuple[Array, Tape]:
    """Run the network on one input vector or a batch of rows.

    Returns the output and a tape sufficient for an exact backward pass.
    Hidden layers apply tanh; the output layer is linear.
    """
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(
            f"input must have {spec.input_dim} features, got shape {x.shape}"
        )
    layers = unflatten_params(spec, params)
    activations = [x]
    a = x
    for w, b in layers[:-1]:
        a = np.tanh(a @ w.T + b)
        activations.append(a)
    w_out, b_out = layers[-1]
    y = a @ w_out.T + b_out
    tape = Tape(spec=spec, layers=layers, activations=activations, output=y,
                squeezed=squeezed)
    return (y[0] if squeezed else y), tape


def mlp_backward(tape: Tape, output_cotangent: Array) -> tuple[Array, Array]:
    """Exact reverse-mode gradient of <output, cotangent> w.r.t. params.

    The cotangent must match the taped output shape; gradients are summed
    over batch rows. Returns (flat parameter gradient, input cotangent).
    """
    cot = np.asarray(output_cotangent, dtype=np.float64)
    if tape.squeezed and cot.ndim == 1:
        cot = cot[None, :]
    expected = (tape.activations[0].shape[0], tape.spec.output_dim)
    if cot.shape != expected:
        raise TapeError(
            f"cotangent shape {cot.shape} does not match taped output {expected}"
        )
    spec = tape.spec
    grad = np.zeros(spec.param_count)
    grad_layers = unflatten_params(spec, grad)

    # Output layer is linear.
    w_out, _ = tape.layers[-1]
    gw, gb = grad_layers[-1]
    gw += cot.T @ tape.activations[-1]
    gb += cot.sum(axis=0)
    da = cot @ w_out

    # Hidden layers in reverse; activations[k+1] = tanh pre-activation output.
    for k in range(len(tape.layers) - 2, -1, -1):
        a_out = tape.activations[k + 1]
        dz = da * (1.0 - a_out * a_out)
        w, _ = tape.layers[k]
        gw, gb = grad_layers[k]
        gw += dz.T @ tape.activations[k]
        gb += dz.sum(axis=0)
        da = dz @ w

    dx = da[0] if tape.squeezed else da
    return grad, dx


@dataclass(frozen=True)
class AdamWState:
    """Optimizer moments plus hyperparameters; step_count starts at 0."""

    first_moment: Array
    second_moment: Array
    step_count: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8


def init_adamw(
    n_params: int,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_num: float = 1e-8,
) -> AdamWState:
    if lr < 0 or weight_decay < 0:
        raise ConfigError("lr and weight_decay must be non-negative")
    return AdamWState(
        first_moment=np.zeros(n_params),
        second_moment=np.zeros(n_params),
        step_count=0,
        lr=lr,
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        eps_num=eps_num,
    )


def adamw_step(state: AdamWState, params: Array, grad: Array) -> tuple[Array, AdamWState]:
    """One decoupled-weight-decay adaptive update; returns new arrays.

    Refuses the update (NumericError) if any gradient entry is non-finite.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise ShapeError(
            f"params {params.shape}, grad {grad.shape} and state "
            f"{state.first_moment.shape} must have identical shapes"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError("refusing update: gradient has non-finite entries")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * (
        m_hat / (np.sqrt(v_hat) + state.eps_num) + state.weight_decay * params
    )
    new_state = replace(state, first_moment=m, second_moment=v, step_count=t)
    return new_params, new_state


def clip_grad_norm(grad: Array, max_norm: float) -> Array:
    """Scale the vector so its L2 norm is at most max_norm.

    A small relative tolerance makes repeated application a no-op, so
    clipping is exactly idempotent despite rounding in the rescale.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if norm <= max_norm * (1.0 + 1e-12):
        return grad.copy()
    return grad * (max_norm / norm)


def encode_params(spec: MlpSpec, params: Array) -> bytes:
    """Checkpoint payload: one ASCII header line, then little-endian float64.

    Header fields: magic, input_dim, comma-joined hidden dims ('-' if none),
    output_dim, activation, parameter count. Round-trips losslessly.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ShapeError("parameter vector does not match the spec")
    hidden = ",".join(str(h) for h in spec.hidden_dims) or "-"
    header = (
        f"nncp1 {spec.input_dim} {hidden} {spec.output_dim} "
        f"{spec.activation} {spec.param_count}\n"
    )
    return header.encode("ascii") + params.astype("<f8").tobytes()


def decode_params(data: bytes) -> tuple[MlpSpec, Array]:
    newline = data.find(b"\n")
    header = data[: newline if newline >= 0 else 0].decode("ascii", "replace").split()
    if len(header) != 6 or header[0] != "nncp1":
        raise ConfigError("not a parameter checkpoint")
    hidden = () if header[2] == "-" else tuple(int(h) for h in header[2].split(","))
    spec = MlpSpec(
        input_dim=int(header[1]),
        hidden_dims=hidden,
        output_dim=int(header[3]),
        activation=header[4],
    )
    count = int(header[5])
    params = np.frombuffer(data[newline + 1 :], dtype="<f8").astype(np.float64)
    if count != spec.param_count or params.shape != (count,):
        raise ConfigError("checkpoint length does not match its header")
    return spec, params


def save_params(path, spec: MlpSpec, params: Array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_params(spec, params))


def load_params(path) -> tuple[MlpSpec, Array]:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_params(data)
    except ConfigError as exc:
        raise ConfigError(f"{exc}: {path}") from None
