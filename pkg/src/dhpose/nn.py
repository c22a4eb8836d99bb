"""Fully connected nets on the autodiff tape, analytic input gradients for
the gradient penalty, the Adam optimizer, and checkpoint serialization.

The penalty term needs d(|grad_x D|)/d(params), i.e. gradients of a
gradient.  Rather than a higher-order tape, the input gradient is built
*as tape operations* (transposed weight products and activation
derivatives), so one ordinary backward pass differentiates it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor

ACTIVATIONS = ("tanh", "lrelu", "linear")
LRELU_SLOPE = 0.2


@dataclass
class LayerSpec:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    act: str = "linear"

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}; expected one of {ACTIVATIONS}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ShapeError(f"layer shapes disagree: w {self.w.shape}, b {self.b.shape}")


@dataclass
class Mlp:
    layers: list[LayerSpec]

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[1]


def mlp_init(sizes: Sequence[int], acts: Sequence[str], rng: np.random.Generator) -> Mlp:
    """Layers sized ``sizes[i] -> sizes[i+1]`` with scaled-normal weights."""
    if len(acts) != len(sizes) - 1:
        raise ValueError(f"need {len(sizes) - 1} activations, got {len(acts)}")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append(LayerSpec(w=w, b=np.zeros(fan_out), act=act))
    return Mlp(layers)


def mlp_eval(net: Mlp, x) -> np.ndarray:
    """Plain numpy forward pass (inference path, no tape)."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.in_dim:
        raise ShapeError(f"input {h.shape} does not match first layer "
                         f"({net.in_dim} features expected)")
    for layer in net.layers:
        z = h @ layer.w + layer.b
        if layer.act == "tanh":
            h = np.tanh(z)
        elif layer.act == "lrelu":
            h = np.where(z >= 0.0, z, LRELU_SLOPE * z)
        else:
            h = z
    return h


def mlp_params(net: Mlp, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(net.layers):
        out[f"{prefix}l{i}.w"] = layer.w
        out[f"{prefix}l{i}.b"] = layer.b
    return out


def mlp_set_params(net: Mlp, values: dict[str, np.ndarray], prefix: str = "") -> None:
    for i, layer in enumerate(net.layers):
        layer.w = values[f"{prefix}l{i}.w"]
        layer.b = values[f"{prefix}l{i}.b"]


def mlp_leaves(tape: Tape, net: Mlp, prefix: str = "") -> dict[str, Tensor]:
    """Differentiable leaves for every weight and bias."""
    return {k: tape.var(v, name=k) for k, v in mlp_params(net, prefix).items()}


def _layer_tensors(tape: Tape, net: Mlp, params: Optional[dict], prefix: str):
    out = []
    for i, layer in enumerate(net.layers):
        if params is None:
            out.append((tape.const(layer.w), tape.const(layer.b), layer.act))
        else:
            out.append((params[f"{prefix}l{i}.w"], params[f"{prefix}l{i}.b"], layer.act))
    return out


def _activate(z: Tensor, act: str) -> Tensor:
    if act == "tanh":
        return ad.tanh(z)
    if act == "lrelu":
        return ad.leaky_relu(z, LRELU_SLOPE)
    return z


def mlp_apply(net: Mlp, x: Tensor, tape: Tape, params: Optional[dict] = None,
              prefix: str = "") -> tuple[Tensor, list]:
    """Forward pass returning the output and a per-layer trace.

    The trace holds ``(w, z, h, act)`` per layer so the analytic input
    gradient can reuse the recorded intermediates.
    """
    if x.values.ndim != 2 or x.values.shape[1] != net.in_dim:
        raise ShapeError(f"input {x.values.shape} does not match first layer "
                         f"({net.in_dim} features expected)")
    trace = []
    h = x
    for w, b, act in _layer_tensors(tape, net, params, prefix):
        z = ad.add(ad.matmul(h, w), b)
        h = _activate(z, act)
        trace.append((w, z, h, act))
    return h, trace


def mlp_forward(net: Mlp, x, tape: Tape, params: Optional[dict] = None,
                prefix: str = "") -> Tensor:
    """Affine-then-activation stack; all intermediates recorded on the tape."""
    if not isinstance(x, Tensor):
        x = tape.const(np.asarray(x, dtype=np.float64))
    out, _ = mlp_apply(net, x, tape, params, prefix)
    return out


def mlp_vjp(trace: list, upstream: Tensor) -> Tensor:
    """Pull ``upstream`` back through a recorded forward trace, as tape ops.

    Returns d(upstream . out)/dx with shape (batch, in_dim).  Only tanh and
    leaky-relu hidden activations admit the double-backprop construction.
    """
    g = upstream
    for w, z, h, act in reversed(trace):
        if act == "tanh":
            g = ad.mul(g, ad.sub(1.0, ad.square(h)))
        elif act == "lrelu":
            mask = np.where(z.values >= 0.0, 1.0, LRELU_SLOPE)
            g = ad.mul(g, z.tape.const(mask))
        elif act != "linear":
            raise ValueError(f"activation {act!r} does not support double backprop")
        g = ad.matmul(g, ad.transpose2d(w))
    return g


def input_gradient(net: Mlp, x, tape: Tape, params: Optional[dict] = None,
                   prefix: str = "", upstream: Optional[Tensor] = None) -> Tensor:
    """Gradient of the net's scalar output with respect to its input.

    Built from graph operations, so the result stays differentiable with
    respect to the net parameters.
    """
    if not isinstance(x, Tensor):
        x = tape.const(np.asarray(x, dtype=np.float64))
    if upstream is None and net.out_dim != 1:
        raise ValueError(f"input_gradient needs a scalar-output net, got out_dim={net.out_dim}")
    out, trace = mlp_apply(net, x, tape, params, prefix)
    if upstream is None:
        upstream = tape.const(np.ones_like(out.values))
    return mlp_vjp(trace, upstream)


def gradient_norms(grads: Sequence[Tensor]) -> Tensor:
    """Per-sample L2 norm over one or more (batch, k) gradient blocks."""
    total = None
    for g in grads:
        part = ad.sum_(ad.square(g), axis=1)
        total = part if total is None else ad.add(total, part)
    return ad.sqrt(total)


def gradient_penalty(net: Mlp, x_hat, alpha: float, tape: Tape,
                     params: Optional[dict] = None, prefix: str = "") -> Tensor:
    """alpha * mean((|grad_x D(x_hat)|_2 - 1)^2) as a differentiable scalar."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    g = input_gradient(net, x_hat, tape, params, prefix)
    norm = gradient_norms([g])
    return ad.mul(ad.mean(ad.square(ad.sub(norm, 1.0))), alpha)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update; returns the new parameter dict and the state."""
    state.step += 1
    t = state.step
    new = {}
    for key in params:
        g = grads[key]
        p = params[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter "
                             f"{key!r} shape {p.shape}")
        m = state.m.get(key, np.zeros_like(p))
        v = state.v.get(key, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key] = m
        state.v[key] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new[key] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state


def collect_grads(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
            for k, t in leaves.items()}


# --------------------------------------------------------------------------
# Checkpoints: text header (layer shapes, activation tags, seed) followed by
# a flat little-endian float32 blob in header order.

def save_checkpoint(path, nets: dict[str, Mlp], seed: int,
                    extra: Optional[dict[str, str]] = None) -> None:
    header = io.StringIO()
    header.write("dhpose-checkpoint v1\n")
    header.write(f"seed {seed}\n")
    for key, value in (extra or {}).items():
        header.write(f"meta {key} {value}\n")
    blobs = []
    for name, net in nets.items():
        header.write(f"net {name} layers {len(net.layers)}\n")
        for i, layer in enumerate(net.layers):
            header.write(f"layer {name} {i} {layer.w.shape[0]} {layer.w.shape[1]} {layer.act}\n")
            blobs.append(layer.w.astype("<f4").ravel())
            blobs.append(layer.b.astype("<f4").ravel())
    blob = np.concatenate(blobs) if blobs else np.empty(0, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode())
        fh.write(f"binary {blob.nbytes}\n".encode())
        fh.write(blob.tobytes())


def load_checkpoint(path) -> tuple[dict[str, Mlp], int, dict[str, str]]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != "dhpose-checkpoint v1":
            raise ValueError(f"not a checkpoint file: {magic!r}")
        seed = 0
        extra: dict[str, str] = {}
        specs: list[tuple[str, int, int, str]] = []  # (net, in, out, act)
        nbytes = None
        for raw in iter(fh.readline, b""):
            tok = raw.decode().strip().split()
            if tok[0] == "seed":
                seed = int(tok[1])
            elif tok[0] == "meta":
                extra[tok[1]] = " ".join(tok[2:])
            elif tok[0] == "net":
                pass
            elif tok[0] == "layer":
                specs.append((tok[1], int(tok[3]), int(tok[4]), tok[5]))
            elif tok[0] == "binary":
                nbytes = int(tok[1])
                break
            else:
                raise ValueError(f"unknown checkpoint record {tok[0]!r}")
        if nbytes is None:
            raise ValueError("checkpoint has no binary section")
        blob = np.frombuffer(fh.read(nbytes), dtype="<f4").astype(np.float64)
    nets: dict[str, Mlp] = {}
    pos = 0
    for name, fan_in, fan_out, act in specs:
        w = blob[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = blob[pos:pos + fan_out]
        pos += fan_out
        nets.setdefault(name, Mlp([])).layers.append(LayerSpec(w=w.copy(), b=b.copy(), act=act))
    if pos != blob.size:
        raise ValueError("checkpoint blob size does not match the header")
    return nets, seed, extra
