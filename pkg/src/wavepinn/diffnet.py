"""Fully connected network with a trainable activation slope, plus the
differentiation machinery the inverse solver needs.

The network is a plain MLP whose hidden layers apply sigma(n*a*(W x + b)),
where ``a`` is a single trainable slope shared by all hidden layers and
``n >= 1`` is a fixed scale factor; the output layer is affine (identity
activation).

Derivatives are computed in two stages:

* a forward sweep propagates, for every input coordinate, the triple
  (value, first tangent, second tangent) layer by layer, which yields exact
  first and pure second derivatives of the outputs with respect to the
  inputs;
* a reverse sweep over that augmented computation accumulates the gradient
  of any scalar built from those quantities with respect to every weight,
  bias, and ``a``.

Scalars are assembled through a small expression graph (:class:`Var`), so a
loss can mix network values, input derivatives, and free parameters, and
``grad_params`` recovers the full parameter gradient in one pass.

Everything is float64. Evaluation never mutates the network, so concurrent
reads are safe; parameter updates require exclusive access.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Mlp",
    "EvalResult",
    "Var",
    "Param",
    "init_mlp",
    "forward",
    "eval_with_input_derivs",
    "eval_tracked",
    "grad_params",
    "backward",
    "param_count",
    "get_flat_params",
    "set_flat_params",
    "save_mlp",
    "load_mlp",
    "softplus",
    "softplus_inv",
]

CHECKPOINT_MAGIC = b"DNET0001"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "sin")


# ---------------------------------------------------------------------------
# Network container
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """A fully connected network with shared adaptive activation slope.

    weights[k] has shape (layer_sizes[k+1], layer_sizes[k]); biases[k] has
    length layer_sizes[k+1]. ``a`` must stay positive; ``n`` is fixed at
    construction. Only the product n*a ever enters the computation.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    a: float
    n: float
    activation_kind: str = "tanh"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class EvalResult:
    """Network outputs plus optional derivative blocks.

    input_grad[..., j, i] is d(out_j)/d(x_i); input_hess_diag[..., j, i] is
    the pure second derivative d2(out_j)/d(x_i)2. param_grads, when filled,
    is the flat gradient over (weights, biases, a) in checkpoint order.
    """

    value: np.ndarray
    input_grad: Optional[np.ndarray] = None
    input_hess_diag: Optional[np.ndarray] = None
    param_grads: Optional[np.ndarray] = None


def init_mlp(
    layer_sizes: Sequence[int],
    activation_kind: str = "tanh",
    n: float = 1.0,
    seed: int = 0,
) -> Mlp:
    """Create a network with Glorot-uniform weights, zero biases, a = 1/n.

    The slope initialization makes the effective activation argument
    n*a*(W x + b) start out identical to the plain activation, so runs with
    and without slope adaptation begin from the same function.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError(f"need at least input and output layer, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"all layer widths must be >= 1, got {sizes}")
    if activation_kind not in _ACTIVATIONS:
        raise ValueError(f"activation_kind must be one of {_ACTIVATIONS}")
    if n < 1.0:
        raise ValueError(f"scale factor n must be >= 1, got {n}")

    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(
        layer_sizes=sizes,
        weights=weights,
        biases=biases,
        a=1.0 / float(n),
        n=float(n),
        activation_kind=activation_kind,
    )


def _act_derivs(kind: str, s: np.ndarray, order: int):
    """Return (sigma, sigma', ..., up to the requested order) evaluated at s."""
    if kind == "tanh":
        y = np.tanh(s)
        out = [y]
        if order >= 1:
            d1 = 1.0 - y * y
            out.append(d1)
        if order >= 2:
            out.append(-2.0 * y * d1)
        if order >= 3:
            # d/ds(-2 y d1) = -2 (d1^2 + y d2)
            out.append(-2.0 * (d1 * d1 + y * out[2]))
        return out
    if kind == "sin":
        out = [np.sin(s)]
        if order >= 1:
            out.append(np.cos(s))
        if order >= 2:
            out.append(-out[0])
        if order >= 3:
            out.append(-out[1])
        return out
    raise ValueError(f"unknown activation kind {kind!r}")


def _as_batch(x: np.ndarray, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != in_dim:
            raise ValueError(f"input length {x.shape[0]} != network input width {in_dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != in_dim:
            raise ValueError(f"input width {x.shape[1]} != network input width {in_dim}")
        return x, False
    raise ValueError(f"input must be 1-D or 2-D, got shape {x.shape}")


def forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network. Accepts a single vector or a (batch, in) array."""
    xb, single = _as_batch(x, mlp.in_dim)
    c = mlp.n * mlp.a
    h = xb
    last = mlp.n_layers - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        if k == last:
            h = z
        else:
            h = _act_derivs(mlp.activation_kind, c * z, 0)[0]
    return h[0] if single else h


# ---------------------------------------------------------------------------
# Expression graph
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce grad back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """Node in the scalar/array expression graph backing loss assembly."""

    __slots__ = ("value", "_parents", "_record", "_slot", "_grad_bag")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = parents  # tuple of (Var, vjp callable)
        self._record = None      # set on record-output leaves
        self._slot = None        # (kind, out_index, dir_index)
        self._grad_bag = None    # cached result of backward()

    # -- arithmetic ---------------------------------------------------------

    @staticmethod
    def _lift(other) -> "Var":
        return other if isinstance(other, Var) else Var(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        o = self._lift(other)
        return Var(self.value + o.value, (
            (self, lambda g: _unbroadcast(g, self.value.shape)),
            (o, lambda g: _unbroadcast(g, o.value.shape)),
        ))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = self._lift(other)
        return Var(self.value * o.value, (
            (self, lambda g: _unbroadcast(g * o.value, self.value.shape)),
            (o, lambda g: _unbroadcast(g * self.value, o.value.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        return Var(self.value / o.value, (
            (self, lambda g: _unbroadcast(g / o.value, self.value.shape)),
            (o, lambda g: _unbroadcast(-g * self.value / (o.value * o.value), o.value.shape)),
        ))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        return Var(self.value ** p, (
            (self, lambda g: g * p * self.value ** (p - 1)),
        ))

    def sum(self):
        return Var(self.value.sum(), (
            (self, lambda g: g * np.ones_like(self.value)),
        ))

    def mean(self):
        size = self.value.size
        return Var(self.value.mean(), (
            (self, lambda g: g * np.full_like(self.value, 1.0 / size)),
        ))


class Param(Var):
    """A free trainable leaf (e.g. the raw scalar behind a velocity value)."""

    __slots__ = ()

    def __init__(self, value):
        super().__init__(np.asarray(value, dtype=np.float64))


def softplus(v: Var | np.ndarray):
    """log(1 + exp(x)), numerically stable; works on Vars and arrays."""
    def _sp(x):
        return np.logaddexp(0.0, x)

    if not isinstance(v, Var):
        return _sp(np.asarray(v, dtype=np.float64))
    val = _sp(v.value)
    sig = 1.0 / (1.0 + np.exp(-v.value))
    return Var(val, ((v, lambda g: g * sig),))


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    out = y + np.log(-np.expm1(-y))
    return float(out) if out.ndim == 0 else out


class GradBag:
    """Gradients keyed by the object they belong to (Mlp or Param)."""

    def __init__(self):
        self._by_id: dict[int, np.ndarray] = {}
        self._objs: dict[int, object] = {}

    def add(self, obj, grad: np.ndarray) -> None:
        key = id(obj)
        if key in self._by_id:
            self._by_id[key] = self._by_id[key] + grad
        else:
            self._by_id[key] = grad
            self._objs[key] = obj

    def get(self, obj) -> Optional[np.ndarray]:
        return self._by_id.get(id(obj))

    def __contains__(self, obj) -> bool:
        return id(obj) in self._by_id


def backward(node: Var) -> GradBag:
    """Reverse sweep from a scalar node; returns gradients for every network
    and free parameter reachable from it. The result is cached on the node."""
    if node._grad_bag is not None:
        return node._grad_bag
    if node.value.size != 1:
        raise ValueError(f"backward requires a scalar node, got shape {node.value.shape}")

    # Topological order by depth-first traversal.
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(node, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for parent, _ in v._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(node): np.ones_like(node.value)}
    bag = GradBag()
    records: list[_EvalRecord] = []
    for v in reversed(order):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if v._record is not None:
            if not v._record._pending:
                records.append(v._record)
            v._record._push_adjoint(v._slot, g)
        elif isinstance(v, Param):
            bag.add(v, g)
        for parent, vjp in v._parents:
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib

    # Records are flushed in creation order for a fixed reduction order.
    for rec in sorted(records, key=lambda r: r.serial):
        bag.add(rec.mlp, rec._backward_params())
        rec._clear_adjoints()
    node._grad_bag = bag
    return bag


def grad_params(mlp: Mlp, scalar_loss_node: Var) -> np.ndarray:
    """Gradient of a scalar graph node with respect to every trainable of
    `mlp` (weights, biases, a), flattened in checkpoint order."""
    bag = backward(scalar_loss_node)
    g = bag.get(mlp)
    if g is None:
        raise ValueError("loss graph is detached from this network")
    return g


# ---------------------------------------------------------------------------
# Augmented evaluation records
# ---------------------------------------------------------------------------

class _EvalRecord:
    """Cached forward sweep of one batch through one network.

    Holds the per-layer inputs (and input tangents when derivatives were
    requested) so the reverse sweep can accumulate parameter gradients.
    """

    _counter = 0

    def __init__(self, mlp: Mlp, xb: np.ndarray, with_derivs: bool):
        self.mlp = mlp
        self.with_derivs = with_derivs
        self.serial = _EvalRecord._counter
        _EvalRecord._counter += 1

        c = mlp.n * mlp.a
        B, d = xb.shape[0], mlp.in_dim
        self.xs: list[np.ndarray] = [xb]          # layer inputs
        self.zs: list[np.ndarray] = []            # pre-activations (pre-scale)
        self.ds: list[Optional[np.ndarray]] = []  # first tangents, (B, d, N)
        self.hs: list[Optional[np.ndarray]] = []  # second tangents, (B, d, N)

        if with_derivs:
            D = np.broadcast_to(np.eye(d), (B, d, d)).copy()
            H = np.zeros((B, d, d))
        else:
            D = H = None
        self.ds.append(D)
        self.hs.append(H)

        last = mlp.n_layers - 1
        h = xb
        for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            z = h @ w.T + b
            self.zs.append(z)
            if with_derivs:
                DZ = D @ w.T
                HZ = H @ w.T
            if k == last:
                h = z
                if with_derivs:
                    D, H = DZ, HZ
            else:
                sig, s1, s2 = _act_derivs(mlp.activation_kind, c * z, 2)
                h = sig
                if with_derivs:
                    D_new = c * s1[:, None, :] * DZ
                    H = (c * c) * s2[:, None, :] * DZ * DZ + c * s1[:, None, :] * HZ
                    D = D_new
            self.xs.append(h)
            self.ds.append(D)
            self.hs.append(H)

        self.value = h                      # (B, out)
        self.input_grad = D                 # (B, d, out) or None
        self.input_hess = H                 # (B, d, out) or None

        self._adj_val: Optional[np.ndarray] = None
        self._adj_d: Optional[np.ndarray] = None
        self._adj_h: Optional[np.ndarray] = None

    # -- adjoint bookkeeping -------------------------------------------------

    @property
    def _pending(self) -> bool:
        return self._adj_val is not None or self._adj_d is not None or self._adj_h is not None

    def _push_adjoint(self, slot, g: np.ndarray) -> None:
        kind, j, i = slot
        B, out = self.value.shape
        if kind == "value":
            if self._adj_val is None:
                self._adj_val = np.zeros((B, out))
            self._adj_val[:, j] += g
        elif kind == "grad":
            if self._adj_d is None:
                self._adj_d = np.zeros((B, self.mlp.in_dim, out))
            self._adj_d[:, i, j] += g
        else:
            if self._adj_h is None:
                self._adj_h = np.zeros((B, self.mlp.in_dim, out))
            self._adj_h[:, i, j] += g

    def _clear_adjoints(self) -> None:
        self._adj_val = self._adj_d = self._adj_h = None

    # -- node handles ---------------------------------------------------------

    def _leaf(self, kind: str, j: int, i: int, value: np.ndarray) -> Var:
        v = Var(value)
        v._record = self
        v._slot = (kind, j, i)
        return v

    def value_node(self, j: int = 0) -> Var:
        return self._leaf("value", j, 0, self.value[:, j])

    def grad_node(self, j: int, i: int) -> Var:
        if self.input_grad is None:
            raise ValueError("record was evaluated without input derivatives")
        return self._leaf("grad", j, i, self.input_grad[:, i, j])

    def hess_node(self, j: int, i: int) -> Var:
        if self.input_hess is None:
            raise ValueError("record was evaluated without input derivatives")
        return self._leaf("hess", j, i, self.input_hess[:, i, j])

    # -- reverse sweep ---------------------------------------------------------

    def _backward_params(self) -> np.ndarray:
        """Accumulate d(loss)/d(theta) for this record's adjoints; returns the
        flat gradient in checkpoint order (weights, biases per layer, then a)."""
        mlp = self.mlp
        c = mlp.n * mlp.a
        B, out = self.value.shape
        d = mlp.in_dim
        wd = self.with_derivs

        gX = self._adj_val if self._adj_val is not None else np.zeros((B, out))
        gD = self._adj_d if self._adj_d is not None else (np.zeros((B, d, out)) if wd else None)
        gH = self._adj_h if self._adj_h is not None else (np.zeros((B, d, out)) if wd else None)

        gws = [None] * mlp.n_layers
        gbs = [None] * mlp.n_layers
        ga = 0.0
        last = mlp.n_layers - 1

        for k in range(last, -1, -1):
            w = mlp.weights[k]
            x_in, D_in, H_in = self.xs[k], self.ds[k], self.hs[k]
            z = self.zs[k]
            if k == last:
                gZ, gDZ, gHZ = gX, gD, gH
            else:
                sig, s1, s2, s3 = _act_derivs(mlp.activation_kind, c * z, 3)
                if wd:
                    DZ = D_in @ w.T
                    HZ = H_in @ w.T
                    dot_gD_DZ = np.einsum("bdo,bdo->bo", gD, DZ)
                    dot_gH_DZ2 = np.einsum("bdo,bdo->bo", gH, DZ * DZ)
                    dot_gH_HZ = np.einsum("bdo,bdo->bo", gH, HZ)
                    gZ = (
                        c * s1 * gX
                        + (c * c) * s2 * dot_gD_DZ
                        + (c ** 3) * s3 * dot_gH_DZ2
                        + (c * c) * s2 * dot_gH_HZ
                    )
                    gDZ = c * s1[:, None, :] * gD + 2.0 * (c * c) * s2[:, None, :] * DZ * gH
                    gHZ = c * s1[:, None, :] * gH
                    ga_k = (
                        np.sum(gX * s1 * z)
                        + np.sum(gD * ((s1 + c * s2 * z)[:, None, :] * DZ))
                        + np.sum(gH * (
                            (2.0 * c * s2 + (c * c) * s3 * z)[:, None, :] * DZ * DZ
                            + (s1 + c * s2 * z)[:, None, :] * HZ
                        ))
                    )
                else:
                    gZ = c * s1 * gX
                    gDZ = gHZ = None
                    ga_k = np.sum(gX * s1 * z)
                ga += mlp.n * ga_k

            gw = gZ.T @ x_in
            gb = gZ.sum(axis=0)
            if wd:
                gw = gw + np.einsum("bdo,bdi->oi", gDZ, D_in)
                gw = gw + np.einsum("bdo,bdi->oi", gHZ, H_in)
            gws[k] = gw
            gbs[k] = gb

            if k > 0:
                gX = gZ @ w
                if wd:
                    gD = gDZ @ w
                    gH = gHZ @ w

        flat = np.empty(param_count(mlp))
        pos = 0
        for gw, gb in zip(gws, gbs):
            flat[pos:pos + gw.size] = gw.ravel()
            pos += gw.size
            flat[pos:pos + gb.size] = gb
            pos += gb.size
        flat[pos] = ga
        return flat


def eval_with_input_derivs(mlp: Mlp, x: np.ndarray) -> EvalResult:
    """Network value plus exact first and pure second input derivatives.

    Accepts a single point (in_dim,) or a batch (B, in_dim). Derivative
    blocks follow EvalResult's (..., out, in) layout.
    """
    xb, single = _as_batch(x, mlp.in_dim)
    rec = _EvalRecord(mlp, xb, with_derivs=True)
    value = rec.value
    grad = np.swapaxes(rec.input_grad, 1, 2)       # (B, out, d)
    hess = np.swapaxes(rec.input_hess, 1, 2)
    if single:
        return EvalResult(value[0], grad[0], hess[0])
    return EvalResult(value, grad, hess)


def eval_tracked(mlp: Mlp, x: np.ndarray, with_derivs: bool = False) -> _EvalRecord:
    """Evaluate a batch and keep the computation so graph nodes can be built.

    The returned record exposes value_node/grad_node/hess_node handles whose
    gradients flow back to the network parameters via grad_params/backward.
    """
    xb, _ = _as_batch(x, mlp.in_dim)
    return _EvalRecord(mlp, xb, with_derivs=with_derivs)


# ---------------------------------------------------------------------------
# Flat parameter vector and checkpoints
# ---------------------------------------------------------------------------

def param_count(mlp: Mlp) -> int:
    return sum(w.size + b.size for w, b in zip(mlp.weights, mlp.biases)) + 1


def get_flat_params(mlp: Mlp) -> np.ndarray:
    """Parameters as one float64 vector: per layer W (row-major) then b; a last."""
    parts = []
    for w, b in zip(mlp.weights, mlp.biases):
        parts.append(w.ravel())
        parts.append(b)
    parts.append(np.array([mlp.a]))
    return np.concatenate(parts)


def set_flat_params(mlp: Mlp, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (param_count(mlp),):
        raise ValueError(f"expected {param_count(mlp)} parameters, got {flat.shape}")
    pos = 0
    for w, b in zip(mlp.weights, mlp.biases):
        w[...] = flat[pos:pos + w.size].reshape(w.shape)
        pos += w.size
        b[...] = flat[pos:pos + b.size]
        pos += b.size
    a = float(flat[pos])
    if a <= 0.0:
        raise ValueError(f"slope a must stay positive, got {a}")
    mlp.a = a


def save_mlp(mlp: Mlp, path) -> None:
    """Write the checkpoint container: magic, length-prefixed JSON header,
    then the flat float64 little-endian parameter payload."""
    header = json.dumps({
        "layer_sizes": mlp.layer_sizes,
        "activation_kind": mlp.activation_kind,
        "n": mlp.n,
        "format_version": CHECKPOINT_VERSION,
    }).encode("utf-8")
    payload = get_flat_params(mlp).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_mlp(path) -> Mlp:
    from .errors import FormatError, TruncatedFileError

    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a network checkpoint (bad magic {magic!r})")
        raw = fh.read(4)
        if len(raw) < 4:
            raise TruncatedFileError(f"{path}: header length missing")
        (hlen,) = struct.unpack("<I", raw)
        header_bytes = fh.read(hlen)
        if len(header_bytes) < hlen:
            raise TruncatedFileError(f"{path}: header truncated")
        header = json.loads(header_bytes.decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
        mlp = Mlp(
            layer_sizes=[int(s) for s in header["layer_sizes"]],
            weights=[np.zeros((o, i)) for i, o in zip(header["layer_sizes"][:-1], header["layer_sizes"][1:])],
            biases=[np.zeros(int(o)) for o in header["layer_sizes"][1:]],
            a=1.0,
            n=float(header["n"]),
            activation_kind=header["activation_kind"],
        )
        payload = fh.read(param_count(mlp) * 8)
        if len(payload) < param_count(mlp) * 8:
            raise TruncatedFileError(f"{path}: parameter payload truncated")
        set_flat_params(mlp, np.frombuffer(payload, dtype="<f8"))
    return mlp
