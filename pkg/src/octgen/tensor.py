"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (encoders, attention, U-Net, graph nets, the SDF
decoder) is built on this module.  Values are numpy arrays in double
precision; gradients are computed by walking the operation graph backwards
from a scalar loss.  Non-finite values (NaN/Inf) are rejected at tensor
construction time and surface as :class:`NumericsError`.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "Parameter",
    "Adam",
    "no_grad",
    "tensor",
    "backward",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gather_rows",
    "relu",
    "silu",
    "sigmoid",
    "softplus",
    "tanh",
    "softmax",
    "clip",
    "group_max",
    "sparse_matmul",
    "conv3",
    "avg_pool3",
    "upsample3",
    "mlp_forward",
    "optimizer_step",
    "grad_check",
    "init_rng",
]


class NumericsError(RuntimeError):
    """A tensor operation produced (or was given) NaN or Inf values."""


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_f64(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericsError("non-finite values in tensor")
    return a


class Tensor:
    """A node in the computation graph holding a float64 ndarray.

    ``grad`` is populated by :func:`backward` for every reachable tensor with
    ``requires_grad``; repeated backward passes accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn) -> Tensor:
    """Create an op output; graph edges only when grads are live."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs, axis=0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows ``x[idx]``; gradient scatter-adds back to the source."""
    idx = np.asarray(idx, dtype=np.intp)
    n = x.data.shape[0]

    def bw(g):
        dx = np.zeros_like(x.data)
        if g.ndim == 1:
            np.add.at(dx, idx, g)
        else:
            for c in range(g.shape[1]):
                dx[:, c] = np.bincount(idx, weights=g[:, c], minlength=n)
        return (dx,)

    return _make(x.data[idx], (x,), bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _make(x.data.sum(axis=axis), (x,), bw)


def tmean(x: Tensor, axis=None) -> Tensor:
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape),)

    return _make(x.data.mean(axis=axis), (x,), bw)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0.0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows; branch-free stable logistic
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    x = _wrap(x)
    s = _sigmoid(x.data)
    return _make(x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = _wrap(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),))


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def group_max(x: Tensor, groups, num_groups: int):
    """Per-group max over rows of ``x`` (ties go to the first row).

    Returns ``(out, empty)`` where ``out`` is a ``num_groups x C`` tensor and
    ``empty`` a boolean array flagging groups with no member rows; empty
    groups produce a zero row and receive no gradient.
    """
    groups = np.asarray(groups, dtype=np.intp)
    c = x.data.shape[1]
    out = np.zeros((num_groups, c))
    empty = np.ones(num_groups, dtype=bool)
    argrows = np.full((num_groups, c), -1, dtype=np.intp)
    for p in range(num_groups):
        rows = np.nonzero(groups == p)[0]
        if rows.size == 0:
            continue
        empty[p] = False
        sub = x.data[rows]
        am = sub.argmax(axis=0)
        out[p] = sub[am, np.arange(c)]
        argrows[p] = rows[am]

    def bw(g):
        dx = np.zeros_like(x.data)
        for p in range(num_groups):
            if empty[p]:
                continue
            np.add.at(dx, (argrows[p], np.arange(c)), g[p])
        return (dx,)

    return _make(out, (x,), bw), empty


def sparse_matmul(mat, mat_t, x: Tensor) -> Tensor:
    """Multiply a constant scipy sparse matrix with a dense tensor.

    ``mat_t`` must be the transpose of ``mat`` (precomputed by the caller);
    it drives the backward pass.
    """
    return _make(np.asarray(mat @ x.data), (x,), lambda g: (np.asarray(mat_t @ g),))


# ---------------------------------------------------------------------------
# dense-grid ops (tensors stay 2-D: rows are cells in x-major order)
# ---------------------------------------------------------------------------

_conv_idx_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _conv_indices(g: int):
    """Gather indices for 3x3x3 neighborhoods on a zero-padded g^3 grid."""
    if g in _conv_idx_cache:
        return _conv_idx_cache[g]
    gp = g + 2
    r = np.arange(g)
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    x, y, z = x.ravel(), y.ravel(), z.ravel()
    inner = ((x + 1) * gp + (y + 1)) * gp + (z + 1)
    offs = []
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                offs.append(((x + dx) * gp + (y + dy)) * gp + (z + dz))
    idx = np.stack(offs, axis=1)  # (g^3, 27)
    _conv_idx_cache[g] = (idx, inner)
    return idx, inner


def conv3(x: Tensor, w: Tensor, b: Tensor, grid: int) -> Tensor:
    """3x3x3 convolution over a ``grid^3`` lattice stored as (grid^3, Cin).

    Weight layout is ``(27 * Cin, Cout)``: the 27 neighborhood taps vary
    slowest. Zero padding at the domain boundary.
    """
    cin = x.data.shape[1]
    cout = w.data.shape[1]
    if x.data.shape[0] != grid**3 or w.data.shape[0] != 27 * cin:
        raise ValueError("conv3 shape mismatch")
    idx, inner = _conv_indices(grid)
    gp = grid + 2
    xp = np.zeros((gp**3, cin))
    xp[inner] = x.data
    cols = xp[idx.ravel()].reshape(grid**3, 27 * cin)
    out = cols @ w.data + b.data

    def bw(g):
        dw = cols.T @ g
        db = g.sum(axis=0)
        dcols = (g @ w.data.T).reshape(grid, grid, grid, 27, cin)
        dxp = np.zeros((gp, gp, gp, cin))
        o = 0
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    dxp[dx : dx + grid, dy : dy + grid, dz : dz + grid] += dcols[:, :, :, o]
                    o += 1
        return (dxp.reshape(gp**3, cin)[inner], dw, db)

    return _make(out, (x, w, b), bw)


def avg_pool3(x: Tensor, grid: int) -> Tensor:
    """2x2x2 average pooling: (grid^3, C) -> ((grid/2)^3, C)."""
    c = x.data.shape[1]
    h = grid // 2
    blocks = x.data.reshape(h, 2, h, 2, h, 2, c)
    out = blocks.mean(axis=(1, 3, 5)).reshape(h**3, c)

    def bw(g):
        gb = g.reshape(h, 1, h, 1, h, 1, c) / 8.0
        return (np.broadcast_to(gb, (h, 2, h, 2, h, 2, c)).reshape(grid**3, c).copy(),)

    return _make(out, (x,), bw)


def upsample3(x: Tensor, grid: int) -> Tensor:
    """Nearest-neighbor 2x upsampling: (grid^3, C) -> ((2*grid)^3, C)."""
    c = x.data.shape[1]
    g2 = grid * 2
    blocks = np.broadcast_to(
        x.data.reshape(grid, 1, grid, 1, grid, 1, c), (grid, 2, grid, 2, grid, 2, c)
    )
    out = blocks.reshape(g2**3, c).copy()

    def bw(g):
        return (g.reshape(grid, 2, grid, 2, grid, 2, c).sum(axis=(1, 3, 5)).reshape(grid**3, c),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable ``requires_grad`` tensor.

    Gradients accumulate across calls; reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.data.shape)
            key = id(parent)
            flow[key] = pg if key not in flow else flow[key] + pg


# ---------------------------------------------------------------------------
# parameters and the optimizer
# ---------------------------------------------------------------------------


class Parameter:
    """A named trainable tensor; shape is fixed at construction."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self._shape = self.value.data.shape

    @property
    def shape(self):
        return self._shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def set_data(self, data: np.ndarray) -> None:
        data = _as_f64(data)
        if data.shape != self._shape:
            raise ValueError(f"parameter {self.name}: shape {data.shape} != {self._shape}")
        self.value.data = data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self._shape})"


def init_rng(name: str, seed: int) -> np.random.Generator:
    """Generator keyed by (seed, parameter name): init is order-independent."""
    digest = hashlib.sha256(name.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), key)))


class Adam:
    """Adaptive-moment optimizer (bias-corrected).

    ``lr_overrides`` maps parameter-name prefixes to learning rates; the
    longest matching prefix wins, otherwise ``lr`` applies.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, lr_overrides=None):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}
        overrides = dict(lr_overrides or {})
        self.param_lr = {}
        for p in self.params:
            hits = [pre for pre in overrides if p.name.startswith(pre)]
            self.param_lr[p.name] = overrides[max(hits, key=len)] if hits else self.lr

    def zero_grad(self):
        for p in self.params:
            p.value.grad = np.zeros(p.shape)

    def step(self):
        for p in self.params:
            if p.value.grad is None:
                raise ValueError(f"parameter {p.name} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.value.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = self.param_lr[p.name] * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.set_data(p.data - upd)

    def state_arrays(self, prefix="opt") -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array([float(self.t)])}
        for p in self.params:
            out[f"{prefix}/m/{p.name}"] = self.m[p.name]
            out[f"{prefix}/v/{p.name}"] = self.v[p.name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix="opt") -> None:
        self.t = int(arrays[f"{prefix}/t"][0])
        for p in self.params:
            self.m[p.name] = arrays[f"{prefix}/m/{p.name}"].reshape(p.shape).copy()
            self.v[p.name] = arrays[f"{prefix}/v/{p.name}"].reshape(p.shape).copy()


def optimizer_step(params, state: Adam) -> None:
    """Apply one adaptive-moment update to ``params`` held by ``state``."""
    if [p.name for p in params] != [p.name for p in state.params]:
        raise ValueError("parameter list does not match optimizer state")
    state.step()


# ---------------------------------------------------------------------------
# building blocks and verification
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"relu": relu, "silu": silu, "tanh": tanh}


def mlp_forward(x: Tensor, layers, activation="silu") -> Tensor:
    """Affine chain with ``activation`` between layers; last layer affine only.

    ``layers`` is a list of (weight, bias) Parameter pairs.
    """
    if activation not in _ACTIVATIONS and activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    h = x
    for i, (w, b) in enumerate(layers):
        h = matmul(h, w.value) + b.value
        if i + 1 < len(layers) and activation != "none":
            h = _ACTIVATIONS[activation](h)
    return h


def grad_check(model, params, input=None, step=1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    ``model`` maps the optional ``input`` tensor to a scalar loss. Relative
    error is |a - n| / max(|a|, |n|, 1e-8) taken over every element of every
    parameter in ``params``.
    """

    def run() -> float:
        with no_grad():
            out = model(input) if input is not None else model()
        return float(out.data)

    for p in params:
        p.value.grad = None
    loss = model(input) if input is not None else model()
    backward(loss)

    worst = 0.0
    for p in params:
        if p.value.grad is None:
            raise ValueError(f"parameter {p.name} unreachable from the loss")
        analytic = p.value.grad
        flat = p.data.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = run()
            flat[i] = keep - step
            down = run()
            flat[i] = keep
            numeric = (up - down) / (2.0 * step)
            a = analytic.ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
