"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (attention blocks, fusion pathways, training) is built
on the small op set in this module.  Two properties matter beyond plain
correctness:

* Forward evaluation is deterministic: fixed inputs produce bit-identical
  outputs run to run (fixed reduction order, no threading).
* Decoder-side ops are *row-stable*: the result for one row of a batched
  call is bit-identical to calling the op on that row alone.  Incremental
  decoding with a key-value cache relies on this to reproduce full forward
  passes exactly.  BLAS gemm does not have this property, so row-stable
  matmuls loop over rows (one gemv per row) and attention scores/contexts
  use broadcast-multiply-sum kernels over the head dimension.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError, VocabularyError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_node_ids = itertools.count(1)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus its position in the autodiff graph.

    Tensors are immutable after creation by convention: ops allocate fresh
    outputs and training code replaces parameter data wholesale.
    """

    __slots__ = ("data", "requires_grad", "node_id", "parents", "backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data):
    """Wrap raw data as a constant (non-trainable) tensor."""
    return Tensor(data, requires_grad=False)


def parameter(data):
    """Wrap raw data as a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _finite_or_raise(arr, op_name):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op_name} produced a non-finite value")


def _make(data, parents, backward_fn, op_name, check=True):
    if check:
        _finite_or_raise(data, op_name)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents),
                      backward_fn=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# Shared forward kernels.  The incremental decoder calls these directly on
# raw arrays; the graph ops below call the same functions, which is what
# makes cached and full decoding bit-identical.
# ---------------------------------------------------------------------------

def row_matmul(a, b):
    """a @ b computed one row at a time (row-stable, see module docstring)."""
    out = np.empty((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        out[i] = np.dot(a[i], b)
    return out


def softmax_rows(x):
    """Numerically stable softmax over the last axis."""
    mx = x.max(axis=-1, keepdims=True)
    e = np.exp(x - mx)
    return e / e.sum(axis=-1, keepdims=True)


def layernorm_rows(x, gamma, beta, eps):
    """Per-row layer norm; returns (out, normalized, inv_std) for backward."""
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, xhat, inv_std

def gelu_rows(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def attention_row(q_heads, k_rows, v_rows, scale):
    """Attention for one query row against a stack of key/value rows.

    q_heads: (H, dh); k_rows, v_rows: (n, H, dh).  Returns (probs (H, n),
    context (H, dh)).  Reductions run over fixed-length contiguous axes so
    the result does not depend on how many other rows are processed
    alongside this one.
    """
    kt = k_rows.transpose(1, 0, 2)                       # (H, n, dh)
    scores = (q_heads[:, None, :] * kt).sum(axis=-1) * scale
    mx = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - mx)
    probs = e / e.sum(axis=-1, keepdims=True)            # (H, n)
    vt = v_rows.transpose(1, 0, 2)                       # (H, n, dh)
    ctx = (probs[:, :, None] * vt).sum(axis=1)           # (H, dh)
    return probs, ctx


# ---------------------------------------------------------------------------
# Graph ops
# ---------------------------------------------------------------------------

def matmul(a, b, row_stable=False):
    """Matrix product.  row_stable selects the per-row forward kernel."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = row_matmul(a.data, b.data) if row_stable else a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return ((a, g @ b_data.T), (b, a_data.T @ g))

    return _make(out, (a, b), backward_fn, "matmul")


def add(a, b):
    """Elementwise sum; b may also be a trailing vector or a scalar."""
    if a.shape == b.shape:
        kind = "same"
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        kind = "vector"
    elif b.data.ndim == 0:
        kind = "scalar"
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        if kind == "same":
            gb = g
        elif kind == "vector":
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        else:
            gb = np.asarray(g.sum())
        return ((a, g), (b, gb))

    return _make(out, (a, b), backward_fn, "add")


def mul(a, b):
    """Elementwise product; b may also be a trailing vector or a scalar."""
    if a.shape == b.shape:
        kind = "same"
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        kind = "vector"
    elif b.data.ndim == 0:
        kind = "scalar"
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        ga = g * b_data
        if kind == "same":
            gb = g * a_data
        elif kind == "vector":
            gb = (g * a_data).reshape(-1, g.shape[-1]).sum(axis=0)
        else:
            gb = np.asarray((g * a_data).sum())
        return ((a, ga), (b, gb))

    return _make(out, (a, b), backward_fn, "mul")


def scale(a, c):
    """Multiply by a python float constant (no gradient for c)."""
    c = float(c)
    out = a.data * c

    def backward_fn(g):
        return ((a, g * c),)

    return _make(out, (a,), backward_fn, "scale")


def concat_cols(parts):
    """Concatenate 2-D tensors along the last axis."""
    parts = tuple(parts)
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError(
            "concat_cols: row counts differ: " + str([p.shape for p in parts]))
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def backward_fn(g):
        grads = []
        off = 0
        for p, w in zip(parts, widths):
            grads.append((p, g[:, off:off + w]))
            off += w
        return tuple(grads)

    return _make(out, parts, backward_fn, "concat_cols", check=False)


def slice_cols(a, start, stop):
    if not (0 <= start < stop <= a.shape[-1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    out = a.data[..., start:stop].copy()

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return ((a, ga),)

    return _make(out, (a,), backward_fn, "slice_cols", check=False)


def slice_rows(a, start, stop):
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    out = a.data[start:stop].copy()

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return ((a, ga),)

    return _make(out, (a,), backward_fn, "slice_rows", check=False)


def transpose(a):
    """Transpose of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {a.shape}")
    out = np.ascontiguousarray(a.data.T)

    def backward_fn(g):
        return ((a, np.ascontiguousarray(g.T)),)

    return _make(out, (a,), backward_fn, "transpose", check=False)


def gather_rows(a, indices):
    """Select rows by index (token embedding lookup, frame upsampling)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ContractError("gather_rows: empty index list")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ContractError(
            f"gather_rows: index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ((a, ga),)

    return _make(out, (a,), backward_fn, "gather_rows", check=False)


def softmax(x, mask=None):
    """Softmax over the last axis; each slice sums to one.

    mask, when given, is a boolean array of x's shape; False entries get
    exactly zero probability.  A fully masked row is a contract error.
    """
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax: empty last axis in shape {x.shape}")
    if mask is None:
        p = softmax_rows(x.data)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != {x.shape}")
        if not mask.any(axis=-1).all():
            raise ContractError("softmax: fully masked row")
        neg = np.where(mask, x.data, -np.inf)
        mx = neg.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(neg - mx), 0.0)
        p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return ((x, p * (g - inner)),)

    return _make(p, (x,), backward_fn, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row layer normalization with affine parameters."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} do not match "
            f"feature dim {d}")
    out, xhat, inv_std = layernorm_rows(x.data, gamma.data, beta.data, eps)
    gamma_data = gamma.data

    def backward_fn(g):
        dxhat = g * gamma_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return ((x, dx), (gamma, (g * xhat).sum(axis=axes)),
                (beta, g.sum(axis=axes)))

    return _make(out, (x, gamma, beta), backward_fn, "layer_norm")


def gelu(x):
    """0.5 * x * (1 + erf(x / sqrt(2)))."""
    x_data = x.data
    out = gelu_rows(x_data)

    def backward_fn(g):
        cdf = 0.5 * (1.0 + erf(x_data * _INV_SQRT2))
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT2PI
        return ((x, g * (cdf + x_data * pdf)),)

    return _make(out, (x,), backward_fn, "gelu")


def tanh(x):
    t = np.tanh(x.data)

    def backward_fn(g):
        return ((x, g * (1.0 - t * t)),)

    return _make(t, (x,), backward_fn, "tanh")


def sum_all(x):
    out = np.asarray(x.data.sum())

    def backward_fn(g):
        return ((x, np.full_like(x.data, float(g))),)

    return _make(out, (x,), backward_fn, "sum_all")


def mean_all(x):
    n = x.data.size
    out = np.asarray(x.data.sum() / n)

    def backward_fn(g):
        return ((x, np.full_like(x.data, float(g) / n)),)

    return _make(out, (x,), backward_fn, "mean_all")


def cross_entropy(logits, targets, pad_id):
    """Mean negative log-softmax over non-pad target positions."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected 2-D logits, got {logits.shape}")
    n_rows, n_vocab = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n_rows,):
        raise ContractError(
            f"cross_entropy: {targets.size} targets for {n_rows} logit rows")
    if targets.min() < 0 or targets.max() >= n_vocab:
        raise VocabularyError(
            f"cross_entropy: target id outside vocabulary of size {n_vocab}")
    live = targets != pad_id
    n_live = int(live.sum())
    if n_live == 0:
        raise ContractError("cross_entropy: all targets are padding")

    z = logits.data
    mx = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - mx).sum(axis=-1, keepdims=True)) + mx
    per_row = lse[:, 0] - z[np.arange(n_rows), targets]
    out = np.asarray(per_row[live].sum() / n_live)

    def backward_fn(g):
        p = np.exp(z - lse)
        p[np.arange(n_rows), targets] -= 1.0
        p[~live] = 0.0
        return ((logits, p * (float(g) / n_live)),)

    return _make(out, (logits,), backward_fn, "cross_entropy")


def attention(q, k, v, n_heads, causal=False, mask=None, row_stable=False):
    """Multi-head scaled dot-product attention core (post-projection).

    q: (Lq, d); k, v: (Lk, d); d divisible by n_heads; scale 1/sqrt(d/H).
    causal restricts query row i to keys 0..i (requires Lq == Lk) and is
    computed with the row-truncated kernel shared with incremental
    decoding.  mask is a boolean (Lq, Lk) array, True = attend.
    """
    lq, d = q.shape
    lk = k.shape[0]
    if k.shape != (lk, d) or v.shape != (lk, d):
        raise ShapeError(
            f"attention: q {q.shape}, k {k.shape}, v {v.shape} inconsistent")
    if d % n_heads != 0:
        raise ShapeError(f"attention: dim {d} not divisible by {n_heads} heads")
    if causal and lq != lk:
        raise ShapeError(f"attention: causal needs Lq == Lk, got {lq} != {lk}")
    dh = d // n_heads
    att_scale = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(lq, n_heads, dh)
    kh = k.data.reshape(lk, n_heads, dh)
    vh = v.data.reshape(lk, n_heads, dh)

    probs = np.zeros((n_heads, lq, lk))
    out = np.empty((lq, d))
    if causal:
        for i in range(lq):
            p, ctx = attention_row(qh[i], kh[:i + 1], vh[:i + 1], att_scale)
            probs[:, i, :i + 1] = p
            out[i] = ctx.reshape(d)
    elif mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (lq, lk):
            raise ShapeError(f"attention: mask shape {mask.shape} != ({lq}, {lk})")
        if not mask.any(axis=-1).all():
            raise ContractError("attention: fully masked query row")
        for h in range(n_heads):
            s = qh[:, h, :] @ kh[:, h, :].T * att_scale
            s = np.where(mask, s, -np.inf)
            mx = s.max(axis=-1, keepdims=True)
            e = np.where(mask, np.exp(s - mx), 0.0)
            p = e / e.sum(axis=-1, keepdims=True)
            probs[h] = p
            out[:, h * dh:(h + 1) * dh] = p @ vh[:, h, :]
    elif row_stable:
        for i in range(lq):
            p, ctx = attention_row(qh[i], kh, vh, att_scale)
            probs[:, i, :] = p
            out[i] = ctx.reshape(d)
    else:
        for h in range(n_heads):
            s = qh[:, h, :] @ kh[:, h, :].T * att_scale
            p = softmax_rows(s)
            probs[h] = p
            out[:, h * dh:(h + 1) * dh] = p @ vh[:, h, :]

    def backward_fn(g):
        gh = g.reshape(lq, n_heads, dh)
        gq = np.empty_like(qh)
        gk = np.zeros_like(kh)
        gv = np.zeros_like(vh)
        for h in range(n_heads):
            p = probs[h]
            dctx = gh[:, h, :]
            gv[:, h, :] = p.T @ dctx
            dp = dctx @ vh[:, h, :].T
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
            gq[:, h, :] = ds @ kh[:, h, :] * att_scale
            gk[:, h, :] = ds.T @ qh[:, h, :] * att_scale
        return ((q, gq.reshape(lq, d)), (k, gk.reshape(lk, d)),
                (v, gv.reshape(lk, d)))

    return _make(out, (q, k, v), backward_fn, "attention")


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Reverse-mode sweep from a scalar loss.

    Returns a map node_id -> gradient Tensor covering every requires_grad
    leaf reached from the loss.  Leaves listed in params that the sweep
    never visits get explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None or node.backward_fn is None:
            if g is not None and node.requires_grad and not node.parents:
                grads[node.node_id] = g
            continue
        if node.requires_grad and not node.parents:
            grads[node.node_id] = g
            continue
        for parent, pg in node.backward_fn(g):
            if not parent.requires_grad:
                continue
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = pg.copy() if acc is None else acc + pg
    # Interior accumulators were popped; what's left belongs to leaves.
    result = {nid: Tensor(g) for nid, g in grads.items() if nid != loss.node_id}
    if loss.requires_grad and not loss.parents:
        result[loss.node_id] = Tensor(np.ones_like(loss.data))
    if params is not None:
        for p in params:
            if p.requires_grad and p.node_id not in result:
                result[p.node_id] = Tensor(np.zeros_like(p.data))
    return result


def grad_check(f, inputs, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f maps the input tensors to a scalar tensor.  h is the finite-difference
    step (sensible range roughly [1e-6, 1e-4] for float64).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
    out = f(*inputs)
    grads = backward(out, params=inputs)

    worst = 0.0
    for t in inputs:
        analytic = grads[t.node_id].data
        flat = t.data.reshape(-1)
        num = np.empty_like(flat)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = f(*inputs).item()
                flat[j] = orig - h
                down = f(*inputs).item()
                flat[j] = orig
                num[j] = (up - down) / (2.0 * h)
        num = num.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
        worst = max(worst, float((np.abs(analytic - num) / denom).max()))
    return worst
