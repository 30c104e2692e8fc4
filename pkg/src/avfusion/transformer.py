"""Transformer building blocks: positions, multi-head attention, pre-norm
encoder/decoder blocks, incremental decoding caches, and checkpoint I/O.

Decoder-side computations run through the row-stable kernels from
``tensor`` so that a block evaluated incrementally (one query row at a
time, reusing cached keys/values) reproduces the full forward pass
bit for bit.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def param_rng(seed, name):
    """Independent RNG stream for one named parameter.

    Streams depend only on (seed, name), so models that share a submodule
    name initialize it identically regardless of which variant is built.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


def init_matrix(seed, name, rows, cols):
    bound = 1.0 / np.sqrt(rows)
    return T.parameter(param_rng(seed, name).uniform(-bound, bound, (rows, cols)))


def init_zeros(shape):
    return T.parameter(np.zeros(shape))


def init_ones(shape):
    return T.parameter(np.ones(shape))


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def sinusoidal_positions(length, dim):
    """Classic sin/cos position table of shape (length, dim)."""
    if length < 1:
        raise ContractError(f"sinusoidal_positions: length {length} < 1")
    if dim % 2 != 0:
        raise ContractError(f"sinusoidal_positions: dim {dim} must be even")
    pos = np.arange(length)[:, None]
    freqs = np.power(10000.0, -np.arange(0, dim, 2) / dim)[None, :]
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos * freqs)
    pe[:, 1::2] = np.cos(pos * freqs)
    return pe


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class AttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def named(self, prefix):
        return [(f"{prefix}.w_q", self.w_q), (f"{prefix}.w_k", self.w_k),
                (f"{prefix}.w_v", self.w_v), (f"{prefix}.w_o", self.w_o)]


@dataclass
class EncoderBlockParams:
    attn: AttnParams
    w1: Tensor
    w2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix):
        out = self.attn.named(f"{prefix}.attn")
        out += [(f"{prefix}.w1", self.w1), (f"{prefix}.w2", self.w2),
                (f"{prefix}.ln1_g", self.ln1_g), (f"{prefix}.ln1_b", self.ln1_b),
                (f"{prefix}.ln2_g", self.ln2_g), (f"{prefix}.ln2_b", self.ln2_b)]
        return out


@dataclass
class DecoderBlockParams:
    self_attn: AttnParams
    cross_attn: AttnParams
    w1: Tensor
    w2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor

    def named(self, prefix):
        out = self.self_attn.named(f"{prefix}.self_attn")
        out += self.cross_attn.named(f"{prefix}.cross_attn")
        out += [(f"{prefix}.w1", self.w1), (f"{prefix}.w2", self.w2)]
        for i in (1, 2, 3):
            out += [(f"{prefix}.ln{i}_g", getattr(self, f"ln{i}_g")),
                    (f"{prefix}.ln{i}_b", getattr(self, f"ln{i}_b"))]
        return out


def make_attn_params(seed, prefix, d, n_heads):
    if d % n_heads != 0:
        raise ShapeError(f"attention dim {d} not divisible by {n_heads} heads")
    return AttnParams(
        w_q=init_matrix(seed, f"{prefix}.w_q", d, d),
        w_k=init_matrix(seed, f"{prefix}.w_k", d, d),
        w_v=init_matrix(seed, f"{prefix}.w_v", d, d),
        w_o=init_matrix(seed, f"{prefix}.w_o", d, d),
        n_heads=n_heads)


def make_encoder_block(seed, prefix, d, n_heads, ffn_mult=4):
    return EncoderBlockParams(
        attn=make_attn_params(seed, f"{prefix}.attn", d, n_heads),
        w1=init_matrix(seed, f"{prefix}.w1", d, ffn_mult * d),
        w2=init_matrix(seed, f"{prefix}.w2", ffn_mult * d, d),
        ln1_g=init_ones(d), ln1_b=init_zeros(d),
        ln2_g=init_ones(d), ln2_b=init_zeros(d))


def make_decoder_block(seed, prefix, d, n_heads, ffn_mult=4):
    return DecoderBlockParams(
        self_attn=make_attn_params(seed, f"{prefix}.self_attn", d, n_heads),
        cross_attn=make_attn_params(seed, f"{prefix}.cross_attn", d, n_heads),
        w1=init_matrix(seed, f"{prefix}.w1", d, ffn_mult * d),
        w2=init_matrix(seed, f"{prefix}.w2", ffn_mult * d, d),
        ln1_g=init_ones(d), ln1_b=init_zeros(d),
        ln2_g=init_ones(d), ln2_b=init_zeros(d),
        ln3_g=init_ones(d), ln3_b=init_zeros(d))


# ---------------------------------------------------------------------------
# Forward blocks
# ---------------------------------------------------------------------------

def multi_head_attention(q_in, kv_in, p, mask=None, causal=False,
                         row_stable=False):
    """Project, attend, and re-project: softmax(QK^T / sqrt(dh)) V, per head."""
    q = T.matmul(q_in, p.w_q, row_stable=row_stable)
    k = T.matmul(kv_in, p.w_k, row_stable=row_stable)
    v = T.matmul(kv_in, p.w_v, row_stable=row_stable)
    ctx = T.attention(q, k, v, p.n_heads, causal=causal, mask=mask,
                      row_stable=row_stable)
    return T.matmul(ctx, p.w_o, row_stable=row_stable)


def _ffn(x, w1, w2, row_stable=False):
    return T.matmul(T.gelu(T.matmul(x, w1, row_stable=row_stable)), w2,
                    row_stable=row_stable)


def encoder_block(x, p, eps=LN_EPS):
    """Pre-norm residual encoder block: x + Attn(LN(x)), then + FFN(LN(.))."""
    z = T.layer_norm(x, p.ln1_g, p.ln1_b, eps)
    h = T.add(x, multi_head_attention(z, z, p.attn))
    return T.add(h, _ffn(T.layer_norm(h, p.ln2_g, p.ln2_b, eps), p.w1, p.w2))


def decoder_block(y, memory, p, eps=LN_EPS):
    """Pre-norm causal decoder block with cross-attention over memory.

    Runs entirely on row-stable kernels; ``decoder_block_step`` reproduces
    each output row exactly from cached keys/values.
    """
    z1 = T.layer_norm(y, p.ln1_g, p.ln1_b, eps)
    h1 = T.add(y, multi_head_attention(z1, z1, p.self_attn, causal=True,
                                       row_stable=True))
    z2 = T.layer_norm(h1, p.ln2_g, p.ln2_b, eps)
    h2 = T.add(h1, multi_head_attention(z2, memory, p.cross_attn,
                                        row_stable=True))
    z3 = T.layer_norm(h2, p.ln3_g, p.ln3_b, eps)
    return T.add(h2, _ffn(z3, p.w1, p.w2, row_stable=True))


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------

class DecoderBlockCache:
    """Grown self-attention keys/values plus fixed cross-attention ones."""

    __slots__ = ("self_k", "self_v", "n", "cross_k", "cross_v")

    def __init__(self, p, memory_data, max_len):
        d = p.self_attn.w_q.shape[0]
        self.self_k = np.empty((max_len, d))
        self.self_v = np.empty((max_len, d))
        self.n = 0
        self.cross_k = T.row_matmul(memory_data, p.cross_attn.w_k.data)
        self.cross_v = T.row_matmul(memory_data, p.cross_attn.w_v.data)

    def clone(self):
        other = object.__new__(DecoderBlockCache)
        other.self_k = self.self_k.copy()
        other.self_v = self.self_v.copy()
        other.n = self.n
        other.cross_k = self.cross_k
        other.cross_v = self.cross_v
        return other


def _attend_rows(q_row, k_rows, v_rows, w_o, n_heads):
    d = q_row.shape[1]
    dh = d // n_heads
    q_heads = q_row[0].reshape(n_heads, dh)
    _, ctx = T.attention_row(q_heads, k_rows.reshape(-1, n_heads, dh),
                             v_rows.reshape(-1, n_heads, dh),
                             1.0 / np.sqrt(dh))
    return T.row_matmul(ctx.reshape(1, d), w_o)


def decoder_block_step(y_row, p, cache, eps=LN_EPS):
    """One incremental decoder-block step for a single (1, d) input row.

    Appends this position's self-attention key/value to the cache and
    returns the block output row, bit-identical to the matching row of
    ``decoder_block`` run on the full prefix.
    """
    sa, ca = p.self_attn, p.cross_attn
    z1, _, _ = T.layernorm_rows(y_row, p.ln1_g.data, p.ln1_b.data, eps)
    cache.self_k[cache.n] = T.row_matmul(z1, sa.w_k.data)[0]
    cache.self_v[cache.n] = T.row_matmul(z1, sa.w_v.data)[0]
    cache.n += 1
    q = T.row_matmul(z1, sa.w_q.data)
    h1 = y_row + _attend_rows(q, cache.self_k[:cache.n], cache.self_v[:cache.n],
                              sa.w_o.data, sa.n_heads)
    z2, _, _ = T.layernorm_rows(h1, p.ln2_g.data, p.ln2_b.data, eps)
    q2 = T.row_matmul(z2, ca.w_q.data)
    h2 = h1 + _attend_rows(q2, cache.cross_k, cache.cross_v, ca.w_o.data,
                           ca.n_heads)
    z3, _, _ = T.layernorm_rows(h2, p.ln3_g.data, p.ln3_b.data, eps)
    ffn = T.row_matmul(T.gelu_rows(T.row_matmul(z3, p.w1.data)), p.w2.data)
    return h2 + ffn


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"AVFCKPT\x00"
_CKPT_VERSION = 1


def save_checkpoint(path, named_params):
    """Write (name, shape, float64 little-endian data) records atomically."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(named_params)))
        for name, tens in named_params:
            raw = name.encode("utf-8")
            arr = tens.data.astype("<f8", copy=False)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint back as an ordered {name: float64 array} map."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ContractError(f"not a checkpoint file: {path}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != _CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
        off += 8 * n
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
