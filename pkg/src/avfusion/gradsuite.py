"""Gradient verification suites for every primitive op and the fused model.

Used by the `gradcheck` CLI command and the acceptance tests: each op is
checked against central finite differences on randomly shaped instances,
and the end-to-end loss is checked with respect to the fusion parameters
(alpha, both flamingo gates, the visual projection).
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import fusion as F
from . import tensor as T
from .tokens import BOS_ID


def _dims(rng, lo=1, hi=5):
    return int(rng.integers(lo, hi))


def _op_cases():
    """op name -> builder(rng) returning (f_raw, inputs).

    f_raw maps the inputs to an output tensor (not necessarily scalar);
    the runner reduces it with a fixed random weighting so the whole
    Jacobian is exercised.
    """

    def matmul(rng, row_stable=False):
        m, k, n = _dims(rng, 1, 5), _dims(rng, 1, 5), _dims(rng, 1, 5)
        a = T.parameter(rng.standard_normal((m, k)))
        b = T.parameter(rng.standard_normal((k, n)))
        return (lambda a_, b_: T.matmul(a_, b_, row_stable=row_stable), [a, b])

    def add(rng):
        m, n = _dims(rng, 1, 5), _dims(rng, 1, 5)
        a = T.parameter(rng.standard_normal((m, n)))
        b = T.parameter(rng.standard_normal(n))
        return (T.add, [a, b])

    def mul(rng):
        m, n = _dims(rng, 1, 5), _dims(rng, 1, 5)
        a = T.parameter(rng.standard_normal((m, n)))
        b = T.parameter(np.asarray(rng.standard_normal()))
        return (T.mul, [a, b])

    def scale(rng):
        a = T.parameter(rng.standard_normal((_dims(rng), _dims(rng))))
        c = float(rng.standard_normal())
        return (lambda a_: T.scale(a_, c), [a])

    def concat(rng):
        m = _dims(rng, 1, 4)
        a = T.parameter(rng.standard_normal((m, _dims(rng, 1, 4))))
        b = T.parameter(rng.standard_normal((m, _dims(rng, 1, 4))))
        return (lambda a_, b_: T.concat_cols([a_, b_]), [a, b])

    def slices(rng):
        m, n = _dims(rng, 2, 5), _dims(rng, 2, 5)
        a = T.parameter(rng.standard_normal((m, n)))
        return (lambda a_: T.slice_rows(T.slice_cols(a_, 0, n - 1), 1, m), [a])

    def transpose(rng):
        a = T.parameter(rng.standard_normal((_dims(rng), _dims(rng))))
        return (T.transpose, [a])

    def gather(rng):
        m, n = _dims(rng, 2, 5), _dims(rng, 1, 4)
        a = T.parameter(rng.standard_normal((m, n)))
        idx = rng.integers(0, m, size=_dims(rng, 2, 6)).tolist()
        return (lambda a_: T.gather_rows(a_, idx), [a])

    def softmax(rng):
        m, n = _dims(rng, 1, 4), _dims(rng, 2, 6)
        a = T.parameter(rng.standard_normal((m, n)) * 2)
        return (T.softmax, [a])

    def softmax_masked(rng):
        m, n = _dims(rng, 1, 4), _dims(rng, 2, 6)
        a = T.parameter(rng.standard_normal((m, n)) * 2)
        mask = rng.random((m, n)) < 0.7
        mask[:, 0] = True
        return (lambda a_: T.softmax(a_, mask=mask), [a])

    def layer_norm(rng):
        m, n = _dims(rng, 1, 4), _dims(rng, 2, 6)
        x = T.parameter(rng.standard_normal((m, n)) * 2)
        g = T.parameter(rng.standard_normal(n))
        b = T.parameter(rng.standard_normal(n))
        return (T.layer_norm, [x, g, b])

    def gelu(rng):
        a = T.parameter(rng.standard_normal((_dims(rng), _dims(rng))) * 2)
        return (T.gelu, [a])

    def tanh(rng):
        a = T.parameter(rng.standard_normal((_dims(rng), _dims(rng))) * 2)
        return (T.tanh, [a])

    def sums(rng):
        a = T.parameter(rng.standard_normal((_dims(rng), _dims(rng))))
        return (lambda a_: T.add(T.sum_all(a_), T.mean_all(a_)), [a])

    def cross_entropy(rng):
        m, n = _dims(rng, 2, 5), _dims(rng, 3, 7)
        logits = T.parameter(rng.standard_normal((m, n)) * 2)
        targets = rng.integers(1, n, size=m).tolist()
        return (lambda l_: T.cross_entropy(l_, targets, pad_id=0), [logits])

    def attention(rng, causal=False, row_stable=False, masked=False):
        heads = int(rng.choice([1, 2]))
        dh = int(rng.choice([2, 3]))
        d = heads * dh
        lq = _dims(rng, 2, 5)
        lk = lq if causal else _dims(rng, 2, 5)
        q = T.parameter(rng.standard_normal((lq, d)))
        k = T.parameter(rng.standard_normal((lk, d)))
        v = T.parameter(rng.standard_normal((lk, d)))
        mask = None
        if masked:
            mask = rng.random((lq, lk)) < 0.7
            mask[:, 0] = True
        return (lambda q_, k_, v_: T.attention(
            q_, k_, v_, heads, causal=causal, mask=mask,
            row_stable=row_stable), [q, k, v])

    return {
        "matmul": matmul,
        "matmul_row_stable": lambda rng: matmul(rng, row_stable=True),
        "add": add,
        "mul": mul,
        "scale": scale,
        "concat_cols": concat,
        "slice": slices,
        "transpose": transpose,
        "gather_rows": gather,
        "softmax": softmax,
        "softmax_masked": softmax_masked,
        "layer_norm": layer_norm,
        "gelu": gelu,
        "tanh": tanh,
        "sum_mean": sums,
        "cross_entropy": cross_entropy,
        "attention": attention,
        "attention_causal": lambda rng: attention(rng, causal=True),
        "attention_masked": lambda rng: attention(rng, masked=True),
        "attention_row_stable": lambda rng: attention(rng, row_stable=True),
    }


def _as_scalar_fn(f_raw, inputs, rng):
    """Reduce f_raw's output with weights fixed across re-evaluations."""
    probe = f_raw(*inputs)
    if probe.data.ndim == 0:
        return f_raw
    w = T.tensor(rng.standard_normal(probe.shape))
    return lambda *ins: T.sum_all(T.mul(f_raw(*ins), w))


def run_op_suite(instances_per_op=100, seed=0, h=1e-5):
    """Max grad_check error per op over random instances."""
    results = {}
    for name, builder in _op_cases().items():
        tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4],
                             "little")
        rng = np.random.default_rng([seed, tag])
        worst = 0.0
        for _ in range(instances_per_op):
            f_raw, inputs = builder(rng)
            f = _as_scalar_fn(f_raw, inputs, rng)
            worst = max(worst, T.grad_check(f, inputs, h=h))
        results[name] = worst
    return results


def run_fusion_suite(seed=0, h=1e-5, cfg=None):
    """End-to-end loss gradients w.r.t. alpha, both gates, and W_proj.

    Gates and alpha are moved off their zero init so the visual pathway
    carries signal (at alpha == 0 the W_proj gradient vanishes identically).
    """
    cfg = cfg or F.ModelConfig()
    rng = np.random.default_rng([seed, 77])
    model = F.build_model(F.ModelVariant("dual_use"), cfg, seed)
    model.pathway.alpha = T.parameter(np.asarray(0.4))
    flam = next(p for kind, p in model.dec_stack if kind == "flamingo")
    flam.gate_attn = T.parameter(np.asarray(0.25))
    flam.gate_ffn = T.parameter(np.asarray(-0.3))

    n_tokens = 2
    x_a = rng.standard_normal((8 * n_tokens, cfg.audio_dim))
    x_v = rng.uniform(0, 1, (2 * n_tokens, cfg.video_height, cfg.video_width))
    targets = [4, 2]

    def loss_fn(*_):
        logits = F.forward_logits(model, x_a, x_v, [BOS_ID, 4])
        return T.cross_entropy(logits, targets, pad_id=0)

    return {
        "alpha": T.grad_check(loss_fn, [model.pathway.alpha], h=h),
        "gate_attn": T.grad_check(loss_fn, [flam.gate_attn], h=h),
        "gate_ffn": T.grad_check(loss_fn, [flam.gate_ffn], h=h),
        "w_proj": T.grad_check(loss_fn, [model.pathway.w_proj], h=h),
    }
