"""Two-stage fine-tuning, decoding, WER, and the benchmark evaluation loop.

Stage 1 trains the audio-only variant on clean audio; its checkpoint seeds
the shared submodules of the AV variants, whose zero-initialized fusion
parameters make the handoff exact.  Stage 2 fine-tunes on audiovisual data
with babble augmentation at a fixed SNR.

Decoding runs on incremental key-value caches whose kernels are shared
with the teacher-forced forward pass, so cached, uncached, and batched
computations of the same logits agree bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import fusion as F
from . import tensor as T
from . import transformer as tf
from .errors import CompatibilityError, ConfigError, ContractError, NumericError, SchemaError, TrainingError
from .noise import SnrSpec, build_babble, mix_at_snr, speakers_in
from .tokens import BOS_ID, EOS_ID, PAD_ID

# re-exported: the next-token loss is a tensor primitive
cross_entropy = T.cross_entropy

STAGES = ("stage1_audio", "stage2_av")


# ---------------------------------------------------------------------------
# Learning-rate schedule and optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float

    def __post_init__(self):
        if self.warmup_steps < 1 or self.total_steps < 1:
            raise ConfigError("warmup_steps/total_steps must be positive")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} must be < total_steps "
                f"{self.total_steps}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")


def lr_at(step, schedule):
    """Linear ramp to the peak at warmup, then linear decay to zero."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(
            f"lr_at: step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    return schedule.peak_lr * (schedule.total_steps - step) / span


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.node_id: np.zeros_like(p.data) for p in self.params}
        self.v = {p.node_id: np.zeros_like(p.data) for p in self.params}

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = grads[p.node_id].data
            m = self.m[p.node_id] = b1 * self.m[p.node_id] + (1 - b1) * g
            v = self.v[p.node_id] = b2 * self.v[p.node_id] + (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - lr * update


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str
    schedule: LrSchedule
    steps: int
    batch_size: int = 8
    snr_db: float = 0.0
    p_augment: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    babble_overlap: int = 30
    seed: int = 0

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage: unknown stage {self.stage!r}")
        if self.steps < 0:
            raise ConfigError(f"steps: must be >= 0, got {self.steps}")
        if self.steps > self.schedule.total_steps:
            raise ConfigError(
                f"steps: {self.steps} exceeds schedule total "
                f"{self.schedule.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.p_augment <= 1.0:
            raise ConfigError(f"p_augment: must be in [0, 1], got {self.p_augment}")
        return self


def teacher_forcing_pair(tokens):
    """(decoder prefix, shifted targets) for one transcript."""
    return [BOS_ID] + list(tokens), list(tokens) + [EOS_ID]


def train(model, corpus, cfg, babble_speakers=None):
    """Adam updates under the warmup/decay schedule; returns the loss trace.

    Stage 1 accepts only the audio_only variant (its weights later seed the
    AV variants); stage 2 mixes pool-A babble into each utterance's audio
    with probability p_augment.  The trace rows are (step, lr, loss).
    """
    cfg.validate()
    if cfg.stage == "stage1_audio" and model.variant.kind != "audio_only":
        raise ContractError(
            f"stage1_audio trains the audio_only variant, got "
            f"{model.variant.kind}")
    if model.cfg.vocab != corpus.config.vocab:
        raise CompatibilityError(
            f"model vocab {model.cfg.vocab} != corpus vocab "
            f"{corpus.config.vocab}")
    utts = corpus.utterances("train")
    if cfg.steps > 0 and not utts:
        raise ContractError("train: empty training split")
    augment = (cfg.stage == "stage2_av" and cfg.p_augment > 0.0
               and babble_speakers)
    params = model.parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 17])
    trace = []
    for step in range(1, cfg.steps + 1):
        lr = lr_at(step, cfg.schedule)
        picks = rng.integers(0, len(utts), size=cfg.batch_size)
        try:
            total = None
            for idx in picks:
                utt = utts[int(idx)]
                x_a = utt.audio
                if augment and rng.random() < cfg.p_augment:
                    track = build_babble(
                        babble_speakers, x_a.shape[0], cfg.babble_overlap,
                        seed=int(rng.integers(2 ** 62)))
                    x_a = mix_at_snr(x_a, track.features, cfg.snr_db)
                x_v = utt.video if model.variant.uses_video else None
                prefix, targets = teacher_forcing_pair(utt.tokens)
                logits = F.forward_logits(model, x_a, x_v, prefix)
                loss = cross_entropy(logits, targets, PAD_ID)
                total = loss if total is None else T.add(total, loss)
            batch_loss = T.scale(total, 1.0 / cfg.batch_size)
        except NumericError as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}") from exc
        value = batch_loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"training diverged at step {step}: loss={value}")
        grads = T.backward(batch_loss, params=params)
        opt.step(grads, lr)
        trace.append((step, lr, value))
    return trace


def write_loss_trace(path, trace, config_digest):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            writer.writerow([step, repr(float(lr)), repr(float(loss))])


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------

def _flamingo_cache(p, hv_data):
    return (T.row_matmul(hv_data, p.attn.w_k.data),
            T.row_matmul(hv_data, p.attn.w_v.data))


def _flamingo_step(y_row, p, cache, eps):
    k_rows, v_rows = cache
    n_heads = p.attn.n_heads
    z1, _, _ = T.layernorm_rows(y_row, p.ln1_g.data, p.ln1_b.data, eps)
    q = T.row_matmul(z1, p.attn.w_q.data)
    d = q.shape[1]
    dh = d // n_heads
    _, ctx = T.attention_row(q[0].reshape(n_heads, dh),
                             k_rows.reshape(-1, n_heads, dh),
                             v_rows.reshape(-1, n_heads, dh),
                             1.0 / np.sqrt(dh))
    branch = T.row_matmul(ctx.reshape(1, d), p.attn.w_o.data)
    y1 = y_row + branch * np.tanh(p.gate_attn.data)
    z2, _, _ = T.layernorm_rows(y1, p.ln2_g.data, p.ln2_b.data, eps)
    ffn = T.row_matmul(T.gelu_rows(T.row_matmul(z2, p.w1.data)), p.w2.data)
    return y1 + ffn * np.tanh(p.gate_ffn.data)


class DecodeSession:
    """Incremental decoder state over a fixed encoded input.

    step() consumes one token id and returns the next-token logits row,
    bit-identical to the last row of the teacher-forced forward pass on
    the same prefix.
    """

    def __init__(self, model, x_a, x_v):
        self.model = model
        with T.no_grad():
            memory, h_v_proj = F.encode(model, x_a, x_v)
        self.blocks = []
        for kind, p in model.dec_stack:
            if kind == "decoder":
                self.blocks.append(
                    ("decoder", p,
                     tf.DecoderBlockCache(p, memory.data, model.cfg.max_len)))
            else:
                self.blocks.append(
                    ("flamingo", p, _flamingo_cache(p, h_v_proj.data)))
        self.pe = tf.sinusoidal_positions(model.cfg.max_len, model.cfg.d_model)
        self.pos = 0

    def clone(self):
        other = object.__new__(DecodeSession)
        other.model = self.model
        other.pe = self.pe
        other.pos = self.pos
        other.blocks = [
            (kind, p, state.clone() if kind == "decoder" else state)
            for kind, p, state in self.blocks]
        return other

    def step(self, token_id):
        m = self.model
        if self.pos >= m.cfg.max_len:
            raise ContractError(
                f"DecodeSession: prefix length {self.pos + 1} exceeds "
                f"max_len {m.cfg.max_len}")
        if not 0 <= token_id < m.cfg.vocab:
            raise ContractError(f"DecodeSession: bad token id {token_id}")
        y = m.token_emb.data[[token_id]] + self.pe[self.pos:self.pos + 1]
        for kind, p, state in self.blocks:
            if kind == "decoder":
                y = tf.decoder_block_step(y, p, state, m.cfg.ln_eps)
            else:
                y = _flamingo_step(y, p, state, m.cfg.ln_eps)
        y, _, _ = T.layernorm_rows(y, m.dec_ln_g.data, m.dec_ln_b.data,
                                   m.cfg.ln_eps)
        self.pos += 1
        return T.row_matmul(y, m.w_out.data)[0]


def greedy_decode(model, x_a, x_v, max_len=None, return_logits=False):
    """Argmax decoding from BOS until EOS or the length limit."""
    max_len = max_len or model.cfg.max_len
    if max_len < 1:
        raise ContractError(f"greedy_decode: max_len {max_len} < 1")
    limit = min(max_len, model.cfg.max_len)
    session = DecodeSession(model, x_a, x_v)
    tokens, rows = [], []
    tok = BOS_ID
    # BOS plus the generated tokens may not exceed the prefix budget
    while len(tokens) < limit - 1:
        logits = session.step(tok)
        rows.append(logits)
        tok = int(np.argmax(logits))
        if tok == EOS_ID:
            break
        tokens.append(tok)
    return (tokens, rows) if return_logits else tokens


def greedy_decode_uncached(model, x_a, x_v, max_len=None, return_logits=False):
    """Greedy decoding that recomputes the full forward pass every step."""
    max_len = max_len or model.cfg.max_len
    limit = min(max_len, model.cfg.max_len)
    prefix = [BOS_ID]
    tokens, rows = [], []
    while len(tokens) < limit - 1:
        with T.no_grad():
            logits = F.forward_logits(model, x_a, x_v, prefix).data[-1]
        rows.append(logits)
        tok = int(np.argmax(logits))
        if tok == EOS_ID:
            break
        tokens.append(tok)
        prefix.append(tok)
    return (tokens, rows) if return_logits else tokens


def _log_softmax(row):
    mx = row.max()
    shifted = row - mx
    return shifted - np.log(np.exp(shifted).sum())


def beam_search(model, x_a, x_v, beam=5, max_len=None, length_norm=0.0):
    """Length-normalized beam search: score = logprob / length**length_norm.

    Finished hypotheses retire to a completed set; the best completed one
    wins (best live hypothesis at the length limit otherwise).  Ties break
    deterministically by token id, then hypothesis order.
    """
    if beam < 1:
        raise ContractError(f"beam_search: beam {beam} < 1")
    max_len = max_len or model.cfg.max_len
    max_len = min(max_len, model.cfg.max_len)

    def norm(logprob, n_generated):
        return logprob / max(1, n_generated) ** length_norm

    live = [(tuple(), 0.0, DecodeSession(model, x_a, x_v), BOS_ID)]
    completed = []
    for _ in range(max_len - 1):
        candidates = []
        for order, (toks, logprob, session, last) in enumerate(live):
            logp = _log_softmax(session.step(last))
            for tok in range(model.cfg.vocab):
                candidates.append((-(logprob + logp[tok]), tok, order))
        candidates.sort()
        next_live = []
        used = set()
        for neg_score, tok, order in candidates[:beam]:
            toks, _, session, _ = live[order]
            if tok == EOS_ID:
                completed.append((toks, -neg_score, len(toks) + 1))
                continue
            # siblings extending the same parent need independent caches
            branch = session if order not in used else session.clone()
            used.add(order)
            next_live.append((toks + (tok,), -neg_score, branch, tok))
        live = next_live
        if not live:
            break
    if completed:
        best = max(completed, key=lambda c: (norm(c[1], c[2]), tuple(-t for t in c[0])))
        return list(best[0])
    if live:
        best = max(live, key=lambda c: (norm(c[1], len(c[0]) + 1),
                                        tuple(-t for t in c[0])))
        return list(best[0])
    return []


# ---------------------------------------------------------------------------
# Word error rate
# ---------------------------------------------------------------------------

def edit_distance(ref, hyp):
    """Levenshtein distance with unit costs (iterative DP)."""
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[m]


def wer(ref, hyp):
    """(substitutions + deletions + insertions) / len(ref); may exceed 1."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ContractError("wer: empty reference")
    return edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------------------
# Benchmark evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    variant: str
    mode: str
    params: int
    noise_pool: str
    snr_label: str          # "clean", "avg", or a decimal dB string
    split: str
    wer: float

    def __post_init__(self):
        if self.wer < 0:
            raise ContractError(f"EvalRow: negative wer {self.wer}")


def _condition_seed(seed, pool, snr_label, utt_id):
    blob = f"{seed}|{pool}|{snr_label}|{utt_id}".encode("utf-8")
    digest = hashlib.sha256(blob).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def noisy_audio(utt, snr_spec, pool_speakers, partition, seed,
                babble_overlap=30):
    """The babble mixture this utterance gets under one condition.

    Seeded by (seed, pool, snr, utterance id) only, so every model under
    comparison hears the identical noise realization.
    """
    allowed = speakers_in(pool_speakers, partition.for_split(utt.split))
    if not allowed:
        raise ContractError(
            f"noisy_audio: no {utt.split} speakers in pool {snr_spec.source}")
    label = format_snr(snr_spec.snr_db)
    track = build_babble(
        allowed, utt.audio.shape[0], babble_overlap,
        seed=_condition_seed(seed, snr_spec.source, label, utt.id))
    return mix_at_snr(utt.audio, track.features, snr_spec.snr_db), track


def format_snr(snr_db):
    return repr(float(snr_db))


def evaluate(model, corpus, split, conditions, seed, pools, beam=1,
             length_norm=0.0, babble_overlap=30):
    """Corpus-level WER for each condition plus one avg row per pool.

    conditions mixes the string "clean" with SnrSpec entries.  pools maps
    pool names to (speakers, partition).  Decoding is greedy for beam=1.
    Noise realizations depend only on (seed, condition, utterance), which
    keeps comparisons between models paired.
    """
    if model.cfg.vocab != corpus.config.vocab:
        raise CompatibilityError(
            f"model vocab {model.cfg.vocab} != corpus vocab "
            f"{corpus.config.vocab}")
    utts = corpus.utterances(split)
    variant = model.variant
    n_params = model.parameter_count()

    def decode(x_a, x_v):
        if beam == 1:
            return greedy_decode(model, x_a, x_v)
        return beam_search(model, x_a, x_v, beam=beam, length_norm=length_norm)

    def corpus_wer(condition):
        edits = words = 0
        for utt in utts:
            if condition == "clean":
                x_a = utt.audio
            else:
                pool_speakers, partition = pools[condition.source]
                x_a, _ = noisy_audio(utt, condition, pool_speakers, partition,
                                     seed, babble_overlap)
            x_v = utt.video if variant.uses_video else None
            hyp = decode(x_a, x_v)
            edits += edit_distance(utt.tokens, hyp)
            words += len(utt.tokens)
        if words == 0:
            raise ContractError(f"evaluate: empty {split} split")
        return edits / words

    clean_wer = None
    noisy = []
    for cond in conditions:
        if cond == "clean":
            clean_wer = corpus_wer("clean")
        else:
            noisy.append((cond, corpus_wer(cond)))

    def row(pool, label, value):
        return EvalRow(variant=variant.kind, mode=variant.mode,
                       params=n_params, noise_pool=pool, snr_label=label,
                       split=split, wer=value)

    rows = []
    pool_names = sorted({cond.source for cond, _ in noisy})
    if not pool_names and clean_wer is not None:
        rows.append(row("none", "clean", clean_wer))
    for pool in pool_names:
        group = []
        for cond, value in noisy:
            if cond.source == pool:
                group.append(row(pool, format_snr(cond.snr_db), value))
        if clean_wer is not None:
            group.append(row(pool, "clean", clean_wer))
        rows.extend(group)
        rows.append(row(pool, "avg",
                        sum(r.wer for r in group) / len(group)))
    return rows


# ---------------------------------------------------------------------------
# Results CSV
# ---------------------------------------------------------------------------

RESULTS_COLUMNS = ["variant", "mode", "params", "noise_pool", "snr_db",
                   "split", "wer"]


def _row_key(row):
    return (row.variant, row.mode, row.noise_pool, row.snr_label, row.split)


def write_results(path, rows, config_digest):
    """Append results idempotently: matching keys replace earlier rows."""
    merged = {}
    order = []
    try:
        old_digest, old_rows = read_results(path)
        if old_digest != config_digest:
            raise CompatibilityError(
                f"results file {path} has digest {old_digest}, "
                f"refusing to append {config_digest}")
        for row in old_rows:
            key = _row_key(row)
            if key not in merged:
                order.append(key)
            merged[key] = row
    except FileNotFoundError:
        pass
    for row in rows:
        key = _row_key(row)
        if key not in merged:
            order.append(key)
        merged[key] = row
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(RESULTS_COLUMNS)
        for key in order:
            row = merged[key]
            writer.writerow([row.variant, row.mode, row.params,
                             row.noise_pool, row.snr_label, row.split,
                             repr(float(row.wer))])


def read_results(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    digest = ""
    start = 0
    if lines and lines[0].startswith("# config_digest="):
        digest = lines[0].split("=", 1)[1]
        start = 1
    if start >= len(lines):
        raise SchemaError(f"results file {path}: missing header row")
    header = next(csv.reader([lines[start]]))
    missing = [c for c in RESULTS_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"results file {path}: missing columns {missing}")
    idx = {c: header.index(c) for c in RESULTS_COLUMNS}
    rows = []
    for line in lines[start + 1:]:
        if not line.strip():
            continue
        rec = next(csv.reader([line]))
        rows.append(EvalRow(variant=rec[idx["variant"]], mode=rec[idx["mode"]],
                            params=int(rec[idx["params"]]),
                            noise_pool=rec[idx["noise_pool"]],
                            snr_label=rec[idx["snr_db"]],
                            split=rec[idx["split"]],
                            wer=float(rec[idx["wer"]])))
    return digest, rows
