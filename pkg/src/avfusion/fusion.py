"""Audiovisual fusion models.

Four variants share one skeleton:

* ``audio_only``   -- acoustic frontend + audio encoder + plain decoder.
* ``early``        -- visual features upsampled, projected, scaled by a
                      zero-initialized trainable scalar and injected into
                      the audio encoder input (added, or concatenated
                      through a fusion FC).
* ``middle``       -- untouched audio encoder; gated cross-attention
                      (flamingo) blocks interleaved into the decoder attend
                      over visual features.
* ``dual_use``     -- both pathways at once.

Both injection mechanisms start at exact zero (scalar ``alpha`` and the
tanh gates), so a freshly built AV variant computes bit-identical logits
to the audio-only model built from the same seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import transformer as tf
from .errors import CompatibilityError, ConfigError, ContractError, VocabularyError
from .tokens import BOS_ID
from .tensor import Tensor

VARIANTS = ("audio_only", "early", "middle", "dual_use")
FUSION_DESIGNS = ("add", "concat")


@dataclass
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    d_model: int = 32
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    vocab: int = 32
    max_len: int = 24
    d_visual: int = 24
    n_heads_visual: int = 4
    n_enc_visual: int = 4
    audio_dim: int = 26
    video_height: int = 8
    video_width: int = 8
    ffn_mult: int = 4
    upsample_factor: int = 2
    ln_eps: float = 1e-5

    def validate(self):
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even and >= 2, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads: {self.n_heads} does not divide d_model {self.d_model}")
        if self.d_visual < 2 or self.d_visual % 2 != 0:
            raise ConfigError(f"d_visual must be even and >= 2, got {self.d_visual}")
        if self.d_visual % self.n_heads_visual != 0:
            raise ConfigError(
                f"n_heads_visual: {self.n_heads_visual} does not divide "
                f"d_visual {self.d_visual}")
        if self.vocab < 4:
            raise ConfigError(f"vocab must be >= 4, got {self.vocab}")
        for name in ("n_enc", "n_dec", "max_len", "audio_dim", "video_height",
                     "video_width", "ffn_mult", "upsample_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_enc_visual < 0:
            raise ConfigError(f"n_enc_visual must be >= 0, got {self.n_enc_visual}")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class ModelVariant:
    """Which fusion pathways a model uses.

    fusion_design and visual_tap_block are ignored for audio_only;
    fusion_design is ignored for middle.
    """

    kind: str
    fusion_design: str = "add"
    visual_tap_block: int | None = None

    def validate(self, cfg):
        if self.kind not in VARIANTS:
            raise ConfigError(f"variant: unknown kind {self.kind!r}")
        if self.fusion_design not in FUSION_DESIGNS:
            raise ConfigError(
                f"fusion_design: unknown design {self.fusion_design!r}")
        if self.visual_tap_block is None:
            self.visual_tap_block = cfg.n_enc_visual
        if not 0 <= self.visual_tap_block <= cfg.n_enc_visual:
            raise ConfigError(
                f"visual_tap_block: {self.visual_tap_block} outside "
                f"[0, {cfg.n_enc_visual}]")
        return self

    @property
    def uses_encoder_fusion(self):
        return self.kind in ("early", "dual_use")

    @property
    def uses_flamingo(self):
        return self.kind in ("middle", "dual_use")

    @property
    def uses_video(self):
        return self.kind != "audio_only"

    @property
    def mode(self):
        return "A" if self.kind == "audio_only" else "AV"

    def to_dict(self):
        return {"kind": self.kind, "fusion_design": self.fusion_design,
                "visual_tap_block": self.visual_tap_block}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class VisualPathwayParams:
    """Upsample -> FC(d) -> alpha scaling used for encoder injection."""

    w_proj: Tensor
    b_proj: Tensor
    alpha: Tensor
    upsample_factor: int = 2

    def named(self, prefix):
        return [(f"{prefix}.w_proj", self.w_proj),
                (f"{prefix}.b_proj", self.b_proj),
                (f"{prefix}.alpha", self.alpha)]


@dataclass
class FlamingoParams:
    """Gated cross-attention + gated FFN adapter; gates start at zero."""

    attn: tf.AttnParams
    w1: Tensor
    w2: Tensor
    gate_attn: Tensor
    gate_ffn: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix):
        out = self.attn.named(f"{prefix}.attn")
        out += [(f"{prefix}.w1", self.w1), (f"{prefix}.w2", self.w2),
                (f"{prefix}.gate_attn", self.gate_attn),
                (f"{prefix}.gate_ffn", self.gate_ffn),
                (f"{prefix}.ln1_g", self.ln1_g), (f"{prefix}.ln1_b", self.ln1_b),
                (f"{prefix}.ln2_g", self.ln2_g), (f"{prefix}.ln2_b", self.ln2_b)]
        return out


@dataclass
class Model:
    cfg: ModelConfig
    variant: ModelVariant
    seed: int
    # acoustic frontend (two strided linear+GELU stages, second stride 2)
    af_w1: Tensor = None
    af_b1: Tensor = None
    af_w2: Tensor = None
    af_b2: Tensor = None
    token_emb: Tensor = None
    enc_blocks: list = field(default_factory=list)
    enc_ln_g: Tensor = None
    enc_ln_b: Tensor = None
    dec_stack: list = field(default_factory=list)   # ("flamingo"|"decoder", params)
    dec_ln_g: Tensor = None
    dec_ln_b: Tensor = None
    w_out: Tensor = None
    # visual side (absent for audio_only)
    vf_w: Tensor = None
    vf_b: Tensor = None
    v_blocks: list = field(default_factory=list)
    pathway: VisualPathwayParams = None
    hv_w: Tensor = None
    hv_b: Tensor = None
    concat_w: Tensor = None
    concat_b: Tensor = None

    def named_parameters(self):
        out = [("frontend.w1", self.af_w1), ("frontend.b1", self.af_b1),
               ("frontend.w2", self.af_w2), ("frontend.b2", self.af_b2),
               ("token_emb", self.token_emb)]
        for i, blk in enumerate(self.enc_blocks):
            out += blk.named(f"enc.block{i}")
        out += [("enc.ln_g", self.enc_ln_g), ("enc.ln_b", self.enc_ln_b)]
        flam_i = dec_i = 0
        for kind, p in self.dec_stack:
            if kind == "flamingo":
                out += p.named(f"dec.flam{flam_i}")
                flam_i += 1
            else:
                out += p.named(f"dec.block{dec_i}")
                dec_i += 1
        out += [("dec.ln_g", self.dec_ln_g), ("dec.ln_b", self.dec_ln_b),
                ("out_proj", self.w_out)]
        if self.vf_w is not None:
            out += [("visual.frontend.w", self.vf_w),
                    ("visual.frontend.b", self.vf_b)]
            for i, blk in enumerate(self.v_blocks):
                out += blk.named(f"visual.block{i}")
        if self.pathway is not None:
            out += self.pathway.named("visual.pathway")
        if self.hv_w is not None:
            out += [("visual.hv_proj.w", self.hv_w),
                    ("visual.hv_proj.b", self.hv_b)]
        if self.concat_w is not None:
            out += [("enc.concat_fc.w", self.concat_w),
                    ("enc.concat_fc.b", self.concat_b)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameter_count(self):
        return sum(t.size for t in self.parameters())


def _make_flamingo(seed, prefix, d, n_heads, ffn_mult):
    return FlamingoParams(
        attn=tf.make_attn_params(seed, f"{prefix}.attn", d, n_heads),
        w1=tf.init_matrix(seed, f"{prefix}.w1", d, ffn_mult * d),
        w2=tf.init_matrix(seed, f"{prefix}.w2", ffn_mult * d, d),
        gate_attn=tf.init_zeros(()),
        gate_ffn=tf.init_zeros(()),
        ln1_g=tf.init_ones(d), ln1_b=tf.init_zeros(d),
        ln2_g=tf.init_ones(d), ln2_b=tf.init_zeros(d))


def build_model(variant, cfg, seed):
    """Assemble one fusion variant with per-name seeded initialization.

    Shared submodules (frontend, audio encoder, decoder blocks, output
    head) draw from streams keyed only by (seed, parameter name), so every
    variant built from the same seed starts from identical shared weights.
    """
    cfg.validate()
    variant.validate(cfg)
    d, dv = cfg.d_model, cfg.d_visual
    m = Model(cfg=cfg, variant=variant, seed=seed)
    m.af_w1 = tf.init_matrix(seed, "frontend.w1", cfg.audio_dim, d)
    m.af_b1 = tf.init_zeros(d)
    m.af_w2 = tf.init_matrix(seed, "frontend.w2", 2 * d, d)
    m.af_b2 = tf.init_zeros(d)
    m.token_emb = tf.init_matrix(seed, "token_emb", cfg.vocab, d)
    m.enc_blocks = [
        tf.make_encoder_block(seed, f"enc.block{i}", d, cfg.n_heads, cfg.ffn_mult)
        for i in range(cfg.n_enc)]
    m.enc_ln_g, m.enc_ln_b = tf.init_ones(d), tf.init_zeros(d)
    for i in range(cfg.n_dec):
        if variant.uses_flamingo:
            m.dec_stack.append(
                ("flamingo", _make_flamingo(seed, f"dec.flam{i}", d,
                                            cfg.n_heads, cfg.ffn_mult)))
        m.dec_stack.append(
            ("decoder", tf.make_decoder_block(seed, f"dec.block{i}", d,
                                              cfg.n_heads, cfg.ffn_mult)))
    m.dec_ln_g, m.dec_ln_b = tf.init_ones(d), tf.init_zeros(d)
    m.w_out = tf.init_matrix(seed, "out_proj", d, cfg.vocab)

    if variant.uses_video:
        m.vf_w = tf.init_matrix(seed, "visual.frontend.w",
                                cfg.video_height * cfg.video_width, dv)
        m.vf_b = tf.init_zeros(dv)
        m.v_blocks = [
            tf.make_encoder_block(seed, f"visual.block{i}", dv,
                                  cfg.n_heads_visual, cfg.ffn_mult)
            for i in range(variant.visual_tap_block)]
    if variant.uses_encoder_fusion:
        m.pathway = VisualPathwayParams(
            w_proj=tf.init_matrix(seed, "visual.pathway.w_proj", dv, d),
            b_proj=tf.init_zeros(d),
            alpha=tf.init_zeros(()),
            upsample_factor=cfg.upsample_factor)
        if variant.fusion_design == "concat":
            m.concat_w = tf.init_matrix(seed, "enc.concat_fc.w", 2 * d, d)
            m.concat_b = tf.init_zeros(d)
    if variant.uses_flamingo:
        m.hv_w = tf.init_matrix(seed, "visual.hv_proj.w", dv, d)
        m.hv_b = tf.init_zeros(d)
    return m


def load_state(model, state, strict=True):
    """Copy checkpoint arrays into the model's named parameters."""
    own = dict(model.named_parameters())
    missing = [n for n in own if n not in state]
    if strict and missing:
        raise CompatibilityError(f"checkpoint missing parameters: {missing[:4]}")
    for name, tens in own.items():
        if name not in state:
            continue
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != tens.data.shape:
            raise CompatibilityError(
                f"parameter {name}: checkpoint shape {arr.shape} != "
                f"model shape {tens.data.shape}")
        tens.data = arr.copy()


def load_shared(model, state):
    """Load only the parameters present in both (stage-1 handoff)."""
    own = dict(model.named_parameters())
    shared = {n: state[n] for n in own if n in state}
    load_state(model, shared, strict=False)
    return sorted(shared)


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------

def normalize_features(x, eps=1e-8):
    """Utterance-level per-dimension mean/variance normalization.

    Standard feature normalization ahead of the frontend; keeps content on
    the same scale as the positional encoding regardless of how much
    common structure or noise energy the raw features carry.
    """
    mean = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def acoustic_frontend(model, x_a):
    """Map (2T, F_a) audio features to (T, d) with positions added."""
    cfg = model.cfg
    x_a = np.asarray(x_a, dtype=np.float64)
    if x_a.ndim != 2 or x_a.shape[1] != cfg.audio_dim:
        raise ContractError(
            f"acoustic_frontend: expected (2T, {cfg.audio_dim}), got {x_a.shape}")
    if x_a.shape[0] % 2 != 0 or x_a.shape[0] == 0:
        raise ContractError(
            f"acoustic_frontend: audio length {x_a.shape[0]} must be even")
    n = x_a.shape[0]
    h = T.gelu(T.add(T.matmul(T.tensor(normalize_features(x_a)), model.af_w1),
                     model.af_b1))
    even = T.gather_rows(h, np.arange(0, n, 2))
    odd = T.gather_rows(h, np.arange(1, n, 2))
    h = T.gelu(T.add(T.matmul(T.concat_cols([even, odd]), model.af_w2),
                     model.af_b2))
    pe = T.tensor(tf.sinusoidal_positions(n // 2, cfg.d_model))
    return T.add(h, pe)


def visual_frontend_and_encoder(model, x_v, tap=None):
    """Flatten frames, embed to d_visual, add positions, run `tap` blocks."""
    cfg = model.cfg
    x_v = np.asarray(x_v, dtype=np.float64)
    expected = (cfg.video_height, cfg.video_width)
    if x_v.ndim != 3 or x_v.shape[1:] != expected:
        raise ContractError(
            f"visual_frontend: expected (T/2, {expected[0]}, {expected[1]}), "
            f"got {x_v.shape}")
    if tap is None:
        tap = len(model.v_blocks)
    if not 0 <= tap <= len(model.v_blocks):
        raise ContractError(
            f"visual_frontend: tap {tap} outside [0, {len(model.v_blocks)}]")
    flat = T.tensor(normalize_features(x_v.reshape(x_v.shape[0], -1)))
    h = T.add(T.matmul(flat, model.vf_w), model.vf_b)
    h = T.add(h, T.tensor(tf.sinusoidal_positions(x_v.shape[0], cfg.d_visual)))
    for blk in model.v_blocks[:tap]:
        h = tf.encoder_block(h, blk, cfg.ln_eps)
    return h


def upsample_repeat(h_v, factor):
    """Frame-wise repetition: output row i equals input row i // factor."""
    if factor < 1:
        raise ContractError(f"upsample_repeat: factor {factor} < 1")
    if factor == 1:
        return h_v
    return T.gather_rows(h_v, np.repeat(np.arange(h_v.shape[0]), factor))


def project_scale(h_up, pathway):
    """alpha * (h W_proj + b): exact zeros while alpha stays at init."""
    lin = T.add(T.matmul(h_up, pathway.w_proj), pathway.b_proj)
    return T.mul(lin, pathway.alpha)


def run_audio_encoder(model, enc_in):
    h = enc_in
    for blk in model.enc_blocks:
        h = tf.encoder_block(h, blk, model.cfg.ln_eps)
    return T.layer_norm(h, model.enc_ln_g, model.enc_ln_b, model.cfg.ln_eps)


def encoder_fuse(model, audio_f, v_v, design):
    """Combine frontend audio with scaled visual features, then encode."""
    if audio_f.shape[0] != v_v.shape[0]:
        raise ContractError(
            f"encoder_fuse: audio length {audio_f.shape[0]} != visual length "
            f"{v_v.shape[0]} (check the upsampling factor)")
    if design == "add":
        enc_in = T.add(audio_f, v_v)
    elif design == "concat":
        enc_in = T.add(T.matmul(T.concat_cols([audio_f, v_v]), model.concat_w),
                       model.concat_b)
    else:
        raise ConfigError(f"fusion_design: unknown design {design!r}")
    return run_audio_encoder(model, enc_in)


def flamingo_block(y, h_v_proj, p, eps=tf.LN_EPS):
    """Gated cross-attention then gated FFN; identity while gates are zero."""
    z1 = T.layer_norm(y, p.ln1_g, p.ln1_b, eps)
    branch = tf.multi_head_attention(z1, h_v_proj, p.attn, row_stable=True)
    y1 = T.add(y, T.mul(branch, T.tanh(p.gate_attn)))
    z2 = T.layer_norm(y1, p.ln2_g, p.ln2_b, eps)
    ffn = T.matmul(T.gelu(T.matmul(z2, p.w1, row_stable=True)), p.w2,
                   row_stable=True)
    return T.add(y1, T.mul(ffn, T.tanh(p.gate_ffn)))


def encode(model, x_a, x_v):
    """Run the encoder side; returns (memory, projected visual features)."""
    variant = model.variant
    audio_f = acoustic_frontend(model, x_a)
    h_v = None
    if variant.uses_video:
        if x_v is None:
            raise ContractError(f"variant {variant.kind} requires video input")
        h_v = visual_frontend_and_encoder(model, x_v)
    if variant.uses_encoder_fusion:
        v_v = project_scale(upsample_repeat(h_v, model.cfg.upsample_factor),
                            model.pathway)
        memory = encoder_fuse(model, audio_f, v_v, variant.fusion_design)
    else:
        memory = run_audio_encoder(model, audio_f)
    h_v_proj = None
    if variant.uses_flamingo:
        h_v_proj = T.add(T.matmul(h_v, model.hv_w, row_stable=True), model.hv_b)
    return memory, h_v_proj


def decoder_embed(model, token_ids):
    """Token embeddings plus positions for a teacher-forced prefix."""
    ids = np.asarray(token_ids, dtype=np.intp)
    pe = tf.sinusoidal_positions(model.cfg.max_len, model.cfg.d_model)
    emb = T.gather_rows(model.token_emb, ids)
    return T.add(emb, T.tensor(pe[:ids.size]))


def run_decoder(model, y, memory, h_v_proj):
    for kind, p in model.dec_stack:
        if kind == "flamingo":
            y = flamingo_block(y, h_v_proj, p, model.cfg.ln_eps)
        else:
            y = tf.decoder_block(y, memory, p, model.cfg.ln_eps)
    y = T.layer_norm(y, model.dec_ln_g, model.dec_ln_b, model.cfg.ln_eps)
    return T.matmul(y, model.w_out, row_stable=True)


def forward_logits(model, x_a, x_v, y_prefix):
    """Teacher-forced logits for every prefix position (L x vocab)."""
    ids = list(y_prefix)
    if not ids or ids[0] != BOS_ID:
        raise ContractError("forward_logits: prefix must start with BOS")
    if len(ids) > model.cfg.max_len:
        raise ContractError(
            f"forward_logits: prefix length {len(ids)} exceeds max_len "
            f"{model.cfg.max_len}")
    if max(ids) >= model.cfg.vocab or min(ids) < 0:
        raise VocabularyError(
            f"forward_logits: token id outside vocabulary of size {model.cfg.vocab}")
    memory, h_v_proj = encode(model, x_a, x_v)
    y = decoder_embed(model, ids)
    return run_decoder(model, y, memory, h_v_proj)


# ---------------------------------------------------------------------------
# Sidecar metadata
# ---------------------------------------------------------------------------

def write_sidecar(path, model, config_digest):
    doc = {"variant": model.variant.to_dict(),
           "config": model.cfg.to_dict(),
           "seed": model.seed,
           "config_digest": config_digest}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return (ModelVariant.from_dict(doc["variant"]),
            ModelConfig.from_dict(doc["config"]),
            doc["seed"], doc["config_digest"])
