import numpy as np
import pytest

from avfusion import fusion as F
from avfusion import tensor as T
from avfusion import transformer as tf
from avfusion.errors import CompatibilityError, ConfigError, ContractError, VocabularyError
from avfusion.tokens import BOS_ID


def small_cfg():
    return F.ModelConfig(d_model=16, n_heads=2, n_enc=2, n_dec=2, vocab=12,
                         max_len=10, d_visual=8, n_heads_visual=2,
                         n_enc_visual=2, audio_dim=6, video_height=4,
                         video_width=4, ffn_mult=2)


def build(kind, seed=0, cfg=None, **kw):
    cfg = cfg or small_cfg()
    return F.build_model(F.ModelVariant(kind, **kw), cfg, seed)


def sample_inputs(cfg, n_tokens=3, seed=5):
    r = np.random.default_rng(seed)
    t2 = 8 * n_tokens                      # audio frames
    x_a = r.standard_normal((t2, cfg.audio_dim))
    x_v = r.uniform(0, 1, (t2 // 4, cfg.video_height, cfg.video_width))
    return x_a, x_v


class TestBuildModel:
    def test_decoder_depth_per_variant(self):
        assert len(build("audio_only").dec_stack) == 2
        assert len(build("early").dec_stack) == 2
        assert len(build("middle").dec_stack) == 4
        assert len(build("dual_use").dec_stack) == 4

    def test_dual_use_params_are_middle_plus_pathway(self):
        dual = build("dual_use", seed=3)
        middle = build("middle", seed=3)
        pathway = sum(t.size for _, t in dual.pathway.named("p"))
        assert dual.parameter_count() == middle.parameter_count() + pathway

    def test_shared_seed_shares_base_weights(self):
        audio = dict(build("audio_only", seed=11).named_parameters())
        dual = dict(build("dual_use", seed=11).named_parameters())
        for name, tens in audio.items():
            assert np.array_equal(tens.data, dual[name].data), name

    def test_zero_initialized_gates_and_alpha(self):
        m = build("dual_use")
        assert m.pathway.alpha.data == 0.0
        for kind, p in m.dec_stack:
            if kind == "flamingo":
                assert p.gate_attn.data == 0.0 and p.gate_ffn.data == 0.0

    def test_tap_zero_drops_visual_blocks(self):
        m0 = build("dual_use", visual_tap_block=0)
        m2 = build("dual_use", visual_tap_block=2)
        assert len(m0.v_blocks) == 0 and len(m2.v_blocks) == 2
        assert m0.parameter_count() < m2.parameter_count()

    def test_invalid_config_names_field(self):
        with pytest.raises(ConfigError, match="n_heads"):
            F.ModelConfig(d_model=16, n_heads=3).validate()
        with pytest.raises(ConfigError, match="visual_tap_block"):
            build("dual_use", visual_tap_block=9)


class TestFrontends:
    def test_audio_halves_length(self):
        m = build("audio_only")
        x_a, _ = sample_inputs(m.cfg)
        assert F.acoustic_frontend(m, x_a).shape == (x_a.shape[0] // 2, 16)

    def test_zero_input_zero_bias_gives_pure_positions(self):
        m = build("audio_only")
        out = F.acoustic_frontend(m, np.zeros((8, 6))).data
        assert np.array_equal(out, tf.sinusoidal_positions(4, 16))

    def test_odd_audio_length_rejected(self):
        m = build("audio_only")
        with pytest.raises(ContractError):
            F.acoustic_frontend(m, np.zeros((7, 6)))

    def test_frontend_forward_is_deterministic(self):
        m = build("audio_only", seed=4)
        x_a, _ = sample_inputs(m.cfg)
        a = F.acoustic_frontend(m, x_a).data
        b = F.acoustic_frontend(m, x_a).data
        assert np.array_equal(a, b)

    def test_visual_tap_semantics(self):
        m = build("dual_use", seed=6)
        _, x_v = sample_inputs(m.cfg)
        tap0 = F.visual_frontend_and_encoder(m, x_v, tap=0).data
        flat = F.normalize_features(x_v.reshape(x_v.shape[0], -1))
        expected = (flat @ m.vf_w.data + m.vf_b.data
                    + tf.sinusoidal_positions(x_v.shape[0], 8))
        assert np.allclose(tap0, expected, atol=1e-12)
        # tap=k is a prefix of the full forward's intermediate activations
        h = T.tensor(tap0)
        for k, blk in enumerate(m.v_blocks, start=1):
            h = tf.encoder_block(h, blk, m.cfg.ln_eps)
            got = F.visual_frontend_and_encoder(m, x_v, tap=k).data
            assert np.array_equal(got, h.data)
        full = F.visual_frontend_and_encoder(m, x_v).data
        assert np.array_equal(full, h.data)

    def test_tap_out_of_range(self):
        m = build("dual_use")
        _, x_v = sample_inputs(m.cfg)
        with pytest.raises(ContractError):
            F.visual_frontend_and_encoder(m, x_v, tap=5)


class TestVisualPathway:
    def test_upsample_repeat_definition(self):
        h = T.tensor([[1.0], [2.0]])
        out = F.upsample_repeat(h, 2).data
        assert np.array_equal(out, [[1.0], [1.0], [2.0], [2.0]])

    def test_upsample_factor_one_is_identity(self):
        h = T.tensor(np.random.default_rng(0).standard_normal((3, 4)))
        assert F.upsample_repeat(h, 1) is h

    def test_upsample_index_map_oracle(self):
        r = np.random.default_rng(1)
        h = r.standard_normal((5, 3))
        out = F.upsample_repeat(T.tensor(h), 2).data
        for i in range(10):
            assert np.array_equal(out[i], h[i // 2])

    def test_alpha_zero_forces_zero_output(self):
        m = build("dual_use", seed=7)
        h = T.tensor(np.random.default_rng(2).standard_normal((6, 8)) * 50)
        out = F.project_scale(h, m.pathway).data
        assert np.array_equal(out, np.zeros((6, 16)))

    def test_alpha_identity_and_linearity(self):
        pathway = F.VisualPathwayParams(
            w_proj=T.parameter(np.eye(4)), b_proj=T.parameter(np.zeros(4)),
            alpha=T.parameter(np.asarray(1.0)))
        h = np.random.default_rng(3).standard_normal((5, 4))
        assert np.allclose(F.project_scale(T.tensor(h), pathway).data, h)
        pathway.alpha = T.parameter(np.asarray(0.5))
        assert np.allclose(F.project_scale(T.tensor(h), pathway).data, 0.5 * h)


class TestEncoderFuse:
    def test_alpha_zero_add_equals_audio_only_path(self):
        m = build("dual_use", seed=9)
        x_a, x_v = sample_inputs(m.cfg)
        audio_f = F.acoustic_frontend(m, x_a)
        v_v = F.project_scale(
            F.upsample_repeat(F.visual_frontend_and_encoder(m, x_v), 2),
            m.pathway)
        fused = F.encoder_fuse(m, audio_f, v_v, "add").data
        plain = F.run_audio_encoder(m, audio_f).data
        assert np.array_equal(fused, plain)

    def test_concat_with_identity_fc_reduces_to_audio(self):
        m = build("dual_use", seed=10, fusion_design="concat")
        d = m.cfg.d_model
        m.concat_w = T.parameter(np.vstack([np.eye(d), np.zeros((d, d))]))
        m.concat_b = T.parameter(np.zeros(d))
        x_a, x_v = sample_inputs(m.cfg)
        audio_f = F.acoustic_frontend(m, x_a)
        v_v = F.project_scale(
            F.upsample_repeat(F.visual_frontend_and_encoder(m, x_v), 2),
            m.pathway)
        fused = F.encoder_fuse(m, audio_f, v_v, "concat").data
        plain = F.run_audio_encoder(m, audio_f).data
        assert np.allclose(fused, plain, atol=1e-12)

    def test_add_matches_composition_oracle(self):
        m = build("dual_use", seed=11)
        m.pathway.alpha = T.parameter(np.asarray(0.8))
        x_a, x_v = sample_inputs(m.cfg)
        audio_f = F.acoustic_frontend(m, x_a)
        v_v = F.project_scale(
            F.upsample_repeat(F.visual_frontend_and_encoder(m, x_v), 2),
            m.pathway)
        fused = F.encoder_fuse(m, audio_f, v_v, "add").data
        oracle = F.run_audio_encoder(
            m, T.tensor(audio_f.data + v_v.data)).data
        assert np.array_equal(fused, oracle)

    def test_length_mismatch_names_upsampling(self):
        m = build("dual_use")
        with pytest.raises(ContractError, match="upsampling"):
            F.encoder_fuse(m, T.tensor(np.zeros((6, 16))),
                           T.tensor(np.zeros((4, 16))), "add")


class TestFlamingoBlock:
    def make_block(self, seed=0):
        cfg = small_cfg()
        return F._make_flamingo(seed, "flam", cfg.d_model, cfg.n_heads,
                                cfg.ffn_mult)

    def test_zero_gates_are_identity(self):
        p = self.make_block()
        r = np.random.default_rng(4)
        y = T.tensor(r.standard_normal((5, 16)))
        h_v = T.tensor(r.standard_normal((3, 16)))
        assert np.array_equal(F.flamingo_block(y, h_v, p).data, y.data)

    def test_saturated_attention_gate(self):
        p = self.make_block(1)
        p.gate_attn = T.parameter(np.asarray(20.0))
        r = np.random.default_rng(5)
        y = T.tensor(r.standard_normal((4, 16)))
        h_v = T.tensor(r.standard_normal((3, 16)))
        out = F.flamingo_block(y, h_v, p).data
        z1 = T.layer_norm(y, p.ln1_g, p.ln1_b)
        branch = tf.multi_head_attention(z1, h_v, p.attn, row_stable=True).data
        assert np.abs(out - (y.data + branch)).max() < 1e-9

    def test_intermediate_gates_match_composed_oracle(self):
        p = self.make_block(2)
        p.gate_attn = T.parameter(np.asarray(0.3))
        p.gate_ffn = T.parameter(np.asarray(0.3))
        r = np.random.default_rng(6)
        y = T.tensor(r.standard_normal((4, 16)))
        h_v = T.tensor(r.standard_normal((3, 16)))
        out = F.flamingo_block(y, h_v, p).data
        g = np.tanh(0.3)
        z1 = T.layer_norm(y, p.ln1_g, p.ln1_b)
        y1 = y.data + g * tf.multi_head_attention(z1, h_v, p.attn,
                                                  row_stable=True).data
        z2 = T.layer_norm(T.tensor(y1), p.ln2_g, p.ln2_b)
        ffn = T.matmul(T.gelu(T.matmul(z2, p.w1, row_stable=True)), p.w2,
                       row_stable=True).data
        assert np.allclose(out, y1 + g * ffn, atol=1e-13)


class TestForwardLogits:
    def test_zero_init_equivalence_all_variants(self):
        cfg = small_cfg()
        audio = build("audio_only", seed=21, cfg=cfg)
        x_a, x_v = sample_inputs(cfg)
        prefix = [BOS_ID, 4, 5, 6]
        base = F.forward_logits(audio, x_a, None, prefix).data
        for kind in ("early", "middle", "dual_use"):
            m = build(kind, seed=21, cfg=cfg)
            got = F.forward_logits(m, x_a, x_v, prefix).data
            assert np.abs(got - base).max() < 1e-10, kind

    def test_logits_shape_and_probability_rows(self):
        m = build("dual_use", seed=22)
        x_a, x_v = sample_inputs(m.cfg)
        logits = F.forward_logits(m, x_a, x_v, [BOS_ID, 4, 5])
        assert logits.shape == (3, m.cfg.vocab)
        p = T.softmax(logits).data
        assert np.abs(p.sum(axis=-1) - 1).max() < 1e-12

    def test_prefix_must_start_with_bos(self):
        m = build("audio_only")
        x_a, _ = sample_inputs(m.cfg)
        with pytest.raises(ContractError):
            F.forward_logits(m, x_a, None, [4, 5])

    def test_token_outside_vocab(self):
        m = build("audio_only")
        x_a, _ = sample_inputs(m.cfg)
        with pytest.raises(VocabularyError):
            F.forward_logits(m, x_a, None, [BOS_ID, 12])

    def test_alpha_and_gates_receive_gradient(self):
        m = build("dual_use", seed=23)
        x_a, x_v = sample_inputs(m.cfg)
        logits = F.forward_logits(m, x_a, x_v, [BOS_ID, 4, 5])
        loss = T.cross_entropy(logits, [4, 5, 2], pad_id=0)
        grads = T.backward(loss, params=m.parameters())
        assert abs(grads[m.pathway.alpha.node_id].item()) > 0
        flams = [p for kind, p in m.dec_stack if kind == "flamingo"]
        assert any(abs(grads[p.gate_attn.node_id].item()) > 0 for p in flams)

    def test_gradcheck_fusion_parameters(self):
        m = build("dual_use", seed=24)
        x_a, x_v = sample_inputs(m.cfg, n_tokens=2)
        # move off the zero-gate point so W_proj sees gradient
        m.pathway.alpha = T.parameter(np.asarray(0.4))
        flam = next(p for kind, p in m.dec_stack if kind == "flamingo")
        flam.gate_attn = T.parameter(np.asarray(0.2))
        flam.gate_ffn = T.parameter(np.asarray(-0.3))
        targets = [4, 2]

        def loss_fn(*_):
            logits = F.forward_logits(m, x_a, x_v, [BOS_ID, 4])
            return T.cross_entropy(logits, targets, pad_id=0)

        err = T.grad_check(
            loss_fn, [m.pathway.alpha, flam.gate_attn, flam.gate_ffn], h=1e-5)
        assert err < 1e-4


class TestStatePersistence:
    def test_checkpoint_roundtrip_preserves_logits(self, tmp_path):
        m = build("dual_use", seed=31)
        x_a, x_v = sample_inputs(m.cfg)
        prefix = [BOS_ID, 4, 5]
        before = F.forward_logits(m, x_a, x_v, prefix).data
        path = tmp_path / "m.ckpt"
        tf.save_checkpoint(path, m.named_parameters())
        fresh = build("dual_use", seed=99)
        F.load_state(fresh, tf.load_checkpoint(path))
        after = F.forward_logits(fresh, x_a, x_v, prefix).data
        assert np.array_equal(before, after)

    def test_load_shared_covers_audio_submodules(self, tmp_path):
        stage1 = build("audio_only", seed=32)
        path = tmp_path / "s1.ckpt"
        tf.save_checkpoint(path, stage1.named_parameters())
        av = build("dual_use", seed=33)
        shared = F.load_shared(av, tf.load_checkpoint(path))
        assert "frontend.w1" in shared and "dec.block0.w1" in shared
        assert not any(n.startswith("visual.") for n in shared)
        x_a, x_v = sample_inputs(av.cfg)
        base = F.forward_logits(stage1, x_a, None, [BOS_ID, 4]).data
        got = F.forward_logits(av, x_a, x_v, [BOS_ID, 4]).data
        assert np.abs(got - base).max() < 1e-10

    def test_shape_mismatch_is_compatibility_error(self, tmp_path):
        m = build("audio_only", seed=34)
        path = tmp_path / "bad.ckpt"
        tf.save_checkpoint(path, m.named_parameters())
        other_cfg = small_cfg()
        other_cfg.vocab = 8
        other = F.build_model(F.ModelVariant("audio_only"), other_cfg, 35)
        with pytest.raises(CompatibilityError):
            F.load_state(other, tf.load_checkpoint(path))

    def test_sidecar_roundtrip(self, tmp_path):
        m = build("dual_use", seed=36, fusion_design="concat",
                  visual_tap_block=1)
        path = tmp_path / "m.json"
        F.write_sidecar(path, m, "digest123")
        variant, cfg, seed, digest = F.read_sidecar(path)
        assert variant.kind == "dual_use"
        assert variant.fusion_design == "concat"
        assert variant.visual_tap_block == 1
        assert cfg == m.cfg and seed == 36 and digest == "digest123"
