import numpy as np
import pytest

from avfusion import tensor as T
from avfusion import transformer as tf
from avfusion.errors import ContractError


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSinusoidalPositions:
    def test_row_zero(self):
        pe = tf.sinusoidal_positions(4, 8)
        assert np.array_equal(pe[0, 0::2], np.zeros(4))
        assert np.array_equal(pe[0, 1::2], np.ones(4))

    def test_first_column_is_sin_t(self):
        pe = tf.sinusoidal_positions(10, 6)
        assert np.allclose(pe[:, 0], np.sin(np.arange(10)), atol=1e-15)

    def test_closed_form_entry(self):
        pe = tf.sinusoidal_positions(8, 8)
        # column 5 is the cos twin of frequency index 2 -> exponent 4/8
        expected = np.cos(7 / 10000.0 ** (4 / 8))
        assert abs(pe[7, 5] - expected) < 1e-15

    def test_odd_dim_rejected(self):
        with pytest.raises(ContractError):
            tf.sinusoidal_positions(4, 7)


def random_attn(seed, d=8, n_heads=2):
    r = rng(seed)
    return tf.AttnParams(
        w_q=T.tensor(r.standard_normal((d, d))),
        w_k=T.tensor(r.standard_normal((d, d))),
        w_v=T.tensor(r.standard_normal((d, d))),
        w_o=T.tensor(r.standard_normal((d, d))),
        n_heads=n_heads)


class TestMultiHeadAttention:
    def test_single_kv_position(self):
        p = random_attn(0)
        r = rng(1)
        q_in = T.tensor(r.standard_normal((3, 8)))
        kv = T.tensor(r.standard_normal((1, 8)))
        out = tf.multi_head_attention(q_in, kv, p).data
        expected = kv.data @ p.w_v.data @ p.w_o.data
        assert np.allclose(out, np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_identical_keys_average_values(self):
        p = random_attn(2)
        r = rng(3)
        q_in = T.tensor(r.standard_normal((2, 8)))
        kv = T.tensor(np.tile(r.standard_normal(8), (4, 1)))
        out = tf.multi_head_attention(q_in, kv, p).data
        expected = kv.data[0:1] @ p.w_v.data @ p.w_o.data
        assert np.allclose(out, np.repeat(expected, 2, axis=0), atol=1e-12)

    def test_hand_rolled_oracle(self):
        p = random_attn(4, d=2, n_heads=1)
        r = rng(5)
        q_in = T.tensor(r.standard_normal((2, 2)))
        kv_in = T.tensor(r.standard_normal((2, 2)))
        q, k, v = (q_in.data @ p.w_q.data, kv_in.data @ p.w_k.data,
                   kv_in.data @ p.w_v.data)
        s = q @ k.T / np.sqrt(2.0)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        expected = (e / e.sum(axis=-1, keepdims=True)) @ v @ p.w_o.data
        got = tf.multi_head_attention(q_in, kv_in, p).data
        assert np.allclose(got, expected, atol=1e-13)


def zeroed_encoder_block(seed, d=8, n_heads=2):
    blk = tf.make_encoder_block(seed, "enc", d, n_heads)
    blk.attn.w_o = T.parameter(np.zeros((d, d)))
    blk.w2 = T.parameter(np.zeros((4 * d, d)))
    return blk


class TestEncoderBlock:
    def test_residual_identity_with_zero_projections(self):
        blk = zeroed_encoder_block(0)
        x = T.tensor(rng(1).standard_normal((5, 8)))
        out = tf.encoder_block(x, blk).data
        assert np.array_equal(out, x.data)

    @pytest.mark.parametrize("length", [1, 3, 9])
    def test_shape_preserved(self, length):
        blk = tf.make_encoder_block(7, "enc", 8, 2)
        x = T.tensor(rng(2).standard_normal((length, 8)))
        assert tf.encoder_block(x, blk).shape == (length, 8)

    def test_single_token_matches_composed_primitives(self):
        blk = tf.make_encoder_block(9, "enc", 8, 2)
        x = T.tensor(rng(3).standard_normal((1, 8)))
        z = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
        attn = tf.multi_head_attention(z, z, blk.attn)
        h = T.add(x, attn)
        z2 = T.layer_norm(h, blk.ln2_g, blk.ln2_b)
        ffn = T.matmul(T.gelu(T.matmul(z2, blk.w1)), blk.w2)
        expected = T.add(h, ffn).data
        assert np.array_equal(tf.encoder_block(x, blk).data, expected)


class TestDecoderBlock:
    def setup_method(self):
        self.blk = tf.make_decoder_block(11, "dec", 8, 2)
        self.memory = T.tensor(rng(4).standard_normal((6, 8)))

    def test_single_row_equals_unmasked_block(self):
        y = T.tensor(rng(5).standard_normal((1, 8)))
        full = tf.decoder_block(y, self.memory, self.blk).data
        z1 = T.layer_norm(y, self.blk.ln1_g, self.blk.ln1_b)
        h1 = T.add(y, tf.multi_head_attention(z1, z1, self.blk.self_attn,
                                              row_stable=True))
        z2 = T.layer_norm(h1, self.blk.ln2_g, self.blk.ln2_b)
        h2 = T.add(h1, tf.multi_head_attention(z2, self.memory,
                                               self.blk.cross_attn,
                                               row_stable=True))
        z3 = T.layer_norm(h2, self.blk.ln3_g, self.blk.ln3_b)
        ffn = T.matmul(T.gelu(T.matmul(z3, self.blk.w1, row_stable=True)),
                       self.blk.w2, row_stable=True)
        assert np.array_equal(full, T.add(h2, ffn).data)

    def test_causality(self):
        base = rng(6).standard_normal((5, 8))
        bumped = base.copy()
        bumped[3:] += 2.0
        a = tf.decoder_block(T.tensor(base), self.memory, self.blk).data
        b = tf.decoder_block(T.tensor(bumped), self.memory, self.blk).data
        assert np.array_equal(a[:3], b[:3])

    def test_incremental_matches_full_bitwise(self):
        y = rng(7).standard_normal((5, 8))
        full = tf.decoder_block(T.tensor(y), self.memory, self.blk).data
        cache = tf.DecoderBlockCache(self.blk, self.memory.data, max_len=5)
        rows = [tf.decoder_block_step(y[i:i + 1], self.blk, cache)
                for i in range(5)]
        assert np.array_equal(np.concatenate(rows, axis=0), full)

    def test_residual_identity(self):
        d = 8
        self.blk.self_attn.w_o = T.parameter(np.zeros((d, d)))
        self.blk.cross_attn.w_o = T.parameter(np.zeros((d, d)))
        self.blk.w2 = T.parameter(np.zeros((4 * d, d)))
        y = T.tensor(rng(8).standard_normal((4, 8)))
        out = tf.decoder_block(y, self.memory, self.blk).data
        assert np.array_equal(out, y.data)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        r = rng(9)
        named = [("enc.w", T.parameter(r.standard_normal((3, 4)))),
                 ("alpha", T.parameter(np.asarray(0.25))),
                 ("dec.b", T.parameter(r.standard_normal(7)))]
        path = tmp_path / "model.ckpt"
        tf.save_checkpoint(path, named)
        loaded = tf.load_checkpoint(path)
        assert list(loaded) == ["enc.w", "alpha", "dec.b"]
        for name, tens in named:
            assert np.array_equal(loaded[name], tens.data)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ContractError):
            tf.load_checkpoint(path)

    def test_shared_seed_streams_are_name_stable(self):
        a = tf.init_matrix(42, "enc.block0.w1", 4, 8)
        b = tf.init_matrix(42, "enc.block0.w1", 4, 8)
        c = tf.init_matrix(42, "enc.block1.w1", 4, 8)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)


class TestBlockGradients:
    def test_encoder_block_grad_check(self):
        blk = tf.make_encoder_block(13, "enc", 4, 2)
        x = T.parameter(rng(10).standard_normal((3, 4)))
        w = T.tensor(rng(11).standard_normal((3, 4)))
        err = T.grad_check(
            lambda x_: T.sum_all(T.mul(tf.encoder_block(x_, blk), w)), [x])
        assert err < 1e-5

    def test_decoder_block_grad_check(self):
        blk = tf.make_decoder_block(14, "dec", 4, 2)
        mem = T.tensor(rng(12).standard_normal((5, 4)))
        y = T.parameter(rng(13).standard_normal((3, 4)))
        w = T.tensor(rng(14).standard_normal((3, 4)))
        err = T.grad_check(
            lambda y_: T.sum_all(T.mul(tf.decoder_block(y_, mem, blk), w)), [y])
        assert err < 1e-5
