import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avfusion import noise as N
from avfusion.errors import (ContractError, DegenerateNoiseError,
                             DegenerateSignalError)


def pool(n=6, seed=0, pool_index=0):
    return N.make_pool("pool_A", n, seed, pool_index)


class TestMixAtSnr:
    def test_equal_powers_at_zero_db(self):
        r = np.random.default_rng(0)
        s = r.standard_normal((40, 5))
        n = r.standard_normal((40, 5))
        n *= np.sqrt((s ** 2).mean() / (n ** 2).mean())   # match powers
        mixed = N.mix_at_snr(s, n, 0.0)
        assert np.allclose(mixed, s + n, atol=1e-12)

    def test_huge_snr_leaves_signal(self):
        r = np.random.default_rng(1)
        s = r.standard_normal((30, 4))
        n = r.standard_normal((30, 4))
        mixed = N.mix_at_snr(s, n, 300.0)
        assert np.abs(mixed - s).max() < 1e-10

    def test_remeasured_snr_matches_request(self):
        r = np.random.default_rng(2)
        s = 2.0 * r.standard_normal((50, 3))          # P_s ~ 4
        n = r.standard_normal((50, 3))                # P_n ~ 1
        gain_noise = N.mix_at_snr(s, n, 10.0) - s
        assert abs(N.measure_snr_db(s, gain_noise) - 10.0) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.floats(min_value=-10, max_value=20),
           st.integers(min_value=0, max_value=10_000))
    def test_snr_exactness_property(self, snr_db, seed):
        r = np.random.default_rng(seed)
        s = r.standard_normal((24, 6)) * (1 + r.random())
        n = r.standard_normal((24, 6))
        scaled = N.mix_at_snr(s, n, snr_db) - s
        assert abs(N.measure_snr_db(s, scaled) - snr_db) < 1e-9

    def test_degenerate_inputs(self):
        s = np.ones((4, 2))
        with pytest.raises(DegenerateNoiseError):
            N.mix_at_snr(s, np.zeros((4, 2)), 0.0)
        with pytest.raises(DegenerateSignalError):
            N.mix_at_snr(np.zeros((4, 2)), s, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            N.mix_at_snr(np.ones((4, 2)), np.ones((4, 3)), 0.0)


class TestBuildBabble:
    def test_single_speaker_single_overlap_unit_power(self):
        track = N.build_babble(pool(1), length=64, n_overlap=1, seed=3)
        assert track.features.shape == (64, 26)
        assert abs((track.features ** 2).mean() - 1.0) < 1e-12
        assert track.speaker_ids == (pool(1)[0].speaker_id,)

    def test_same_seed_is_deterministic(self):
        a = N.build_babble(pool(), 48, n_overlap=5, seed=9)
        b = N.build_babble(pool(), 48, n_overlap=5, seed=9)
        assert np.array_equal(a.features, b.features)
        assert a.speaker_ids == b.speaker_ids

    def test_different_seeds_differ(self):
        a = N.build_babble(pool(), 48, n_overlap=5, seed=9)
        b = N.build_babble(pool(), 48, n_overlap=5, seed=10)
        assert not np.array_equal(a.features, b.features)

    def test_central_limit_skewness(self):
        track = N.build_babble(pool(10), length=10_000, n_overlap=30, seed=4)
        x = track.features[:, 0]
        skew = ((x - x.mean()) ** 3).mean() / x.std() ** 3
        assert abs(skew) < 0.2

    def test_empty_speaker_list(self):
        with pytest.raises(ContractError):
            N.build_babble([], 32, n_overlap=3, seed=0)

    def test_provenance_stays_inside_pool(self):
        speakers = pool(4)
        track = N.build_babble(speakers, 32, n_overlap=12, seed=5)
        allowed = {sp.speaker_id for sp in speakers}
        assert set(track.speaker_ids) <= allowed


class TestPartition:
    def test_thirty_speakers_split_evenly(self):
        speakers = N.make_pool("pool_A", 30, 7, 0)
        part = N.partition_speakers(speakers, (1 / 3, 1 / 3, 1 / 3), seed=1)
        assert len(part.train) == len(part.validation) == len(part.test) == 10

    def test_all_train(self):
        part = N.partition_speakers(pool(5), (1.0, 0.0, 0.0), seed=2)
        assert len(part.train) == 5 and not part.validation and not part.test

    def test_disjoint_and_covering(self):
        speakers = pool(9)
        part = N.partition_speakers(speakers, (0.5, 0.25, 0.25), seed=3)
        ids = {sp.speaker_id for sp in speakers}
        assert part.train | part.validation | part.test == ids
        assert not part.train & part.validation
        assert not part.train & part.test
        assert not part.validation & part.test

    def test_seed_changes_assignment_not_sizes(self):
        speakers = N.make_pool("pool_A", 12, 11, 0)
        a = N.partition_speakers(speakers, (0.5, 0.25, 0.25), seed=1)
        b = N.partition_speakers(speakers, (0.5, 0.25, 0.25), seed=2)
        assert (len(a.train), len(a.validation), len(a.test)) == \
               (len(b.train), len(b.validation), len(b.test))
        assert a.train != b.train

    def test_pool_too_small(self):
        with pytest.raises(ContractError):
            N.partition_speakers(pool(2), (0.5, 0.25, 0.25), seed=0)

    def test_bad_fractions(self):
        with pytest.raises(ContractError):
            N.partition_speakers(pool(6), (0.5, 0.2, 0.2), seed=0)


class TestPools:
    def test_pool_seed_ranges_disjoint(self):
        a = N.make_pool("pool_A", 5, 42, 0)
        b = N.make_pool("pool_B", 5, 42, 1)
        assert {sp.seed for sp in a}.isdisjoint({sp.seed for sp in b})
        for sa, sb in zip(a, b):
            assert not np.array_equal(sa.templates, sb.templates)

    def test_manifest_roundtrip(self, tmp_path):
        speakers = pool(6)
        part = N.partition_speakers(speakers, (0.5, 0.25, 0.25), seed=4)
        path = tmp_path / "pool_A.json"
        N.write_pool_manifest(path, "pool_A", speakers, part, "digest456")
        doc, loaded = N.read_pool_manifest(path)
        assert doc["pool"] == "pool_A" and doc["config_digest"] == "digest456"
        assert loaded == part
