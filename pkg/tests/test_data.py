import numpy as np
import pytest
from scipy import stats

from avfusion import data as D
from avfusion.errors import ConfigError, CorpusParseError, VocabularyError


def tiny_cfg(**kw):
    base = dict(vocab=12, n_train=30, n_dev=10, n_test=10, min_tokens=2,
                max_tokens=4, sigma_audio=0.2, sigma_video=0.1, audio_dim=6,
                video_height=4, video_width=4, n_speakers=5, seed=7)
    base.update(kw)
    return D.CorpusConfig(**base).validate()


class TestGenerateUtterance:
    def test_zero_sigma_reproduces_templates(self):
        cfg = tiny_cfg()
        templates = D.make_templates(cfg)
        utt = D.generate_utterance([4, 5], templates, 0.0, 0.0, seed=1)
        assert np.array_equal(utt.audio[:8], templates[4][0])
        assert np.array_equal(utt.audio[8:], templates[5][0])
        assert np.array_equal(utt.video[:2], templates[4][1])

    def test_frame_ratio(self):
        cfg = tiny_cfg()
        templates = D.make_templates(cfg)
        utt = D.generate_utterance([4, 5, 6], templates, 0.1, 0.1, seed=2)
        assert utt.audio.shape == (24, cfg.audio_dim)
        assert utt.video.shape == (6, cfg.video_height, cfg.video_width)

    def test_determinism(self):
        cfg = tiny_cfg()
        templates = D.make_templates(cfg)
        a = D.generate_utterance([4, 7], templates, 0.3, 0.1, seed=[3, 1])
        b = D.generate_utterance([4, 7], templates, 0.3, 0.1, seed=[3, 1])
        assert np.array_equal(a.audio, b.audio)
        assert np.array_equal(a.video, b.video)

    def test_video_clipped_to_unit_interval(self):
        cfg = tiny_cfg()
        templates = D.make_templates(cfg)
        utt = D.generate_utterance([4], templates, 0.0, 5.0, seed=4)
        assert utt.video.min() >= 0.0 and utt.video.max() <= 1.0

    def test_unknown_token(self):
        cfg = tiny_cfg()
        templates = D.make_templates(cfg)
        with pytest.raises(VocabularyError):
            D.generate_utterance([99], templates, 0.1, 0.1, seed=5)


class TestGenerateCorpus:
    def test_split_sizes(self):
        corpus = D.generate_corpus(tiny_cfg(n_train=100, n_dev=20, n_test=20))
        assert len(corpus.utterances("train")) == 100
        assert len(corpus.utterances("dev")) == 20
        assert len(corpus.utterances("test")) == 20

    def test_ids_disjoint_across_splits(self):
        corpus = D.generate_corpus(tiny_cfg())
        ids = [u.id for split in D.SPLITS for u in corpus.utterances(split)]
        assert len(ids) == len(set(ids))

    def test_frame_ratio_invariant_everywhere(self):
        corpus = D.generate_corpus(tiny_cfg())
        for split in D.SPLITS:
            for utt in corpus.utterances(split):
                assert utt.audio.shape[0] == 8 * len(utt.tokens)
                assert utt.video.shape[0] == 2 * len(utt.tokens)
                assert utt.audio.shape[0] == 4 * utt.video.shape[0]

    def test_corpus_is_pure_function_of_config(self):
        a = D.generate_corpus(tiny_cfg())
        b = D.generate_corpus(tiny_cfg())
        for split in D.SPLITS:
            for ua, ub in zip(a.utterances(split), b.utterances(split)):
                assert ua.tokens == ub.tokens
                assert np.array_equal(ua.audio, ub.audio)
                assert np.array_equal(ua.video, ub.video)

    def test_token_histogram_uniform(self):
        cfg = tiny_cfg(vocab=12, n_train=1500, max_tokens=6)
        corpus = D.generate_corpus(cfg)
        tokens = [t for u in corpus.utterances("train") for t in u.tokens]
        assert len(tokens) > 4000
        counts = np.bincount(tokens, minlength=cfg.vocab)[4:]
        assert stats.chisquare(counts).pvalue > 0.01

    def test_invalid_config(self):
        with pytest.raises(ConfigError, match="vocab"):
            tiny_cfg(vocab=3)
        with pytest.raises(ConfigError, match="sigma"):
            tiny_cfg(sigma_audio=-0.1)


class TestSeparability:
    """Both channels must carry the symbol before any model training."""

    def nearest_template_accuracy(self, corpus, templates, channel):
        correct = total = 0
        frames = {"audio": D.AUDIO_FRAMES_PER_TOKEN,
                  "video": D.VIDEO_FRAMES_PER_TOKEN}[channel]
        symbols = sorted(templates)
        banks = np.stack([templates[s][0 if channel == "audio" else 1]
                          for s in symbols])
        for utt in corpus.utterances("dev"):
            track = getattr(utt, channel)
            for pos, tok in enumerate(utt.tokens):
                seg = track[pos * frames:(pos + 1) * frames]
                dists = ((banks - seg) ** 2).sum(axis=tuple(range(1, banks.ndim)))
                if symbols[int(np.argmin(dists))] == tok:
                    correct += 1
                total += 1
        return correct / total

    def test_audio_separable_at_low_sigma(self):
        cfg = tiny_cfg(sigma_audio=0.1, n_dev=40)
        corpus = D.generate_corpus(cfg)
        acc = self.nearest_template_accuracy(corpus, D.make_templates(cfg), "audio")
        assert acc >= 0.99

    def test_video_separable_at_low_sigma(self):
        cfg = tiny_cfg(sigma_video=0.1, n_dev=40)
        corpus = D.generate_corpus(cfg)
        acc = self.nearest_template_accuracy(corpus, D.make_templates(cfg), "video")
        assert acc >= 0.99


class TestCorpusIO:
    def test_roundtrip(self, tmp_path):
        corpus = D.generate_corpus(tiny_cfg(n_train=10, n_dev=3, n_test=2))
        path = tmp_path / "corpus.jsonl"
        D.write_corpus(corpus, path)
        loaded = D.read_corpus(path)
        assert loaded.config == corpus.config
        for split in D.SPLITS:
            for ua, ub in zip(corpus.utterances(split), loaded.utterances(split)):
                assert ua.id == ub.id and ua.tokens == ub.tokens
                assert np.array_equal(ua.audio, ub.audio)
                assert np.array_equal(ua.video, ub.video)

    def test_empty_corpus_has_header_only(self, tmp_path):
        corpus = D.generate_corpus(tiny_cfg(n_train=0, n_dev=0, n_test=0))
        path = tmp_path / "empty.jsonl"
        D.write_corpus(corpus, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        assert D.CORPUS_FORMAT in lines[0]
        loaded = D.read_corpus(path)
        assert all(not loaded.utterances(s) for s in D.SPLITS)

    def test_truncated_line_names_line_number(self, tmp_path):
        corpus = D.generate_corpus(tiny_cfg(n_train=3, n_dev=0, n_test=0))
        path = tmp_path / "broken.jsonl"
        D.write_corpus(corpus, path)
        lines = path.read_text().splitlines()
        (tmp_path / "broken.jsonl").write_text(
            "\n".join(lines[:2] + [lines[3][:40]]) + "\n")
        with pytest.raises(CorpusParseError, match="line 3"):
            D.read_corpus(tmp_path / "broken.jsonl")

    def test_write_is_byte_deterministic(self, tmp_path):
        cfg = tiny_cfg(n_train=5, n_dev=2, n_test=2)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        D.write_corpus(D.generate_corpus(cfg), pa)
        D.write_corpus(D.generate_corpus(cfg), pb)
        assert pa.read_bytes() == pb.read_bytes()
