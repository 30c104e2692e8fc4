"""Seeded synthetic audiovisual corpus.

Each token emits 8 audio frames (template + gaussian noise) and 2 video
frames (template + noise, clipped to [0, 1]), mirroring 100 Hz audio
against 25 Hz video.  The whole corpus is a pure function of its config,
which makes byte-identical regeneration and paired noisy evaluation
possible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorpusParseError, VocabularyError
from .tokens import N_SPECIALS

AUDIO_FRAMES_PER_TOKEN = 8
VIDEO_FRAMES_PER_TOKEN = 2
SPLITS = ("train", "dev", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

CORPUS_FORMAT = "avfusion-corpus"
CORPUS_VERSION = 1


@dataclass
class CorpusConfig:
    vocab: int = 32
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    min_tokens: int = 3
    max_tokens: int = 6
    sigma_audio: float = 0.3
    sigma_video: float = 0.1
    # Audio templates are shared_base + spread * unique_part: most frame
    # energy is common structure (as in real filterbank features), so
    # babble scaled to total signal power buries the discriminative part
    # while clean audio stays fully separable.
    audio_template_spread: float = 0.15
    audio_dim: int = 26
    video_height: int = 8
    video_width: int = 8
    n_speakers: int = 20
    seed: int = 0

    def validate(self):
        if self.vocab < N_SPECIALS:
            raise ConfigError(
                f"vocab: must be >= {N_SPECIALS} (specials), got {self.vocab}")
        if self.sigma_audio < 0 or self.sigma_video < 0:
            raise ConfigError("sigma_audio/sigma_video: must be >= 0")
        if self.audio_template_spread <= 0:
            raise ConfigError("audio_template_spread: must be > 0")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError(
                f"min_tokens/max_tokens: bad range "
                f"[{self.min_tokens}, {self.max_tokens}]")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.n_speakers < 1:
            raise ConfigError(f"n_speakers: must be >= 1, got {self.n_speakers}")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Utterance:
    id: str
    speaker_id: str
    split: str
    tokens: list
    audio: np.ndarray              # (2T, audio_dim)
    video: np.ndarray              # (T/2, H, W) in [0, 1]


@dataclass
class Corpus:
    config: CorpusConfig
    splits: dict = field(default_factory=dict)

    def utterances(self, split):
        return self.splits[split]


def make_templates(cfg):
    """Per-symbol emission patterns, one draw from the corpus seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    base = rng.standard_normal((AUDIO_FRAMES_PER_TOKEN, cfg.audio_dim))
    templates = {}
    for sym in range(N_SPECIALS, cfg.vocab):
        unique = rng.standard_normal((AUDIO_FRAMES_PER_TOKEN, cfg.audio_dim))
        audio = base + cfg.audio_template_spread * unique
        video = rng.uniform(0, 1, (VIDEO_FRAMES_PER_TOKEN, cfg.video_height,
                                   cfg.video_width))
        templates[sym] = (audio, video)
    return templates


def generate_utterance(tokens, templates, sigma_audio, sigma_video, seed,
                       utt_id="", speaker_id="", split="train"):
    """Emit template frames plus gaussian noise; deterministic in seed."""
    for tok in tokens:
        if tok not in templates:
            raise VocabularyError(f"generate_utterance: token {tok} has no template")
    rng = np.random.default_rng(seed)
    audio_parts, video_parts = [], []
    for tok in tokens:
        a_tmpl, v_tmpl = templates[tok]
        audio_parts.append(a_tmpl + rng.normal(0.0, sigma_audio, a_tmpl.shape))
        noisy_video = v_tmpl + rng.normal(0.0, sigma_video, v_tmpl.shape)
        video_parts.append(np.clip(noisy_video, 0.0, 1.0))
    return Utterance(id=utt_id, speaker_id=speaker_id, split=split,
                     tokens=list(tokens),
                     audio=np.concatenate(audio_parts, axis=0),
                     video=np.concatenate(video_parts, axis=0))


def generate_corpus(cfg):
    """All three splits; utterance seeds follow a (seed, split, index) scheme."""
    cfg.validate()
    templates = make_templates(cfg)
    content = np.arange(N_SPECIALS, cfg.vocab)
    corpus = Corpus(config=cfg)
    sizes = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    for split in SPLITS:
        rows = []
        code = _SPLIT_CODE[split]
        for i in range(sizes[split]):
            rng = np.random.default_rng([cfg.seed, 1, code, i])
            n_tok = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
            tokens = [int(t) for t in rng.choice(content, n_tok)]
            rows.append(generate_utterance(
                tokens, templates, cfg.sigma_audio, cfg.sigma_video,
                seed=[cfg.seed, 2, code, i],
                utt_id=f"{split}-{i:05d}",
                speaker_id=f"spk{i % cfg.n_speakers:02d}",
                split=split))
        corpus.splits[split] = rows
    return corpus


# ---------------------------------------------------------------------------
# JSON-lines serialization
# ---------------------------------------------------------------------------

def write_corpus(corpus, path):
    """One header line (format/version/config/digest) then one utterance per line."""
    header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION,
              "config": corpus.config.to_dict(),
              "config_digest": corpus.config.digest()}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in SPLITS:
            for utt in corpus.splits.get(split, []):
                row = {"id": utt.id, "speaker": utt.speaker_id,
                       "split": utt.split, "tokens": utt.tokens,
                       "audio": utt.audio.tolist(),
                       "video": utt.video.tolist()}
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_corpus(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusParseError(f"{path}: line 1: empty file, header expected")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{path}: line 1: bad header ({exc})") from exc
    if header.get("format") != CORPUS_FORMAT:
        raise CorpusParseError(f"{path}: line 1: not a corpus file")
    cfg = CorpusConfig.from_dict(header["config"])
    corpus = Corpus(config=cfg, splits={s: [] for s in SPLITS})
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            utt = Utterance(id=row["id"], speaker_id=row["speaker"],
                            split=row["split"],
                            tokens=[int(t) for t in row["tokens"]],
                            audio=np.asarray(row["audio"], dtype=np.float64),
                            video=np.asarray(row["video"], dtype=np.float64))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusParseError(f"{path}: line {lineno}: {exc}") from exc
        if utt.split not in corpus.splits:
            raise CorpusParseError(
                f"{path}: line {lineno}: unknown split {utt.split!r}")
        corpus.splits[utt.split].append(utt)
    return corpus
