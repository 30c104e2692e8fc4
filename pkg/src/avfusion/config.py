"""Experiment configuration: one JSON file that pins every seed and knob.

Every output artifact carries the digest of the effective (defaults-filled)
config so downstream steps can refuse to mix incompatible runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .data import CorpusConfig
from .errors import ConfigError
from .fusion import ModelConfig
from .train_eval import LrSchedule, TrainConfig

DEFAULT_SNRS_DB = (-5.0, 0.0, 5.0)
POOL_NAMES = ("pool_A", "pool_B")


@dataclass
class NoiseConfig:
    n_speakers: int = 30
    seed: int = 1000
    fractions: tuple = (1 / 3, 1 / 3, 1 / 3)
    babble_overlap: int = 30
    partition_seed: int = 7

    def validate(self):
        if self.n_speakers < 3:
            raise ConfigError(
                f"noise.n_speakers: must be >= 3, got {self.n_speakers}")
        if self.babble_overlap < 1:
            raise ConfigError("noise.babble_overlap: must be >= 1")
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "fractions" in d:
            d["fractions"] = tuple(d["fractions"])
        return cls(**d).validate()


@dataclass
class StageConfig:
    steps: int
    warmup_steps: int
    peak_lr: float
    batch_size: int = 8
    snr_db: float = 0.0
    p_augment: float = 0.5

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def train_config(self, stage, seed):
        return TrainConfig(
            stage=stage,
            schedule=LrSchedule(self.warmup_steps,
                                max(self.steps, self.warmup_steps + 1),
                                self.peak_lr),
            steps=self.steps, batch_size=self.batch_size, snr_db=self.snr_db,
            p_augment=self.p_augment, seed=seed).validate()


@dataclass
class EvalConfig:
    split: str = "dev"
    snrs_db: tuple = DEFAULT_SNRS_DB
    pools: tuple = POOL_NAMES
    beam: int = 5
    length_norm: float = 0.0

    def validate(self):
        if self.split not in ("train", "dev", "test"):
            raise ConfigError(f"eval.split: unknown split {self.split!r}")
        if self.beam < 1:
            raise ConfigError(f"eval.beam: must be >= 1, got {self.beam}")
        bad = [p for p in self.pools if p not in POOL_NAMES]
        if bad:
            raise ConfigError(f"eval.pools: unknown pools {bad}")
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        d["snrs_db"] = list(self.snrs_db)
        d["pools"] = list(self.pools)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "snrs_db" in d:
            d["snrs_db"] = tuple(float(x) for x in d["snrs_db"])
        if "pools" in d:
            d["pools"] = tuple(d["pools"])
        return cls(**d).validate()


# Desk-scale stage defaults; the stage-2 peak keeps an 8x ratio over stage 1.
DEFAULT_STAGE1 = StageConfig(steps=2000, warmup_steps=100, peak_lr=1.25e-3,
                             p_augment=0.0)
DEFAULT_STAGE2 = StageConfig(steps=3000, warmup_steps=300, peak_lr=1.0e-2)


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    stage1: StageConfig = field(default_factory=lambda: DEFAULT_STAGE1)
    stage2: StageConfig = field(default_factory=lambda: DEFAULT_STAGE2)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self):
        self.corpus.validate()
        self.model.validate()
        self.noise.validate()
        self.eval.validate()
        if self.corpus.vocab != self.model.vocab:
            raise ConfigError(
                f"vocab: corpus {self.corpus.vocab} != model {self.model.vocab}")
        if self.corpus.audio_dim != self.model.audio_dim:
            raise ConfigError(
                f"audio_dim: corpus {self.corpus.audio_dim} != model "
                f"{self.model.audio_dim}")
        if (self.corpus.video_height, self.corpus.video_width) != \
                (self.model.video_height, self.model.video_width):
            raise ConfigError("video_height/video_width: corpus and model differ")
        return self

    def to_dict(self):
        return {"corpus": self.corpus.to_dict(), "model": self.model.to_dict(),
                "noise": self.noise.to_dict(), "stage1": self.stage1.to_dict(),
                "stage2": self.stage2.to_dict(), "eval": self.eval.to_dict(),
                "seed": self.seed, "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        known = {"corpus", "model", "noise", "stage1", "stage2", "eval",
                 "seed", "output_dir"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"config: unknown sections {sorted(unknown)}")
        cfg = cls(
            corpus=CorpusConfig.from_dict(doc.get("corpus", {})),
            model=ModelConfig.from_dict(doc.get("model", {})),
            noise=NoiseConfig.from_dict(doc.get("noise", {})),
            stage1=StageConfig.from_dict(
                doc.get("stage1", DEFAULT_STAGE1.to_dict())),
            stage2=StageConfig.from_dict(
                doc.get("stage2", DEFAULT_STAGE2.to_dict())),
            eval=EvalConfig.from_dict(doc.get("eval", {})),
            seed=int(doc.get("seed", 0)),
            output_dir=str(doc.get("output_dir", "runs/default")))
        return cfg.validate()

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def load_experiment(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


def save_experiment(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
