"""Babble-noise synthesis and exact-SNR mixing.

Noise lives in the same feature space as the synthetic corpus (template
frames, not waveforms); SNR is defined on mean squared feature energy.
Two pools with disjoint seed ranges model the seen/unseen noise-source
split, and speakers inside a pool are partitioned exclusively across
train/validation/test so no evaluation babble reuses training voices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (ContractError, DegenerateNoiseError,
                     DegenerateSignalError)

FRAMES_PER_SYMBOL = 8


@dataclass(frozen=True)
class NoiseSpeaker:
    speaker_id: str
    seed: int
    templates: np.ndarray          # (n_symbols, feature_dim)


@dataclass(frozen=True)
class BabbleTrack:
    """A babble realization plus the speaker ids that produced it."""

    features: np.ndarray           # (length, feature_dim), unit power
    speaker_ids: tuple


@dataclass(frozen=True)
class NoisePartition:
    train: frozenset
    validation: frozenset
    test: frozenset

    def for_split(self, split):
        return {"train": self.train, "dev": self.validation,
                "validation": self.validation, "test": self.test}[split]


@dataclass(frozen=True)
class SnrSpec:
    snr_db: float
    source: str                    # "pool_A" | "pool_B"

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ContractError(f"snr_db must be finite, got {self.snr_db}")


def make_speaker(speaker_id, seed, n_symbols=24, feature_dim=26):
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((n_symbols, feature_dim))
    return NoiseSpeaker(speaker_id=speaker_id, seed=seed, templates=templates)


def make_pool(pool_name, n_speakers, base_seed, pool_index, n_symbols=24,
              feature_dim=26):
    """Speakers for one pool; pool_index keeps pool seed ranges disjoint."""
    speakers = []
    for i in range(n_speakers):
        sseq = np.random.SeedSequence([int(base_seed), int(pool_index), i])
        seed = int(sseq.generate_state(1)[0])
        speakers.append(make_speaker(f"{pool_name}-spk{i:02d}", seed,
                                     n_symbols, feature_dim))
    return speakers


def speaker_track(speaker, length, rng):
    """One synthetic utterance track: random symbols held for 8 frames."""
    n_symbols, feature_dim = speaker.templates.shape
    n_segments = -(-length // FRAMES_PER_SYMBOL)
    symbols = rng.integers(0, n_symbols, n_segments)
    frames = np.repeat(speaker.templates[symbols], FRAMES_PER_SYMBOL, axis=0)
    return frames[:length]


def build_babble(speakers, length, n_overlap=30, seed=0):
    """Sum of n_overlap speaker tracks at random onsets, unit power."""
    if not speakers:
        raise ContractError("build_babble: empty speaker list")
    if n_overlap < 1:
        raise ContractError(f"build_babble: n_overlap {n_overlap} < 1")
    rng = np.random.default_rng(seed)
    feature_dim = speakers[0].templates.shape[1]
    total = np.zeros((length, feature_dim))
    used = []
    for _ in range(n_overlap):
        sp = speakers[int(rng.integers(len(speakers)))]
        track = speaker_track(sp, length, rng)
        onset = int(rng.integers(length))
        total += np.roll(track, onset, axis=0)
        used.append(sp.speaker_id)
    power = float((total ** 2).mean())
    if power == 0.0:
        raise DegenerateNoiseError("build_babble: zero-power babble")
    return BabbleTrack(features=total / np.sqrt(power),
                       speaker_ids=tuple(used))


def mix_at_snr(signal, noise, snr_db):
    """signal + g*noise with g chosen so the mixture hits snr_db exactly."""
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if signal.shape != noise.shape:
        raise ContractError(
            f"mix_at_snr: signal {signal.shape} != noise {noise.shape}")
    p_signal = float((signal ** 2).mean())
    p_noise = float((noise ** 2).mean())
    if p_noise == 0.0:
        raise DegenerateNoiseError("mix_at_snr: noise has zero power")
    if p_signal == 0.0:
        raise DegenerateSignalError("mix_at_snr: signal has zero power")
    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return signal + gain * noise


def measure_snr_db(signal, scaled_noise):
    """10 log10 of signal power over noise power (test oracle)."""
    p_signal = float((np.asarray(signal) ** 2).mean())
    p_noise = float((np.asarray(scaled_noise) ** 2).mean())
    return 10.0 * np.log10(p_signal / p_noise)


def partition_speakers(pool, fractions, seed):
    """Seeded shuffle then exclusive split into train/validation/test."""
    ids = [sp.speaker_id if isinstance(sp, NoiseSpeaker) else str(sp)
           for sp in pool]
    if len(ids) != len(set(ids)):
        raise ContractError("partition_speakers: duplicate speaker ids")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(
            f"partition_speakers: fractions {fractions} do not sum to 1")
    if len(ids) < 3:
        raise ContractError(f"partition_speakers: pool of {len(ids)} < 3")
    order = list(np.random.default_rng(seed).permutation(ids))
    n = len(order)
    cut1 = int(round(fractions[0] * n))
    cut2 = int(round((fractions[0] + fractions[1]) * n))
    parts = (order[:cut1], order[cut1:cut2], order[cut2:])
    for frac, part, name in zip(fractions, parts,
                                ("train", "validation", "test")):
        if frac > 0 and not part:
            raise ContractError(
                f"partition_speakers: pool too small, {name} fraction "
                f"{frac} received no speakers")
    return NoisePartition(train=frozenset(parts[0]),
                          validation=frozenset(parts[1]),
                          test=frozenset(parts[2]))


def speakers_in(pool, id_set):
    return [sp for sp in pool if sp.speaker_id in id_set]


# ---------------------------------------------------------------------------
# Pool manifests
# ---------------------------------------------------------------------------

def write_pool_manifest(path, pool_name, speakers, partition, config_digest):
    def assignment(sid):
        if sid in partition.train:
            return "train"
        if sid in partition.validation:
            return "validation"
        return "test"

    doc = {"pool": pool_name,
           "config_digest": config_digest,
           "speakers": [{"id": sp.speaker_id, "seed": sp.seed,
                         "partition": assignment(sp.speaker_id)}
                        for sp in speakers]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_pool_manifest(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    parts = {"train": set(), "validation": set(), "test": set()}
    for record in doc["speakers"]:
        parts[record["partition"]].add(record["id"])
    partition = NoisePartition(train=frozenset(parts["train"]),
                               validation=frozenset(parts["validation"]),
                               test=frozenset(parts["test"]))
    return doc, partition
