"""Audiovisual fusion ASR testbed: tensors, transformer blocks, fusion
variants, babble-noise benchmarking, and a reproducible experiment CLI."""

__version__ = "0.1.0"
