"""Deterministic random-stream derivation.

All randomness in the toolkit flows from a single 64-bit master seed.
Each component draws from its own named stream so that adding or
removing one consumer never perturbs the others.  A stream seed is
derived as ``splitmix64(master XOR fnv1a64(name))`` and feeds a PCG64
generator, which is bit-reproducible across platforms.

Stream names in use:
    synth/centers            cluster center placement
    synth/noise/<label>      per-cluster sample noise
    train/re/init            RE-stage model initialization
    train/re/oc-direction    OC-softmax direction initialization
    train/re/shuffle         RE-stage batch shuffling
    train/fd/init            FD-stage model initialization (fd-only runs)
    train/fd/head            FD-stage output-head re-initialization
    train/fd/shuffle         FD-stage stratified batch shuffling
    train/fd/mixup           mixup partner permutation and lambda draws
    train/fd/npair           positive/negative sampling for the n-pair terms
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    """One SplitMix64 output step for the given 64-bit state."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(master_seed: int, name: str) -> int:
    """Derive the 64-bit seed of the named stream."""
    return splitmix64((master_seed & _MASK64) ^ _fnv1a64(name))


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Return the named component stream as a numpy Generator."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, name)))
