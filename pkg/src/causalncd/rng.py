"""Deterministic seed derivation.

Every stochastic component draws from its own named stream so that enabling
or disabling one component never shifts the random numbers seen by another.
Streams are derived from a root seed with a splitmix-style mixer: the root is
advanced once per tag token, and each token (integers, or strings hashed to
integers) perturbs the state.  The mixer is the standard splitmix64 finalizer,
so derived seeds are well spread even for adjacent roots.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(state: int) -> int:
    # splitmix64 finalizer; constants are the published ones.
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _token_to_int(token: int | str) -> int:
    if isinstance(token, str):
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(token) & _MASK


def derive_seed(root: int, *tokens: int | str) -> int:
    """Derive a 64-bit child seed from ``root`` and a tag sequence.

    Deterministic, order sensitive, and stable across platforms.
    """
    state = _splitmix64(int(root) & _MASK)
    for token in tokens:
        state = _splitmix64((state ^ _token_to_int(token)) & _MASK)
    return state


def stream(root: int, *tokens: int | str) -> np.random.Generator:
    """A numpy Generator seeded from the derived child seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *tokens)))
