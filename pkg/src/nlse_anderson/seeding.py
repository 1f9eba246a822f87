"""Counter-based seed derivation for reproducible parallel ensembles."""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def derive_seed(master_seed: int, index: int) -> int:
    """Stateless, injective (per master) seed for realization `index`.

    SplitMix64 finalizer applied to master + (index+1)*golden; the finalizer
    is a bijection on 64-bit integers, so distinct indices below 2^64 can
    never collide for a fixed master seed.
    """
    if index < 0:
        raise ValueError("realization index must be >= 0")
    z = (master_seed + (index + 1) * _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK
