"""Counter-based splittable random keys.

Every draw is a pure function of an explicit 128-bit key, so a sampler run
is reproducible from its root seed alone and chains can be given independent
streams without any shared mutable generator state.

Construction: keys index Philox-4x64 streams (numpy's implementation).
Key derivation (split / fold_in / seed expansion) reads from the same cipher
but under a reserved counter domain, so derived key material never overlaps
the bits handed out as draws:

    counter = [index, 0, domain, 0]

with domain 0 for draws, 1 for split, 2 for fold_in, 3 for seed expansion.
Normal variates are produced by inverse-CDF transform of open-interval
uniforms built from 53 random bits; this choice is fixed so that a given key
always yields the same bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_DOMAIN_DRAW = 0
_DOMAIN_SPLIT = 1
_DOMAIN_FOLD = 2
_DOMAIN_SEED = 3

# arbitrary odd 64-bit constant (golden ratio fraction), fixed forever:
# it keys the expansion of user seeds into root keys.
_SEED_EXPAND_CONST = 0x9E3779B97F4A7C15

_U64 = np.uint64
_TWO53 = 1 << 53


@dataclass(frozen=True)
class RandomKey:
    """Immutable 128-bit stream identifier. Two unsigned 64-bit halves."""

    hi: int
    lo: int

    def __post_init__(self):
        if not (0 <= self.hi < 2**64 and 0 <= self.lo < 2**64):
            raise ValueError("key halves must be unsigned 64-bit integers")

    def __repr__(self):
        return f"RandomKey(0x{self.hi:016x}{self.lo:016x})"


def _stream(key: RandomKey, domain: int, index: int = 0) -> np.random.Generator:
    philox = np.random.Philox(
        key=np.array([key.lo, key.hi], dtype=_U64),
        counter=np.array([index, 0, domain, 0], dtype=_U64),
    )
    return np.random.Generator(philox)


def _draw_words(gen: np.random.Generator, n: int) -> np.ndarray:
    return gen.integers(0, 2**64, size=n, dtype=_U64, endpoint=False)


def key_from_seed(seed: int) -> RandomKey:
    """Expand a 64-bit unsigned seed into a root key.

    The root key is the first 128 bits of the Philox stream keyed by
    (seed, fixed odd constant) in the seed-expansion counter domain.
    """
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    if not (0 <= seed < 2**64):
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    gen = _stream(RandomKey(_SEED_EXPAND_CONST, int(seed)), _DOMAIN_SEED)
    lo, hi = _draw_words(gen, 2)
    return RandomKey(int(hi), int(lo))


def split(key: RandomKey, n: int) -> list[RandomKey]:
    """Derive n child keys from key.

    Children are consecutive 128-bit blocks of the parent's split-domain
    stream, so they are deterministic in the parent and statistically
    independent of anything drawn from it.
    """
    if n < 1:
        raise ValueError(f"split needs n >= 1, got {n}")
    words = _draw_words(_stream(key, _DOMAIN_SPLIT), 2 * n)
    return [RandomKey(int(words[2 * i + 1]), int(words[2 * i])) for i in range(n)]


def fold_in(key: RandomKey, index: int) -> RandomKey:
    """Derive the child key for a structural index (e.g. a chain number)."""
    if index < 0 or index >= 2**64:
        raise ValueError(f"fold_in index must be in [0, 2**64), got {index}")
    lo, hi = _draw_words(_stream(key, _DOMAIN_FOLD, index=int(index)), 2)
    return RandomKey(int(hi), int(lo))


def _resolve_shape(shape):
    if shape is None:
        return None
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def uniform(key: RandomKey, shape=None) -> np.ndarray | float:
    """Uniform draws on [0, 1) in float64. Scalar when shape is None or []."""
    shp = _resolve_shape(shape)
    gen = _stream(key, _DOMAIN_DRAW)
    if shp is None or shp == ():
        return float(gen.random())
    return gen.random(size=shp)


def normal(key: RandomKey, shape=None) -> np.ndarray | float:
    """Standard normal draws in float64 via inverse-CDF of (0,1) uniforms.

    Uniforms are (k + 0.5) / 2**53 with k drawn on [0, 2**53), strictly
    inside the open interval, so the transform never hits an infinity.
    """
    shp = _resolve_shape(shape)
    gen = _stream(key, _DOMAIN_DRAW)
    size = shp if shp is not None else ()
    k = gen.integers(0, _TWO53, size=size, dtype=np.uint64, endpoint=False)
    u = (k.astype(np.float64) + 0.5) / _TWO53
    z = ndtri(u)
    if shp is None or shp == ():
        return float(z)
    return z


def randint(key: RandomKey, minval: int, maxval: int, shape=None) -> np.ndarray | int:
    """Uniform integers on {minval, ..., maxval - 1} (maxval exclusive).

    Bounded draws use rejection under the hood (numpy Generator.integers),
    so there is no modulo bias.
    """
    if maxval <= minval:
        raise ValueError(f"randint needs minval < maxval, got [{minval}, {maxval})")
    shp = _resolve_shape(shape)
    gen = _stream(key, _DOMAIN_DRAW)
    if shp is None or shp == ():
        return int(gen.integers(minval, maxval))
    return gen.integers(minval, maxval, size=shp)
