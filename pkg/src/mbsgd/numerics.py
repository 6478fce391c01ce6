"""Deterministic numeric substrate: float64 tensors and a fully specified PRNG.

Tensors are plain numpy float64 arrays (a flat buffer plus a shape); every
public operation here is a pure function, so results are bit-identical across
runs and across worker counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class RngState:
    """Immutable 64-bit PRNG state; advancing it is a pure function."""

    state: int

    def __post_init__(self):
        object.__setattr__(self, "state", self.state & MASK64)


def prng_next(state: RngState) -> tuple[int, RngState]:
    """One splitmix64 step: returns (64-bit output, next state)."""
    s = (state.state + GOLDEN) & MASK64
    z = s
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    z = z ^ (z >> 31)
    return z, RngState(s)


def prng_below(state: RngState, bound: int) -> tuple[int, RngState]:
    """Uniform draw in [0, bound) via rejection sampling (no modulo bias)."""
    if bound <= 0:
        raise ValueError(f"bound must be positive, got {bound}")
    # Largest multiple of bound that fits in 64 bits; values at or above it
    # are rejected so every residue is equally likely.
    limit = (MASK64 + 1) - ((MASK64 + 1) % bound)
    while True:
        value, state = prng_next(state)
        if value < limit:
            return value % bound, state


def prng_uniform(state: RngState) -> tuple[float, RngState]:
    """Uniform float64 in (0, 1]; 53 significant bits."""
    value, state = prng_next(state)
    return ((value >> 11) + 1) * 2.0**-53, state


def prng_gauss(state: RngState) -> tuple[float, RngState]:
    """Standard normal draw via Box-Muller (first component only)."""
    u1, state = prng_uniform(state)
    u2, state = prng_uniform(state)
    return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)), state


def gauss_vector(state: RngState, count: int, std: float = 1.0) -> tuple[np.ndarray, RngState]:
    """Vector of independent N(0, std^2) draws, deterministic in the state."""
    out = np.empty(count, dtype=np.float64)
    for i in range(count):
        z, state = prng_gauss(state)
        out[i] = z * std
    return out, state


def fisher_yates(seed: int, length: int) -> np.ndarray:
    """Deterministic permutation of [0, length) from a 64-bit seed.

    Classic Fisher-Yates driven by the splitmix64 stream with rejection
    sampling for the bounded draws, so the permutation is portable across
    platforms.
    """
    if length < 0:
        raise ValueError(f"length must be non-negative, got {length}")
    perm = np.arange(length, dtype=np.int64)
    state = RngState(seed)
    for i in range(length - 1, 0, -1):
        j, state = prng_below(state, i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def mix_seed(seed: int, stream: int) -> int:
    """Derive a sub-stream seed: one splitmix64 step from seed XOR stream*GOLDEN."""
    value, _ = prng_next(RngState(seed ^ ((stream * GOLDEN) & MASK64)))
    return value


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """alpha*x + y elementwise; inputs are left unmodified."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
