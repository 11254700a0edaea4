"""Per-channel uniform scalar quantization and its training-time noise proxy."""

from __future__ import annotations

import numpy as np

__all__ = ["round_half_away", "quantize", "dequantize", "noise_proxy", "validate_steps"]


def validate_steps(delta) -> np.ndarray:
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    if np.any(delta <= 0) or not np.all(np.isfinite(delta)):
        raise ValueError("step sizes must be positive and finite")
    return delta


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (codec convention)."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(np.int64)


def quantize(u: np.ndarray, delta) -> np.ndarray:
    """Integer symbols ``round(u / delta_c)`` per channel."""
    delta = validate_steps(delta)
    return round_half_away(np.asarray(u, dtype=np.float64) / delta)


def dequantize(q: np.ndarray, delta) -> np.ndarray:
    delta = validate_steps(delta)
    return np.asarray(q, dtype=np.float64) * delta


def noise_proxy(u: np.ndarray, delta, rng: np.random.Generator) -> np.ndarray:
    """Differentiable stand-in for rounding: ``u / delta + W``, W ~ unif(-.5, .5).

    Training only; the caller multiplies by ``delta`` downstream exactly where
    dequantization would occur.  Deterministic under a fixed generator state,
    and the gradient with respect to ``u`` is the identity map scaled by
    ``1 / delta``.
    """
    delta = validate_steps(delta)
    u = np.asarray(u, dtype=np.float64)
    return u / delta + rng.uniform(-0.5, 0.5, size=u.shape)
