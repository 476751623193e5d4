"""Random-convolution contrast augmentation.

A stack of random 1×1 convolutions with LeakyReLU in between remaps the
intensity of every pixel through the same random non-linear function, which
changes contrast while leaving geometry untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class RCStack:
    weights: list[np.ndarray]  # each (c_out, c_in)
    biases: list[np.ndarray]
    slope: float = 0.2
    seed: int | None = None
    degenerate: bool = field(default=False, compare=False)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def sample_rc_stack(seed: int | np.random.Generator, n_layers: int = 4, hidden_channels: int = 8,
                    slope: float = 0.2, low: float = 0.0, high: float = 10.0, bias: bool = True) -> RCStack:
    """Draw U(low, high) 1×1 kernels and zero-centre each layer's weights.

    Biases follow the usual conv default U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    With ``bias=False`` the stack is positively homogeneous, so on a
    non-negative image it reduces to a global scaling (x or 1 - x after
    renormalisation) rather than a non-linear remap.
    """
    if n_layers < 1 or hidden_channels < 1:
        raise ValueError("n_layers and hidden_channels must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    widths = [1] + [hidden_channels] * (n_layers - 1) + [1]
    weights, biases = [], []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        w = rng.uniform(low, high, size=(c_out, c_in))
        w -= w.mean()
        weights.append(w)
        bound = 1.0 / np.sqrt(c_in)
        biases.append(rng.uniform(-bound, bound, size=c_out) if bias else np.zeros(c_out))
    return RCStack(weights, biases, slope=slope, seed=seed if isinstance(seed, int) else None)


def rc_forward(image: np.ndarray, stack: RCStack) -> np.ndarray:
    """Raw stack output (no renormalisation)."""
    x = np.asarray(image, dtype=np.float64)
    h = x.reshape(1, -1)
    for w, b in zip(stack.weights, stack.biases):
        h = w @ h + b[:, None]
        h = np.where(h > 0, h, stack.slope * h)
    return h.reshape(x.shape)


def apply_rc_stack(image: np.ndarray, stack: RCStack) -> np.ndarray:
    """Augment ``image`` and min-max rescale the result to [0, 1].

    A constant result cannot be rescaled; zeros are returned and a warning logged.
    """
    out = rc_forward(image, stack)
    lo, hi = out.min(), out.max()
    if not hi > lo:
        logger.warning("RC stack produced a constant image; returning zeros")
        stack.degenerate = True
        return np.zeros_like(out)
    return (out - lo) / (hi - lo)


def augment(image: np.ndarray, seed: int | np.random.Generator, **kwargs) -> np.ndarray:
    return apply_rc_stack(image, sample_rc_stack(seed, **kwargs))
