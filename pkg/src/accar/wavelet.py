"""2D discrete wavelet transforms and the low-frequency conditioning pyramid.

Haar uses the averaging normalisation (LL of a 2×2 block is its mean), so
every pyramid level stays in the intensity range of the input. Daubechies-2
and biorthogonal-2.2 go through PyWavelets in periodization mode and are
rescaled by 1/2 per level to the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pywt

FAMILIES = ("haar", "daubechies", "biorthogonal")
_PYWT_NAME = {"daubechies": "db2", "biorthogonal": "bior2.2"}


@dataclass
class WaveletBands:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    family: str = "haar"

    def __post_init__(self):
        shapes = {self.ll.shape, self.lh.shape, self.hl.shape, self.hh.shape}
        if len(shapes) != 1:
            raise ValueError(f"wavelet bands must share one shape, got {shapes}")

    @property
    def details(self) -> np.ndarray:
        """LH, HL, HH stacked along a leading axis."""
        return np.stack([self.lh, self.hl, self.hh])


def _pad_even(image: np.ndarray) -> np.ndarray:
    h, w = image.shape
    return np.pad(image, ((0, h % 2), (0, w % 2)), mode="edge")


def dwt2(image: np.ndarray, family: str = "haar") -> WaveletBands:
    """Single-level 2D DWT; odd extents are replicate-padded first."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"dwt2 needs a non-empty 2D image, got shape {image.shape}")
    x = _pad_even(image)
    if family == "haar":
        a = x[0::2, 0::2]
        b = x[0::2, 1::2]
        c = x[1::2, 0::2]
        d = x[1::2, 1::2]
        return WaveletBands(
            ll=(a + b + c + d) / 4,
            lh=(a + b - c - d) / 4,
            hl=(a - b + c - d) / 4,
            hh=(a - b - c + d) / 4,
            family=family,
        )
    if family not in _PYWT_NAME:
        raise ValueError(f"unknown wavelet family {family!r}")
    ll, (lh, hl, hh) = pywt.dwt2(x, _PYWT_NAME[family], mode="periodization")
    return WaveletBands(ll / 2, lh / 2, hl / 2, hh / 2, family=family)


def idwt2(bands: WaveletBands, family: str | None = None) -> np.ndarray:
    family = family or bands.family
    if family != bands.family:
        raise ValueError(f"bands come from {bands.family!r}, not {family!r}")
    ll, lh, hl, hh = bands.ll, bands.lh, bands.hl, bands.hh
    if family == "haar":
        h, w = ll.shape
        out = np.empty((2 * h, 2 * w))
        out[0::2, 0::2] = ll + lh + hl + hh
        out[0::2, 1::2] = ll + lh - hl - hh
        out[1::2, 0::2] = ll - lh + hl - hh
        out[1::2, 1::2] = ll - lh - hl + hh
        return out
    return pywt.idwt2((2 * ll, (2 * lh, 2 * hl, 2 * hh)), _PYWT_NAME[family], mode="periodization")


def condition_pyramid(image: np.ndarray, levels: int, family: str = "haar") -> list[np.ndarray]:
    """[LL_0 (the image), LL_1, ..., LL_levels] by repeated DWT of the LL band."""
    image = np.asarray(image, dtype=np.float64)
    if levels < 0 or 2 ** levels > min(image.shape):
        raise ValueError(f"{levels} levels is too many for an image of shape {image.shape}")
    out = [image]
    for _ in range(levels):
        out.append(dwt2(out[-1], family).ll)
    return out


def avg_pool2(image: np.ndarray) -> np.ndarray:
    x = _pad_even(np.asarray(image, dtype=np.float64))
    return (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]) / 4


def fft_lowpass(image: np.ndarray, keep_fraction: float = 0.5) -> np.ndarray:
    """Ideal low-pass keeping a centered box of ``keep_fraction`` of each axis' band, then 2×2 pooling."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    image = np.asarray(image, dtype=np.float64)
    fy = np.abs(np.fft.fftfreq(image.shape[0]))
    fx = np.abs(np.fft.fftfreq(image.shape[1]))
    keep = (fy[:, None] <= keep_fraction / 2) & (fx[None, :] <= keep_fraction / 2)
    filtered = np.fft.ifft2(np.fft.fft2(image) * keep).real
    return avg_pool2(filtered)


CONDITIONS = ("haar_ll", "haar_h", "haar_all", "fft", "daubechies_ll", "bior_ll")


def acfm_conditions(image: np.ndarray, levels: int, condition: str = "haar_ll",
                    fixed_level: int | None = None) -> list[np.ndarray]:
    """Conditioning arrays for encoder levels 0..levels.

    Each entry is a stack (bands × h × w). ``haar_ll`` gives LL_i at level i.
    ``haar_h``/``haar_all`` use the detail bands (and LL) of the decomposition
    that produced LL_i; level 0 has no such decomposition, so it uses the
    full-resolution detail residual ``image - up(LL_1)`` (haar_h) or the image
    itself (haar_all). With ``fixed_level=k`` every level gets entry k.
    """
    image = np.asarray(image, dtype=np.float64)
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    depth = levels if fixed_level is None else max(levels, fixed_level)
    if 2 ** depth > min(image.shape):
        raise ValueError(f"{depth} levels is too many for an image of shape {image.shape}")
    if condition == "fft":
        chain = [image]
        for _ in range(depth):
            chain.append(fft_lowpass(chain[-1], 0.5))
        conds = [c[None] for c in chain]
    elif condition in ("haar_ll", "daubechies_ll", "bior_ll"):
        family = {"haar_ll": "haar", "daubechies_ll": "daubechies", "bior_ll": "biorthogonal"}[condition]
        conds = [c[None] for c in condition_pyramid(image, depth, family)]
    else:
        ll = image
        bands = []
        for _ in range(depth):
            bands.append(dwt2(ll))
            ll = bands[-1].ll
        if condition == "haar_h":
            residual = image - np.kron(bands[0].ll, np.ones((2, 2)))[: image.shape[0], : image.shape[1]]
            conds = [residual[None]] + [b.details for b in bands]
        else:
            conds = [image[None]] + [np.concatenate([b.ll[None], b.details]) for b in bands]
    if fixed_level is not None:
        conds = [conds[fixed_level]] * (levels + 1)
    return conds[: levels + 1]
