"""Training objectives: heteroscedastic β-NLL for the variance network, and the
variance-weighted registration loss with diffusion, contrast-invariance and
LNCC terms. All spatial expectations are pixel means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor
from .warp import apply_displacement


@dataclass
class LossWeights:
    lambda1: float = 0.3  # diffusion
    lambda2: float = 0.2  # contrast invariance
    lambda3: float = 0.8  # LNCC
    beta: float = 0.5

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")


def _as_chw(x) -> Tensor:
    x = as_tensor(x)
    return x.reshape((1,) + x.shape) if x.ndim == 2 else x


def lncc_map(a, b, window: int = 9, eps: float = 1e-5) -> Tensor:
    """Squared local correlation coefficient per pixel.

    Windows are centred on each pixel and truncated at the image border, so
    every statistic is over real pixels only.
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"lncc: shapes differ {a.shape} vs {b.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    if window > min(a.shape[1:]):
        raise ValueError(f"window {window} larger than image {a.shape[1:]}")
    count = T.box_sum(Tensor(np.ones(a.shape)), window).data
    sa = T.box_sum(a, window)
    sb = T.box_sum(b, window)
    saa = T.box_sum(a * a, window)
    sbb = T.box_sum(b * b, window)
    sab = T.box_sum(a * b, window)
    cross = sab - sa * sb / count
    var_a = saa - sa * sa / count
    var_b = sbb - sb * sb / count
    return cross * cross / (var_a * var_b + eps)


def lncc(a, b, window: int = 9, eps: float = 1e-5) -> Tensor:
    return T.reduce_mean(lncc_map(a, b, window, eps))


def diffusion_reg(u) -> Tensor:
    """Mean squared Frobenius norm of the forward-difference displacement gradient.

    Each direction is averaged over the positions where its difference exists.
    """
    u = as_tensor(u)
    dx = u[:, :, 1:] - u[:, :, :-1]
    dy = u[:, 1:, :] - u[:, :-1, :]
    n_x = dx.shape[1] * dx.shape[2]
    n_y = dy.shape[1] * dy.shape[2]
    return T.reduce_sum(dx * dx) * (1.0 / n_x) + T.reduce_sum(dy * dy) * (1.0 / n_y)


def _beta_nll_terms(residual: Tensor, log_var: Tensor, beta: float) -> Tensor:
    weight = Tensor(np.exp(beta * log_var.data))
    return T.reduce_mean(weight * (residual * residual * T.exp(-log_var) + log_var))


def beta_nll(warped, fixed, log_var, beta: float = 0.5) -> Tensor:
    """β-NLL of the warped-vs-fixed residual under a per-pixel log-variance.

    Only ``log_var`` receives gradient; the residual is taken as data.
    """
    log_var = as_tensor(log_var)
    w = T.detach(_as_chw(warped))
    f = T.detach(_as_chw(fixed))
    lv = _as_chw(log_var)
    if w.shape != f.shape or w.shape != lv.shape:
        raise ShapeError(f"beta_nll: shapes {w.shape}, {f.shape}, {lv.shape} differ")
    if not np.all(np.isfinite(lv.data)):
        raise FloatingPointError("non-finite log-variance")
    return _beta_nll_terms(w - f, lv, beta)


def contrast_invariance(h_m1, h_m2, h_f1, h_f2, proj_params=None) -> Tensor:
    """Mean squared distance between projected latents of the two augmentations.

    ``proj_params`` is ``(weight, bias)`` of a 1×1 convolution, or None for identity.
    """
    hs = [as_tensor(h) for h in (h_m1, h_m2, h_f1, h_f2)]
    if len({h.shape for h in hs}) != 1:
        raise ShapeError("contrast_invariance: latent shapes differ")
    if proj_params is not None:
        w, b = proj_params
        hs = [T.conv2d(h, w, b) for h in hs]
    pm1, pm2, pf1, pf2 = hs
    dm = pm1 - pm2
    df = pf1 - pf2
    return T.reduce_mean(dm * dm) + T.reduce_mean(df * df)


def registration_loss(moving, fixed, phi, log_var, latents, weights: LossWeights, proj_params=None,
                      lncc_window: int = 9, return_terms: bool = False):
    """Variance-weighted MSE + λ1·diffusion + λ2·contrast − λ3·LNCC on the mono-contrast pair.

    ``log_var`` is treated as data (stop-gradient). With ``log_var=None`` the
    similarity weight is 1.
    """
    moving, fixed = _as_chw(moving), _as_chw(fixed)
    warped = apply_displacement(moving, phi)
    diff = warped - fixed
    if log_var is None:
        sim = T.reduce_mean(diff * diff)
    else:
        lv = _as_chw(as_tensor(log_var)).data
        wgt = Tensor(np.exp((weights.beta - 1.0) * lv))
        sim = T.reduce_mean(wgt * diff * diff)
    reg = diffusion_reg(phi)
    total = sim + weights.lambda1 * reg
    terms = {"sim": sim.item(), "reg": reg.item()}
    if weights.lambda2 > 0 and latents is not None:
        con = contrast_invariance(*latents, proj_params=proj_params)
        total = total + weights.lambda2 * con
        terms["contrast"] = con.item()
    if weights.lambda3 > 0:
        cc = lncc(warped, fixed, lncc_window)
        total = total - weights.lambda3 * cc
        terms["lncc"] = cc.item()
    terms["total"] = total.item()
    return (total, terms) if return_terms else total
