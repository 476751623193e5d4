"""Per-pair evaluation of a trained model: overlap, surface distance, field
regularity, end-point error, uncertainty ranking and feature invariance."""

from __future__ import annotations

import numpy as np

from .augment import apply_rc_stack, sample_rc_stack
from .data import Pair
from .metrics import SparsificationCurve, feature_rmsd, foreground_dice, hd95, sparsification_curve
from .network import ModelParams, NetworkConfig, decoder_features, encoder_forward, frozen, register, variance_forward
from .warp import end_point_error, folding_ratio, grad_jacobian_mag, warp_array

METRIC_COLUMNS = ("pair", "dice_pre", "dice_post", "hd95_pre", "hd95_post", "folding_pct", "grad_jac",
                  "epe_zero", "epe", "feat_rmsd")


def _labels(*segs) -> list[int]:
    return sorted(int(l) for l in set().union(*(np.unique(s) for s in segs)) if l != 0)


def mean_hd95(a: np.ndarray, b: np.ndarray) -> float:
    """HD95 averaged over the structure labels present in both masks."""
    vals = [hd95(a, b, l) for l in _labels(a, b) if (a == l).any() and (b == l).any()]
    return float(np.mean(vals)) if vals else float("nan")


def predict_flow(params: ModelParams, config: NetworkConfig, moving, fixed) -> np.ndarray:
    return register(moving, fixed, frozen(params), config).data


def registration_metrics(flow: np.ndarray, pair: Pair) -> dict:
    warped_seg = warp_array(pair.moving_seg, flow, order=0)
    return {
        "dice_pre": foreground_dice(pair.moving_seg, pair.fixed_seg),
        "dice_post": foreground_dice(warped_seg, pair.fixed_seg),
        "hd95_pre": mean_hd95(pair.moving_seg, pair.fixed_seg),
        "hd95_post": mean_hd95(warped_seg, pair.fixed_seg),
        "folding_pct": folding_ratio(flow),
        "grad_jac": grad_jacobian_mag(flow),
        "epe_zero": end_point_error(np.zeros_like(flow), pair.true_field),
        "epe": end_point_error(flow, pair.true_field),
    }


def contrast_variants(moving, fixed, n: int = 8, seed: int = 0, n_layers: int = 4, hidden: int = 8):
    """``n`` copies of a pair, each image under its own random-convolution contrast."""
    root = np.random.SeedSequence([seed, 0xC0])
    out = []
    for child in root.spawn(n):
        sm, sf = child.spawn(2)
        m = apply_rc_stack(moving, sample_rc_stack(np.random.default_rng(sm), n_layers, hidden))
        f = apply_rc_stack(fixed, sample_rc_stack(np.random.default_rng(sf), n_layers, hidden))
        out.append((m, f))
    return out


def final_decoder_features(params: ModelParams, config: NetworkConfig, moving, fixed) -> np.ndarray:
    p = frozen(params)
    lat_m, sk_m = encoder_forward(moving, p, config)
    lat_f, sk_f = encoder_forward(fixed, p, config)
    return decoder_features(lat_m, lat_f, sk_m, sk_f, p, config).data


def contrast_feature_rmsd(params: ModelParams, config: NetworkConfig, pair: Pair, n_variants: int = 8,
                          seed: int = 0) -> float:
    """Mean ordered-pair RMSD of final decoder features across contrast variants of one pair."""
    feats = [final_decoder_features(params, config, m, f)
             for m, f in contrast_variants(pair.moving, pair.fixed, n_variants, seed)]
    return feature_rmsd(feats)[1]


def evaluate_pair(params: ModelParams, config: NetworkConfig, pair: Pair, n_variants: int = 8,
                  seed: int = 0) -> dict:
    row = registration_metrics(predict_flow(params, config, pair.moving, pair.fixed), pair)
    row["feat_rmsd"] = contrast_feature_rmsd(params, config, pair, n_variants, seed) if n_variants >= 2 else float("nan")
    return row


def aggregate(rows: list[dict]) -> tuple[dict, dict]:
    """Column-wise mean and (population) standard deviation, ignoring NaNs."""
    keys = [k for k in METRIC_COLUMNS if k != "pair"]
    mean = {k: float(np.nanmean([r[k] for r in rows])) for k in keys}
    std = {k: float(np.nanstd([r[k] for r in rows])) for k in keys}
    return mean, std


def has_variance_decoder(params: ModelParams) -> bool:
    return "var.head.w" in params


def uncertainty_maps(params: ModelParams, config: NetworkConfig, pair: Pair) -> tuple[np.ndarray, np.ndarray]:
    """(predicted variance, squared residual) of the registered pair."""
    if not has_variance_decoder(params):
        raise KeyError("checkpoint has no variance decoder")
    p = frozen(params)
    flow = register(pair.moving, pair.fixed, p, config).data
    warped = warp_array(pair.moving, flow, order=1)
    log_var = variance_forward(warped, pair.fixed, p, config).data[0]
    return np.exp(log_var), (warped - pair.fixed) ** 2


def pair_sparsification(params: ModelParams, config: NetworkConfig, pair: Pair,
                        n_steps: int = 20) -> SparsificationCurve:
    variance, sq_err = uncertainty_maps(params, config, pair)
    return sparsification_curve(sq_err, variance, n_steps)
