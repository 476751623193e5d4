#!/usr/bin/env python3
"""Inject random-sign noise of known variance into a disc of the fixed image,
train, and check that the variance decoder finds the noisy region.

Writes the sparsification plot next to this script (uncertainty_sparsification.svg).
"""
import argparse
from pathlib import Path

import numpy as np

from accar.cli import sparsification_svg
from accar.data import SynthDataSpec, sample_pair
from accar.evaluation import uncertainty_maps
from accar.metrics import sparsification_curve
from accar.trainer import TrainConfig, train

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--steps", type=int, default=500)
ap.add_argument("--noise", type=float, default=0.2)
args = ap.parse_args()

cfg = TrainConfig(lr=1e-3, steps=args.steps, seed=args.seed,
                  data=SynthDataSpec(seed=args.seed, mesh_spacings=(16,), pool_size=1, noise_std=args.noise))
ckpt = train(cfg)
pair = sample_pair(cfg.data, 0)
variance, sq_err = uncertainty_maps(ckpt.params, cfg.network, pair)

inside = pair.noise_var > 0
print(f"noise disc covers {inside.mean():.1%} of the image")
print(f"mean predicted variance inside {variance[inside].mean():.4f}, outside {variance[~inside].mean():.4f}"
      f" (true {args.noise ** 2:.4f} / 0)")
print(f"pearson r with squared residual: {np.corrcoef(variance.ravel(), sq_err.ravel())[0, 1]:.3f}")

curve = sparsification_curve(sq_err, variance, 20)
print(f"area between model and oracle curves: {curve.area_between:.5f}")
print(f"non-increasing steps: {curve.fraction_non_increasing():.0%}")
out = Path(__file__).with_name("uncertainty_sparsification.svg")
out.write_text(sparsification_svg(curve.fractions_removed, curve.remaining_mse, curve.oracle_mse))
print(f"plot: {out}")
