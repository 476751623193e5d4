"""Alternating training of the registration and variance networks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import apply_rc_stack, sample_rc_stack
from .data import PairSource, SynthDataSpec
from .fileio import FormatError, decode_table, encode_table
from .losses import LossWeights, beta_nll, registration_loss
from .network import (NetworkConfig, ModelParams, decoder_forward, encoder_forward, frozen, init_params,
                      is_registration_param, is_variance_param, register, variance_forward)
from .tensor import Tensor
from .warp import apply_displacement

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 500
    alternate_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    batch: int = 1
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: SynthDataSpec | str = field(default_factory=SynthDataSpec)
    variance_warmup: int = 0
    rc_layers: int = 4
    rc_hidden: int = 8
    rc_bias: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.alternate_every < 1:
            raise ValueError("need lr > 0, steps >= 1, alternate_every >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = self.data.to_dict() if isinstance(self.data, SynthDataSpec) else str(self.data)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["network"] = NetworkConfig(**d.get("network", {}))
        data = d.get("data", {})
        d["data"] = SynthDataSpec.from_dict(data) if isinstance(data, dict) else data
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


_PURPOSE_PAIR, _PURPOSE_AUG = 1, 2


def augment_views(image: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    stack = sample_rc_stack(rng, config.rc_layers, config.rc_hidden, config.network.slope, bias=config.rc_bias)
    return apply_rc_stack(image, stack)


def _zero_grads(params: ModelParams) -> None:
    for p in params.values():
        p.grad = None


def _check_finite(value: float, where: str, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {where} at step {step}")


def registration_step(pairs, params: ModelParams, config: TrainConfig, state: AdamState, step: int) -> dict:
    """Registration-loss update of encoder, flow decoder and projection head on one batch."""
    net, w = config.network, config.weights
    _zero_grads(params)
    frozen_params = frozen(params)
    proj = (params["proj.w"], params["proj.b"])
    totals: dict = {}
    for b, pair in enumerate(pairs):
        rng = _rng(config.seed, step, _PURPOSE_AUG, b)
        m1, f1, m2, f2 = (augment_views(img, rng, config) for img in (pair.moving, pair.fixed, pair.moving, pair.fixed))
        lat_m1, sk_m1 = encoder_forward(m1, params, net)
        lat_f1, sk_f1 = encoder_forward(f1, params, net)
        latents = None
        if w.lambda2 > 0:
            lat_m2, _ = encoder_forward(m2, params, net)
            lat_f2, _ = encoder_forward(f2, params, net)
            latents = (lat_m1, lat_m2, lat_f1, lat_f2)
        flow = decoder_forward(lat_m1, lat_f1, sk_m1, sk_f1, params, net)
        _check_finite(float(np.abs(flow.data).max()), "flow", step)
        warped_aug = apply_displacement(m1, flow.data)
        log_var = variance_forward(warped_aug, f1, frozen_params, net).data
        loss, terms = registration_loss(pair.moving, pair.fixed, flow, log_var, latents, w, proj,
                                        return_terms=True)
        _check_finite(terms["total"], "registration", step)
        T.backward(loss * (1.0 / len(pairs)))
        for k, v in terms.items():
            totals[k] = totals.get(k, 0.0) + v / len(pairs)
    reg = {k: p for k, p in params.items() if is_registration_param(k)}
    if w.lambda2 == 0:
        # the projection head only feeds the contrast term
        reg = {k: p for k, p in reg.items() if not k.startswith("proj.")}
    adam_step(reg, state, config.lr)
    _zero_grads(params)
    return totals


def variance_step(pairs, params: ModelParams, config: TrainConfig, state: AdamState, step: int) -> dict:
    """β-NLL update of the variance decoder with the flow and encoder held fixed."""
    net = config.network
    _zero_grads(params)
    frozen_params = frozen(params)
    total = 0.0
    for b, pair in enumerate(pairs):
        rng = _rng(config.seed, step, _PURPOSE_AUG, b)
        m1, f1 = (augment_views(img, rng, config) for img in (pair.moving, pair.fixed))
        flow = register(m1, f1, frozen_params, net).data
        _check_finite(float(np.abs(flow).max()), "flow", step)
        warped_aug = apply_displacement(m1, flow)
        log_var = variance_forward(warped_aug, f1, params, net, encoder_params=frozen_params)
        loss = beta_nll(apply_displacement(pair.moving, flow), pair.fixed[None], log_var, config.weights.beta)
        _check_finite(loss.item(), "variance", step)
        T.backward(loss * (1.0 / len(pairs)))
        total += loss.item() / len(pairs)
    var = {k: p for k, p in params.items() if is_variance_param(k)}
    adam_step(var, state, config.lr)
    _zero_grads(params)
    return {"nll": total}


def step_kind(step: int, config: TrainConfig) -> str:
    """'R' or 'V' for the given 0-based step."""
    if step < config.variance_warmup:
        return "R"
    return "R" if ((step - config.variance_warmup) // config.alternate_every) % 2 == 0 else "V"


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ModelParams
    reg_state: AdamState
    var_state: AdamState
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def network(self) -> NetworkConfig:
        return self.config.network


def new_checkpoint(config: TrainConfig) -> Checkpoint:
    return Checkpoint(config, init_params(config.network, config.seed), AdamState(), AdamState(), 0, [])


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries: dict = {"meta": {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "reg_t": ckpt.reg_state.t,
        "var_t": ckpt.var_state.t,
        # per-step RNG streams are derived from (seed, step), so this is the full RNG state
        "rng": {"seed": ckpt.config.seed, "step": ckpt.step},
    }}
    for name in sorted(ckpt.params):
        entries[f"param/{name}"] = ckpt.params[name].data
    for tag, st in (("reg", ckpt.reg_state), ("var", ckpt.var_state)):
        for name in sorted(st.m):
            entries[f"adam_{tag}_m/{name}"] = st.m[name]
            entries[f"adam_{tag}_v/{name}"] = st.v[name]
    return encode_table(entries)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    table = decode_table(Path(path).read_bytes())
    meta = table.get("meta")
    if not isinstance(meta, dict):
        raise FormatError("checkpoint has no metadata")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
    config = TrainConfig.from_dict(meta["config"])
    params = {k.split("/", 1)[1]: Tensor(v, requires_grad=True, name=k.split("/", 1)[1])
              for k, v in table.items() if k.startswith("param/")}
    states = {"reg": AdamState(t=meta["reg_t"]), "var": AdamState(t=meta["var_t"])}
    for k, v in table.items():
        for tag, st in states.items():
            if k.startswith(f"adam_{tag}_m/"):
                st.m[k.split("/", 1)[1]] = v
            elif k.startswith(f"adam_{tag}_v/"):
                st.v[k.split("/", 1)[1]] = v
    return Checkpoint(config, params, states["reg"], states["var"], meta["step"], [])


def batch_for_step(source: PairSource, config: TrainConfig, step: int):
    rng = _rng(config.seed, step, _PURPOSE_PAIR)
    return [source.get(int(rng.integers(2 ** 31))) for _ in range(config.batch)]


def train(config: TrainConfig, resume: Checkpoint | None = None, stop_at: int | None = None,
          checkpoint_dir=None, log_path=None) -> Checkpoint:
    """Run (or continue) alternating training; returns the final checkpoint.

    ``stop_at`` ends the run early at that step (for interrupted/resumed runs).
    """
    ckpt = resume if resume is not None else new_checkpoint(config)
    source = PairSource(config.data)
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    log = None
    if log_path is not None:
        fresh = not Path(log_path).exists()
        log = open(log_path, "a")
        if fresh:
            log.write("step,network,loss,sim,reg,contrast,lncc,nll\n")
    try:
        while ckpt.step < end:
            step = ckpt.step
            pairs = batch_for_step(source, config, step)
            kind = step_kind(step, config)
            try:
                if kind == "R":
                    terms = registration_step(pairs, ckpt.params, config, ckpt.reg_state, step)
                    loss = terms["total"]
                else:
                    terms = variance_step(pairs, ckpt.params, config, ckpt.var_state, step)
                    loss = terms["nll"]
            except DivergenceError:
                if checkpoint_dir:
                    dump = Path(checkpoint_dir) / f"diverged_step_{step:06d}.acct"
                    save_checkpoint(ckpt, dump)
                    logger.error("divergence at step %d; state before the step saved to %s", step, dump)
                raise
            ckpt.history.append((step, kind, loss))
            if log is not None:
                cols = [terms.get(k, "") for k in ("sim", "reg", "contrast", "lncc", "nll")]
                log.write(",".join(str(c) for c in [step, kind, loss] + cols) + "\n")
            ckpt.step += 1
            if checkpoint_dir and config.checkpoint_every and ckpt.step % config.checkpoint_every == 0:
                save_checkpoint(ckpt, Path(checkpoint_dir) / f"step_{ckpt.step:06d}.acct")
    finally:
        if log is not None:
            log.close()
    return ckpt
