"""Registration network: Siamese ACFM encoders, U-shaped flow decoder,
projection head for the contrast-invariance loss, and a variance decoder that
reuses the same encoder.

Parameters live in a flat ``dict[str, Tensor]`` (``ModelParams``). Names are
prefixed by the sub-network that owns them: ``enc.``, ``dec.``, ``flow.``,
``proj.`` form the registration network, ``var.`` the variance decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor
from .wavelet import CONDITIONS, acfm_conditions

ModelParams = Dict[str, Tensor]

REGISTRATION_PREFIXES = ("enc.", "dec.", "flow.", "proj.")
VARIANCE_PREFIXES = ("var.",)


@dataclass
class NetworkConfig:
    image_size: int = 64
    levels: int = 4
    enc_channels: int = 16
    dec_channels: int = 32
    proj_channels: int = 16
    acfm: bool = True
    acfm_condition: str = "haar_ll"
    pyramid_mode: str = "progressive"  # or "fixed:K"
    slope: float = 0.2
    eps: float = 1e-8

    def __post_init__(self):
        if self.proj_channels <= 0:
            raise ValueError("proj_channels must be positive")
        if self.acfm_condition not in CONDITIONS:
            raise ValueError(f"unknown acfm_condition {self.acfm_condition!r}")
        if self.image_size % (2 ** self.levels):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**{self.levels}")
        self.fixed_level  # validates pyramid_mode

    @property
    def fixed_level(self) -> int | None:
        if self.pyramid_mode == "progressive":
            return None
        if self.pyramid_mode.startswith("fixed:"):
            return int(self.pyramid_mode.split(":", 1)[1])
        raise ValueError(f"unknown pyramid_mode {self.pyramid_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def is_registration_param(name: str) -> bool:
    return name.startswith(REGISTRATION_PREFIXES)


def is_variance_param(name: str) -> bool:
    return name.startswith(VARIANCE_PREFIXES)


def _conv_init(rng, c_out, c_in, k, slope):
    fan_in = c_in * k * k
    bound = np.sqrt(6.0 / ((1 + slope ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


def condition_sizes(config: NetworkConfig) -> list[int]:
    dummy = np.zeros((config.image_size, config.image_size))
    conds = acfm_conditions(dummy, config.levels, config.acfm_condition, config.fixed_level)
    return [c.size for c in conds]


def _decoder_params(params, rng, prefix, config, out_channels):
    c, d = config.enc_channels, config.dec_channels
    prev = 2 * c
    for j in reversed(range(config.levels)):
        params[f"{prefix}.{j}.w"] = _conv_init(rng, d, prev + 2 * c, 3, config.slope)
        params[f"{prefix}.{j}.b"] = np.zeros(d)
        prev = d
    return prev


def init_params(config: NetworkConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: He-uniform convs, ACFM at α=1/β=0, zero flow and log-variance heads."""
    rng = np.random.default_rng(seed)
    c = config.enc_channels
    raw: dict[str, np.ndarray] = {}
    sizes = condition_sizes(config)
    for i in range(config.levels + 1):
        raw[f"enc.{i}.conv.w"] = _conv_init(rng, c, 1 if i == 0 else c, 3, config.slope)
        raw[f"enc.{i}.conv.b"] = np.zeros(c)
        if config.acfm:
            raw[f"enc.{i}.acfm.w"] = np.zeros((2 * c, sizes[i]))
            raw[f"enc.{i}.acfm.b"] = np.concatenate([np.ones(c), np.zeros(c)])
        if i < config.levels:
            raw[f"enc.{i}.down.w"] = _conv_init(rng, c, c, 3, config.slope)
            raw[f"enc.{i}.down.b"] = np.zeros(c)
    d = _decoder_params(raw, rng, "dec", config, 2)
    raw["flow.w"] = np.zeros((2, d, 1, 1))
    raw["flow.b"] = np.zeros(2)
    raw["proj.w"] = _conv_init(rng, config.proj_channels, c, 1, 1.0)
    raw["proj.b"] = np.zeros(config.proj_channels)
    d = _decoder_params(raw, rng, "var.dec", config, 1)
    raw["var.head.w"] = np.zeros((1, d, 1, 1))
    raw["var.head.b"] = np.zeros(1)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def frozen(params: ModelParams) -> ModelParams:
    """Detached view of every parameter (forward passes record no graph)."""
    return {k: T.detach(v) for k, v in params.items()}


def acfm_modulate(h: Tensor, condition, weight: Tensor, bias: Tensor, eps: float = 1e-5,
                  strict: bool = True) -> Tensor:
    """Conditional instance normalisation with scale/shift predicted from ``condition``.

    ``condition`` (h×w, or bands×h×w) is flattened row-major, scaled by
    1/sqrt(length) and fed through the linear layer ``(weight, bias)`` giving α
    (first C outputs) and β (last C).
    """
    h = as_tensor(h)
    cond = as_tensor(condition)
    if strict and cond.shape[-2:] != h.shape[-2:]:
        raise ShapeError(f"condition {cond.shape} does not match feature {h.shape}")
    c = h.shape[0]
    v = cond.reshape(-1)
    # fixed 1/sqrt(fan-in) gain keeps Adam steps on huge condition vectors from swamping α, β
    ab = T.linear(v * (1.0 / np.sqrt(v.shape[0])), weight, bias)
    alpha = ab[:c].reshape(c, 1, 1)
    beta = ab[c:].reshape(c, 1, 1)
    normalized, _, _ = T.instance_normalize(h, eps)
    return alpha * normalized + beta


def _as_image(image) -> Tensor:
    image = as_tensor(image)
    if image.ndim == 2:
        return image.reshape((1,) + image.shape)
    return image


def encoder_forward(image, params: ModelParams, config: NetworkConfig,
                    conditions: list[np.ndarray] | None = None) -> tuple[Tensor, list[Tensor]]:
    """Encode one image; returns the latent (size/2**levels) and per-level skip features."""
    x = _as_image(image)
    side = x.shape[-1]
    if x.shape[-2] != side or side % (2 ** config.levels):
        raise ShapeError(f"image {x.shape} must be square with side divisible by 2**{config.levels}")
    if conditions is None and config.acfm:
        conditions = acfm_conditions(x.data[0], config.levels, config.acfm_condition, config.fixed_level)
    strict = config.fixed_level is None and config.acfm_condition in ("haar_ll", "daubechies_ll", "bior_ll", "fft")
    skips = []
    h = x
    for i in range(config.levels + 1):
        h = T.leaky_relu(T.conv2d(h, params[f"enc.{i}.conv.w"], params[f"enc.{i}.conv.b"], padding=1), config.slope)
        if config.acfm:
            h = acfm_modulate(h, conditions[i], params[f"enc.{i}.acfm.w"], params[f"enc.{i}.acfm.b"],
                              config.eps, strict=strict)
        if i < config.levels:
            skips.append(h)
            h = T.leaky_relu(T.conv2d(h, params[f"enc.{i}.down.w"], params[f"enc.{i}.down.b"],
                                      stride=2, padding=1), config.slope)
    return h, skips


def _decode(latent_m, latent_f, skips_m, skips_f, params, config, prefix):
    if len(skips_m) != config.levels or len(skips_f) != config.levels:
        raise ShapeError("skip lists do not match the configured number of levels")
    x = T.concat_channels(latent_m, latent_f)
    for j in reversed(range(config.levels)):
        x = T.upsample2x_bilinear(x)
        x = T.concat([x, skips_m[j], skips_f[j]], axis=0)
        x = T.leaky_relu(T.conv2d(x, params[f"{prefix}.{j}.w"], params[f"{prefix}.{j}.b"], padding=1), config.slope)
    return x


def decoder_features(latent_m, latent_f, skips_m, skips_f, params, config) -> Tensor:
    """Final-layer decoder features (dec_channels × H × W)."""
    return _decode(latent_m, latent_f, skips_m, skips_f, params, config, "dec")


def decoder_forward(latent_m, latent_f, skips_m, skips_f, params: ModelParams, config: NetworkConfig,
                    return_features: bool = False):
    """Displacement field (2 × H × W, pixels) from both encodings."""
    feats = decoder_features(latent_m, latent_f, skips_m, skips_f, params, config)
    flow = T.conv2d(feats, params["flow.w"], params["flow.b"])
    return (flow, feats) if return_features else flow


def project_latent(latent, params: ModelParams) -> Tensor:
    return T.conv2d(as_tensor(latent), params["proj.w"], params["proj.b"])


def register(moving, fixed, params: ModelParams, config: NetworkConfig, return_features: bool = False):
    """Encode both images and predict the displacement aligning ``moving`` to ``fixed``."""
    lat_m, sk_m = encoder_forward(moving, params, config)
    lat_f, sk_f = encoder_forward(fixed, params, config)
    return decoder_forward(lat_m, lat_f, sk_m, sk_f, params, config, return_features)


def variance_forward(warped_aug, fixed_aug, params: ModelParams, config: NetworkConfig,
                     encoder_params: ModelParams | None = None) -> Tensor:
    """Per-pixel log-variance (1 × H × W) of the warped-vs-fixed residual.

    ``encoder_params`` overrides the encoder weights, e.g. with a frozen copy.
    """
    a, b = _as_image(warped_aug), _as_image(fixed_aug)
    if a.shape != b.shape:
        raise ShapeError(f"variance_forward: {a.shape} vs {b.shape}")
    enc = encoder_params if encoder_params is not None else params
    lat_a, sk_a = encoder_forward(a, enc, config)
    lat_b, sk_b = encoder_forward(b, enc, config)
    feats = _decode(lat_a, lat_b, sk_a, sk_b, params, config, "var.dec")
    return T.conv2d(feats, params["var.head.w"], params["var.head.b"])
