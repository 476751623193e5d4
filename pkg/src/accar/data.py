"""Registration pairs: on-the-fly synthetic sampling and on-disk datasets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fileio import load_array, save_array
from .synth import FFDSpec, gen_pair, gen_phantom

DATASET_VERSION = 1


@dataclass
class Pair:
    moving: np.ndarray
    fixed: np.ndarray
    moving_seg: np.ndarray
    fixed_seg: np.ndarray
    true_field: np.ndarray
    noise_var: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class SynthDataSpec:
    """Recipe for phantom pairs.

    ``amplitude=None`` means spacing/4. ``noise_std > 0`` adds heteroscedastic
    noise to the fixed image: a random-sign perturbation of magnitude
    ``noise_std`` inside a random disc, so the per-pixel noise variance is
    known exactly (kept in ``Pair.noise_var``).
    """

    size: int = 64
    n_structures: int = 3
    mesh_spacings: tuple = (8, 16, 32)
    amplitude: float | None = None
    use_mask: bool = False
    noise_std: float = 0.0
    noise_radius: tuple = (8.0, 16.0)
    pool_size: int | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mesh_spacings"] = list(self.mesh_spacings)
        d["noise_radius"] = list(self.noise_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthDataSpec:
        d = dict(d)
        d["mesh_spacings"] = tuple(d.get("mesh_spacings", (8, 16, 32)))
        d["noise_radius"] = tuple(d.get("noise_radius", (8.0, 16.0)))
        return cls(**d)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def sample_pair(spec: SynthDataSpec, index: int) -> Pair:
    """Deterministic pair number ``index`` of the recipe."""
    if spec.pool_size is not None:
        index = index % spec.pool_size
    rng = _rng(spec.seed, index, 11)
    phantom_seed = int(rng.integers(2 ** 31))
    phantom = gen_phantom(phantom_seed, spec.size, spec.n_structures)
    spacing = int(spec.mesh_spacings[int(rng.integers(len(spec.mesh_spacings)))])
    amplitude = spacing / 4 if spec.amplitude is None else spec.amplitude
    ffd = FFDSpec(spacing, amplitude, seed=int(rng.integers(2 ** 31)),
                  mask=phantom.seg > 0 if spec.use_mask else None)
    moving, fixed, mseg, fseg, field_ = gen_pair(phantom, ffd)
    noise_var = None
    if spec.noise_std > 0:
        y, x = np.mgrid[0:spec.size, 0:spec.size]
        cy, cx = rng.uniform(0.25, 0.75, size=2) * spec.size
        radius = rng.uniform(*spec.noise_radius)
        region = (y - cy) ** 2 + (x - cx) ** 2 <= radius ** 2
        std = spec.noise_std * region
        fixed = fixed + std * rng.choice([-1.0, 1.0], size=fixed.shape)
        noise_var = std ** 2
    meta = {"index": index, "phantom_seed": phantom_seed, "mesh_spacing": spacing,
            "amplitude": amplitude, "ffd_seed": ffd.seed}
    return Pair(moving, fixed, mseg, fseg, field_, noise_var, meta)


_ARRAYS = ("moving", "fixed", "moving_seg", "fixed_seg", "true_field", "noise_var")


def write_dataset(out_dir, spec: SynthDataSpec, n: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        pair = sample_pair(spec, i)
        pdir = out / f"pair_{i:04d}"
        pdir.mkdir(exist_ok=True)
        for name in _ARRAYS:
            value = getattr(pair, name)
            if value is not None:
                save_array(pdir / f"{name}.acct", value)
        entries.append({"dir": pdir.name, **pair.meta})
    manifest = {"format_version": DATASET_VERSION, "spec": spec.to_dict(), "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(path) -> dict:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('format_version')}")
    return manifest


def read_dataset(path) -> list[Pair]:
    root = Path(path)
    manifest = read_manifest(root)
    pairs = []
    for entry in manifest["pairs"]:
        pdir = root / entry["dir"]
        arrays = {name: load_array(pdir / f"{name}.acct") if (pdir / f"{name}.acct").exists() else None
                  for name in _ARRAYS}
        meta = {k: v for k, v in entry.items() if k != "dir"}
        pairs.append(Pair(**arrays, meta=meta))
    return pairs


class PairSource:
    """Indexable pairs from a synthetic recipe (unbounded) or a dataset directory."""

    def __init__(self, data):
        if isinstance(data, SynthDataSpec):
            self.spec, self.pairs = data, None
        else:
            self.spec, self.pairs = None, read_dataset(data)

    def get(self, index: int) -> Pair:
        if self.pairs is not None:
            return self.pairs[index % len(self.pairs)]
        return sample_pair(self.spec, index)
