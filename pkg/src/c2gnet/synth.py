"""Synthetic object images with labels known by construction.

Each class has its own phenotype mixture and spatial pattern. Object
positions are uniform or Neyman-Scott clustered (uniform parents, Gaussian
offspring); properties are drawn per phenotype from normals truncated at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ObjectImage
from .errors import DegenerateSpec


@dataclass(frozen=True)
class Phenotype:
    name: str
    mean: tuple[float, ...]
    spread: tuple[float, ...]


@dataclass(frozen=True)
class SpatialPattern:
    kind: str = "uniform"
    clusters: int = 0
    radius_um: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "clustered"):
            raise DegenerateSpec(f"unknown spatial pattern {self.kind!r}")
        if self.kind == "clustered" and (self.clusters < 1 or self.radius_um <= 0):
            raise DegenerateSpec("clustered pattern needs clusters >= 1 and radius > 0")


def _marker_phenotypes(channels: int, high: float = 1.0, low: float = 0.1) -> tuple[Phenotype, ...]:
    """One phenotype per channel, bright in that channel and dim elsewhere."""
    out = []
    for c in range(channels):
        mean = tuple(high if i == c else low for i in range(channels))
        spread = tuple(0.15 if i == c else 0.05 for i in range(channels))
        out.append(Phenotype(f"ch{c}-high", mean, spread))
    return tuple(out)


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters.

    ``mixtures[label]`` gives phenotype proportions for that class and
    ``patterns[label]`` its spatial arrangement. Object counts are Poisson
    with mean ``density * area`` unless ``count="fixed"``.
    """

    width_um: float = 672.0
    height_um: float = 504.0
    density: float = 1 / 81.6
    count: str = "poisson"
    phenotypes: tuple[Phenotype, ...] = field(default_factory=lambda: _marker_phenotypes(6))
    mixtures: tuple[tuple[float, ...], tuple[float, ...]] = (
        (0.1, 0.18, 0.18, 0.18, 0.18, 0.18),
        (0.3, 0.14, 0.14, 0.14, 0.14, 0.14),
    )
    patterns: tuple[SpatialPattern, SpatialPattern] = (SpatialPattern(), SpatialPattern())
    resolution_um_per_px: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (self.width_um > 0 and self.height_um > 0 and self.density > 0):
            raise DegenerateSpec("extent and density must be positive")
        if self.count not in ("poisson", "fixed"):
            raise DegenerateSpec(f"unknown count distribution {self.count!r}")
        if not self.phenotypes:
            raise DegenerateSpec("need at least one phenotype")
        p = len(self.phenotypes[0].mean)
        for ph in self.phenotypes:
            if len(ph.mean) != p or len(ph.spread) != p:
                raise DegenerateSpec(f"phenotype {ph.name} does not have {p} channels")
            if any(s < 0 for s in ph.spread):
                raise DegenerateSpec(f"phenotype {ph.name} has a negative spread")
            if any(s == 0 and m < 0 for m, s in zip(ph.mean, ph.spread)):
                raise DegenerateSpec(f"phenotype {ph.name}: negative mean with zero spread")
        if len(self.mixtures) != 2 or len(self.patterns) != 2:
            raise DegenerateSpec("need a mixture and a pattern for each of the two classes")
        for mix in self.mixtures:
            if len(mix) != len(self.phenotypes) or min(mix) < 0 or abs(sum(mix) - 1) > 1e-9:
                raise DegenerateSpec(f"mixture {mix} must be non-negative and sum to 1")

    @property
    def channels(self) -> int:
        return len(self.phenotypes[0].mean)

    @property
    def expected_objects(self) -> float:
        return self.density * self.width_um * self.height_um


def planted_spec(low: float = 0.1, high: float = 0.3, **kw) -> SynthSpec:
    """Two classes differing in the share of the channel-0-bright phenotype
    (label 0: ``low``, label 1: ``high``); the rest split evenly."""
    rest = lambda f: (f,) + ((1 - f) / 5,) * 5  # noqa: E731
    return SynthSpec(mixtures=(rest(low), rest(high)), **kw)


def null_spec(frac: float = 0.2, **kw) -> SynthSpec:
    """Both classes drawn from the same distribution."""
    return planted_spec(frac, frac, **kw)


def _truncated_normal(rng, mean, spread, size):
    """Normal(mean, spread) conditioned on >= 0, by resampling negatives."""
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), size)
    spread = np.broadcast_to(np.asarray(spread, dtype=np.float64), size)
    out = np.where(spread > 0, rng.normal(mean, np.where(spread > 0, spread, 1.0)), mean)
    bad = out < 0
    for _ in range(1000):
        if not bad.any():
            return out
        out[bad] = rng.normal(mean[bad], spread[bad])
        bad = out < 0
    raise DegenerateSpec("truncated normal rejection sampling did not converge")


def _positions(rng, spec: SynthSpec, pattern: SpatialPattern, n: int) -> np.ndarray:
    w, h = spec.width_um, spec.height_um
    if pattern.kind == "uniform":
        return np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    parents = np.column_stack([rng.uniform(0, w, pattern.clusters), rng.uniform(0, h, pattern.clusters)])
    pts = np.empty((n, 2))
    todo = np.arange(n)
    for _ in range(10_000):
        if not len(todo):
            return pts
        pts[todo] = parents[rng.integers(pattern.clusters, size=len(todo))] + rng.normal(
            0, pattern.radius_um, (len(todo), 2)
        )
        ok = (pts[todo, 0] >= 0) & (pts[todo, 0] < w) & (pts[todo, 1] >= 0) & (pts[todo, 1] < h)
        todo = todo[~ok]
    raise DegenerateSpec("clustered offspring keep landing outside the image")


def sample_image(spec: SynthSpec, label: int, rng: np.random.Generator, id: str = "") -> tuple[ObjectImage, np.ndarray]:
    """One labelled image plus the phenotype index of every object."""
    lam = spec.expected_objects
    n = int(rng.poisson(lam)) if spec.count == "poisson" else int(round(lam))
    pheno = rng.choice(len(spec.phenotypes), size=n, p=np.asarray(spec.mixtures[label]))
    coords = _positions(rng, spec, spec.patterns[label], n)
    means = np.array([p.mean for p in spec.phenotypes])[pheno]
    spreads = np.array([p.spread for p in spec.phenotypes])[pheno]
    props = _truncated_normal(rng, means, spreads, (n, spec.channels))
    img = ObjectImage(
        coords=coords,
        props=props,
        width_um=spec.width_um,
        height_um=spec.height_um,
        resolution_um_per_px=spec.resolution_um_per_px,
        label=label,
        id=id,
    )
    return img, pheno


def generate(spec: SynthSpec, n_per_class: int, seed: int | None = None) -> list[ObjectImage]:
    """``n_per_class`` images of each label, alternating labels.

    Image ``i`` draws from its own child seed, so any subset can be
    regenerated independently. ``seed`` defaults to ``spec.seed``.
    """
    if seed is None:
        seed = spec.seed
    if n_per_class < 0:
        raise DegenerateSpec("n_per_class must be non-negative")
    children = np.random.SeedSequence(seed).spawn(2 * n_per_class)
    out = []
    for i, child in enumerate(children):
        label = i % 2
        img, _ = sample_image(spec, label, np.random.default_rng(child), id=f"synth-{i:04d}")
        out.append(img)
    return out
