"""Procedural segmentation domains standing in for real cross-domain benchmarks.

Each domain fixes a palette, a texture and a shape family. Categories pick a
shape sub-family (aspect ratio, lobes, counts, thickness) inside a domain.
The presets are analogies of the usual CD-FSS targets, not replicas.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .dmp import Episode

TEXTURES = ("flat", "perlin", "stripes")
SHAPES = ("blob", "ring", "multi-blob", "thin-structure")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    fg_color: tuple[float, float, float]
    bg_color: tuple[float, float, float]
    noise: float = 0.05
    texture: str = "flat"
    texture_amp: float = 0.0
    shape_family: str = "blob"
    fg_area_range: tuple[float, float] = (0.1, 0.5)
    rng_seed: int = 0
    size: int = 32

    def __post_init__(self):
        lo, hi = self.fg_area_range
        if not 0.02 < lo < hi < 0.8:
            raise ValueError(f"fg_area_range {self.fg_area_range} must lie inside (0.02, 0.8)")
        for c in (self.fg_color, self.bg_color):
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise ValueError(f"palette color {c} must be an RGB triple in [0, 1]")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.shape_family not in SHAPES:
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if self.noise < 0 or self.texture_amp < 0:
            raise ValueError("noise and texture amplitudes must be non-negative")
        if self.size < 16:
            raise ValueError("image size must be at least 16")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("fg_color", "bg_color", "fg_area_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class GeneratedSample:
    image: np.ndarray  # 3×H×W in [0, 1]
    mask: np.ndarray  # H×W uint8
    domain_id: int = 0
    category_id: int = 0
    meta: dict = field(default_factory=dict)


# shape fields: positive inside the shape --------------------------------------


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _blob_field(yy, xx, area, rng, cat) -> np.ndarray:
    aspect = cat["aspect"] * rng.uniform(0.85, 1.15)
    r = np.sqrt(area / np.pi)
    cy, cx = rng.uniform(0.2 + r * 0.5, 0.8 - r * 0.5, size=2) if r < 0.6 else (0.5, 0.5)
    theta0 = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta0) + dx * np.sin(theta0)
    v = -dy * np.sin(theta0) + dx * np.cos(theta0)
    ang = np.arctan2(v, u)
    wobble = 1.0
    for k in range(2, 2 + cat["lobes"]):
        wobble = wobble + cat["roughness"] * rng.uniform(0.3, 1.0) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
    dist = np.sqrt((u * np.sqrt(aspect)) ** 2 + (v / np.sqrt(aspect)) ** 2)
    return r * wobble - dist


def _ring_field(yy, xx, area, rng, cat) -> np.ndarray:
    if cat["lung_pair"]:
        # two tall ellipses side by side
        half = area / 2
        ry = np.sqrt(half * cat["aspect"] / np.pi)
        rx = half / (np.pi * ry)
        gap = rng.uniform(0.02, 0.06)
        cy = rng.uniform(0.45, 0.55)
        fields = []
        for side in (-1, 1):
            cx = 0.5 + side * (rx + gap)
            d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
            fields.append(1.0 - d)
        return np.maximum(*fields) * min(rx, ry)
    thickness = cat["thickness"] * rng.uniform(0.8, 1.2)
    radius = area / (2 * np.pi * thickness)
    radius = min(radius, 0.42)
    cy, cx = rng.uniform(0.5 - (0.48 - radius) * 0.5, 0.5 + (0.48 - radius) * 0.5, size=2)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return thickness / 2 - np.abs(d - radius)


def _multi_blob_field(yy, xx, area, rng, cat) -> np.ndarray:
    n = cat["count"] + int(rng.integers(0, 2))
    shares = rng.dirichlet(np.full(n, 3.0)) * area
    out = None
    for a in shares:
        r = np.sqrt(a / np.pi)
        cy, cx = rng.uniform(r, 1 - r, size=2)
        aspect = rng.uniform(0.6, 1.6)
        d = np.sqrt(((yy - cy) * np.sqrt(aspect)) ** 2 + ((xx - cx) / np.sqrt(aspect)) ** 2)
        f = r - d
        out = f if out is None else np.maximum(out, f)
    return out


def _thin_field(yy, xx, area, rng, cat) -> np.ndarray:
    n = cat["count"]
    width = cat["thickness"] * rng.uniform(0.8, 1.2)
    out = None
    for _ in range(n):
        horizontal = rng.random() < 0.5
        a, b = (yy, xx) if horizontal else (xx, yy)
        base = rng.uniform(0.2, 0.8)
        amp = rng.uniform(0.05, 0.2)
        freq = rng.uniform(1.0, 2.5) * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        curve = base + amp * np.sin(freq * b + phase)
        f = width / 2 - np.abs(a - curve)
        out = f if out is None else np.maximum(out, f)
    return out


_FIELDS = {
    "blob": _blob_field,
    "ring": _ring_field,
    "multi-blob": _multi_blob_field,
    "thin-structure": _thin_field,
}


def category_params(spec: DomainSpec, category_id: int) -> dict:
    """Shape sub-family of a category; fixed per (domain, category)."""
    rng = np.random.default_rng([spec.rng_seed, 7919, category_id])
    return {
        "aspect": float(rng.uniform(0.5, 2.0)),
        "lobes": int(rng.integers(1, 4)),
        "roughness": float(rng.uniform(0.05, 0.2)),
        "count": int(rng.integers(1, 4)) + (1 if spec.shape_family == "multi-blob" else 0),
        "thickness": float(rng.uniform(0.06, 0.12)),
        "lung_pair": bool(category_id % 2 == 1),
    }


def _texture(spec: DomainSpec, rng: np.random.Generator, yy, xx) -> np.ndarray:
    n = spec.size
    if spec.texture == "flat" or spec.texture_amp == 0:
        return np.zeros((n, n))
    if spec.texture == "perlin":
        field_ = gaussian_filter(rng.normal(size=(n, n)), sigma=n / 10, mode="wrap")
        field_ /= np.abs(field_).max() + 1e-12
        return spec.texture_amp * field_
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3.0, 6.0)
    return spec.texture_amp * np.sin(2 * np.pi * freq * (yy * np.cos(theta) + xx * np.sin(theta)) + rng.uniform(0, 2 * np.pi))


def gen_sample(spec: DomainSpec, category_id: int, seed: int, domain_id: int = 0, max_retries: int = 20) -> GeneratedSample:
    """Deterministic sample for (spec, category, seed).

    Shapes are redrawn until their area fraction lies in ``fg_area_range``;
    after ``max_retries`` the last shape field is re-thresholded at the
    quantile that puts the area in the middle of the range.
    """
    rng = np.random.default_rng([spec.rng_seed, category_id, seed])
    cat = category_params(spec, category_id)
    lo, hi = spec.fg_area_range
    yy, xx = _grid(spec.size)
    make = _FIELDS[spec.shape_family]
    clipped = False
    for _ in range(max_retries):
        area = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo))
        f = make(yy, xx, area, rng, cat)
        mask = f > 0
        if lo <= mask.mean() <= hi:
            break
    else:
        target = 0.5 * (lo + hi)
        mask = f > np.quantile(f, 1.0 - target)
        clipped = True

    tex = _texture(spec, rng, yy, xx)
    fg = np.asarray(spec.fg_color) + rng.uniform(-0.5, 0.5, size=3) * spec.noise
    bg = np.asarray(spec.bg_color) + rng.uniform(-0.5, 0.5, size=3) * spec.noise
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None]) + tex[None]
    if spec.noise > 0:
        img = img + spec.noise * rng.normal(size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return GeneratedSample(img, mask.astype(np.uint8), domain_id, category_id, {"seed": seed, "clipped": clipped})


def sample_episode(
    spec: DomainSpec,
    category_id: int,
    k: int,
    n_eval: int,
    seed: int,
    domain_id: int = 0,
) -> Episode:
    """K supports and ``n_eval`` held-out queries drawn with distinct sample seeds."""
    if k < 1 or n_eval < 1:
        raise ValueError("need k >= 1 and n_eval >= 1")
    rng = np.random.default_rng([seed, category_id, 104729])
    seeds = rng.choice(2**31 - 1, size=k + n_eval, replace=False)
    samples = [gen_sample(spec, category_id, int(s), domain_id) for s in seeds]
    ep = Episode(
        supports=[(s.image, s.mask) for s in samples[:k]],
        eval_queries=[(s.image, s.mask) for s in samples[k:]],
        category_id=category_id,
        domain_id=domain_id,
        sample_seeds=[int(s) for s in seeds],
    )
    return ep


def preset_domains(size: int = 32) -> list[DomainSpec]:
    return [
        DomainSpec("aerial-like", (0.30, 0.50, 0.25), (0.55, 0.48, 0.32), noise=0.10,
                   texture="stripes", texture_amp=0.12, shape_family="multi-blob",
                   fg_area_range=(0.10, 0.60), rng_seed=11, size=size),
        DomainSpec("lesion-like", (0.55, 0.38, 0.30), (0.80, 0.62, 0.52), noise=0.10,
                   texture="flat", shape_family="blob",
                   fg_area_range=(0.20, 0.60), rng_seed=23, size=size),
        DomainSpec("xray-like", (0.25, 0.25, 0.25), (0.55, 0.55, 0.55), noise=0.10,
                   texture="perlin", texture_amp=0.10, shape_family="ring",
                   fg_area_range=(0.12, 0.50), rng_seed=37, size=size),
        DomainSpec("objects-like", (0.80, 0.35, 0.20), (0.45, 0.50, 0.55), noise=0.08,
                   texture="perlin", texture_amp=0.08, shape_family="blob",
                   fg_area_range=(0.04, 0.15), rng_seed=41, size=size),
        DomainSpec("underwater-like", (0.30, 0.65, 0.55), (0.10, 0.35, 0.55), noise=0.10,
                   texture="perlin", texture_amp=0.10, shape_family="thin-structure",
                   fg_area_range=(0.05, 0.30), rng_seed=53, size=size),
    ]


def get_preset(name: str, size: int = 32) -> DomainSpec:
    for spec in preset_domains(size):
        if spec.name == name:
            return spec
    raise KeyError(f"unknown domain preset {name!r}")


def save_specs(specs: list[DomainSpec], path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=2))


def load_specs(path) -> list[DomainSpec]:
    return [DomainSpec.from_dict(d) for d in json.loads(Path(path).read_text())]


def save_png(sample: GeneratedSample, path) -> None:
    """Image and mask side by side."""
    from PIL import Image

    img = (np.moveaxis(sample.image, 0, -1) * 255).round().astype(np.uint8)
    mask = np.repeat(sample.mask[..., None] * 255, 3, axis=-1).astype(np.uint8)
    Image.fromarray(np.concatenate([img, mask], axis=1)).save(path)
