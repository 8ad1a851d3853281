"""Synthetic multi-structure scenes and D1/D2 dataset construction.

A scene is a jittered, slightly elliptical target on background::

    disk (label 1) -> zero or more rings -> outer ring split in two halves

The two half-rings are adjacent structures and are what the default super
label merges. The last two base labels are always the halves, so a scheme
with ``K`` base labels has ``K - 4`` inner rings.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .hseg_io import read_item, write_item, write_pgm
from .labelspace import LabelScheme, SchemeError, SuperLabel, mask_from_labels, merge_labels
from .seeding import derive_seed

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
MIN_COUNTS = {"train": 20, "val": 5, "test": 5}


class GeometryError(ValueError):
    pass


def adjacent_scheme() -> LabelScheme:
    """Five labels; the two half-ring muscles share one super label (thigh-style merge)."""
    return LabelScheme(
        5,
        (SuperLabel(5, {3, 4}, "muscle"),),
        ("background", "bone", "fat", "muscle_a", "muscle_b"),
    )


def heart_scheme() -> LabelScheme:
    """Four labels; every foreground structure merged into one super label (cardiac-style)."""
    return LabelScheme(
        4,
        (SuperLabel(4, {1, 2, 3}, "heart"),),
        ("background", "cavity", "wall_a", "wall_b"),
    )


PRESETS = {"adjacent": adjacent_scheme, "heart": heart_scheme}

# expected per-scene pixel share; the generator's auto-sized bands keep every
# label inside these at the default geometry
BACKGROUND_SHARE = (0.40, 0.70)
STRUCTURE_SHARE = (0.03, 0.30)


def label_share_bands(num_labels: int) -> list:
    return [BACKGROUND_SHARE] + [STRUCTURE_SHARE] * (num_labels - 1)


def default_intensities(num_labels: int) -> tuple:
    """Default mean intensity per base label.

    Touching structures differ by at least 0.2. Structures that do not touch
    may share a level: the ring around the merged pair looks like background,
    much as intermuscular and subcutaneous fat do, so intensity alone does not
    identify a label. The half-rings sit just above that shared level.
    """
    low, half_a, half_b = 0.15, 0.35, 0.55
    # disk and inner rings, listed from the outermost inward
    chain = [low if i % 2 == 0 else 0.85 for i in range(num_labels - 3)]
    return (low, *reversed(chain), half_a, half_b)


@dataclass
class GeometryConfig:
    """Scene geometry; radii and thicknesses are fractions of ``min(H, W)``.

    Ranges left as ``None`` are derived from the radial budget so that the
    outer ring always fits inside the image.
    """

    height: int = 64
    width: int = 64
    center_jitter: float = 0.04
    disk_radius: Optional[tuple] = None
    ring_thickness: Optional[tuple] = None
    outer_thickness: Optional[tuple] = None
    aspect: tuple = (0.92, 1.08)
    wobble: float = 0.10
    outer_variation: float = 0.5
    outer_weight: float = 1.2
    blur_sigma: float = 2.0
    noise_sigma: float = 0.05
    intensities: Optional[tuple] = None
    intensity_jitter: float = 0.025

    @property
    def stretch(self) -> float:
        return max(max(self.aspect), 1.0 / min(self.aspect))

    def resolved(self, num_labels: int) -> "GeometryConfig":
        if not 4 <= num_labels <= 8:
            raise GeometryError("scenes support 4 to 8 base labels")
        if self.height < 32 or self.width < 32:
            raise GeometryError("scenes need H, W >= 32")
        n_inner = num_labels - 4
        unit = (0.49 - self.center_jitter) / self.stretch / (2.0 + self.outer_weight + n_inner)

        def band(given, weight):
            return tuple(given) if given is not None else (0.8 * weight * unit, weight * unit)

        intens = tuple(self.intensities) if self.intensities else default_intensities(num_labels)
        g = replace(self, disk_radius=band(self.disk_radius, 2.0),
                    ring_thickness=band(self.ring_thickness, 1.0),
                    outer_thickness=band(self.outer_thickness, self.outer_weight),
                    aspect=tuple(self.aspect), intensities=intens)
        g._check(num_labels)
        return g

    def _check(self, num_labels: int):
        n_inner = num_labels - 4
        # nominal extent; wobble and thickness modulation may clip at the border
        reach = self.disk_radius[1] + n_inner * self.ring_thickness[1] + self.outer_thickness[1]
        reach = reach * self.stretch + self.center_jitter
        if reach >= 0.5:
            raise GeometryError(f"structures reach {reach:.3f} of the image; must stay below 0.5")
        thinnest = min(self.ring_thickness[0] if n_inner else 1,
                       self.outer_thickness[0] * (1.0 - self.outer_variation))
        if thinnest * min(self.height, self.width) < 1.5:
            raise GeometryError("rings would be thinner than 1.5 pixels at this image size")
        if len(self.intensities) != num_labels:
            raise GeometryError(f"need {num_labels} intensities, got {len(self.intensities)}")
        for a, b in _adjacent_pairs(num_labels):
            gap = abs(self.intensities[a] - self.intensities[b]) - 2 * self.intensity_jitter
            if gap < 0.15 - 1e-12:
                raise GeometryError(f"labels {a} and {b} touch but may differ by < 0.15 in intensity")


def _adjacent_pairs(num_labels: int):
    half_a, half_b = num_labels - 2, num_labels - 1
    chain = list(range(1, num_labels - 2))  # disk then inner rings
    pairs = [(chain[i], chain[i + 1]) for i in range(len(chain) - 1)]
    pairs += [(chain[-1], half_a), (chain[-1], half_b), (half_a, half_b), (0, half_a), (0, half_b)]
    return pairs


@dataclass
class Scene:
    image: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)


def _render(rng, num_labels: int, g: GeometryConfig):
    H, W = g.height, g.width
    s = min(H, W)
    cy = H / 2 + rng.uniform(-1, 1) * g.center_jitter * s
    cx = W / 2 + rng.uniform(-1, 1) * g.center_jitter * s
    radii = [rng.uniform(*g.disk_radius) * s]
    for _ in range(num_labels - 4):
        radii.append(radii[-1] + rng.uniform(*g.ring_thickness) * s)
    outer = rng.uniform(*g.outer_thickness) * s
    aspect = rng.uniform(*g.aspect)
    theta = rng.uniform(0.0, 2 * math.pi)
    # low-order radial harmonics shared by every boundary, plus a thickness
    # modulation of the outer ring
    harmonics = [(k, rng.uniform(0, g.wobble / 2), rng.uniform(0, 2 * math.pi)) for k in (2, 3)]
    outer_phase = rng.uniform(0, 2 * math.pi)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = (yy + 0.5 - cy) * aspect, (xx + 0.5 - cx) / aspect
    phi = np.arctan2(dy, dx)
    shape = 1.0 + sum(a * np.cos(k * phi + p) for k, a, p in harmonics)
    rad = np.hypot(dx, dy) / shape
    outer_edge = radii[-1] + outer * (1.0 + g.outer_variation * np.cos(phi - outer_phase))

    labels = np.zeros((H, W), dtype=np.uint8)
    # paint from the outside in so inner structures overwrite outer ones
    side = np.sin(phi - theta) >= 0
    ring = rad < outer_edge
    labels[ring & side] = num_labels - 2
    labels[ring & ~side] = num_labels - 1
    for lab in range(num_labels - 3, 0, -1):
        labels[rad < radii[lab - 1]] = lab

    levels = np.asarray(g.intensities, dtype=np.float64)
    if g.intensity_jitter > 0:
        levels = levels + rng.uniform(-g.intensity_jitter, g.intensity_jitter, size=levels.shape)
    clean = levels[labels]
    if g.blur_sigma > 0:
        # partial-volume mixing across boundaries
        clean = ndimage.gaussian_filter(clean, g.blur_sigma, mode="nearest")
    noise = rng.normal(0.0, g.noise_sigma, size=(H, W)) if g.noise_sigma > 0 else 0.0
    image = np.clip(clean + noise, 0.0, 1.0).astype(np.float32)[..., None]
    prov = {
        "center": [cy, cx], "radii": radii + [radii[-1] + outer], "aspect": aspect,
        "split_angle": theta, "harmonics": [list(h) for h in harmonics],
        "outer_phase": outer_phase, "blur_sigma": g.blur_sigma, "noise_sigma": g.noise_sigma, "intensities": levels.tolist(),
    }
    return image, labels, prov


def generate_scene(seed: int, scheme: LabelScheme, geometry: Optional[GeometryConfig] = None,
                   max_tries: int = 20) -> Scene:
    """Deterministic scene for ``seed``; redraws until every base label is present."""
    g = (geometry or GeometryConfig()).resolved(scheme.num_base_labels)
    for attempt in range(max_tries):
        rng = np.random.default_rng(derive_seed(seed, attempt) if attempt else seed)
        image, labels, prov = _render(rng, scheme.num_base_labels, g)
        if np.unique(labels).size == scheme.num_base_labels:
            prov.update(seed=int(seed), attempt=attempt)
            return Scene(image, labels, prov)
    raise GeometryError(f"could not place all {scheme.num_base_labels} labels in {max_tries} tries")


def split_counts(total: int, ratios=(99, 20, 20)) -> dict:
    """Split ``total`` items in the given train/val/test proportions (largest remainder)."""
    raw = np.asarray(ratios, dtype=np.float64) / float(sum(ratios)) * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return dict(zip(SPLITS, counts.tolist()))


@dataclass
class ItemRecord:
    name: str
    split: str
    seed: int
    image: str
    labels: str
    merged_labels: Optional[str] = None
    masked_pixels: int = 0

    @property
    def merged(self) -> bool:
        return self.merged_labels is not None


@dataclass
class DatasetManifest:
    root: Path
    scheme: LabelScheme
    seed: int
    super_id: Optional[int]
    merge_fraction: float
    geometry: dict
    items: list

    def counts(self) -> dict:
        return {s: sum(1 for it in self.items if it.split == s) for s in SPLITS}

    def split_items(self, split: str) -> list:
        return [it for it in self.items if it.split == split]

    def to_dict(self) -> dict:
        return {
            "format": "hetseg-manifest",
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "scheme": self.scheme.to_dict(),
            "super_id": self.super_id,
            "merge_fraction": self.merge_fraction,
            "geometry": self.geometry,
            "counts": self.counts(),
            "items": [asdict(it) for it in self.items],
        }

    def save(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() or not root.suffix else root
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest not found: {path}")
        d = json.loads(path.read_text(encoding="utf-8"))
        if d.get("format") != "hetseg-manifest" or d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path} is not a version-{MANIFEST_VERSION} hetseg manifest")
        return cls(path.parent, LabelScheme.from_dict(d["scheme"]), d["seed"], d["super_id"],
                   d["merge_fraction"], d["geometry"], [ItemRecord(**it) for it in d["items"]])

    def load_item(self, item: ItemRecord, merged: bool = True):
        """``(image (H, W, 1) float32, labels (H, W) uint8)``; merged labels when requested and present."""
        image = read_item(self.root / item.image)
        if merged and item.merged:
            labels = read_item(self.root / item.merged_labels)
            zeros = int((mask_from_labels(labels, self.scheme) == 0).sum())
            if zeros != item.masked_pixels:
                raise SchemeError(f"{item.name}: mask has {zeros} zeros, manifest records {item.masked_pixels}")
        else:
            labels = read_item(self.root / item.labels)
        return image, labels

    def load_arrays(self, items, merged: bool = True):
        pairs = [self.load_item(it, merged) for it in items]
        if not pairs:
            return np.zeros((0, 0, 0, 1), np.float32), np.zeros((0, 0, 0), np.uint8)
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def build_dataset(seed: int, scheme: LabelScheme, counts: dict, merge_fraction: float = 0.5,
                  super_id: Optional[int] = None, out_dir=".", geometry: Optional[GeometryConfig] = None,
                  pgm: bool = False) -> DatasetManifest:
    """Generate train/val/test scenes and merge ``super_id`` in a fraction of train+val items.

    Merging is applied per split to ``round(merge_fraction * n)`` items picked by a
    seeded permutation. Test items are never merged.
    """
    counts = {s: int(counts[s]) for s in SPLITS}
    for s, lo in MIN_COUNTS.items():
        if counts[s] < lo:
            raise ValueError(f"{s} split needs at least {lo} items, got {counts[s]}")
    if not 0.0 <= merge_fraction <= 1.0:
        raise ValueError("merge_fraction must lie in [0, 1]")
    if super_id is None:
        if not scheme.super_labels:
            raise SchemeError("scheme defines no super label")
        super_id = scheme.super_labels[0].id
    scheme.get_super(super_id)
    g = (geometry or GeometryConfig()).resolved(scheme.num_base_labels)

    root = Path(out_dir)
    (root / "items").mkdir(parents=True, exist_ok=True)
    items = []
    for split_code, split in enumerate(SPLITS):
        n = counts[split]
        n_merge = int(round(merge_fraction * n)) if split != "test" else 0
        pick = np.random.default_rng(derive_seed(seed, "merge", split_code)).permutation(n)[:n_merge]
        to_merge = set(pick.tolist())
        for i in range(n):
            item_seed = derive_seed(seed, split_code, i)
            scene = generate_scene(item_seed, scheme, g)
            name = f"{split}_{i:04d}"
            rec = ItemRecord(name, split, item_seed, f"items/{name}.img.hseg", f"items/{name}.lbl.hseg")
            write_item(root / rec.image, scene.image)
            write_item(root / rec.labels, scene.labels)
            if i in to_merge:
                merged = merge_labels(scene.labels, scheme, super_id).astype(np.uint8)
                rec.merged_labels = f"items/{name}.merged.hseg"
                rec.masked_pixels = int((mask_from_labels(merged, scheme) == 0).sum())
                write_item(root / rec.merged_labels, merged)
            if pgm:
                write_pgm(root / "items" / f"{name}.pgm", scene.image)
            items.append(rec)
    geo = asdict(g)
    manifest = DatasetManifest(root, scheme, int(seed), int(super_id), float(merge_fraction), geo, items)
    manifest.save()
    return manifest
