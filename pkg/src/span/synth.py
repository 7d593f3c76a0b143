"""Synthetic desk-scale datasets standing in for slide-level data.

Two task families:

* classification — tissue-shaped sparse bags carrying two marker clusters;
  the label says whether the clusters lie within Chebyshev distance r. Bag
  statistics are identical across classes by construction (same tissue
  process, same marker mass), so mean pooling cannot solve it: only the
  spatial arrangement separates the classes.
* segmentation — tissue maps with irregular foreground blobs; each patch
  carries a weak noisy per-patch signal, so good masks need neighborhood
  context.

Same seed -> byte-identical dataset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .sparse import SparseMap, build_sparse_map, serialize


@dataclass
class SyntheticTaskSpec:
    task: str = "classification"
    grid: int = 32
    feature_dim: int = 8
    num_train: int = 1400
    num_val: int = 300
    num_test: int = 300
    occupancy: float = 0.35
    blob_count: tuple = (3, 6)
    blob_side: tuple = (6, 16)
    noise: float = 0.3
    num_ctx: int = 1
    # classification: marker clusters. The far range keeps negative pairs
    # co-resident in coarse-stage windows, so separating the classes needs
    # offset-sensitive attention, not mere window co-occurrence.
    marker_strength: float = 8.0
    cluster_side: int = 4
    near_dist: tuple = (4, 6)
    far_dist: tuple = (10, 16)
    # segmentation: foreground blobs (signal tuned to 2x the noise sigma)
    tumor_blobs: tuple = (1, 3)
    tumor_radius: tuple = (3, 7)
    tumor_signal: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        for name in ("blob_count", "blob_side", "near_dist", "far_dist",
                     "tumor_blobs", "tumor_radius"):
            setattr(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synthetic spec keys {sorted(extra)}")
        return cls(**d)


def rect_blob_occupancy(rng, spec: SyntheticTaskSpec) -> np.ndarray:
    """Union of random rectangles covering roughly `occupancy` of the grid."""
    g = spec.grid
    target = spec.occupancy * g * g
    occ = np.zeros((g, g), dtype=bool)
    n_blobs = rng.integers(spec.blob_count[0], spec.blob_count[1] + 1)
    placed = 0
    while placed < n_blobs or occ.sum() < 0.6 * target:
        w = int(rng.integers(spec.blob_side[0], spec.blob_side[1] + 1))
        h = int(rng.integers(spec.blob_side[0], spec.blob_side[1] + 1))
        x0 = int(rng.integers(0, max(g - w, 1)))
        y0 = int(rng.integers(0, max(g - h, 1)))
        occ[y0 : y0 + h, x0 : x0 + w] = True
        placed += 1
        if occ.sum() >= 1.4 * target:
            break
    return occ


def _occ_coords(occ: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(occ)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def _place_cluster(rng, g: int, side: int):
    x = int(rng.integers(0, g - side + 1))
    y = int(rng.integers(0, g - side + 1))
    return x, y


def generate_classification_bag(rng, spec: SyntheticTaskSpec, label: int):
    """One bag: tissue blobs plus one type-A and one type-B marker cluster.

    label=1 puts the clusters within Chebyshev near_dist of each other,
    label=0 pushes them far_dist apart. Every bag carries exactly one
    cluster of each type, so pooled feature statistics match across classes
    and only the spatial arrangement separates them.
    """
    g = spec.grid
    side = spec.cluster_side
    occ = rect_blob_occupancy(rng, spec)
    lo, hi = spec.near_dist if label == 1 else spec.far_dist
    for _ in range(10_000):
        ax, ay = _place_cluster(rng, g, side)
        d = int(rng.integers(lo, hi + 1))
        cands = []
        for dx in range(-d, d + 1):
            for dy in range(-d, d + 1):
                if max(abs(dx), abs(dy)) != d:
                    continue
                bx, by = ax + dx, ay + dy
                if 0 <= bx <= g - side and 0 <= by <= g - side:
                    cands.append((bx, by))
        if cands:
            bx, by = cands[rng.integers(0, len(cands))]
            break
    else:  # pragma: no cover - placement cannot really exhaust a 32-grid
        raise RuntimeError("could not place marker clusters")
    occ[ay : ay + side, ax : ax + side] = True
    occ[by : by + side, bx : bx + side] = True
    coords = _occ_coords(occ)
    feats = rng.normal(0.0, spec.noise, size=(len(coords), spec.feature_dim))
    marker_a = np.zeros((g, g), dtype=bool)
    marker_a[ay : ay + side, ax : ax + side] = True
    marker_b = np.zeros((g, g), dtype=bool)
    marker_b[by : by + side, bx : bx + side] = True
    feats[marker_a[coords[:, 1], coords[:, 0]], 0] += spec.marker_strength
    feats[marker_b[coords[:, 1], coords[:, 0]], 1] += spec.marker_strength
    return build_sparse_map(coords, feats.astype(np.float32), num_ctx=spec.num_ctx)


def _disc_at(g: int, cx: int, cy: int, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:g, 0:g]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2


def generate_segmentation_map(rng, spec: SyntheticTaskSpec):
    """One map plus its per-patch foreground mask in canonical coord order.

    Tumor blobs are wobbly discs centered on active tissue cells, so the
    foreground is never vanishingly small relative to the map.
    """
    occ = rect_blob_occupancy(rng, spec)
    active = np.argwhere(occ)  # (n, 2) as (y, x)
    tumor = np.zeros_like(occ)
    n_blobs = rng.integers(spec.tumor_blobs[0], spec.tumor_blobs[1] + 1)
    for _ in range(int(n_blobs)):
        radius = int(rng.integers(spec.tumor_radius[0], spec.tumor_radius[1] + 1))
        cy, cx = active[rng.integers(0, len(active))]
        wobble = 1.0 + 0.25 * rng.standard_normal()
        tumor |= _disc_at(spec.grid, int(cx), int(cy), radius * max(wobble, 0.5))
    tumor &= occ
    coords = _occ_coords(occ)
    feats = rng.normal(0.0, spec.noise, size=(len(coords), spec.feature_dim))
    mask = tumor[coords[:, 1], coords[:, 0]].astype(np.int64)
    feats[mask == 1, 0] += spec.tumor_signal
    feats[mask == 1, 1] -= 0.5 * spec.tumor_signal
    smap = build_sparse_map(coords, feats.astype(np.float32), num_ctx=spec.num_ctx)
    return smap, mask


def generate_dataset(spec: SyntheticTaskSpec):
    """All splits in memory: list of (SparseMap, label-or-mask) per split."""
    rng = np.random.default_rng(spec.seed)
    out = {}
    for split, count in (("train", spec.num_train), ("val", spec.num_val),
                         ("test", spec.num_test)):
        samples = []
        for i in range(count):
            if spec.task == "classification":
                label = i % 2  # exactly balanced by construction
                samples.append((generate_classification_bag(rng, spec, label), label))
            else:
                samples.append(generate_segmentation_map(rng, spec))
        out[split] = samples
    return out


def write_dataset(spec: SyntheticTaskSpec, out_dir) -> Path:
    """Write .span map files plus a manifest; deterministic given the seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(spec)
    manifest = {"spec": spec.to_dict(), "splits": {}}
    for split, samples in data.items():
        (out / split).mkdir(exist_ok=True)
        entries = []
        for i, item in enumerate(samples):
            name = f"{split}/map_{i:05d}.span"
            if spec.task == "classification":
                smap, label = item
                (out / name).write_bytes(serialize(smap))
                entries.append({"file": name, "label": int(label)})
            else:
                smap, mask = item
                (out / name).write_bytes(serialize(smap))
                mask_name = f"{split}/mask_{i:05d}.span"
                mask_map = SparseMap(smap.coords,
                                     mask.astype(np.float32).reshape(-1, 1),
                                     np.zeros((0, 1), dtype=np.float32))
                (out / mask_name).write_bytes(serialize(mask_map))
                entries.append({"file": name, "mask": mask_name})
        manifest["splits"][split] = entries
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "manifest.json"
