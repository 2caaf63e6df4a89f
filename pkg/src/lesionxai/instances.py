"""Lesion instances: connected components, categorization, TN probe spheres.

Instances are connected components of a binarized probability map
(18-connectivity by default, minimum physical volume 5 mm^3). Predicted
instances are TP on any ground-truth overlap, FP otherwise; ground-truth
instances with no prediction overlap are FN. TN probes are lesion-free
spheres sampled inside the brain mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.3
DEFAULT_MIN_VOLUME_MM3 = 5.0
DEFAULT_TN_COUNT = 10
DEFAULT_TN_VOLUME_MM3 = 93.0

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass
class LesionInstance:
    id: int
    voxels: np.ndarray  # (N, 3) integer z,y,x
    volume_mm3: float
    centroid: tuple[float, float, float]
    bbox: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]  # inclusive

    @classmethod
    def from_voxels(cls, iid: int, voxels: np.ndarray, voxel_volume: float = 1.0):
        voxels = np.asarray(voxels, dtype=np.int64)
        if voxels.size == 0:
            raise ValueError("instance needs at least one voxel")
        centroid = tuple(float(c) for c in voxels.mean(axis=0))
        bbox = tuple(
            (int(voxels[:, a].min()), int(voxels[:, a].max())) for a in range(3)
        )
        return cls(iid, voxels, float(len(voxels)) * voxel_volume, centroid, bbox)

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.voxels[:, 0], self.voxels[:, 1], self.voxels[:, 2]] = True
        return m

    def __len__(self) -> int:
        return len(self.voxels)


@dataclass
class CategorizedInstance:
    instance: LesionInstance
    category: str  # TP, FP, FN, TN
    overlap: int  # voxel overlap with the opposing mask


def binarize(prob: np.ndarray, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Strictly greater than the threshold."""
    return np.asarray(prob) > t


def connected_components(
    mask: np.ndarray, connectivity: int = 18, voxel_volume: float = 1.0
) -> list[LesionInstance]:
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    out = []
    coords = np.argwhere(labels > 0)
    if len(coords) == 0:
        return out
    lab = labels[coords[:, 0], coords[:, 1], coords[:, 2]]
    order = np.argsort(lab, kind="stable")
    coords, lab = coords[order], lab[order]
    starts = np.searchsorted(lab, np.arange(1, n + 1), side="left")
    ends = np.searchsorted(lab, np.arange(1, n + 1), side="right")
    for i in range(n):
        out.append(
            LesionInstance.from_voxels(i + 1, coords[starts[i] : ends[i]], voxel_volume)
        )
    return out


def filter_min_volume(
    instances: list[LesionInstance], min_mm3: float = DEFAULT_MIN_VOLUME_MM3
) -> list[LesionInstance]:
    return [inst for inst in instances if inst.volume_mm3 >= min_mm3]


@dataclass
class CategorizationResult:
    categorized: list[CategorizedInstance]
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def true_positive_rate(self) -> float:
        tp, fn = self.counts.get("TP", 0), self.counts.get("FN", 0)
        return tp / (tp + fn) if tp + fn else float("nan")

    @property
    def false_discovery_rate(self) -> float:
        tp, fp = self.counts.get("TP", 0), self.counts.get("FP", 0)
        return fp / (tp + fp) if tp + fp else float("nan")


def categorize(
    pred_instances: list[LesionInstance],
    gt_instances: list[LesionInstance],
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
) -> CategorizationResult:
    out: list[CategorizedInstance] = []
    for inst in pred_instances:
        ov = int(gt_mask[inst.voxels[:, 0], inst.voxels[:, 1], inst.voxels[:, 2]].sum())
        out.append(CategorizedInstance(inst, "TP" if ov > 0 else "FP", ov))
    for inst in gt_instances:
        ov = int(
            pred_mask[inst.voxels[:, 0], inst.voxels[:, 1], inst.voxels[:, 2]].sum()
        )
        if ov == 0:
            out.append(CategorizedInstance(inst, "FN", 0))
    counts: dict[str, int] = {"TP": 0, "FP": 0, "FN": 0}
    for ci in out:
        counts[ci.category] = counts.get(ci.category, 0) + 1
    return CategorizationResult(out, counts)


def sphere_offsets(radius_vox: float) -> np.ndarray:
    """Voxel offsets of a discrete ball: center distance <= radius."""
    r = int(np.floor(radius_vox))
    ax = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(ax, ax, ax, indexing="ij")
    keep = dz * dz + dy * dy + dx * dx <= radius_vox * radius_vox
    return np.stack([dz[keep], dy[keep], dx[keep]], axis=1)


def tn_sphere_radius_mm(volume_mm3: float = DEFAULT_TN_VOLUME_MM3) -> float:
    return float((3.0 * volume_mm3 / (4.0 * np.pi)) ** (1.0 / 3.0))


@dataclass
class TnSampleResult:
    spheres: list[LesionInstance]
    complete: bool  # False when fewer than requested placements were found


def sample_tn_spheres(
    brain_mask: np.ndarray,
    gt_mask: np.ndarray,
    pred_mask: np.ndarray,
    count: int = DEFAULT_TN_COUNT,
    volume_mm3: float = DEFAULT_TN_VOLUME_MM3,
    rng: np.random.Generator | None = None,
    max_tries: int = 2000,
) -> TnSampleResult:
    """Random lesion-free probe spheres fully inside the brain mask."""
    rng = rng or np.random.default_rng(0)
    offsets = sphere_offsets(tn_sphere_radius_mm(volume_mm3))
    forbidden = np.asarray(gt_mask, bool) | np.asarray(pred_mask, bool)
    brain = np.asarray(brain_mask, bool)
    candidates = np.argwhere(brain)
    spheres: list[LesionInstance] = []
    shape = np.array(brain.shape)
    tries = 0
    while len(spheres) < count and tries < max_tries and len(candidates):
        tries += 1
        center = candidates[int(rng.integers(0, len(candidates)))]
        vox = center[None, :] + offsets
        if np.any(vox < 0) or np.any(vox >= shape):
            continue
        z, y, x = vox[:, 0], vox[:, 1], vox[:, 2]
        if not brain[z, y, x].all() or forbidden[z, y, x].any():
            continue
        spheres.append(LesionInstance.from_voxels(len(spheres) + 1, vox))
    return TnSampleResult(spheres, complete=len(spheres) == count)


def center_of_mass(instance: LesionInstance) -> tuple[int, int, int]:
    """Instance voxel nearest the real centroid, lexicographic tie-break."""
    if len(instance.voxels) == 0:
        raise ValueError("empty instance")
    c = np.asarray(instance.centroid)
    d2 = ((instance.voxels - c) ** 2).sum(axis=1)
    best = d2.min()
    tied = instance.voxels[d2 == best]
    tied = tied[np.lexsort((tied[:, 2], tied[:, 1], tied[:, 0]))]
    return tuple(int(v) for v in tied[0])


# -- serialization ----------------------------------------------------------


def _rle_encode(voxels: np.ndarray) -> str:
    """Run-length encode along x within sorted (z, y) rows."""
    vox = voxels[np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))]
    runs = []
    start = prev = None
    row = None
    for z, y, x in vox:
        if row == (z, y) and x == prev + 1:
            prev = x
        else:
            if start is not None:
                runs.append(f"{row[0]},{row[1]},{start},{prev - start + 1}")
            row, start, prev = (z, y), x, x
    if start is not None:
        runs.append(f"{row[0]},{row[1]},{start},{prev - start + 1}")
    return ";".join(runs)


def _rle_decode(text: str) -> np.ndarray:
    vox = []
    if text:
        for run in text.split(";"):
            z, y, x0, n = (int(p) for p in run.split(","))
            for x in range(x0, x0 + n):
                vox.append((z, y, x))
    return np.asarray(vox, dtype=np.int64)


def write_instances(categorized: list[CategorizedInstance], path) -> None:
    lines = ["# lesionxai instances v1"]
    for ci in categorized:
        inst = ci.instance
        bbox = " ".join(f"{lo}:{hi}" for lo, hi in inst.bbox)
        cz, cy, cx = inst.centroid
        lines.append(
            f"instance {inst.id} {ci.category} {inst.volume_mm3!r} "
            f"{cz!r} {cy!r} {cx!r} {bbox} {_rle_encode(inst.voxels)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_instances(path) -> list[CategorizedInstance]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.startswith("instance "):
            continue
        parts = line.split(" ")
        iid, category = int(parts[1]), parts[2]
        volume = float(parts[3])
        centroid = tuple(float(p) for p in parts[4:7])
        bbox = tuple(tuple(int(v) for v in p.split(":")) for p in parts[7:10])
        voxels = _rle_decode(parts[10]) if len(parts) > 10 else np.empty((0, 3), int)
        inst = LesionInstance(iid, voxels, volume, centroid, bbox)
        out.append(CategorizedInstance(inst, category, 0))
    return out
