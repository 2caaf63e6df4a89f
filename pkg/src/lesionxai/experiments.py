"""Phantom-scale analyses: extrema distributions, sanity checks, lesion
relocation, and the contextual-information dilation experiment.

All randomness is seeded; result tables are assembled in deterministic order
(volume id, instance id, iteration) so repeated runs emit byte-identical CSVs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .instances import (
    CategorizedInstance,
    LesionInstance,
    binarize,
    categorize,
    center_of_mass,
    connected_components,
    filter_min_volume,
    sample_tn_spheres,
)
from .phantom import Phantom, RelocationError, preprocess, relocate_lesion, zscore_normalize
from .saliency import (
    NoiseSpec,
    SaliencyMap,
    saliency_extrema,
    smoothgrad_instance_max,
)
from .stats import UTestResult, bootstrap_ci_median, mann_whitney_u
from .unet import infer_volume

CATEGORIES = ("TP", "FP", "FN", "TN")

_DILATION_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass
class StudyConfig:
    threshold: float = 0.3
    min_volume_mm3: float = 5.0
    tn_count: int = 10
    tn_volume_mm3: float = 93.0
    omega_cap: int = 512
    exclusion_band: tuple[float, float] = (-0.1, 0.1)
    bootstrap_resamples: int = 1000
    patch_extent: int = 32
    seed: int = 0


@dataclass
class ExtremaRow:
    volume_id: int
    instance_id: str
    category: str
    modality: int
    max: float
    min: float


@dataclass
class CategorySummary:
    category: str
    modality: int
    n: int
    median_max: float
    ci_max: tuple[float, float]
    median_min: float
    ci_min: tuple[float, float]


@dataclass
class PairTest:
    modality: int
    stat: str  # max | min
    cat_a: str
    cat_b: str
    result: UTestResult


@dataclass
class ExtremaTable:
    rows: list[ExtremaRow]
    summaries: list[CategorySummary]
    tests: list[PairTest]
    empty_categories: list[str]

    def values(self, category: str, modality: int, stat: str) -> np.ndarray:
        return np.array(
            [
                getattr(r, stat)
                for r in self.rows
                if r.category == category and r.modality == modality
            ]
        )

    def median(self, category: str, modality: int, stat: str) -> float:
        vals = self.values(category, modality, stat)
        return float(np.median(vals)) if len(vals) else float("nan")


def categorize_phantom(
    graph: ad.Graph, phantom: Phantom, cfg: StudyConfig
) -> tuple[np.ndarray, np.ndarray, list[CategorizedInstance]]:
    """Normalize, infer, and categorize one phantom.

    Returns (normalized input, probability map, categorized instances).
    """
    x = preprocess(phantom)
    prob = infer_volume(graph, x, patch_extent=cfg.patch_extent).data[0]
    pred_mask = binarize(prob, cfg.threshold)
    pred = filter_min_volume(
        connected_components(pred_mask, connectivity=18), cfg.min_volume_mm3
    )
    result = categorize(pred, phantom.instances, pred_mask, phantom.gt_mask)
    return x, prob, result.categorized


def distribution_study(
    graph: ad.Graph,
    phantoms: list[Phantom],
    noise: NoiseSpec,
    cfg: StudyConfig | None = None,
) -> ExtremaTable:
    """Signed-max saliency extrema for every TP/FP/FN instance and TN probe,
    with per-category medians, bootstrap CIs, and pairwise U tests."""
    cfg = cfg or StudyConfig()
    rows: list[ExtremaRow] = []
    for vid, phantom in enumerate(phantoms):
        x, prob, categorized = categorize_phantom(graph, phantom, cfg)
        pred_mask = binarize(prob, cfg.threshold)
        tn = sample_tn_spheres(
            phantom.brain_mask,
            phantom.gt_mask,
            pred_mask,
            count=cfg.tn_count,
            volume_mm3=cfg.tn_volume_mm3,
            rng=np.random.default_rng((cfg.seed, vid)),
        )
        probes = [(ci.category, ci.instance) for ci in categorized]
        probes += [("TN", s) for s in tn.spheres]
        for idx, (category, inst) in enumerate(probes):
            smap = smoothgrad_instance_max(
                graph, x, inst, noise, omega_cap=cfg.omega_cap
            )
            for m in range(smap.data.shape[0]):
                rows.append(
                    ExtremaRow(
                        vid,
                        f"{category.lower()}{idx}",
                        category,
                        m,
                        float(smap.data[m].max()),
                        float(smap.data[m].min()),
                    )
                )
    return _summarize(rows, cfg)


def _summarize(rows: list[ExtremaRow], cfg: StudyConfig) -> ExtremaTable:
    modalities = sorted({r.modality for r in rows}) or [0]
    summaries: list[CategorySummary] = []
    empty: list[str] = []
    for cat in CATEGORIES:
        for m in modalities:
            vals_max = [r.max for r in rows if r.category == cat and r.modality == m]
            vals_min = [r.min for r in rows if r.category == cat and r.modality == m]
            if not vals_max:
                if cat not in empty:
                    empty.append(cat)
                continue
            summaries.append(
                CategorySummary(
                    cat,
                    m,
                    len(vals_max),
                    float(np.median(vals_max)),
                    bootstrap_ci_median(
                        vals_max, cfg.bootstrap_resamples, seed=cfg.seed
                    ),
                    float(np.median(vals_min)),
                    bootstrap_ci_median(
                        vals_min, cfg.bootstrap_resamples, seed=cfg.seed
                    ),
                )
            )
    tests: list[PairTest] = []
    for m in modalities:
        for stat in ("max", "min"):
            for a, b in combinations(CATEGORIES, 2):
                xs = [getattr(r, stat) for r in rows if r.category == a and r.modality == m]
                ys = [getattr(r, stat) for r in rows if r.category == b and r.modality == m]
                if not xs or not ys:
                    continue
                tests.append(PairTest(m, stat, a, b, mann_whitney_u(xs, ys)))
    return ExtremaTable(rows, summaries, tests, empty)


# -- sanity checks ----------------------------------------------------------


@dataclass
class EmptyRegionReport:
    saliency: SaliencyMap
    max: float
    min: float
    within_tn_iqr: bool | None
    tp_peak_ratio: float | None  # TP median peak / this peak


def sanity_empty_region(
    graph: ad.Graph,
    phantom: Phantom,
    noise: NoiseSpec,
    cfg: StudyConfig | None = None,
    table: ExtremaTable | None = None,
    rng: np.random.Generator | None = None,
) -> EmptyRegionReport:
    """Signed-max saliency for a lesion-free spherical domain."""
    cfg = cfg or StudyConfig()
    rng = rng or np.random.default_rng(cfg.seed)
    x = preprocess(phantom)
    prob = infer_volume(graph, x, patch_extent=cfg.patch_extent).data[0]
    pred_mask = binarize(prob, cfg.threshold)
    sample = sample_tn_spheres(
        phantom.brain_mask,
        phantom.gt_mask,
        pred_mask,
        count=8,
        volume_mm3=cfg.tn_volume_mm3,
        rng=rng,
    )
    if not sample.spheres:
        raise RelocationError("no lesion-free placement available")
    # probe the emptiest available region: of the candidate spheres keep the
    # one whose voxels are farthest from any true or predicted lesion
    dist = ndimage.distance_transform_edt(~(phantom.gt_mask | pred_mask))
    sphere = max(
        sample.spheres,
        key=lambda s: float(
            dist[s.voxels[:, 0], s.voxels[:, 1], s.voxels[:, 2]].min()
        ),
    )
    smap = smoothgrad_instance_max(
        graph, x, sphere, noise, omega_cap=cfg.omega_cap
    )
    peak = float(np.abs(smap.data[0]).max())
    within = None
    ratio = None
    if table is not None:
        tn_max = table.values("TN", 0, "max")
        if len(tn_max):
            q1, q3 = np.quantile(tn_max, [0.25, 0.75])
            within = bool(q1 <= smap.data[0].max() <= q3)
        tp_max = table.values("TP", 0, "max")
        if len(tp_max) and peak > 0:
            ratio = float(np.median(tp_max) / peak)
    return EmptyRegionReport(
        smap, float(smap.data[0].max()), float(smap.data[0].min()), within, ratio
    )


@dataclass
class SingleVoxelReport:
    saliency: SaliencyMap
    voxel: tuple[int, int, int]
    mass_fraction_near_lesion: float  # |saliency| inside lesion + 2-voxel shell
    nonzero_within_rf: bool


def sanity_single_voxel(
    graph: ad.Graph,
    phantom: Phantom,
    instance: LesionInstance,
    noise: NoiseSpec,
    cfg: StudyConfig | None = None,
) -> SingleVoxelReport:
    """Saliency for a single-voxel domain at a lesion's center of mass."""
    cfg = cfg or StudyConfig()
    x = preprocess(phantom)
    voxel = center_of_mass(instance)
    smap = smoothgrad_instance_max(
        graph, x, np.array([voxel]), noise, omega_cap=cfg.omega_cap
    )
    shape = phantom.gt_mask.shape
    near = ndimage.binary_dilation(instance.mask(shape), iterations=2)
    total_mass = float(np.abs(smap.data).sum())
    near_mass = float(np.abs(smap.data[:, near]).sum())
    radius = max(ad.receptive_field(graph))
    rf_box = np.zeros(shape, dtype=bool)
    z, y, xx = voxel
    rf_box[
        max(z - radius, 0) : z + radius + 1,
        max(y - radius, 0) : y + radius + 1,
        max(xx - radius, 0) : xx + radius + 1,
    ] = True
    outside_rf = float(np.abs(smap.data[:, ~rf_box]).sum())
    return SingleVoxelReport(
        smap,
        voxel,
        near_mass / total_mass if total_mass > 0 else 0.0,
        outside_rf == 0.0,
    )


# -- relocation study -------------------------------------------------------


@dataclass
class RelocationReport:
    destination: str
    margin_mm: int
    placed: bool
    detected: bool | None
    max_score: float | None
    saliency: SaliencyMap | None
    error: str | None = None


def relocation_study(
    graph: ad.Graph,
    phantom: Phantom,
    instance: LesionInstance,
    noise: NoiseSpec,
    cfg: StudyConfig | None = None,
    rng: np.random.Generator | None = None,
) -> list[RelocationReport]:
    """Move one lesion to healthy brain, to background, and to background
    with a 3 mm tissue margin; report detection and saliency per case."""
    cfg = cfg or StudyConfig()
    rng = rng or np.random.default_rng(cfg.seed)
    cases = [("white-matter", 0), ("background", 0), ("background", 3)]
    reports: list[RelocationReport] = []
    for destination, margin in cases:
        edit = None
        err = None
        for _ in range(200):
            center = _propose_center(phantom, instance, destination, margin, rng)
            if center is None:
                break
            try:
                edit = relocate_lesion(
                    phantom, instance, center, margin, destination, rng=rng
                )
                break
            except RelocationError as exc:
                err = str(exc)
        if edit is None:
            reports.append(
                RelocationReport(destination, margin, False, None, None, None, err or "no placement found")
            )
            continue
        x = zscore_normalize(edit.volume.data, phantom.brain_mask)
        prob = infer_volume(graph, x, patch_extent=cfg.patch_extent).data[0]
        lesion_tgt = instance.voxels + np.asarray(edit.offset)
        scores = prob[lesion_tgt[:, 0], lesion_tgt[:, 1], lesion_tgt[:, 2]]
        smap = smoothgrad_instance_max(
            graph, x, lesion_tgt, noise, omega_cap=cfg.omega_cap
        )
        reports.append(
            RelocationReport(
                destination,
                margin,
                True,
                bool(scores.max() > cfg.threshold),
                float(scores.max()),
                smap,
            )
        )
    return reports


def _propose_center(phantom, instance, destination, margin, rng):
    shape = np.asarray(phantom.gt_mask.shape)
    half = np.array([hi - lo for lo, hi in instance.bbox]) // 2 + margin + 1
    if destination == "white-matter":
        gt_keepout = ndimage.binary_dilation(phantom.gt_mask, iterations=2)
        region = ndimage.binary_erosion(
            phantom.brain_mask, iterations=int(half.max())
        ) & ~gt_keepout
    else:
        # only the lesion voxels themselves must lie outside the brain; the
        # margin shell may touch it
        region = ~ndimage.binary_dilation(phantom.brain_mask, iterations=1)
        interior = np.zeros(tuple(shape), dtype=bool)
        s = tuple(slice(int(h), int(d - h)) for h, d in zip(half, shape))
        interior[s] = True
        region &= interior
    candidates = np.argwhere(region)
    if len(candidates) == 0:
        return None
    return tuple(int(v) for v in candidates[int(rng.integers(0, len(candidates)))])


# -- contextual information -------------------------------------------------


@dataclass
class ContextPoint:
    k: int
    radius_mm: float
    mean_score: float
    detected: bool


@dataclass
class ContextCurve:
    instance_id: int
    points: list[ContextPoint]

    def scores(self) -> np.ndarray:
        return np.array([p.mean_score for p in self.points])


def context_experiment(
    graph: ad.Graph,
    phantom: Phantom,
    instance: LesionInstance,
    iterations: int = 35,
    cfg: StudyConfig | None = None,
    dilation_connectivity: int = 26,
) -> ContextCurve:
    """Reveal the lesion's surroundings by iterated morphological dilation.

    Iteration 0 zeroes everything but the lesion; iteration k reveals the
    original (normalized) intensities on the k-fold dilation of the lesion
    mask. With the box structuring element (26-connectivity) k steps cover
    the full k-voxel receptive-field cube, so the curve is exactly constant
    for k at or beyond the receptive-field radius.
    """
    cfg = cfg or StudyConfig()
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    struct = _DILATION_STRUCTURES[dilation_connectivity]
    x = preprocess(phantom)
    omega = instance.voxels
    reveal = instance.mask(phantom.gt_mask.shape)
    points: list[ContextPoint] = []
    for k in range(iterations + 1):
        if k > 0:
            reveal = ndimage.binary_dilation(reveal, structure=struct)
        masked = x * reveal
        prob = infer_volume(graph, masked, patch_extent=cfg.patch_extent).data[0]
        scores = prob[omega[:, 0], omega[:, 1], omega[:, 2]]
        points.append(
            ContextPoint(
                k,
                float(k),
                float(scores.mean()),
                bool(scores.max() > cfg.threshold),
            )
        )
    return ContextCurve(instance.id, points)


def context_volume_band(phantoms: list[Phantom], spread: float = 0.15) -> tuple[float, float]:
    """Lesion-size selection band: mean instance volume +/- 15 percent."""
    vols = [i.volume_mm3 for p in phantoms for i in p.instances]
    if not vols:
        raise ValueError("no instances to derive a volume band from")
    mean = float(np.mean(vols))
    return mean * (1 - spread), mean * (1 + spread)


@dataclass
class ContextAggregate:
    k: int
    radius_mm: float
    mean_score: float
    std_score: float
    detected_count: int
    total: int


def aggregate_context_curves(curves: list[ContextCurve]) -> list[ContextAggregate]:
    if not curves:
        return []
    n_points = len(curves[0].points)
    out = []
    for i in range(n_points):
        scores = [c.points[i].mean_score for c in curves]
        out.append(
            ContextAggregate(
                curves[0].points[i].k,
                curves[0].points[i].radius_mm,
                float(np.mean(scores)),
                float(np.std(scores)),
                sum(c.points[i].detected for c in curves),
                len(curves),
            )
        )
    return out


# -- CSV emitters -----------------------------------------------------------


def write_extrema_csv(table: ExtremaTable, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# lesionxai extrema v1\n")
        w = csv.writer(fh)
        w.writerow(["volume_id", "instance_id", "category", "modality", "max", "min"])
        for r in table.rows:
            w.writerow([r.volume_id, r.instance_id, r.category, r.modality, repr(r.max), repr(r.min)])


def write_extrema_summary_csv(table: ExtremaTable, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# lesionxai extrema summary v1\n")
        w = csv.writer(fh)
        w.writerow(
            ["section", "category", "modality", "stat", "n", "median", "ci_lo", "ci_hi", "pair", "U", "p", "method"]
        )
        for s in table.summaries:
            w.writerow(["summary", s.category, s.modality, "max", s.n, repr(s.median_max), repr(s.ci_max[0]), repr(s.ci_max[1]), "", "", "", ""])
            w.writerow(["summary", s.category, s.modality, "min", s.n, repr(s.median_min), repr(s.ci_min[0]), repr(s.ci_min[1]), "", "", "", ""])
        for t in table.tests:
            w.writerow(
                ["test", "", t.modality, t.stat, "", "", "", "", f"{t.cat_a}-{t.cat_b}", repr(t.result.u), repr(t.result.p), t.result.method]
            )


def write_context_csv(aggregates: list[ContextAggregate], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# lesionxai context curve v1\n")
        w = csv.writer(fh)
        w.writerow(["k", "radius_mm", "mean_score", "std_score", "detected_count", "total"])
        for a in aggregates:
            w.writerow([a.k, repr(a.radius_mm), repr(a.mean_score), repr(a.std_score), a.detected_count, a.total])


def read_context_csv(path) -> list[ContextAggregate]:
    out = []
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    for row in rows[1:]:
        out.append(
            ContextAggregate(int(row[0]), float(row[1]), float(row[2]), float(row[3]), int(row[4]), int(row[5]))
        )
    return out
