"""Synthetic two-modality phantoms with known lesion ground truth.

Modality 0 emulates FLAIR contrast (lesions brighter than tissue), modality 1
emulates MPRAGE (lesions darker than tissue). Lesions are unions of jittered
spheres, pairwise separated, fully inside an ellipsoidal brain mask, and at
least 5 mm^3 each. Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .instances import LesionInstance, connected_components
from .volio import MetaVolume, read_keyvalue, read_metavolume, write_keyvalue, write_metavolume


class PlacementError(RuntimeError):
    """Lesion or relocation placement failed after bounded retries."""


class RelocationError(ValueError):
    """Invalid relocation target."""


@dataclass
class PhantomConfig:
    extent: int = 64  # cubic volume, 1 mm isotropic
    brain_axes: tuple[float, float, float] | None = None  # ellipsoid semi-axes, voxels
    # per modality: (background, tissue, lesion) mean intensities
    intensities: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.05, 1.0, 1.8),
        (0.05, 1.0, 0.45),
    )
    lesion_count: tuple[int, int] = (2, 4)  # inclusive range
    lesion_radius_mm: tuple[float, float] = (1.5, 3.5)
    noise_sigma: tuple[float, float] = (0.04, 0.04)
    min_lesion_mm3: float = 5.0

    def __post_init__(self):
        for (bg, tis, les) in [self.intensities[0]]:
            if not les > tis:
                raise ValueError("modality 0 must be lesion-hyperintense")
        for (bg, tis, les) in [self.intensities[1]]:
            if not les < tis:
                raise ValueError("modality 1 must be lesion-hypointense")

    def axes(self) -> tuple[float, float, float]:
        if self.brain_axes is not None:
            return self.brain_axes
        e = self.extent
        return (0.42 * e, 0.40 * e, 0.38 * e)


@dataclass
class Phantom:
    volume: MetaVolume  # (2, Z, Y, X) raw intensities
    gt_mask: np.ndarray  # (Z, Y, X) bool
    brain_mask: np.ndarray  # (Z, Y, X) bool
    instances: list[LesionInstance] = field(default_factory=list)

    @property
    def data(self) -> np.ndarray:
        return self.volume.data


def _ellipsoid_norm2(shape, axes) -> np.ndarray:
    center = (np.asarray(shape) - 1) / 2.0
    zz, yy, xx = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    return (
        ((zz - center[0]) / axes[0]) ** 2
        + ((yy - center[1]) / axes[1]) ** 2
        + ((xx - center[2]) / axes[2]) ** 2
    )


def _blob_mask(shape, center, radius, rng) -> np.ndarray:
    """Union of three jittered spheres, contained in the ball of `radius`."""
    mask = np.zeros(shape, dtype=bool)
    zz, yy, xx = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    for _ in range(3):
        sub_r = radius * rng.uniform(0.7, 0.95)
        slack = radius - sub_r
        jitter = rng.normal(size=3)
        norm = np.linalg.norm(jitter)
        jitter = jitter / norm * slack * rng.uniform(0, 1) if norm > 0 else jitter * 0
        c = np.asarray(center, float) + jitter
        mask |= (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= sub_r ** 2
    return mask


def generate_phantom(config: PhantomConfig, seed: int) -> Phantom:
    rng = np.random.default_rng(seed)
    shape = (config.extent,) * 3
    norm2 = _ellipsoid_norm2(shape, config.axes())
    brain = norm2 <= 1.0

    n_lesions = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1))
    gt = np.zeros(shape, dtype=bool)
    keepout = np.zeros(shape, dtype=bool)  # lesions dilated by the separation gap
    interior = np.argwhere(norm2 <= 0.55 ** 2)
    placed = 0
    tries = 0
    while placed < n_lesions:
        tries += 1
        if tries > 200 * max(n_lesions, 1):
            raise PlacementError(
                f"placed {placed} of {n_lesions} lesions after {tries} tries"
            )
        center = interior[int(rng.integers(0, len(interior)))]
        radius = rng.uniform(*config.lesion_radius_mm)
        blob = _blob_mask(shape, center, radius, rng)
        if blob.sum() < config.min_lesion_mm3:
            continue
        if (blob & keepout).any():
            continue
        if norm2[blob].max() > 0.85 ** 2:  # stay well inside the brain
            continue
        gt |= blob
        keepout |= ndimage.binary_dilation(blob, iterations=3)
        placed += 1

    data = np.empty((2,) + shape, dtype=np.float32)
    for m in range(2):
        bg, tissue, lesion = config.intensities[m]
        vol = np.full(shape, bg, dtype=np.float32)
        vol[brain] = tissue
        vol[gt] = lesion
        vol += rng.normal(0.0, config.noise_sigma[m], size=shape).astype(np.float32)
        data[m] = vol

    instances = connected_components(gt, connectivity=18)
    return Phantom(
        volume=MetaVolume(data, meta={"kind": "phantom", "seed": str(seed)}),
        gt_mask=gt,
        brain_mask=brain,
        instances=instances,
    )


def zscore_normalize(volume: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Zero mean / unit variance inside the mask; zero outside the mask.

    Accepts (Z, Y, X) or channel-first (C, Z, Y, X); channels are normalized
    independently.
    """
    volume = np.asarray(volume)
    if volume.ndim == 4:
        return np.stack([zscore_normalize(c, mask) for c in volume])
    if mask is None:
        mask = np.ones(volume.shape, dtype=bool)
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty normalization mask")
    vals = volume[mask]
    std = vals.std()
    if std == 0:
        raise ValueError("zero variance inside normalization mask")
    out = np.zeros_like(volume)
    out[mask] = (vals - vals.mean()) / std
    return out


def preprocess(phantom: Phantom) -> np.ndarray:
    """Standard pipeline preprocessing: per-modality z-score within the brain
    mask, everything outside the brain set to the background value 0."""
    return zscore_normalize(phantom.data, phantom.brain_mask)


@dataclass
class RelocationEdit:
    volume: MetaVolume  # edited 2-channel raw volume
    source_voxels: np.ndarray  # (N, 3), lesion plus margin shell
    target_voxels: np.ndarray  # (N, 3)
    offset: tuple[int, int, int]


def relocate_lesion(
    phantom: Phantom,
    instance: LesionInstance,
    target_center: tuple[int, int, int],
    margin_mm: int = 0,
    destination: str = "white-matter",
    rng: np.random.Generator | None = None,
) -> RelocationEdit:
    """Copy a lesion's intensities (plus an optional margin shell) elsewhere.

    The source region is refilled with the mean and noise level of a 2-voxel
    shell around it; no voxel outside source or target is touched.
    """
    if margin_mm not in (0, 3):
        raise RelocationError(f"margin_mm must be 0 or 3, got {margin_mm}")
    if destination not in ("white-matter", "background"):
        raise RelocationError(f"unknown destination {destination!r}")
    rng = rng or np.random.default_rng(0)
    shape = phantom.gt_mask.shape
    src_mask = instance.mask(shape)
    if margin_mm:
        src_mask = ndimage.binary_dilation(src_mask, iterations=margin_mm)
    src_vox = np.argwhere(src_mask)
    centroid = np.round(np.asarray(instance.centroid)).astype(int)
    offset = np.asarray(target_center, int) - centroid
    tgt_vox = src_vox + offset
    if np.any(tgt_vox < 0) or np.any(tgt_vox >= np.asarray(shape)):
        raise RelocationError("target region does not fit inside the volume")
    tz, ty, tx = tgt_vox[:, 0], tgt_vox[:, 1], tgt_vox[:, 2]
    if phantom.gt_mask[tz, ty, tx].any():
        raise RelocationError("target overlaps an existing GT instance")
    lesion_tgt = instance.voxels + offset
    in_brain = phantom.brain_mask[lesion_tgt[:, 0], lesion_tgt[:, 1], lesion_tgt[:, 2]]
    if destination == "white-matter" and not in_brain.all():
        raise RelocationError("white-matter target must lie inside the brain mask")
    if destination == "background" and in_brain.any():
        raise RelocationError("background target must lie outside the brain mask")

    data = phantom.data.copy()
    shell = ndimage.binary_dilation(src_mask, iterations=2) & ~src_mask
    sz, sy, sx = src_vox[:, 0], src_vox[:, 1], src_vox[:, 2]
    for m in range(2):
        values = data[m, sz, sy, sx].copy()
        shell_vals = data[m][shell]
        fill = rng.normal(
            shell_vals.mean(), shell_vals.std(), size=len(src_vox)
        ).astype(data.dtype)
        data[m, sz, sy, sx] = fill
        data[m, tz, ty, tx] = values
    vol = MetaVolume(data, spacing=phantom.volume.spacing, meta=dict(phantom.volume.meta))
    vol.meta["relocated"] = f"{destination} margin={margin_mm}"
    return RelocationEdit(vol, src_vox, tgt_vox, tuple(int(o) for o in offset))


# -- persistence ------------------------------------------------------------


def save_phantom(phantom: Phantom, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_metavolume(phantom.volume, directory / "volume.mv")
    write_metavolume(
        MetaVolume(phantom.gt_mask[None].astype(np.float32)), directory / "gt.mv"
    )
    write_metavolume(
        MetaVolume(phantom.brain_mask[None].astype(np.float32)),
        directory / "brain.mv",
    )


def load_phantom(directory) -> Phantom:
    directory = Path(directory)
    volume = read_metavolume(directory / "volume.mv")
    gt = read_metavolume(directory / "gt.mv").data[0] > 0.5
    brain = read_metavolume(directory / "brain.mv").data[0] > 0.5
    return Phantom(volume, gt, brain, connected_components(gt, connectivity=18))


def write_phantom_config(config: PhantomConfig, path) -> None:
    write_keyvalue(
        {
            "extent": config.extent,
            "lesion_count": "{} {}".format(*config.lesion_count),
            "lesion_radius_mm": "{} {}".format(*config.lesion_radius_mm),
            "noise_sigma": "{} {}".format(*config.noise_sigma),
            "min_lesion_mm3": config.min_lesion_mm3,
        },
        path,
    )


def read_phantom_config(path) -> PhantomConfig:
    kv = read_keyvalue(path)
    cfg = PhantomConfig()
    if "extent" in kv:
        cfg.extent = int(kv["extent"])
    if "lesion_count" in kv:
        cfg.lesion_count = tuple(int(v) for v in kv["lesion_count"].split())
    if "lesion_radius_mm" in kv:
        cfg.lesion_radius_mm = tuple(float(v) for v in kv["lesion_radius_mm"].split())
    if "noise_sigma" in kv:
        cfg.noise_sigma = tuple(float(v) for v in kv["noise_sigma"].split())
    if "min_lesion_mm3" in kv:
        cfg.min_lesion_mm3 = float(kv["min_lesion_mm3"])
    return cfg
