"""Instance-level and class-level explanation maps.

Gradient methods return one map per input modality: the average form divides
the summed per-voxel gradients by the instance size, the signed-maximum form
keeps, per input voxel, the gradient of largest magnitude (with its sign)
over all instance voxels, making values comparable across instance sizes.
Grad-CAM++ maps are single-channel and nonnegative.

Gradient maps vanish exactly outside the receptive-field dilation of the
instance, so the computation runs on a cropped subvolume and is embedded
back; results are bit-identical to the uncropped computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .instances import LesionInstance

DEFAULT_N = 50
DEFAULT_SIGMA = 0.05
DEFAULT_OMEGA_CAP = 512


@dataclass
class NoiseSpec:
    n: int = DEFAULT_N
    sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"need at least one noise sample, got {self.n}")
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be nonnegative, got {self.sigma}")


@dataclass
class SaliencyMap:
    data: np.ndarray  # (C, Z, Y, X); C = modalities (gradient) or 1 (Grad-CAM++)
    method: str  # vanilla | smoothgrad | gradcampp
    aggregation: str  # average | signed-max | class
    instance_id: str = "class"
    params: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


def _omega_array(omega) -> np.ndarray:
    if isinstance(omega, LesionInstance):
        vox = omega.voxels
    else:
        vox = np.asarray(omega)
    vox = np.asarray(vox, dtype=np.int64).reshape(-1, 3)
    if len(vox) == 0:
        raise ValueError("empty instance domain")
    return vox[np.lexsort((vox[:, 2], vox[:, 1], vox[:, 0]))]


def _check_bounds(omega: np.ndarray, spatial) -> None:
    if np.any(omega < 0) or np.any(omega >= np.asarray(spatial)):
        raise ValueError("instance domain extends outside the image")


def _crop_slices(graph: ad.Graph, omega: np.ndarray, spatial) -> tuple[slice, ...]:
    """Aligned subvolume containing the receptive-field dilation of omega."""
    radius = max(ad.receptive_field(graph))
    align = ad.alignment(graph)
    lo = np.maximum(omega.min(axis=0) - radius - 1, 0)
    hi = np.minimum(omega.max(axis=0) + radius + 2, spatial)
    slices = []
    for a in range(3):
        size = int(hi[a] - lo[a])
        size = min(-(-size // align) * align, spatial[a] - spatial[a] % align)
        start = int(lo[a])
        if start + size > spatial[a]:
            start = spatial[a] - size
        slices.append(slice(start, start + size))
    return tuple(slices)


def instance_gradients(
    graph: ad.Graph,
    x: np.ndarray,
    omega,
    channel: int = -1,
    crop: bool = True,
) -> np.ndarray:
    """Per-modality gradient of the instance-averaged logit, one sample.

    Uses a single backward pass with seed indicator(omega)/|omega| on the
    chosen logit channel (backward is linear in the seed).
    """
    omega = _omega_array(omega)
    x = np.asarray(x)
    _check_bounds(omega, x.shape[1:])
    out = np.zeros_like(x)
    if crop:
        sl = _crop_slices(graph, omega, x.shape[1:])
        xs = x[(slice(None),) + sl]
        om = omega - np.array([s.start for s in sl])
    else:
        xs, om = x, omega
    tape = ad.forward(graph, {"in": xs})
    seed = np.zeros_like(tape.output)
    seed[channel, om[:, 0], om[:, 1], om[:, 2]] = 1.0 / len(om)
    bres = ad.backward(tape, seed)
    if crop:
        out[(slice(None),) + sl] = bres.node_grads["in"]
    else:
        out = bres.node_grads["in"]
    return out


def smoothgrad_instance_avg(
    graph: ad.Graph,
    x: np.ndarray,
    omega,
    noise: NoiseSpec,
    channel: int = -1,
) -> SaliencyMap:
    omega_arr = _omega_array(omega)
    rng = np.random.default_rng(noise.seed)
    acc = np.zeros_like(np.asarray(x))
    for _ in range(noise.n):
        xn = x if noise.sigma == 0 else x + rng.normal(0, noise.sigma, x.shape).astype(x.dtype)
        acc += instance_gradients(graph, xn, omega_arr, channel=channel)
    return SaliencyMap(
        acc / noise.n,
        method="smoothgrad",
        aggregation="average",
        instance_id=_label(omega),
        params={"N": noise.n, "sigma": noise.sigma, "seed": noise.seed},
    )


def smoothgrad_instance_max(
    graph: ad.Graph,
    x: np.ndarray,
    omega,
    noise: NoiseSpec,
    channel: int = -1,
    omega_cap: int = DEFAULT_OMEGA_CAP,
    chunk: int = 32,
) -> SaliencyMap:
    """Signed-maximum aggregation: one backward per instance voxel per noise
    sample, batched internally; a seeded uniform subsample caps the cost for
    large instances."""
    omega_arr = _omega_array(omega)
    x = np.asarray(x)
    _check_bounds(omega_arr, x.shape[1:])
    rng = np.random.default_rng(noise.seed)
    capped = False
    if len(omega_arr) > omega_cap:
        sub = np.sort(rng.choice(len(omega_arr), size=omega_cap, replace=False))
        omega_arr = omega_arr[sub]
        capped = True

    sl = _crop_slices(graph, omega_arr, x.shape[1:])
    origin = np.array([s.start for s in sl])
    om = omega_arr - origin
    acc = np.zeros_like(x)
    for _ in range(noise.n):
        xn = x if noise.sigma == 0 else x + rng.normal(0, noise.sigma, x.shape).astype(x.dtype)
        xs = xn[(slice(None),) + sl]
        tape = ad.forward(graph, {"in": xs})
        best_abs = np.full(xs.shape, -1.0, dtype=xs.dtype)
        best_val = np.zeros_like(xs)
        for start in range(0, len(om), chunk):
            part = om[start : start + chunk]
            seeds = np.zeros((len(part),) + tape.output.shape, dtype=xs.dtype)
            seeds[np.arange(len(part)), channel, part[:, 0], part[:, 1], part[:, 2]] = 1.0
            grads = ad.backward(tape, seeds).node_grads["in"]
            for g in grads:  # chunk order preserves first-wins ties
                a = np.abs(g)
                take = a > best_abs
                best_abs[take] = a[take]
                best_val[take] = g[take]
        acc[(slice(None),) + sl] += best_val
    params = {"N": noise.n, "sigma": noise.sigma, "seed": noise.seed, "cap": omega_cap}
    return SaliencyMap(
        acc / noise.n,
        method="smoothgrad",
        aggregation="signed-max",
        instance_id=_label(omega),
        params=params,
        flags=["omega-subsampled"] if capped else [],
    )


def _label(omega) -> str:
    return str(omega.id) if isinstance(omega, LesionInstance) else "adhoc"


# -- Grad-CAM++ -------------------------------------------------------------


def _gradcam_alpha(g: np.ndarray, act_sum: float) -> np.ndarray:
    """Closed-form higher-order coefficients: alpha = g^2 / (2 g^2 + g^3 * sum A),
    zero where the denominator vanishes."""
    num = g * g
    den = 2.0 * num + (num * g) * act_sum
    alpha = np.zeros_like(g)
    nz = den != 0
    alpha[nz] = num[nz] / den[nz]
    return alpha


def _upsample_to(heat: np.ndarray, spatial) -> np.ndarray:
    if heat.shape == tuple(spatial):
        return heat
    factors = [s / h for s, h in zip(spatial, heat.shape)]
    return ndimage.zoom(heat, factors, order=1)


def gradcampp_class(
    graph: ad.Graph,
    x: np.ndarray,
    layer: str | None = None,
    t: float = 0.3,
    channel: int = -1,
    gate: str = "prob",
) -> SaliencyMap:
    """Class-level heatmap: one scalar weight per activation map.

    The backward score is the sum of suprathreshold logits; by default the
    softmax probability gates which voxels count (the threshold is defined
    on the probability map) while the raw logits are summed. ``gate="logit"``
    thresholds the logits directly.
    """
    x = np.asarray(x)
    layer = layer or _default_layer(graph)
    tape = ad.forward(graph, {"in": x})
    logits = tape.output
    if gate == "prob":
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        score = (e / e.sum(axis=0, keepdims=True))[channel]
    elif gate == "logit":
        score = logits[channel]
    else:
        raise ValueError(f"gate must be 'prob' or 'logit', got {gate!r}")
    mask = score > t
    flags = []
    if not mask.any():
        flags.append("no-suprathreshold-voxels")
        heat = np.zeros(x.shape[1:], dtype=x.dtype)
        return SaliencyMap(heat[None], "gradcampp", "class", params={"t": t, "layer": layer}, flags=flags)
    seed = np.zeros_like(logits)
    seed[channel][mask] = 1.0
    bres = ad.backward(tape, seed)
    acts = tape.activations[layer]
    grads = bres.node_grads[layer]
    heat = np.zeros(acts.shape[1:], dtype=x.dtype)
    for k in range(acts.shape[0]):
        g = grads[k]
        alpha = _gradcam_alpha(g, float(acts[k].sum()))
        omega_k = float((alpha * np.maximum(g, 0)).sum())
        heat += omega_k * acts[k]
    heat = np.maximum(heat, 0)
    heat = _upsample_to(heat, x.shape[1:])
    return SaliencyMap(
        heat[None], "gradcampp", "class", params={"t": t, "layer": layer}, flags=flags
    )


def gradcampp_instance(
    graph: ad.Graph,
    x: np.ndarray,
    omega,
    layer: str | None = None,
    channel: int = -1,
) -> SaliencyMap:
    """Instance-level heatmap: per-voxel weights, no spatial pooling."""
    omega_arr = _omega_array(omega)
    x = np.asarray(x)
    _check_bounds(omega_arr, x.shape[1:])
    layer = layer or _default_layer(graph)
    tape = ad.forward(graph, {"in": x})
    seed = np.zeros_like(tape.output)
    seed[channel, omega_arr[:, 0], omega_arr[:, 1], omega_arr[:, 2]] = 1.0
    bres = ad.backward(tape, seed)
    acts = tape.activations[layer]
    grads = bres.node_grads[layer]
    heat = np.zeros(acts.shape[1:], dtype=x.dtype)
    for k in range(acts.shape[0]):
        g = grads[k]
        alpha = _gradcam_alpha(g, float(acts[k].sum()))
        heat += alpha * np.maximum(g, 0) * acts[k]
    heat = np.maximum(heat, 0)
    heat = _upsample_to(heat, x.shape[1:])
    return SaliencyMap(
        heat[None],
        "gradcampp",
        "instance",
        instance_id=_label(omega),
        params={"layer": layer},
    )


def _default_layer(graph: ad.Graph) -> str:
    """Last decoder activation before the logit head."""
    return graph.by_id[graph.output].inputs[0]


# -- summary statistics -----------------------------------------------------


@dataclass
class ExtremaStats:
    max: float
    min: float
    median_pos: float | None
    median_neg: float | None
    empty_band: bool  # no values outside the exclusion band


def saliency_extrema(
    values: np.ndarray, exclusion_band: tuple[float, float] = (-0.1, 0.1)
) -> ExtremaStats:
    """Signed extrema plus medians of values outside the exclusion band."""
    values = np.asarray(values).ravel()
    lo, hi = exclusion_band
    pos = values[values > hi]
    neg = values[values < lo]
    return ExtremaStats(
        max=float(values.max()),
        min=float(values.min()),
        median_pos=float(np.median(pos)) if len(pos) else None,
        median_neg=float(np.median(neg)) if len(neg) else None,
        empty_band=len(pos) + len(neg) == 0,
    )
