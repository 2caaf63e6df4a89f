"""Toy encoder-decoder segmentation network: build, losses, training, inference.

The network is a small 3D U-Net over two input modalities with two output
classes (background, lesion). The graph's output node holds logits; softmax
is applied outside the graph, and the losses chain their analytic gradients
through it to produce the backward seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .volio import MetaVolume, read_keyvalue, read_metavolume, write_keyvalue, write_metavolume

EPS = 1e-5  # soft-Dice smoothing


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during training."""


@dataclass
class UNetConfig:
    depth: int = 2
    base_channels: int = 8
    in_modalities: int = 2
    out_classes: int = 2
    patch_extent: int = 32

    def __post_init__(self):
        if self.patch_extent % (2 ** self.depth) != 0:
            raise ValueError(
                f"patch_extent {self.patch_extent} not divisible by 2^{self.depth}"
            )
        if self.patch_extent // (2 ** self.depth) < 2:
            raise ValueError(
                f"patch_extent {self.patch_extent} leaves a degenerate bottleneck "
                f"at depth {self.depth}"
            )


@dataclass
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 0.05
    momentum: float = 0.9
    loss_mix: float = 0.5  # weight of dice loss; (1 - mix) goes to blob loss
    seed: int = 0
    patches_per_volume: int = 1
    grad_clip: float = 0.1  # global-norm clip; dice loss collapses without it
    augment_sigma: float = 0.0  # additive Gaussian input noise per patch

    def __post_init__(self):
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ValueError(f"loss_mix must be in [0, 1], got {self.loss_mix}")


def _he_init(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> ad.Graph:
    """U-Net with `depth` poolings, skip concats, and a 1x1x1 logit head."""
    rng = np.random.default_rng(seed)
    g = ad.GraphBuilder()
    g.input("in", channels=config.in_modalities)

    def block(tag: str, src: str, cin: int, cout: int) -> str:
        g.conv3d(f"{tag}a", src, _he_init(rng, (cout, cin, 3, 3, 3), dtype))
        g.relu(f"{tag}a_r", f"{tag}a")
        g.conv3d(f"{tag}b", f"{tag}a_r", _he_init(rng, (cout, cout, 3, 3, 3), dtype))
        g.relu(f"{tag}b_r", f"{tag}b")
        return f"{tag}b_r"

    skips: list[tuple[str, int]] = []
    src, cin = "in", config.in_modalities
    ch = config.base_channels
    for level in range(config.depth):
        top = block(f"enc{level}", src, cin, ch)
        skips.append((top, ch))
        g.maxpool(f"pool{level}", top)
        src, cin = f"pool{level}", ch
        ch *= 2
    src = block("bottleneck", src, cin, ch)
    cur = ch
    for level in reversed(range(config.depth)):
        skip_id, skip_ch = skips[level]
        g.conv_transpose3d(
            f"up{level}", src, _he_init(rng, (cur, skip_ch, 2, 2, 2), dtype)
        )
        g.concat(f"cat{level}", [f"up{level}", skip_id])
        src = block(f"dec{level}", f"cat{level}", 2 * skip_ch, skip_ch)
        cur = skip_ch
    head_bias = np.zeros(config.out_classes, dtype=dtype)
    if config.out_classes == 2:
        head_bias[:] = (1.5, -1.5)  # start near-background; eases dice cold start
    g.conv3d("out", src, _he_init(rng, (config.out_classes, cur, 1, 1, 1), dtype), head_bias)
    return g.build("out")


DEFAULT_SALIENCY_LAYER = None  # resolved to the last decoder relu


def last_decoder_activation(graph: ad.Graph) -> str:
    """Default Grad-CAM++ layer: last relu feeding the logit head."""
    head = graph.by_id[graph.output]
    return head.inputs[0]


def softmax_prob(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def dice_loss(prob: np.ndarray, gt: np.ndarray) -> float:
    loss, _ = dice_loss_with_grad(prob, gt)
    return loss


def dice_loss_with_grad(prob: np.ndarray, gt: np.ndarray):
    """Soft Dice loss 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps) and d/dp."""
    prob = np.asarray(prob)
    gt = np.asarray(gt)
    if prob.shape != gt.shape:
        raise ValueError(f"shape mismatch: prob {prob.shape} vs gt {gt.shape}")
    inter = float((prob * gt).sum())
    denom = float(prob.sum() + gt.sum()) + EPS
    num = 2.0 * inter + EPS
    loss = 1.0 - num / denom
    grad = -(2.0 * gt * denom - num) / (denom * denom)
    return float(loss), grad


def blob_loss(prob: np.ndarray, gt_instances) -> float:
    loss, _, _ = blob_loss_with_grad(prob, gt_instances)
    return loss


def blob_loss_with_grad(prob: np.ndarray, gt_instances):
    """Mean per-instance soft Dice, each term masked to the instance plus
    background outside every other instance. Returns (loss, grad, empty_flag)."""
    if not gt_instances:
        return 0.0, np.zeros_like(prob), True
    masks = []
    for inst in gt_instances:
        m = np.zeros(prob.shape, dtype=bool)
        vox = np.asarray(inst.voxels)
        m[vox[:, 0], vox[:, 1], vox[:, 2]] = True
        masks.append(m)
    union = np.logical_or.reduce(masks)
    total = 0.0
    grad = np.zeros_like(prob)
    for m in masks:
        domain = m | ~union  # this instance plus background outside the others
        li, gi = dice_loss_with_grad(prob * domain, m.astype(prob.dtype))
        total += li
        grad += gi * domain
    n = len(masks)
    return total / n, grad / n, False


def _loss_and_seed(logits: np.ndarray, gt: np.ndarray, gt_instances, mix: float):
    """Combined loss on the foreground softmax channel and its logit seed."""
    prob = softmax_prob(logits)
    p1 = prob[1]
    ld, gd = dice_loss_with_grad(p1, gt)
    lb, gb, _ = blob_loss_with_grad(p1, gt_instances)
    loss = mix * ld + (1.0 - mix) * lb
    gp = mix * gd + (1.0 - mix) * gb  # dL/dp1
    # chain through 2-class softmax
    seed = np.empty_like(logits)
    seed[0] = -prob[0] * p1 * gp
    seed[1] = p1 * (1.0 - p1) * gp
    return loss, seed


@dataclass
class TrainResult:
    graph: ad.Graph
    loss_history: list[float] = field(default_factory=list)

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            fh.write("# lesionxai loss history v1\n")
            w.writerow(["epoch", "loss"])
            for i, loss in enumerate(self.loss_history, start=1):
                w.writerow([i, repr(loss)])


def train(
    graph: ad.Graph,
    dataset: list[tuple[np.ndarray, np.ndarray, list]],
    config: TrainConfig,
    patch_extent: int | None = None,
) -> TrainResult:
    """SGD with momentum on dice + blob loss over random patches.

    dataset entries are (x (2, Z, Y, X) normalized, gt binary (Z, Y, X),
    gt_instances). Deterministic for a fixed config seed.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    velocity: dict[str, dict[str, np.ndarray]] = {
        n.nid: {k: np.zeros_like(v) for k, v in n.param_arrays().items()}
        for n in graph.parameter_nodes()
    }
    history: list[float] = []
    for _epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for vi in order:
            x, gt, instances = dataset[vi]
            for _ in range(config.patches_per_volume):
                xp, gtp, insts = _sample_patch(x, gt, instances, patch_extent, rng)
                if config.augment_sigma > 0:
                    xp = xp + rng.normal(0.0, config.augment_sigma, xp.shape).astype(
                        xp.dtype
                    )
                try:
                    tape = ad.forward(graph, {"in": xp})
                    loss, seed = _loss_and_seed(tape.output, gtp, insts, config.loss_mix)
                    if not np.isfinite(loss):
                        raise TrainingDiverged(
                            f"loss became {loss} at epoch {_epoch + 1}"
                        )
                    bres = ad.backward(tape, seed, with_params=True)
                except ad.NonFiniteError as exc:
                    raise TrainingDiverged(str(exc)) from exc
                sq = 0.0
                for grads in bres.param_grads.values():
                    for arr in grads.values():
                        sq += float((arr * arr).sum())
                scale = 1.0
                if config.grad_clip > 0 and sq > config.grad_clip ** 2:
                    scale = config.grad_clip / np.sqrt(sq)
                for node in graph.parameter_nodes():
                    grads = bres.param_grads.get(node.nid)
                    if grads is None:
                        continue
                    for key, arr in node.param_arrays().items():
                        v = velocity[node.nid][key]
                        v *= config.momentum
                        v -= config.learning_rate * scale * grads[key]
                        arr += v
                epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
    return TrainResult(graph, history)


def _sample_patch(x, gt, instances, patch_extent, rng):
    _, Z, Y, X = x.shape
    if patch_extent is None or (Z, Y, X) == (patch_extent,) * 3:
        return x, gt, instances
    p = patch_extent
    if Z < p or Y < p or X < p:
        raise ValueError(f"volume {x.shape[1:]} smaller than patch {p}")
    oz = int(rng.integers(0, Z - p + 1))
    oy = int(rng.integers(0, Y - p + 1))
    ox = int(rng.integers(0, X - p + 1))
    xp = x[:, oz : oz + p, oy : oy + p, ox : ox + p]
    gtp = gt[oz : oz + p, oy : oy + p, ox : ox + p]
    kept = []
    for inst in instances:
        vox = np.asarray(inst.voxels) - np.array([oz, oy, ox])
        inside = np.all((vox >= 0) & (vox < p), axis=1)
        if inside.all() and len(vox):
            kept.append(_ShiftedInstance(vox))
    return xp, gtp, kept


class _ShiftedInstance:
    def __init__(self, voxels):
        self.voxels = voxels


def infer_volume(
    graph: ad.Graph, volume: MetaVolume | np.ndarray, patch_extent: int = 32
) -> MetaVolume:
    """Sliding-window whole-volume inference with half-patch overlap.

    Overlapping predictions are averaged; output is the foreground softmax
    probability, one channel.
    """
    if isinstance(volume, MetaVolume):
        x = volume.data
        spacing = volume.spacing
    else:
        x = np.asarray(volume)
        spacing = (1.0, 1.0, 1.0)
    _, Z, Y, X = x.shape
    p = patch_extent
    if Z < p or Y < p or X < p:
        raise ValueError(f"volume {x.shape[1:]} smaller than patch extent {p}")
    stride = p // 2

    def starts(n):
        s = list(range(0, n - p + 1, stride))
        if s[-1] != n - p:
            s.append(n - p)
        return s

    acc = np.zeros((Z, Y, X), dtype=np.float64)
    cnt = np.zeros((Z, Y, X), dtype=np.float64)
    for oz in starts(Z):
        for oy in starts(Y):
            for ox in starts(X):
                patch = x[:, oz : oz + p, oy : oy + p, ox : ox + p]
                tape = ad.forward(graph, {"in": patch})
                prob = softmax_prob(tape.output)[1]
                acc[oz : oz + p, oy : oy + p, ox : ox + p] += prob
                cnt[oz : oz + p, oy : oy + p, ox : ox + p] += 1.0
    out = (acc / cnt).astype(x.dtype)
    return MetaVolume(out[None], spacing=spacing, meta={"kind": "probability"})


# -- checkpointing ----------------------------------------------------------


def save_checkpoint(graph: ad.Graph, config: UNetConfig, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, str] = {
        "depth": config.depth,
        "base_channels": config.base_channels,
        "in_modalities": config.in_modalities,
        "out_classes": config.out_classes,
        "patch_extent": config.patch_extent,
        "output": graph.output,
    }
    entries = []
    for node in graph.parameter_nodes():
        for key, arr in node.param_arrays().items():
            name = f"{node.nid}.{key}"
            entries.append(name)
            flat = np.asarray(arr, dtype=np.float64)
            shaped = flat.reshape(1, 1, 1, -1)
            write_metavolume(
                MetaVolume(shaped, meta={"true_shape": " ".join(map(str, arr.shape))}),
                directory / f"{name}.mv",
            )
    manifest["parameters"] = ",".join(entries)
    write_keyvalue(manifest, directory / "manifest.txt")


def load_checkpoint(directory) -> tuple[ad.Graph, UNetConfig]:
    directory = Path(directory)
    kv = read_keyvalue(directory / "manifest.txt")
    config = UNetConfig(
        depth=int(kv["depth"]),
        base_channels=int(kv["base_channels"]),
        in_modalities=int(kv["in_modalities"]),
        out_classes=int(kv["out_classes"]),
        patch_extent=int(kv["patch_extent"]),
    )
    graph = build_unet(config)
    for name in kv["parameters"].split(","):
        nid, key = name.rsplit(".", 1)
        vol = read_metavolume(directory / f"{name}.mv")
        shape = tuple(int(s) for s in vol.meta["true_shape"].split())
        arr = vol.data.reshape(shape).astype(np.float32)
        node = graph.by_id[nid]
        if key == "weight":
            node.weight = arr
        else:
            node.bias = arr
    return graph, config
