"""Static computation graph over dense 3D tensors with reverse-mode gradients.

Tensors are channel-first ``(C, Z, Y, X)``. The layer set is fixed to what
the toy segmentation network needs: conv3d (stride 1, odd kernel, same zero
padding), conv_transpose3d (kernel 2, stride 2), relu, maxpool (2x2x2),
channel concat, add, softmax, plus input and parameter nodes.

Backward computes, for every node, the gradient of the seed-weighted sum of
output logits. A seed may carry a leading batch axis, in which case all
gradients are computed for the whole batch of seeds against the same forward
tape; each batch entry is an independent vector-Jacobian product.

Subgradient conventions: relu'(0) = 0 and maxpool ties take the first window
index (C-order). Tests sample away from these kinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .kernels import conv3d_forward, conv3d_grad_weight

KINDS = (
    "input",
    "parameter",
    "conv3d",
    "conv_transpose3d",
    "relu",
    "maxpool",
    "concat",
    "add",
    "softmax",
)


class GraphError(ValueError):
    """Invalid graph structure or mismatched shapes."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


@dataclass
class Node:
    nid: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    channels: int | None = None  # input nodes only

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        if self.weight is not None:
            out["weight"] = self.weight
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class Graph:
    """Topologically ordered nodes with a single designated logit output."""

    def __init__(self, nodes: list[Node], output: str):
        self.nodes = list(nodes)
        self.output = output
        self.by_id = {n.nid: n for n in self.nodes}
        self._validate()

    def _validate(self) -> None:
        if len(self.by_id) != len(self.nodes):
            raise GraphError("duplicate node ids")
        if self.output not in self.by_id:
            raise GraphError(f"output node {self.output!r} not in graph")
        seen: set[str] = set()
        for n in self.nodes:
            if n.kind not in KINDS:
                raise GraphError(f"unknown node kind {n.kind!r}")
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(
                        f"node {n.nid!r} consumes {i!r} before it is defined"
                    )
            if n.kind == "input":
                if n.inputs or n.channels is None:
                    raise GraphError(f"input node {n.nid!r} must declare channels")
            elif n.kind == "parameter":
                if n.inputs or n.weight is None:
                    raise GraphError(f"parameter node {n.nid!r} needs a tensor")
            elif n.kind == "conv3d":
                self._check_unary(n)
                if n.weight is None or n.weight.ndim != 5:
                    raise GraphError(f"conv3d {n.nid!r} needs a 5D weight")
                if any(k % 2 == 0 for k in n.weight.shape[2:]):
                    raise GraphError(f"conv3d {n.nid!r} kernel extents must be odd")
            elif n.kind == "conv_transpose3d":
                self._check_unary(n)
                if n.weight is None or n.weight.shape[2:] != (2, 2, 2):
                    raise GraphError(
                        f"conv_transpose3d {n.nid!r} needs a (Ci, Co, 2, 2, 2) weight"
                    )
            elif n.kind in ("relu", "maxpool", "softmax"):
                self._check_unary(n)
            elif n.kind == "add":
                if len(n.inputs) != 2:
                    raise GraphError(f"add {n.nid!r} needs exactly 2 inputs")
            elif n.kind == "concat":
                if not n.inputs:
                    raise GraphError(f"concat {n.nid!r} needs at least 1 input")
            seen.add(n.nid)

    @staticmethod
    def _check_unary(n: Node) -> None:
        if len(n.inputs) != 1:
            raise GraphError(f"{n.kind} {n.nid!r} needs exactly 1 input")

    @property
    def dtype(self) -> np.dtype:
        for n in self.nodes:
            if n.weight is not None:
                return n.weight.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Graph":
        nodes = []
        for n in self.nodes:
            nodes.append(
                Node(
                    nid=n.nid,
                    kind=n.kind,
                    inputs=list(n.inputs),
                    weight=None if n.weight is None else n.weight.astype(dtype),
                    bias=None if n.bias is None else n.bias.astype(dtype),
                    channels=n.channels,
                )
            )
        return Graph(nodes, self.output)

    def input_ids(self) -> list[str]:
        return [n.nid for n in self.nodes if n.kind == "input"]

    def parameter_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.weight is not None]

    def num_parameters(self) -> int:
        return sum(
            sum(int(np.prod(a.shape)) for a in n.param_arrays().values())
            for n in self.nodes
        )


class GraphBuilder:
    """Convenience wrapper that appends nodes in definition order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _add(self, node: Node) -> str:
        self.nodes.append(node)
        return node.nid

    def input(self, nid, channels):
        return self._add(Node(nid, "input", channels=channels))

    def parameter(self, nid, tensor):
        return self._add(Node(nid, "parameter", weight=np.asarray(tensor)))

    def conv3d(self, nid, src, weight, bias=None):
        weight = np.asarray(weight)
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=weight.dtype)
        return self._add(Node(nid, "conv3d", [src], weight=weight, bias=np.asarray(bias)))

    def conv_transpose3d(self, nid, src, weight, bias=None):
        weight = np.asarray(weight)
        if bias is None:
            bias = np.zeros(weight.shape[1], dtype=weight.dtype)
        return self._add(
            Node(nid, "conv_transpose3d", [src], weight=weight, bias=np.asarray(bias))
        )

    def relu(self, nid, src):
        return self._add(Node(nid, "relu", [src]))

    def maxpool(self, nid, src):
        return self._add(Node(nid, "maxpool", [src]))

    def concat(self, nid, srcs):
        return self._add(Node(nid, "concat", list(srcs)))

    def add(self, nid, a, b):
        return self._add(Node(nid, "add", [a, b]))

    def softmax(self, nid, src):
        return self._add(Node(nid, "softmax", [src]))

    def build(self, output) -> Graph:
        return Graph(self.nodes, output)


@dataclass
class Tape:
    """Stored forward activations, plus pooling argmax indices for backward."""

    graph: Graph
    activations: dict[str, np.ndarray]
    pool_idx: dict[str, np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.activations[self.graph.output]


def _softmax(x: np.ndarray, axis: int = -4) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def forward(graph: Graph, inputs: dict[str, np.ndarray], check_finite: bool = True) -> Tape:
    """Evaluate the graph; returns a tape holding activations for every node."""
    dtype = graph.dtype
    acts: dict[str, np.ndarray] = {}
    pool_idx: dict[str, np.ndarray] = {}
    in_spatial = None
    for node in graph.nodes:
        if node.kind == "input":
            if node.nid not in inputs:
                raise GraphError(f"missing input tensor for node {node.nid!r}")
            x = np.asarray(inputs[node.nid], dtype=dtype)
            if x.ndim != 4 or x.shape[0] != node.channels:
                raise GraphError(
                    f"input {node.nid!r}: expected ({node.channels}, Z, Y, X), "
                    f"got {x.shape}"
                )
            if in_spatial is None:
                in_spatial = x.shape[1:]
            elif x.shape[1:] != in_spatial:
                raise GraphError("all inputs must share spatial extents")
            acts[node.nid] = x
        elif node.kind == "parameter":
            acts[node.nid] = node.weight.astype(dtype, copy=False)
        elif node.kind == "conv3d":
            x = acts[node.inputs[0]]
            acts[node.nid] = conv3d_forward(x[None], node.weight, node.bias)[0]
        elif node.kind == "conv_transpose3d":
            x = acts[node.inputs[0]]
            w = node.weight  # (Ci, Co, 2, 2, 2)
            if x.shape[0] != w.shape[0]:
                raise GraphError(
                    f"conv_transpose3d {node.nid!r}: input has {x.shape[0]} "
                    f"channels, weight expects {w.shape[0]}"
                )
            tmp = np.tensordot(w, x, axes=([0], [0]))  # (Co,2,2,2,Z,Y,X)
            co, _, _, _, z, y, xx = tmp.shape
            out = tmp.transpose(0, 4, 1, 5, 2, 6, 3).reshape(co, 2 * z, 2 * y, 2 * xx)
            acts[node.nid] = out + node.bias.reshape(-1, 1, 1, 1)
        elif node.kind == "relu":
            acts[node.nid] = np.maximum(acts[node.inputs[0]], 0)
        elif node.kind == "maxpool":
            x = acts[node.inputs[0]]
            c, z, y, xx = x.shape
            if z % 2 or y % 2 or xx % 2:
                raise GraphError(
                    f"maxpool {node.nid!r}: spatial extents {x.shape[1:]} not even"
                )
            win = (
                x.reshape(c, z // 2, 2, y // 2, 2, xx // 2, 2)
                .transpose(0, 1, 3, 5, 2, 4, 6)
                .reshape(c, z // 2, y // 2, xx // 2, 8)
            )
            idx = np.argmax(win, axis=-1)
            pool_idx[node.nid] = idx
            acts[node.nid] = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        elif node.kind == "concat":
            acts[node.nid] = np.concatenate([acts[i] for i in node.inputs], axis=0)
        elif node.kind == "add":
            a, b = acts[node.inputs[0]], acts[node.inputs[1]]
            if a.shape != b.shape:
                raise GraphError(f"add {node.nid!r}: shapes {a.shape} vs {b.shape}")
            acts[node.nid] = a + b
        elif node.kind == "softmax":
            acts[node.nid] = _softmax(acts[node.inputs[0]])
        if check_finite and not np.all(np.isfinite(acts[node.nid])):
            raise NonFiniteError(f"non-finite values at node {node.nid!r}")
    out_act = acts[graph.output]
    if in_spatial is not None and out_act.shape[1:] != in_spatial:
        raise GraphError(
            f"segmentation contract violated: output spatial {out_act.shape[1:]} "
            f"!= input spatial {in_spatial}"
        )
    return Tape(graph, acts, pool_idx)


@dataclass
class BackwardResult:
    node_grads: dict[str, np.ndarray]
    param_grads: dict[str, dict[str, np.ndarray]]


def _flip_transpose_weight(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])


def backward(
    tape: Tape,
    seed: np.ndarray,
    with_params: bool = False,
    check_finite: bool = True,
) -> BackwardResult:
    """Reverse pass; seed is (C, Z, Y, X) or batched (B, C, Z, Y, X)."""
    graph = tape.graph
    out_act = tape.output
    seed = np.asarray(seed, dtype=graph.dtype)
    batched = seed.ndim == 5
    if not batched:
        if seed.shape != out_act.shape:
            raise GraphError(
                f"seed shape {seed.shape} != output shape {out_act.shape}"
            )
        seed = seed[None]
    elif seed.shape[1:] != out_act.shape:
        raise GraphError(f"seed shape {seed.shape[1:]} != output shape {out_act.shape}")
    if with_params and seed.shape[0] != 1:
        raise GraphError("parameter gradients require an unbatched seed")

    grads: dict[str, np.ndarray] = {graph.output: seed}
    param_grads: dict[str, dict[str, np.ndarray]] = {}

    def send(nid: str, g: np.ndarray) -> None:
        if nid in grads:
            grads[nid] = grads[nid] + g
        else:
            grads[nid] = g

    for node in reversed(graph.nodes):
        gy = grads.get(node.nid)
        if gy is None:
            grads[node.nid] = np.zeros(
                (seed.shape[0],) + tape.activations[node.nid].shape, dtype=graph.dtype
            )
            continue
        if node.kind in ("input", "parameter"):
            continue
        elif node.kind == "conv3d":
            gx = conv3d_forward(gy, _flip_transpose_weight(node.weight))
            send(node.inputs[0], gx)
            if with_params:
                gw, gb = conv3d_grad_weight(
                    tape.activations[node.inputs[0]][None], gy, node.weight.shape[2:]
                )
                param_grads[node.nid] = {"weight": gw, "bias": gb}
        elif node.kind == "conv_transpose3d":
            w = node.weight  # (Ci, Co, 2, 2, 2)
            b_, co, z2, y2, x2 = gy.shape
            z, y, xx = z2 // 2, y2 // 2, x2 // 2
            gyr = gy.reshape(b_, co, z, 2, y, 2, xx, 2).transpose(0, 1, 3, 5, 7, 2, 4, 6)
            gx = np.tensordot(gyr, w, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
            send(node.inputs[0], np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3)))
            if with_params:
                x = tape.activations[node.inputs[0]]
                gw = np.tensordot(x, gyr[0], axes=([1, 2, 3], [4, 5, 6]))
                param_grads[node.nid] = {
                    "weight": np.ascontiguousarray(gw),
                    "bias": gy.sum(axis=(0, 2, 3, 4)),
                }
        elif node.kind == "relu":
            mask = tape.activations[node.inputs[0]] > 0
            send(node.inputs[0], gy * mask)
        elif node.kind == "maxpool":
            idx = tape.pool_idx[node.nid]
            b_, c, z2, y2, x2 = gy.shape
            g8 = np.zeros((b_, c, z2, y2, x2, 8), dtype=graph.dtype)
            idx_b = np.broadcast_to(idx[None, ..., None], (b_,) + idx.shape + (1,))
            np.put_along_axis(g8, idx_b, gy[..., None], axis=-1)
            gx = (
                g8.reshape(b_, c, z2, y2, x2, 2, 2, 2)
                .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                .reshape(b_, c, 2 * z2, 2 * y2, 2 * x2)
            )
            send(node.inputs[0], gx)
        elif node.kind == "concat":
            offset = 0
            for src in node.inputs:
                c = tape.activations[src].shape[0]
                send(src, gy[:, offset : offset + c].copy())
                offset += c
        elif node.kind == "add":
            send(node.inputs[0], gy)
            send(node.inputs[1], gy.copy())
        elif node.kind == "softmax":
            s = tape.activations[node.nid]
            inner = (gy * s).sum(axis=-4, keepdims=True)
            send(node.inputs[0], s * (gy - inner))
        if check_finite and not np.all(np.isfinite(grads[node.nid])):
            raise NonFiniteError(f"non-finite gradient at node {node.nid!r}")

    if not batched:
        grads = {k: v[0] for k, v in grads.items()}
    return BackwardResult(grads, param_grads)


@dataclass
class FDRecord:
    output_pos: tuple
    input_nid: str
    input_pos: tuple
    autodiff: float
    central: float
    rel_err: float | None
    skipped: bool


@dataclass
class FDReport:
    max_rel_err: float
    records: list[FDRecord]

    @property
    def n_skipped(self) -> int:
        return sum(r.skipped for r in self.records)


def finite_difference_check(
    graph: Graph,
    inputs: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    n_seeds: int = 3,
    n_voxels: int = 4,
    rng: np.random.Generator | None = None,
    voxels: list[tuple[str, tuple]] | None = None,
) -> FDReport:
    """Compare input gradients against central differences on sampled pairs.

    Perturbed pairs that cross a relu kink or flip a max-pool winner are
    reported as skipped rather than failed (subgradient ambiguity).
    """
    if graph.dtype != np.float64:
        raise GraphError("finite_difference_check requires a 64-bit graph")
    rng = rng or np.random.default_rng(0)
    tape = forward(graph, inputs)
    out = tape.output

    out_positions = [
        tuple(int(i) for i in np.unravel_index(k, out.shape))
        for k in rng.choice(out.size, size=min(n_seeds, out.size), replace=False)
    ]
    if voxels is None:
        voxels = []
        for nid in graph.input_ids():
            x = inputs[nid]
            picks = rng.choice(x.size, size=min(n_voxels, x.size), replace=False)
            voxels.extend(
                (nid, tuple(int(i) for i in np.unravel_index(k, x.shape)))
                for k in picks
            )

    seeds = np.zeros((len(out_positions),) + out.shape, dtype=np.float64)
    for i, pos in enumerate(out_positions):
        seeds[i][pos] = 1.0
    bres = backward(tape, seeds)

    records: list[FDRecord] = []
    max_err = 0.0
    for nid, pos in voxels:
        xplus = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
        xminus = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
        xplus[nid][pos] += epsilon
        xminus[nid][pos] -= epsilon
        tp = forward(graph, xplus)
        tm = forward(graph, xminus)
        skipped = _crossed_kink(graph, tp, tm)
        for i, opos in enumerate(out_positions):
            fd = (tp.output[opos] - tm.output[opos]) / (2 * epsilon)
            ad = bres.node_grads[nid][i][pos]
            if skipped:
                records.append(FDRecord(opos, nid, pos, float(ad), float(fd), None, True))
                continue
            err = abs(ad - fd) / max(abs(fd), 1e-8)
            max_err = max(max_err, err)
            records.append(FDRecord(opos, nid, pos, float(ad), float(fd), float(err), False))
    return FDReport(max_err, records)


def _crossed_kink(graph: Graph, tape_a: Tape, tape_b: Tape) -> bool:
    for node in graph.nodes:
        if node.kind == "relu":
            sa = tape_a.activations[node.inputs[0]] > 0
            sb = tape_b.activations[node.inputs[0]] > 0
            if not np.array_equal(sa, sb):
                return True
        elif node.kind == "maxpool":
            if not np.array_equal(tape_a.pool_idx[node.nid], tape_b.pool_idx[node.nid]):
                return True
    return False


def receptive_field(graph: Graph) -> tuple[int, int, int]:
    """Theoretical per-axis receptive-field radius of the output node.

    Walks the graph tracking, per axis, the affine dependency interval of an
    output voxel on input coordinates (jump and [lo, hi] reach, in exact
    rational arithmetic so pool/upsample pairs cancel).
    """
    # state per node: (jump, lo, hi) per axis
    state: dict[str, list[tuple[Fraction, Fraction, Fraction]]] = {}
    zero = [(Fraction(1), Fraction(0), Fraction(0))] * 3

    def merge(a, b):
        out = []
        for (ja, la, ha), (jb, lb, hb) in zip(a, b):
            if ja != jb:
                raise GraphError("mismatched strides at merge point")
            out.append((ja, min(la, lb), max(ha, hb)))
        return out

    for node in graph.nodes:
        if node.kind in ("input", "parameter"):
            state[node.nid] = list(zero)
            continue
        srcs = [state[i] for i in node.inputs]
        if node.kind == "conv3d":
            k = node.weight.shape[2:]
            st = []
            for (j, lo, hi), kk in zip(srcs[0], k):
                r = Fraction(kk - 1, 2)
                st.append((j, lo - r * j, hi + r * j))
            state[node.nid] = st
        elif node.kind == "maxpool":
            state[node.nid] = [(2 * j, lo, hi + j) for (j, lo, hi) in srcs[0]]
        elif node.kind == "conv_transpose3d":
            state[node.nid] = [
                (j / 2, lo - j / 2, hi) for (j, lo, hi) in srcs[0]
            ]
        elif node.kind in ("relu", "softmax"):
            state[node.nid] = srcs[0]
        elif node.kind in ("add", "concat"):
            st = srcs[0]
            for other in srcs[1:]:
                st = merge(st, other)
            state[node.nid] = st
        else:  # pragma: no cover
            raise GraphError(f"unsupported layer kind {node.kind!r}")
    out = state[graph.output]
    return tuple(int(math.ceil(max(abs(lo), abs(hi)))) for (_, lo, hi) in out)


def alignment(graph: Graph) -> int:
    """Smallest spatial extent multiple the graph accepts (product of pools)."""
    depth = 0
    for node in graph.nodes:
        if node.kind == "maxpool":
            depth += 1
    return 2 ** depth if depth else 1
