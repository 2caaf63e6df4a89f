"""Command line interface.

Exit codes:
  0  success
  2  usage error (bad arguments)
  3  missing input file or directory
  4  invalid configuration or malformed input data
  5  runtime failure (training diverged, placement failed, non-finite values)
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .autodiff import GraphError, NonFiniteError
from .config import RunConfig, load_run_config
from .instances import (
    binarize,
    categorize,
    connected_components,
    filter_min_volume,
    read_instances,
    write_instances,
    CategorizedInstance,
)
from .phantom import (
    PhantomConfig,
    PlacementError,
    RelocationError,
    generate_phantom,
    load_phantom,
    preprocess,
    read_phantom_config,
    save_phantom,
    zscore_normalize,
)
from .saliency import (
    NoiseSpec,
    gradcampp_class,
    gradcampp_instance,
    smoothgrad_instance_avg,
    smoothgrad_instance_max,
)
from .unet import (
    TrainConfig,
    TrainingDiverged,
    UNetConfig,
    build_unet,
    infer_volume,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .volio import MetaVolume, VolumeFormatError, read_metavolume, write_keyvalue, write_metavolume

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_CONFIG = 4
EXIT_RUNTIME = 5


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _study_config(cfg: RunConfig) -> ex.StudyConfig:
    return ex.StudyConfig(
        threshold=cfg.threshold,
        min_volume_mm3=cfg.min_volume_mm3,
        tn_count=cfg.tn_count,
        tn_volume_mm3=cfg.tn_volume_mm3,
        omega_cap=cfg.omega_cap,
        exclusion_band=(cfg.exclusion_lo, cfg.exclusion_hi),
        bootstrap_resamples=cfg.bootstrap_resamples,
        patch_extent=cfg.patch_extent,
        seed=cfg.seed,
    )


def _load_volume(path: Path, normalize: bool) -> np.ndarray:
    """Accept a .mv file or a phantom directory.

    Phantom directories carry a brain mask, so normalization z-scores within
    the brain and zeroes the outside; bare .mv files z-score the full volume.
    """
    path = Path(path)
    if path.is_dir():
        phantom = load_phantom(path)
        return preprocess(phantom) if normalize else phantom.data
    data = read_metavolume(path).data
    return zscore_normalize(data) if normalize else data


def _load_phantoms(directory: Path):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    dirs = sorted(p for p in directory.iterdir() if (p / "volume.mv").exists())
    if (directory / "volume.mv").exists():
        dirs = [directory]
    if not dirs:
        raise FileNotFoundError(f"no phantoms under {directory}")
    return [load_phantom(d) for d in dirs]


def _select_instance(path: Path, instance_id: int | None):
    cis = read_instances(path)
    if not cis:
        raise ValueError(f"no instances in {path}")
    if instance_id is None:
        return cis[0].instance
    for ci in cis:
        if ci.instance.id == instance_id:
            return ci.instance
    raise ValueError(f"instance id {instance_id} not found in {path}")


# -- commands ----------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    cfg = _run_config(args)
    pcfg = read_phantom_config(args.phantom_config) if args.phantom_config else PhantomConfig()
    if args.extent:
        pcfg.extent = args.extent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        phantom = generate_phantom(pcfg, cfg.seed + i)
        save_phantom(phantom, out / f"phantom_{i:03d}")
        write_instances(
            [CategorizedInstance(inst, "GT", 0) for inst in phantom.instances],
            out / f"phantom_{i:03d}" / "instances.txt",
        )
    print(f"wrote {args.count} phantoms to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    phantoms = _load_phantoms(args.data)
    dataset = [
        (preprocess(p), p.gt_mask.astype(np.float32), p.instances)
        for p in phantoms
    ]
    ucfg = UNetConfig(
        depth=args.depth, base_channels=args.base_channels, patch_extent=cfg.patch_extent
    )
    graph = build_unet(ucfg, seed=cfg.seed)
    tcfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        momentum=args.momentum,
        loss_mix=args.loss_mix,
        seed=cfg.seed,
        patches_per_volume=args.patches_per_volume,
        augment_sigma=args.augment_sigma,
    )
    result = train(graph, dataset, tcfg)
    out = Path(args.out)
    save_checkpoint(result.graph, ucfg, out)
    result.write_history_csv(out / "loss_history.csv")
    print(f"final loss {result.loss_history[-1]:.4f}; checkpoint at {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    graph, ucfg = load_checkpoint(args.model)
    x = _load_volume(args.volume, normalize=not args.pre_normalized)
    prob = infer_volume(graph, x, patch_extent=ucfg.patch_extent)
    write_metavolume(prob, args.out)
    print(f"probability map written to {args.out}")
    return EXIT_OK


def cmd_instances_extract(args) -> int:
    cfg = _run_config(args)
    prob = read_metavolume(args.prob).data[0]
    mask = binarize(prob, cfg.threshold)
    insts = filter_min_volume(
        connected_components(mask, connectivity=cfg.connectivity), cfg.min_volume_mm3
    )
    write_instances([CategorizedInstance(i, "PRED", 0) for i in insts], args.out)
    print(f"{len(insts)} instances written to {args.out}")
    return EXIT_OK


def cmd_instances_categorize(args) -> int:
    cfg = _run_config(args)
    prob = read_metavolume(args.prob).data[0]
    gt_mask = read_metavolume(args.gt).data[0] > 0.5
    pred_mask = binarize(prob, cfg.threshold)
    pred = filter_min_volume(
        connected_components(pred_mask, connectivity=cfg.connectivity),
        cfg.min_volume_mm3,
    )
    gt = connected_components(gt_mask, connectivity=cfg.connectivity)
    result = categorize(pred, gt, pred_mask, gt_mask)
    write_instances(result.categorized, args.out)
    print(
        "counts:",
        " ".join(f"{k}={v}" for k, v in sorted(result.counts.items())),
        f"TPR={result.true_positive_rate:.3f} FDR={result.false_discovery_rate:.3f}",
    )
    return EXIT_OK


def cmd_saliency_smoothgrad(args) -> int:
    cfg = _run_config(args)
    graph, _ = load_checkpoint(args.model)
    x = _load_volume(args.volume, normalize=not args.pre_normalized)
    inst = _select_instance(Path(args.instances), args.instance)
    noise = NoiseSpec(
        n=args.n if args.n is not None else cfg.noise_samples,
        sigma=args.sigma if args.sigma is not None else cfg.noise_sigma,
        seed=cfg.seed,
    )
    if args.aggregation == "average":
        smap = smoothgrad_instance_avg(graph, x, inst, noise)
    else:
        smap = smoothgrad_instance_max(graph, x, inst, noise, omega_cap=cfg.omega_cap)
    meta = {"method": smap.method, "aggregation": smap.aggregation, "instance": smap.instance_id}
    if smap.flags:
        meta["flags"] = ",".join(smap.flags)
    write_metavolume(MetaVolume(smap.data, meta=meta), args.out)
    print(f"saliency map written to {args.out}")
    return EXIT_OK


def cmd_saliency_gradcampp(args) -> int:
    cfg = _run_config(args)
    graph, _ = load_checkpoint(args.model)
    x = _load_volume(args.volume, normalize=not args.pre_normalized)
    if args.instances:
        inst = _select_instance(Path(args.instances), args.instance)
        smap = gradcampp_instance(graph, x, inst, layer=args.layer)
    else:
        smap = gradcampp_class(graph, x, layer=args.layer, t=cfg.threshold)
    meta = {"method": smap.method, "aggregation": smap.aggregation, "instance": smap.instance_id}
    if smap.flags:
        meta["flags"] = ",".join(smap.flags)
    write_metavolume(MetaVolume(smap.data, meta=meta), args.out)
    print(f"heatmap written to {args.out}" + (f" (flags: {meta.get('flags')})" if smap.flags else ""))
    return EXIT_OK


def cmd_experiment_stats(args) -> int:
    cfg = _run_config(args)
    graph, _ = load_checkpoint(args.model)
    phantoms = _load_phantoms(args.data)
    noise = NoiseSpec(n=args.n or cfg.noise_samples, sigma=cfg.noise_sigma, seed=cfg.seed)
    table = ex.distribution_study(graph, phantoms, noise, _study_config(cfg))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_extrema_csv(table, out / "extrema.csv")
    ex.write_extrema_summary_csv(table, out / "extrema_summary.csv")
    if table.empty_categories:
        print("empty categories:", ", ".join(table.empty_categories))
    print(f"{len(table.rows)} rows written to {out}")
    return EXIT_OK


def cmd_experiment_sanity(args) -> int:
    cfg = _run_config(args)
    graph, _ = load_checkpoint(args.model)
    phantom = _load_phantoms(args.data)[0]
    noise = NoiseSpec(n=args.n or cfg.noise_samples, sigma=cfg.noise_sigma, seed=cfg.seed)
    scfg = _study_config(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    empty = ex.sanity_empty_region(graph, phantom, noise, scfg)
    single = ex.sanity_single_voxel(graph, phantom, phantom.instances[0], noise, scfg)
    write_keyvalue(
        {
            "empty_region_max": empty.max,
            "empty_region_min": empty.min,
            "single_voxel": "{} {} {}".format(*single.voxel),
            "single_voxel_mass_fraction": single.mass_fraction_near_lesion,
            "single_voxel_rf_local": single.nonzero_within_rf,
        },
        out / "sanity.txt",
    )
    write_metavolume(MetaVolume(empty.saliency.data), out / "empty_region.mv")
    write_metavolume(MetaVolume(single.saliency.data), out / "single_voxel.mv")
    print(f"sanity reports written to {out}")
    return EXIT_OK


def cmd_experiment_relocate(args) -> int:
    cfg = _run_config(args)
    graph, _ = load_checkpoint(args.model)
    phantom = _load_phantoms(args.data)[0]
    inst = phantom.instances[0] if args.instance is None else next(
        (i for i in phantom.instances if i.id == args.instance), None
    )
    if inst is None:
        raise ValueError(f"instance id {args.instance} not found")
    noise = NoiseSpec(n=args.n or cfg.noise_samples, sigma=cfg.noise_sigma, seed=cfg.seed)
    reports = ex.relocation_study(
        graph, phantom, inst, noise, _study_config(cfg), np.random.default_rng(cfg.seed)
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kv = {}
    for r in reports:
        tag = f"{r.destination}_margin{r.margin_mm}"
        kv[f"{tag}_placed"] = r.placed
        kv[f"{tag}_detected"] = r.detected
        kv[f"{tag}_max_score"] = r.max_score
        if r.saliency is not None:
            write_metavolume(MetaVolume(r.saliency.data), out / f"{tag}.mv")
        note = f" ({r.error})" if r.error else ""
        print(f"{tag}: placed={r.placed} detected={r.detected} max={r.max_score}{note}")
    write_keyvalue(kv, out / "relocation.txt")
    return EXIT_OK


def cmd_experiment_context(args) -> int:
    cfg = _run_config(args)
    graph, _ = load_checkpoint(args.model)
    phantoms = _load_phantoms(args.data)
    lo, hi = ex.context_volume_band(phantoms)
    selected = [
        (phantom, inst)
        for phantom in phantoms
        for inst in phantom.instances
        if lo <= inst.volume_mm3 <= hi
    ]
    if not selected:
        # fall back to the instance closest to the mean volume
        mean = (lo + hi) / 2
        selected = [
            min(
                ((p, i) for p in phantoms for i in p.instances),
                key=lambda pi: abs(pi[1].volume_mm3 - mean),
            )
        ]
        print(f"no instance inside [{lo:.1f}, {hi:.1f}] mm^3; using the closest one")
    curves = [
        ex.context_experiment(
            graph,
            phantom,
            inst,
            iterations=cfg.context_iterations,
            cfg=_study_config(cfg),
            dilation_connectivity=cfg.dilation_connectivity,
        )
        for phantom, inst in selected
    ]
    ex.write_context_csv(ex.aggregate_context_curves(curves), args.out)
    print(f"{len(curves)} curves aggregated into {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.kind == "context":
        agg = ex.read_context_csv(args.input)
        ks = [a.k for a in agg]
        means = [a.mean_score for a in agg]
        stds = [a.std_score for a in agg]
        fig, axis = plt.subplots(figsize=(6, 4))
        axis.errorbar(ks, means, yerr=stds, fmt="o-", capsize=2)
        axis.set_xlabel("revealed context (dilation iterations)")
        axis.set_ylabel("mean lesion probability")
        axis.set_ylim(-0.05, 1.05)
    else:
        rows = _read_extrema_rows(args.input)
        fig, axis = plt.subplots(figsize=(6, 4))
        cats = [c for c in ex.CATEGORIES if any(r[0] == c for r in rows)]
        data = [[r[1] for r in rows if r[0] == c] for c in cats]
        axis.violinplot(data, showmedians=True)
        axis.set_xticks(range(1, len(cats) + 1), cats)
        axis.set_ylabel("saliency maximum")
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    print(f"figure written to {args.out}")
    return EXIT_OK


def _read_extrema_rows(path):
    import csv as _csv

    rows = []
    with open(path) as fh:
        reader = _csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        for rec in reader:
            if int(rec[3]) == 0:  # modality 0
                rows.append((rec[2], float(rec[4])))
    return rows


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionxai",
        description="Instance-level explanation maps for volumetric segmentation.",
        epilog=(
            "exit codes: 0 success, 2 usage error, 3 missing input, "
            "4 invalid configuration, 5 runtime failure"
        ),
    )
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--config", default=None, help="run configuration file")

    p = sub.add_parser("phantom", help="generate synthetic phantoms")
    psub = p.add_subparsers(dest="subcommand")
    q = psub.add_parser("gen", help="generate a phantom dataset")
    q.add_argument("--out", required=True)
    q.add_argument("--count", type=int, default=1)
    q.add_argument("--extent", type=int, default=None)
    q.add_argument("--phantom-config", default=None)
    common(q)
    q.set_defaults(func=cmd_phantom_gen)

    q = sub.add_parser("train", help="train the segmentation network")
    q.add_argument("--data", required=True, help="directory of phantom directories")
    q.add_argument("--out", required=True, help="checkpoint directory")
    q.add_argument("--epochs", type=int, default=20)
    q.add_argument("--lr", type=float, default=0.5)
    q.add_argument("--momentum", type=float, default=0.9)
    q.add_argument("--loss-mix", type=float, default=0.5)
    q.add_argument("--depth", type=int, default=2)
    q.add_argument("--base-channels", type=int, default=8)
    q.add_argument("--patches-per-volume", type=int, default=2)
    q.add_argument("--augment-sigma", type=float, default=0.5,
                   help="additive Gaussian input noise during training")
    common(q)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("infer", help="whole-volume inference")
    q.add_argument("--model", required=True)
    q.add_argument("--volume", required=True, help=".mv file or phantom directory")
    q.add_argument("--out", required=True)
    q.add_argument("--pre-normalized", action="store_true")
    common(q)
    q.set_defaults(func=cmd_infer)

    p = sub.add_parser("instances", help="extract or categorize lesion instances")
    psub = p.add_subparsers(dest="subcommand")
    q = psub.add_parser("extract")
    q.add_argument("--prob", required=True)
    q.add_argument("--out", required=True)
    common(q)
    q.set_defaults(func=cmd_instances_extract)
    q = psub.add_parser("categorize")
    q.add_argument("--prob", required=True)
    q.add_argument("--gt", required=True)
    q.add_argument("--out", required=True)
    common(q)
    q.set_defaults(func=cmd_instances_categorize)

    p = sub.add_parser("saliency", help="explanation maps")
    psub = p.add_subparsers(dest="subcommand")
    q = psub.add_parser("smoothgrad")
    q.add_argument("--model", required=True)
    q.add_argument("--volume", required=True)
    q.add_argument("--instances", required=True)
    q.add_argument("--instance", type=int, default=None)
    q.add_argument("--aggregation", choices=("average", "signed-max"), default="signed-max")
    q.add_argument("--n", type=int, default=None, help="noise samples")
    q.add_argument("--sigma", type=float, default=None)
    q.add_argument("--out", required=True)
    q.add_argument("--pre-normalized", action="store_true")
    common(q)
    q.set_defaults(func=cmd_saliency_smoothgrad)
    q = psub.add_parser("gradcampp")
    q.add_argument("--model", required=True)
    q.add_argument("--volume", required=True)
    q.add_argument("--instances", default=None, help="instance file; omit for the class map")
    q.add_argument("--instance", type=int, default=None)
    q.add_argument("--layer", default=None)
    q.add_argument("--out", required=True)
    q.add_argument("--pre-normalized", action="store_true")
    common(q)
    q.set_defaults(func=cmd_saliency_gradcampp)

    p = sub.add_parser("experiment", help="full-scale analyses")
    psub = p.add_subparsers(dest="subcommand")
    q = psub.add_parser("stats", help="extrema distributions with CIs and U tests")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--n", type=int, default=None)
    common(q)
    q.set_defaults(func=cmd_experiment_stats)
    q = psub.add_parser("sanity", help="empty-region and single-voxel checks")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--n", type=int, default=None)
    common(q)
    q.set_defaults(func=cmd_experiment_sanity)
    q = psub.add_parser("relocate", help="lesion relocation study")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--instance", type=int, default=None)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--n", type=int, default=None)
    common(q)
    q.set_defaults(func=cmd_experiment_relocate)
    q = psub.add_parser("context", help="contextual-information dilation curve")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    common(q)
    q.set_defaults(func=cmd_experiment_context)

    q = sub.add_parser("report", help="render a CSV result as an SVG figure")
    q.add_argument("kind", choices=("context", "extrema"))
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    common(q)
    q.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except (TrainingDiverged, PlacementError, RelocationError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ValueError, VolumeFormatError, GraphError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
