"""ssa-nowcast command line: synth, train, eval, params, explain and sweep-sa."""
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .. import __version__
from ..config_manager import ConfigManager, RuntimeConfig
from ..errors import ConfigurationError, DataError, SSANowcastError
from ..models import (AttentionKind, DatasetSpec, FilterKind, FilterRule, HeatmapRequest, HorizonSpec,
                      ModelConfig, Precision, SynthParams, Task, TrainConfig)
from ..nn.unet import build, compare_param_counts
from ..services.checkpoint_service import load_checkpoint
from ..services.data_service import DataService, load_archive, save_archive, synth_cloud, synth_generate
from ..services.evaluation_service import EvaluationService, report_csv
from ..services.explain_service import ExplainService
from ..services.manifest_service import ManifestService
from ..services.training_service import TrainingService
from ..tensor.parallel import set_threads

logger = logging.getLogger("ssa_nowcast")


def _group_list(text: str):
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if len(values) != 5:
        raise argparse.ArgumentTypeError(f"expected 5 group sizes, got {len(values)}")
    return values


def _filter_list(text: str) -> List[FilterKind]:
    try:
        return [FilterKind(v.strip()) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"filters must be among {', '.join(k.value for k in FilterKind)}; got '{text}'")


# ------------------------------------------------------------------ helpers

def _task(args) -> Task:
    return Task(args.task)


def _outputs(args) -> int:
    if args.outputs is not None:
        return args.outputs
    return 6 if _task(args) is Task.CLOUD else 12


def _load_sequence(args, manifest: Optional[ManifestService] = None):
    if args.data:
        if manifest is not None:
            manifest.add_input(args.data)
        return load_archive(args.data)
    if _task(args) is Task.CLOUD:
        return synth_cloud(args.frames, args.size, args.size, args.seed)
    return synth_generate(args.frames, args.size, args.size, args.seed)


def _model_config(args) -> ModelConfig:
    task = _task(args)
    params = dict(in_channels=task.input_frames, out_channels=_outputs(args),
                  kernels_per_layer=args.kernels, attention=AttentionKind(args.attention),
                  seed=args.seed)
    if getattr(args, "sa_groups", None):
        params["sa_groups"] = args.sa_groups
    if getattr(args, "classic_blocks", False):
        params["shuffle_groups"] = None
    if getattr(args, "tiny", False):
        config = ModelConfig.tiny(**params)
    else:
        config = ModelConfig(**params)
    config.validate()
    return config


def _prepare(args, runtime: RuntimeConfig, filter_kind: FilterKind, normalization: Optional[float] = None,
             manifest: Optional[ManifestService] = None):
    task = _task(args)
    spec = DatasetSpec(source=args.data or "synthetic", split_fractions=runtime.split_fractions,
                       filter_kind=filter_kind, filter_rule=FilterRule(args.filter_rule),
                       rain_cutoff=runtime.rain_cutoff, normalization=normalization)
    seq = _load_sequence(args, manifest)
    horizon = HorizonSpec.for_outputs(_outputs(args), task)
    return DataService(spec).prepare(seq, task.input_frames, horizon, train_stride=args.train_stride,
                                     eval_stride=args.eval_stride, crop=args.crop)


# ----------------------------------------------------------------- commands

def cmd_synth(args, runtime: RuntimeConfig) -> int:
    task = _task(args)
    if task is Task.CLOUD:
        seq = synth_cloud(args.frames, args.size, args.size, args.seed)
    else:
        seq = synth_generate(args.frames, args.size, args.size, args.seed, SynthParams(n_blobs=args.blobs))
    out = Path(args.out)
    manifest = ManifestService("synth", args.argv, vars_of(args), seed=args.seed)
    manifest.add_output(save_archive(seq, out))
    manifest.finish(out.parent, f"{out.stem}.manifest.json")
    logger.info("wrote %d %s frames to %s", len(seq), task.value, out)
    return 0


def cmd_train(args, runtime: RuntimeConfig) -> int:
    config = _model_config(args)
    manifest = ManifestService("train", args.argv, vars_of(args), seed=args.seed)
    data = _prepare(args, runtime, FilterKind(args.filter), manifest=manifest)
    model = build(config, Precision(args.precision))
    manifest.manifest.config["model"] = config.to_dict()
    manifest.manifest.config["parameters"] = model.param_count()
    logger.info("training %s model with %d parameters", config.attention.value, model.param_count())

    train_config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                               output_dir=args.output_dir, prefetch=not args.no_prefetch)
    result = TrainingService(train_config).train(model, data.train, data.val, data.normalization)
    for path in result.checkpoints:
        manifest.add_output(path)
    if result.best_checkpoint is not None:
        manifest.add_output(result.best_checkpoint)
    manifest.add_output(Path(args.output_dir) / "history.csv")
    manifest.finish(args.output_dir)
    logger.info("best epoch %d with validation MSE %.6g", result.best_epoch, result.best_val_loss)
    return 0


def cmd_eval(args, runtime: RuntimeConfig) -> int:
    if not args.checkpoint and not args.baseline_only:
        raise ConfigurationError("eval needs --checkpoint or --baseline-only")
    manifest = ManifestService("eval", args.argv, vars_of(args), seed=args.seed)
    model, normalization = None, None
    if args.checkpoint:
        model, _, meta = load_checkpoint(args.checkpoint)
        manifest.add_input(args.checkpoint)
        normalization = float(meta["normalization"]) if "normalization" in meta else None
        if model.config.out_channels != _outputs(args):
            args.outputs = model.config.out_channels
        if args.baseline_only:
            model = None

    evaluator = EvaluationService(threshold=args.threshold, batch_size=args.batch_size)
    records = []
    for filter_kind in args.filter:
        data = _prepare(args, runtime, filter_kind, normalization, manifest)
        windows = getattr(data, args.split)
        if not windows:
            raise DataError(f"no {args.split} windows left after the {filter_kind.value} filter")
        rows = evaluator.evaluate(model, windows, data.normalization)
        if len(args.filter) > 1:
            for row in rows:
                row.model = f"{row.model}@{filter_kind.value}"
        records += rows
    out = report_csv(records, args.out)
    manifest.add_output(out)
    manifest.finish(out.parent, f"{out.stem}.manifest.json")
    if args.strict and any(r.degenerate for r in records):
        logger.error("degenerate metrics (zero denominators) in %s", out)
        return 1
    return 0


def cmd_params(args, runtime: RuntimeConfig) -> int:
    if args.compare:
        rows = compare_param_counts(_task(args).input_frames, _outputs(args))
        print(f"{'model':<20}{'parameters':>14}{'reduction':>12}")
        for name, count, reduction in rows:
            print(f"{name:<20}{count:>14,}{reduction:>11.1f}%")
        return 0
    model = build(_model_config(args))
    modules = dict(model.named_modules())
    print(f"{'module':<32}{'parameters':>14}")
    for path in ([f"encoder.level{l}.{part}" for l in range(1, 6) for part in ("block", "attention")]
                 + [f"decoder.level{l}.block" for l in range(1, 5)] + ["head"]):
        print(f"{path:<32}{modules[path].param_count():>14,}")
    print(f"{'total':<32}{model.param_count():>14,}")
    return 0


def cmd_explain(args, runtime: RuntimeConfig) -> int:
    if not args.sweep and not args.layer:
        raise ConfigurationError("explain needs --layer or --sweep")
    manifest = ManifestService("explain", args.argv, vars_of(args), seed=args.seed)
    model, _, meta = load_checkpoint(args.checkpoint)
    manifest.add_input(args.checkpoint)
    args.outputs = model.config.out_channels
    normalization = float(meta["normalization"]) if "normalization" in meta else None
    data = _prepare(args, runtime, FilterKind(args.filter), normalization, manifest)
    request = HeatmapRequest(checkpoint_path=args.checkpoint, window_index=args.window_index,
                             layers=None if args.sweep else args.layer, frame_index=args.frame_index,
                             with_composite=args.composite)
    written = ExplainService(model, args.output_dir).handle(request, getattr(data, args.split))
    for path in written.values():
        manifest.add_output(path)
    manifest.finish(args.output_dir)
    return 0


def cmd_sweep_sa(args, runtime: RuntimeConfig) -> int:
    manifest = ManifestService("sweep-sa", args.argv, vars_of(args), seed=args.seed)
    data = _prepare(args, runtime, FilterKind(args.filter), manifest=manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, groups in enumerate(args.groups):
        label = ",".join(str(g) for g in groups)
        args.sa_groups = groups
        try:
            config = _model_config(args)
        except ConfigurationError as ex:
            logger.warning("skipping G=%s: %s", label, ex)
            rows.append((label, "", str(ex)))
            continue
        train_config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                                   output_dir=str(out.parent / f"sweep-{index:02d}"), prefetch=False)
        result = TrainingService(train_config).train(build(config), data.train, data.val, data.normalization)
        rows.append((label, f"{result.best_val_loss:.6g}", ""))
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("sa_groups", "val_mse", "reason"))
        writer.writerows(rows)
    manifest.add_output(out)
    manifest.finish(out.parent, f"{out.stem}.manifest.json")
    return 0


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value.value if hasattr(value, "value") else value


def vars_of(args) -> dict:
    """Resolved flags in JSON-friendly form, for the run manifest."""
    return {k: _plain(v) for k, v in vars(args).items() if k != "argv" and not callable(v)}


# ------------------------------------------------------------------- parser

def _data_options(p: argparse.ArgumentParser, runtime: RuntimeConfig):
    p.add_argument("--data", help="RSEQ archive (synthetic data when omitted)")
    p.add_argument("--task", choices=[t.value for t in Task], default=Task.PRECIP.value)
    p.add_argument("--frames", type=int, default=240, help="synthetic frame count")
    p.add_argument("--size", type=int, default=64, help="synthetic frame side")
    p.add_argument("--crop", type=int, help="center-crop side")
    p.add_argument("--outputs", type=int, choices=(1, 6, 12))
    p.add_argument("--filter-rule", choices=[r.value for r in FilterRule], default=FilterRule.ALL.value)
    p.add_argument("--train-stride", type=int, default=runtime.train_stride)
    p.add_argument("--eval-stride", type=int, default=runtime.eval_stride)
    p.add_argument("--batch-size", type=int, default=runtime.batch_size)
    p.add_argument("--seed", type=int, default=0)


def _model_options(p: argparse.ArgumentParser):
    p.add_argument("--kernels", type=int, choices=(2, 3), default=3)
    p.add_argument("--attention", choices=[a.value for a in AttentionKind], default=AttentionKind.SHUFFLE.value)
    p.add_argument("--sa-groups", type=_group_list)
    p.add_argument("--classic-blocks", action="store_true", help="no shuffled convolutions")
    p.add_argument("--tiny", action="store_true", help="widths 8..128")


def build_parser(runtime: RuntimeConfig) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssa-nowcast", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="runtime config JSON (default: $SSA_CONFIG or ~/.ssa_nowcast/config.json)")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--threads", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RSEQ archive")
    p.add_argument("--task", choices=[t.value for t in Task], default=Task.PRECIP.value)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--size", type=int, default=288)
    p.add_argument("--blobs", type=int, default=SynthParams().n_blobs)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data/sequence.rseq")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _data_options(p, runtime)
    _model_options(p)
    p.add_argument("--filter", choices=[k.value for k in FilterKind], default=FilterKind.NONE.value)
    p.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    p.add_argument("--lr", type=float, default=TrainConfig().lr)
    p.add_argument("--precision", choices=[q.value for q in Precision], default=Precision.STANDARD.value)
    p.add_argument("--no-prefetch", action="store_true")
    p.add_argument("--output-dir", default="runs/train")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="metrics CSV for a checkpoint and persistence")
    _data_options(p, runtime)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline-only", action="store_true")
    p.add_argument("--threshold", type=float, default=runtime.binarization_threshold)
    p.add_argument("--filter", type=_filter_list, default=[FilterKind.NONE], help="comma list of none,nl20,nl50")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--strict", action="store_true", help="fail when any record is degenerate")
    p.add_argument("--out", default="runs/eval/metrics.csv")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("params", help="parameter audit")
    p.add_argument("--task", choices=[t.value for t in Task], default=Task.PRECIP.value)
    p.add_argument("--outputs", type=int, choices=(1, 6, 12))
    p.add_argument("--seed", type=int, default=0)
    _model_options(p)
    p.add_argument("--compare", action="store_true", help="baseline vs. both SSA-UNet sizes")
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("explain", help="Grad-CAM heatmaps")
    _data_options(p, runtime)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", action="append", help="module path; repeatable")
    p.add_argument("--sweep", action="store_true", help="all default layers")
    p.add_argument("--frame-index", type=int, default=-1)
    p.add_argument("--window-index", type=int, default=0)
    p.add_argument("--filter", choices=[k.value for k in FilterKind], default=FilterKind.NONE.value)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--composite", action="store_true", help="input | prediction | target | heatmap")
    p.add_argument("--output-dir", default="runs/explain")
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("sweep-sa", help="validation MSE per Shuffle Attention group list")
    _data_options(p, runtime)
    _model_options(p)
    p.add_argument("--groups", type=_group_list, action="append", required=True,
                   help="g1,g2,g3,g4,g5; repeat for each configuration")
    p.add_argument("--filter", choices=[k.value for k in FilterKind], default=FilterKind.NONE.value)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=TrainConfig().lr)
    p.add_argument("--out", default="runs/sweep/sweep_sa.csv")
    p.set_defaults(handler=cmd_sweep_sa, tiny=True)
    return parser


def _runtime_config(argv) -> RuntimeConfig:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return ConfigManager(known.config).get_config()


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    runtime = _runtime_config(argv)
    args = build_parser(runtime).parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=(args.log_level or runtime.log_level).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    set_threads(args.threads or runtime.threads)
    try:
        return args.handler(args, runtime)
    except SSANowcastError as ex:
        logger.error("%s", ex)
        return ex.exit_code
    except OSError as ex:
        logger.error("%s", ex)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
