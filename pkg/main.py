import sys
import json
import logging
import argparse
from dataclasses import asdict
from pathlib import Path

from dotenv import load_dotenv

import pipeline
from config import load_config
from data import DatasetManifest, generate_synthetic_benchmark, load_label, load_manifest
from edge import edges_from_file, write_edge_pgm
from metrics import write_report
from model import available_models, load_checkpoint

load_dotenv()

logger = logging.getLogger("lowbridge")

GENERATOR_CHECKPOINT = "generator.lbck"
SEGMENTER_CHECKPOINT = "segmenter.lbck"


class UsageError(ValueError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; validation failures here exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="main.py", description="edge-bridged cross-modality segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def command(name, help_text, *flags):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--out", required=True, help="output directory")
        sub.add_argument("--config", help="config file or preset name (desk, full)")
        sub.add_argument("--seed", type=int)
        for flag in flags:
            if flag == "--manifest":
                sub.add_argument("--manifest", required=True, help="dataset manifest JSON")
            elif flag == "--test-manifest":
                sub.add_argument("--test-manifest", required=True, help="target test manifest JSON")
            elif flag in ("--gen-ckpt", "--seg-ckpt"):
                sub.add_argument(flag, required=True, help="checkpoint file")
            elif flag == "--training":
                sub.add_argument("--epochs", type=int)
                sub.add_argument("--input-size", type=int)
        return sub

    command("synth", "write the synthetic two-modality benchmark")
    edges = command("edges", "canny edge map of one PGM image")
    edges.add_argument("--in", dest="input", required=True, help="input PGM image")
    command("train-gen", "train the edge-to-image generator", "--manifest", "--training")
    command("train-seg", "train the segmenter on generated images", "--manifest", "--gen-ckpt", "--training")
    infer = command("infer", "segment target images through the edge bridge", "--manifest", "--gen-ckpt", "--seg-ckpt")
    infer.add_argument("--input-size", type=int)
    evaluate = command("eval", "score predictions against manifest labels", "--manifest")
    evaluate.add_argument("--in", dest="input", required=True, help="directory of <stem>.pred.pgm files")
    base = command("baseline", "no-adaptation or supervised reference", "--manifest", "--test-manifest", "--training")
    base.add_argument("--mode", required=True, choices=pipeline.BASELINE_MODES)
    ablation = command("ablation", "every generator architecture against every segmenter",
                       "--manifest", "--test-manifest", "--training")
    ablation.add_argument("--generators", default=",".join(available_models()))
    ablation.add_argument("--segmenters", default=",".join(available_models()))
    return parser


def _resolve_config(args):
    config = load_config(args.config).with_overrides(
        seed=args.seed,
        epochs=getattr(args, "epochs", None),
        input_size=getattr(args, "input_size", None),
    )
    config.write_resolved(args.out)
    return config


def _write_record(out_dir: Path, record: pipeline.RunRecord):
    with open(out_dir / f"{record.stage}.record.json", "w", encoding="utf-8") as file:
        json.dump(asdict(record), file, indent=2)


def _kinds(value: str):
    kinds = [kind.strip() for kind in value.split(",") if kind.strip()]
    unknown = [kind for kind in kinds if kind not in available_models()]
    if not kinds or unknown:
        raise UsageError(f"model kinds must come from {available_models()}, got '{value}'")
    return kinds


def run_synth(args, config, out: Path):
    manifests = generate_synthetic_benchmark(config.synth_config(), out)
    for manifest in manifests:
        print(f"{manifest.modality}: {len(manifest)} images")


def run_edges(args, config, out: Path):
    edge_map = edges_from_file(args.input, config.canny)
    path = out / f"{Path(args.input).stem}.edges.pgm"
    write_edge_pgm(edge_map, path)
    print(f"{path}: {int(edge_map.values.sum())} edge pixels")


def run_train_gen(args, config, out: Path):
    cfg = config.generator_config(out / GENERATOR_CHECKPOINT, out)
    result = pipeline.train_generator(load_manifest(args.manifest), cfg)
    _write_record(out, result.record)
    print(f"generator {result.record.checkpoint_id}: final loss {result.record.losses[-1]:.6f}")


def run_train_seg(args, config, out: Path):
    source = load_manifest(args.manifest)
    cfg = config.segmenter_config(source.num_classes, out / SEGMENTER_CHECKPOINT, out)
    result = pipeline.train_segmenter(source, args.gen_ckpt, cfg)
    _write_record(out, result.record)
    print(f"segmenter {result.record.checkpoint_id}: final loss {result.record.losses[-1]:.6f}")


def run_infer(args, config, out: Path):
    target = load_manifest(args.manifest)
    before = [Path(path).read_bytes() for path in (args.gen_ckpt, args.seg_ckpt)]
    predictions = pipeline.adapt_and_segment(target, load_checkpoint(args.gen_ckpt), load_checkpoint(args.seg_ckpt),
                                             config.canny, config.data.input_size)
    if [Path(path).read_bytes() for path in (args.gen_ckpt, args.seg_ckpt)] != before:
        raise pipeline.ParameterMutationError("checkpoint files changed during inference")
    paths = pipeline.write_predictions(predictions, target, out)
    print(f"{len(paths)} predictions written to {out}")


def _load_predictions(manifest: DatasetManifest, directory: Path):
    predictions = []
    for record in manifest.records:
        path = directory / f"{record.stem}.pred.pgm"
        if not path.exists():
            raise UsageError(f"missing prediction {path}")
        predictions.append(load_label(path, manifest.num_classes))
    return predictions


def run_eval(args, config, out: Path):
    manifest = load_manifest(args.manifest)
    if not manifest.labelled:
        raise UsageError(f"{args.manifest} has no labels to evaluate against")
    predictions = _load_predictions(manifest, Path(args.input))
    report = pipeline.evaluate_predictions(predictions, manifest, config.eval.class_names, fast=config.eval.fast_asd)
    write_report(report, out)
    print(report.format_table("LowBridge"))


def _train_test(args):
    return {"train": load_manifest(args.manifest), "target_test": load_manifest(args.test_manifest)}


def run_baseline(args, config, out: Path):
    loaded = _train_test(args)
    train_key = "source_train" if args.mode == "no_adapt" else "target_train"
    manifests = {train_key: loaded["train"], "target_test": loaded["target_test"]}
    cfg = config.segmenter_config(loaded["train"].num_classes, out / f"{args.mode}.lbck", out)
    report = pipeline.baseline(args.mode, manifests, cfg)
    write_report(report, out)
    print(report.format_row(args.mode))


def run_ablation(args, config, out: Path):
    loaded = _train_test(args)
    manifests = {"source_train": loaded["train"], "target_test": loaded["target_test"]}
    gen_cfg = config.generator_config(run_dir=out)
    seg_cfg = config.segmenter_config(loaded["train"].num_classes, run_dir=out)
    reports = pipeline.run_ablation(manifests, gen_cfg, seg_cfg, _kinds(args.generators), _kinds(args.segmenters))
    summary = {}
    for (gen_kind, seg_kind), report in reports.items():
        label = f"{gen_kind}->{seg_kind}"
        summary[label] = report.to_dict()
        print(report.format_row(label))
    with open(out / "ablation.json", "w", encoding="utf-8") as file:
        json.dump(summary, file, indent=2)


COMMANDS = {
    "synth": run_synth,
    "edges": run_edges,
    "train-gen": run_train_gen,
    "train-seg": run_train_seg,
    "infer": run_infer,
    "eval": run_eval,
    "baseline": run_baseline,
    "ablation": run_ablation,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out)
    try:
        config = _resolve_config(args)
        COMMANDS[args.command](args, config, out)
    except ValueError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.debug("run failed", exc_info=True)
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
