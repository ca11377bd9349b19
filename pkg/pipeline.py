"""
Two-stage training on the source modality, fine-tuning-free inference on the
target modality, and the no-adaptation / supervised reference runs.
"""
import os
import json
import time
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv

import tensor
from tensor import Tensor, no_grad
from edge import CannyParams, extract_edges
from model import (ModelSpec, ParameterSet, build_model, forward_generator, forward_segmenter,
                   freeze, load_checkpoint, predict_labels, save_checkpoint)
from objective import LossWeights, OptimizerState, loss_gen, loss_seg, optimizer_step
from data import (AugmentationConfig, DatasetManifest, augment, resize_image, resize_label,
                  sample_rng, save_label)
from metrics import MetricsReport, evaluate_dataset

load_dotenv()

logger = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class ParameterMutationError(RuntimeError):
    pass


def worker_count() -> int:
    configured = os.getenv("LOWBRIDGE_THREADS")
    if configured:
        try:
            return max(1, int(configured))
        except ValueError:
            raise PipelineError(f"LOWBRIDGE_THREADS must be an integer, got '{configured}'")
    return os.cpu_count() or 1


@dataclass
class TrainConfig:
    model: ModelSpec
    epochs: int = 100
    batch_size: int = 4
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    input_size: int = 224
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    canny: CannyParams = field(default_factory=CannyParams)
    checkpoint_path: Optional[str] = None
    run_dir: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise PipelineError(f"epochs and batch_size must be positive, got {self.epochs} and {self.batch_size}")
        step = 2 ** self.model.depth
        if self.input_size % step:
            raise PipelineError(f"input_size {self.input_size} is not divisible by 2^depth = {step}")

    @classmethod
    def generator(cls, **overrides) -> "TrainConfig":
        defaults = dict(model=ModelSpec.generator(), batch_size=6, optimizer="adam", lr=1e-4)
        defaults.update(overrides)
        return cls(**defaults)

    @classmethod
    def segmenter(cls, num_classes: int, **overrides) -> "TrainConfig":
        defaults = dict(model=ModelSpec.segmenter(num_classes), batch_size=4, optimizer="adamw", lr=1e-3)
        defaults.update(overrides)
        return cls(**defaults)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json()).hexdigest()


@dataclass
class RunRecord:
    stage: str
    config_hash: str
    epochs: List[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_id: Optional[str] = None

    @property
    def losses(self) -> List[float]:
        return [entry["loss"] for entry in self.epochs]

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as file:
            for entry in self.epochs:
                file.write(json.dumps(entry) + "\n")


@dataclass
class TrainResult:
    params: ParameterSet
    record: RunRecord


CheckpointLike = Union[ParameterSet, str, os.PathLike]


def _resolve(checkpoint: CheckpointLike) -> ParameterSet:
    if isinstance(checkpoint, ParameterSet):
        return checkpoint
    return load_checkpoint(checkpoint)


def _load_all(manifest: DatasetManifest, with_labels: bool) -> Tuple[List[np.ndarray], List[Optional[np.ndarray]]]:
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        images = list(pool.map(manifest.load_image, range(len(manifest))))
        labels = list(pool.map(manifest.load_label, range(len(manifest)))) if with_labels else [None] * len(manifest)
    return images, labels


def _edge_batch(images: np.ndarray, canny: CannyParams) -> np.ndarray:
    return np.stack([extract_edges(image, canny).as_float32() for image in images])[:, None]


def _fit(params: ParameterSet, forward, manifest: DatasetManifest, cfg: TrainConfig, stage: str,
         prepare: Callable[[np.ndarray], np.ndarray],
         loss_fn: Callable[[Tensor, np.ndarray, Optional[np.ndarray]], Tensor], with_labels: bool) -> RunRecord:
    """Shared epoch loop: augment -> prepare -> forward -> loss -> backward -> step."""
    images, labels = _load_all(manifest, with_labels)
    augmentation = replace(cfg.augmentation, output_size=(cfg.input_size, cfg.input_size), seed=cfg.seed)
    state = OptimizerState(cfg.optimizer, cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed)
    record = RunRecord(stage, cfg.config_hash())
    runlog = Path(cfg.run_dir) / f"{stage}.runlog.jsonl" if cfg.run_dir else None
    started = time.perf_counter()
    logger.info("%s: %d samples, %d epochs, batch %d", stage, len(images), cfg.epochs, cfg.batch_size)

    for epoch in range(1, cfg.epochs + 1):
        epoch_start = time.perf_counter()
        order = order_rng.permutation(len(images))
        batch_losses = []
        for first in range(0, len(order), cfg.batch_size):
            batch_images, batch_labels = [], []
            for index in order[first:first + cfg.batch_size]:
                image, label = augment(images[index], labels[index], augmentation, sample_rng(cfg.seed, epoch, int(index)))
                batch_images.append(image)
                batch_labels.append(label)
            stacked = np.stack(batch_images)
            targets = np.stack(batch_labels) if with_labels else None
            output = forward(params, Tensor(prepare(stacked)))
            loss = loss_fn(output, stacked, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"{stage}: loss became {value} at epoch {epoch}; last good checkpoint is epoch {params.epoch}")
            tensor.backward(loss)
            optimizer_step(state, params)
            params.zero_grad()
            batch_losses.append(value)

        params.epoch = epoch
        entry = {"epoch": epoch, "loss": float(np.mean(batch_losses)), "seconds": time.perf_counter() - epoch_start}
        record.epochs.append(entry)
        logger.info("%s epoch %d/%d: loss %.6f", stage, epoch, cfg.epochs, entry["loss"])
        if cfg.checkpoint_path:
            record.checkpoint_id = save_checkpoint(params, cfg.checkpoint_path)
        if runlog:
            record.write_jsonl(runlog)

    record.wall_time = time.perf_counter() - started
    if record.checkpoint_id is None:
        record.checkpoint_id = params.checksum()
    return record


def train_generator(source: DatasetManifest, cfg: TrainConfig) -> TrainResult:
    """Learns to redraw source images from their edge maps (MSE)."""
    if cfg.model.final_activation != "sigmoid" or cfg.model.out_channels != 1 or cfg.model.in_channels != 1:
        raise PipelineError("generator spec must map 1 edge channel to 1 sigmoid image channel")
    params, forward = build_model(cfg.model, cfg.seed)

    def loss_fn(output, images, _):
        return loss_gen(output, Tensor(images[:, None], dtype=output.data.dtype), cfg.weights)

    record = _fit(params, forward, source, cfg, "generator", lambda batch: _edge_batch(batch, cfg.canny), loss_fn, False)
    return TrainResult(params, record)


def generate(gen_params: ParameterSet, images: np.ndarray, canny: CannyParams) -> np.ndarray:
    """Source-style images G(E(x)) for a batch of N x H x W inputs."""
    with no_grad():
        return forward_generator(gen_params, _edge_batch(images, canny)).data


def _check_segmentation_weights(weights: LossWeights):
    if weights.alpha_ce == 0 and weights.alpha_dice == 0:
        raise PipelineError("alpha_ce and alpha_dice are both zero: the segmentation objective is empty")


def _train_segmentation_model(train: DatasetManifest, cfg: TrainConfig, stage: str,
                              prepare: Callable[[np.ndarray], np.ndarray]) -> TrainResult:
    if not train.labelled:
        raise PipelineError(f"{stage} needs a labelled manifest, '{train.modality}' has no labels")
    _check_segmentation_weights(cfg.weights)
    if cfg.model.out_channels != train.num_classes:
        raise PipelineError(f"segmenter has {cfg.model.out_channels} outputs but the data has {train.num_classes} classes")
    params, forward = build_model(cfg.model, cfg.seed)

    def loss_fn(output, _, labels):
        return loss_seg(output, labels, cfg.weights)

    record = _fit(params, forward, train, cfg, stage, prepare, loss_fn, True)
    return TrainResult(params, record)


def train_segmenter(source: DatasetManifest, gen_ckpt: CheckpointLike, cfg: TrainConfig) -> TrainResult:
    """Segmenter trained on G(E(augment(x))) with the generator frozen."""
    if not source.labelled:
        raise PipelineError(f"train_segmenter needs a labelled manifest, '{source.modality}' has no labels")
    _check_segmentation_weights(cfg.weights)
    gen_params = freeze(_resolve(gen_ckpt))
    before = gen_params.checksum()
    result = _train_segmentation_model(source, cfg, "segmenter",
                                       lambda batch: generate(gen_params, batch, cfg.canny))
    if gen_params.checksum() != before:
        raise ParameterMutationError("generator parameters changed while training the segmenter")
    return result


def _network_input(image: np.ndarray, input_size: Optional[int]) -> np.ndarray:
    return resize_image(image, (input_size, input_size)) if input_size else image


def adapt_and_segment(target: DatasetManifest, gen_ckpt: CheckpointLike, seg_ckpt: CheckpointLike,
                      canny: CannyParams = CannyParams(), input_size: Optional[int] = None) -> List[np.ndarray]:
    """
    Label maps p = argmax softmax S(G(E(x))) for every target image; no
    parameter is touched.
    """
    gen_params = freeze(_resolve(gen_ckpt))
    seg_params = freeze(_resolve(seg_ckpt))
    if seg_params.spec is not None and seg_params.spec.out_channels != target.num_classes:
        raise PipelineError(f"segmenter predicts {seg_params.spec.out_channels} classes, "
                            f"target manifest has {target.num_classes}")
    before = (gen_params.checksum(), seg_params.checksum())

    def segment_one(index: int) -> np.ndarray:
        image = target.load_image(index)
        x = _network_input(image, input_size)
        generated = generate(gen_params, x[None], canny)
        prediction = predict_labels(forward_segmenter(seg_params, generated))[0]
        return resize_label(prediction, image.shape)

    with no_grad(), ThreadPoolExecutor(max_workers=worker_count()) as pool:
        predictions = list(pool.map(segment_one, range(len(target))))

    if (gen_params.checksum(), seg_params.checksum()) != before:
        raise ParameterMutationError("model parameters changed during inference")
    logger.info("segmented %d '%s' images", len(predictions), target.modality)
    return predictions


def segment_raw(seg_ckpt: CheckpointLike, target: DatasetManifest, input_size: Optional[int] = None) -> List[np.ndarray]:
    """Segmenter applied straight to the raw images, no edge bridge."""
    seg_params = freeze(_resolve(seg_ckpt))

    def segment_one(index: int) -> np.ndarray:
        image = target.load_image(index)
        x = _network_input(image, input_size)
        return resize_label(predict_labels(forward_segmenter(seg_params, x[None]))[0], image.shape)

    with no_grad(), ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(segment_one, range(len(target))))


def evaluate_predictions(predictions: Sequence[np.ndarray], manifest: DatasetManifest,
                         class_names: Optional[List[str]] = None, fast: bool = False) -> MetricsReport:
    if not manifest.labelled:
        raise PipelineError(f"cannot evaluate against unlabelled manifest '{manifest.modality}'")
    truths = [manifest.load_label(i) for i in range(len(manifest))]
    spacings = [manifest.spacing(i) for i in range(len(manifest))]
    return evaluate_dataset(predictions, truths, spacings, manifest.num_classes, class_names, fast=fast)


def write_predictions(predictions: Sequence[np.ndarray], manifest: DatasetManifest, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    paths = []
    for index, prediction in enumerate(predictions):
        path = out_dir / f"{manifest.records[index].stem}.pred.pgm"
        save_label(path, prediction, manifest.num_classes)
        paths.append(path)
    return paths


BASELINE_MODES = ("no_adapt", "supervised")


def baseline(mode: str, manifests: Mapping[str, DatasetManifest], cfg: TrainConfig) -> MetricsReport:
    """
    no_adapt: segmenter trained on raw source images, tested on raw target images.
    supervised: trained and tested within the target modality.
    manifests keys: source_train (no_adapt), target_train (supervised), target_test (both).
    """
    if mode not in BASELINE_MODES:
        raise PipelineError(f"baseline mode must be one of {BASELINE_MODES}, got '{mode}'")
    train_key = "source_train" if mode == "no_adapt" else "target_train"
    for key in (train_key, "target_test"):
        if key not in manifests:
            raise PipelineError(f"baseline '{mode}' needs the '{key}' manifest")
        if not manifests[key].labelled:
            raise PipelineError(f"baseline '{mode}' needs labels in '{key}'")
    result = _train_segmentation_model(manifests[train_key], cfg, mode, lambda batch: batch[:, None])
    predictions = segment_raw(result.params, manifests["target_test"], cfg.input_size)
    report = evaluate_predictions(predictions, manifests["target_test"])
    logger.info("baseline %s: mean foreground Dice %.3f", mode, report.average_dice)
    return report


def run_lowbridge(manifests: Mapping[str, DatasetManifest], gen_cfg: TrainConfig,
                  seg_cfg: TrainConfig) -> Tuple[MetricsReport, TrainResult, TrainResult]:
    """Both training stages on source_train, then edge-bridged inference on target_test."""
    generator = train_generator(manifests["source_train"], gen_cfg)
    segmenter = train_segmenter(manifests["source_train"], generator.params, seg_cfg)
    predictions = adapt_and_segment(manifests["target_test"], generator.params, segmenter.params,
                                    seg_cfg.canny, seg_cfg.input_size)
    return evaluate_predictions(predictions, manifests["target_test"]), generator, segmenter


def run_ablation(manifests: Mapping[str, DatasetManifest], gen_cfg: TrainConfig, seg_cfg: TrainConfig,
                 generator_kinds: Sequence[str], segmenter_kinds: Sequence[str]) -> Dict[Tuple[str, str], MetricsReport]:
    """Every generator architecture against every segmenter architecture."""
    reports = {}
    for gen_kind in generator_kinds:
        generator = train_generator(manifests["source_train"],
                                    replace(gen_cfg, model=replace(gen_cfg.model, kind=gen_kind), checkpoint_path=None))
        for seg_kind in segmenter_kinds:
            cfg = replace(seg_cfg, model=replace(seg_cfg.model, kind=seg_kind), checkpoint_path=None)
            segmenter = train_segmenter(manifests["source_train"], generator.params, cfg)
            predictions = adapt_and_segment(manifests["target_test"], generator.params, segmenter.params,
                                            cfg.canny, cfg.input_size)
            reports[(gen_kind, seg_kind)] = evaluate_predictions(predictions, manifests["target_test"])
            logger.info("ablation %s -> %s: %s", gen_kind, seg_kind, reports[(gen_kind, seg_kind)].format_row("dice/asd"))
    return reports
