"""
Run configuration file: JSON with the sections data, canny, generator,
segmenter, train and eval. Unknown keys are rejected; command-line flags
override file values; the resolved document is echoed into every run directory.
"""
import json
import hashlib
import logging
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path
from typing import List, Optional

from edge import CannyParams
from model import ModelSpec
from objective import LossWeights
from data import AugmentationConfig, SynthConfig
from pipeline import TrainConfig

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "static_content"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    input_size: int = 64
    image_size: int = 64
    n_train: int = 200
    n_test: int = 50
    num_structures: int = 2


@dataclass
class StageSection:
    kind: str = "unet"
    base_channels: int = 16
    depth: int = 4
    epochs: int = 100
    batch_size: int = 4
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01


@dataclass
class TrainSection:
    seed: int = 1
    alpha_g: float = 1.0
    alpha_ce: float = 1.0
    alpha_dice: float = 1.0
    augmentation: dict = field(default_factory=dict)


@dataclass
class EvalSection:
    class_names: Optional[List[str]] = None
    fast_asd: bool = False


def _section(cls, payload: dict, name: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    return cls(**payload)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    canny: CannyParams = field(default_factory=CannyParams)
    generator: StageSection = field(default_factory=lambda: StageSection(batch_size=6, optimizer="adam", lr=1e-4, weight_decay=0.0))
    segmenter: StageSection = field(default_factory=StageSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        sections = [f.name for f in fields(cls)]
        unknown = sorted(set(payload) - set(sections))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        defaults = cls()
        try:
            resolved = {}
            for name in sections:
                current = getattr(defaults, name)
                given = payload.get(name, {})
                if not isinstance(given, dict):
                    raise ConfigError(f"section '{name}' must be an object")
                values = asdict(current)
                if name == "canny" and "kernel_radius" not in given:
                    values["kernel_radius"] = None
                values.update(given)
                resolved[name] = _section(type(current), values, name)
            config = cls(**resolved)
            config.augmentation()
            return config
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def with_overrides(self, seed: Optional[int] = None, epochs: Optional[int] = None,
                       input_size: Optional[int] = None) -> "RunConfig":
        config = self
        if seed is not None:
            config = replace(config, train=replace(config.train, seed=seed))
        if epochs is not None:
            config = replace(config, generator=replace(config.generator, epochs=epochs),
                             segmenter=replace(config.segmenter, epochs=epochs))
        if input_size is not None:
            config = replace(config, data=replace(config.data, input_size=input_size))
        return config

    def to_dict(self) -> dict:
        return asdict(self)

    def weights(self) -> LossWeights:
        return LossWeights(self.train.alpha_g, self.train.alpha_ce, self.train.alpha_dice)

    def augmentation(self) -> AugmentationConfig:
        options = dict(self.train.augmentation)
        unknown = sorted(set(options) - {f.name for f in fields(AugmentationConfig)})
        if unknown:
            raise ConfigError(f"unknown key(s) in section 'train.augmentation': {', '.join(unknown)}")
        for key in ("crop_scale", "brightness_gamma", "contrast_gain", "output_size"):
            if options.get(key) is not None:
                options[key] = tuple(options[key])
        return AugmentationConfig(**options)

    def _stage(self, stage: StageSection, spec: ModelSpec, checkpoint_path, run_dir) -> TrainConfig:
        return TrainConfig(
            model=spec,
            epochs=stage.epochs,
            batch_size=stage.batch_size,
            optimizer=stage.optimizer,
            lr=stage.lr,
            weight_decay=stage.weight_decay,
            weights=self.weights(),
            input_size=self.data.input_size,
            seed=self.train.seed,
            augmentation=self.augmentation(),
            canny=self.canny,
            checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
            run_dir=str(run_dir) if run_dir else None,
        )

    def generator_config(self, checkpoint_path=None, run_dir=None) -> TrainConfig:
        g = self.generator
        return self._stage(g, ModelSpec.generator(g.kind, g.base_channels, g.depth), checkpoint_path, run_dir)

    def segmenter_config(self, num_classes: int, checkpoint_path=None, run_dir=None) -> TrainConfig:
        s = self.segmenter
        return self._stage(s, ModelSpec.segmenter(num_classes, s.kind, s.base_channels, s.depth), checkpoint_path, run_dir)

    def synth_config(self) -> SynthConfig:
        d = self.data
        return SynthConfig(image_size=d.image_size, n_train=d.n_train, n_test=d.n_test,
                           num_structures=d.num_structures, seed=self.train.seed)

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True).encode("utf-8")

    def write_resolved(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.resolved.json"
        path.write_bytes(self.to_json())
        logger.debug("resolved config %s written to %s", hashlib.sha256(self.to_json()).hexdigest()[:12], path)
        return path


def load_config(path=None) -> RunConfig:
    """A config file path, a preset name from static_content/ ('desk', 'full') or None for defaults."""
    if path is None:
        return RunConfig()
    candidate = Path(path)
    if not candidate.exists() and (PRESET_DIR / f"{path}.json").exists():
        candidate = PRESET_DIR / f"{path}.json"
    if not candidate.exists():
        raise ConfigError(f"config file '{path}' not found")
    try:
        with open(candidate, encoding="utf-8") as file:
            payload = json.load(file)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{candidate}: invalid JSON ({e})") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"{candidate}: top level must be an object")
    return RunConfig.from_dict(payload)
