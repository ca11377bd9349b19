"""
Image and label I/O (binary PGM), dataset manifests, training augmentations
and the synthetic two-modality benchmark.
"""
import re
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

_HEADER = re.compile(rb"\s+(?:#[^\n]*\n\s*)*(\d+)")


class PgmFormatError(ValueError):
    pass


class PgmMaxvalError(ValueError):
    pass


class PgmTruncatedError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def read_pgm(path) -> Tuple[np.ndarray, int]:
    """Raw P5 samples (uint16 for maxval > 255) and the maxval."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise PgmFormatError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    offset = 2
    fields = []
    for _ in range(3):
        match = _HEADER.match(blob, offset)
        if not match:
            raise PgmFormatError(f"{path}: malformed header")
        fields.append(int(match.group(1)))
        offset = match.end()
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise PgmMaxvalError(f"{path}: maxval {maxval} outside 1..65535")
    offset += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    body = blob[offset:offset + expected]
    if len(body) < expected:
        raise PgmTruncatedError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.uint16), maxval


def write_pgm(path, samples: np.ndarray, maxval: int):
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise PgmFormatError(f"PGM needs a 2-D grid, got shape {samples.shape}")
    if samples.size and (samples.min() < 0 or samples.max() > maxval):
        raise PgmMaxvalError(f"samples exceed maxval {maxval}")
    height, width = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as file:
        file.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        file.write(samples.astype(dtype).tobytes())


def load_image(path) -> np.ndarray:
    samples, maxval = read_pgm(path)
    if maxval not in (255, 65535):
        raise PgmMaxvalError(f"{path}: image maxval must be 255 or 65535, got {maxval}")
    return (samples.astype(np.float64) / maxval).astype(np.float32)


def save_image(path, image: np.ndarray, maxval: int = 65535):
    quantized = np.round(np.clip(image, 0.0, 1.0) * maxval).astype(np.uint16)
    write_pgm(path, quantized, maxval)


def load_label(path, num_classes: int) -> np.ndarray:
    samples, maxval = read_pgm(path)
    if maxval > 255:
        raise PgmMaxvalError(f"{path}: label maps are 8-bit, got maxval {maxval}")
    if maxval != max(1, num_classes - 1):
        raise PgmMaxvalError(f"{path}: label maxval {maxval} does not match {num_classes} classes")
    if samples.size and samples.max() >= num_classes:
        raise LabelRangeError(f"{path}: label value {samples.max()} outside [0, {num_classes})")
    return samples.astype(np.int64)


def save_label(path, label: np.ndarray, num_classes: int):
    write_pgm(path, np.asarray(label, dtype=np.uint8), max(1, num_classes - 1))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    image: str
    label: Optional[str] = None
    spacing_mm: Tuple[float, float] = (1.0, 1.0)

    @property
    def stem(self) -> str:
        return Path(self.image).stem


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    num_classes: int
    modality: str = ""
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.records:
            raise ManifestError("manifest has no records")
        labelled = [r.label is not None for r in self.records]
        if any(labelled) and not all(labelled):
            raise ManifestError("manifest mixes labelled and unlabelled records")
        if self.num_classes < 1:
            raise ManifestError(f"num_classes must be >= 1, got {self.num_classes}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labelled(self) -> bool:
        return self.records[0].label is not None

    def image_path(self, index: int) -> Path:
        return self.base_dir / self.records[index].image

    def label_path(self, index: int) -> Optional[Path]:
        label = self.records[index].label
        return self.base_dir / label if label is not None else None

    def load_image(self, index: int) -> np.ndarray:
        return load_image(self.image_path(index))

    def load_label(self, index: int) -> np.ndarray:
        path = self.label_path(index)
        if path is None:
            raise ManifestError(f"record {index} of '{self.modality}' has no label")
        return load_label(path, self.num_classes)

    def spacing(self, index: int) -> Tuple[float, float]:
        return tuple(self.records[index].spacing_mm)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.num_classes, self.modality, self.base_dir)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "num_classes": self.num_classes,
            "records": [{"image": r.image, "label": r.label, "spacing_mm": list(r.spacing_mm)} for r in self.records],
        }


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as file:
            payload = json.load(file)
        records = [ManifestRecord(r["image"], r.get("label"), tuple(r.get("spacing_mm", (1.0, 1.0))))
                   for r in payload["records"]]
        return DatasetManifest(records, int(payload["num_classes"]), payload.get("modality", ""), path.parent)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: invalid manifest ({e})") from e


def save_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(manifest.to_dict(), file, indent=2)
        file.write("\n")


# ---------------------------------------------------------------------------
# resampling and augmentation
# ---------------------------------------------------------------------------

def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    if image.shape == tuple(size):
        return image
    factors = (size[0] / image.shape[0], size[1] / image.shape[1])
    return ndimage.zoom(image, factors, order=1, mode="nearest", grid_mode=True).astype(image.dtype)


def resize_label(label: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    if label.shape == tuple(size):
        return label
    factors = (size[0] / label.shape[0], size[1] / label.shape[1])
    return ndimage.zoom(label, factors, order=0, mode="nearest", grid_mode=True).astype(label.dtype)


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale: Tuple[float, float] = (0.7, 1.0)
    rotation_deg: float = 25.0
    brightness_gamma: Tuple[float, float] = (0.8, 1.2)
    contrast_gain: Tuple[float, float] = (0.8, 1.2)
    crop: bool = True
    rotate: bool = True
    color: bool = True
    output_size: Optional[Tuple[int, int]] = None
    seed: int = 0

    @classmethod
    def disabled(cls, output_size: Optional[Tuple[int, int]] = None) -> "AugmentationConfig":
        return cls(crop=False, rotate=False, color=False, output_size=output_size)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_rng(seed: int, *indices: int) -> np.random.Generator:
    """Deterministic per-sample generator derived from the run seed and sample coordinates."""
    return np.random.default_rng([seed, *indices])


def augment(image: np.ndarray, label: Optional[np.ndarray], cfg: AugmentationConfig,
            rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Random crop, rotation and intensity jitter. Geometry is shared between the
    image (bilinear) and the label (nearest); intensity changes touch the image only.
    """
    if label is not None and label.shape != image.shape:
        raise ValueError(f"image {image.shape} and label {label.shape} differ")
    size = tuple(cfg.output_size) if cfg.output_size else image.shape
    image = np.asarray(image, dtype=np.float32)

    if cfg.crop:
        area = rng.uniform(*cfg.crop_scale)
        side = np.sqrt(area)
        h, w = image.shape
        ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        image = image[top:top + ch, left:left + cw]
        if label is not None:
            label = label[top:top + ch, left:left + cw]

    if cfg.rotate:
        angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        if angle != 0.0:
            image = ndimage.rotate(image, angle, reshape=False, order=1, mode="nearest")
            if label is not None:
                label = ndimage.rotate(label, angle, reshape=False, order=0, mode="nearest")

    image = resize_image(image, size)
    if label is not None:
        label = resize_label(label, size)

    if cfg.color:
        gamma = float(rng.uniform(*cfg.brightness_gamma))
        gain = float(rng.uniform(*cfg.contrast_gain))
        image = np.clip(image, 0.0, 1.0) ** gamma
        centre = float(image.mean())
        image = (image - centre) * gain + centre

    return np.clip(image, 0.0, 1.0).astype(np.float32), label


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModalityStyle:
    """Rendering rule: clean intensities per class, optional inversion and gamma warp, noise."""
    name: str
    levels: Tuple[float, ...]
    invert: bool = False
    gamma: float = 1.0
    noise_sigma: float = 0.02
    bias_field: float = 0.0
    spacing_mm: Tuple[float, float] = (1.0, 1.0)

    def render(self, label: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clean = np.asarray(self.levels, dtype=np.float64)[label]
        if self.invert:
            clean = 1.0 - clean
        clean = clean ** self.gamma
        if self.bias_field:
            h, w = label.shape
            rows, cols = np.meshgrid(np.linspace(0, np.pi, h), np.linspace(0, np.pi, w), indexing="ij")
            phase = rng.uniform(0, 2 * np.pi)
            clean = clean * (1.0 + self.bias_field * np.sin(rows + cols + phase))
        noisy = clean + rng.normal(0.0, self.noise_sigma, size=label.shape)
        return np.clip(noisy, 0.0, 1.0)


MODALITY_A = ModalityStyle("A", levels=(0.1, 0.6, 0.95), noise_sigma=0.02, spacing_mm=(1.5, 1.5))
MODALITY_B = ModalityStyle("B", levels=(0.1, 0.6, 0.95), invert=True, gamma=1.5, noise_sigma=0.035,
                           bias_field=0.05, spacing_mm=(1.0, 1.0))


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_train: int = 200
    n_test: int = 50
    num_structures: int = 2
    modality_a: ModalityStyle = MODALITY_A
    modality_b: ModalityStyle = MODALITY_B
    seed: int = 1

    @property
    def num_classes(self) -> int:
        return self.num_structures + 1


def _ellipse(shape: Tuple[int, int], centre, radii, angle: float) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = rows - centre[0], cols - centre[1]
    cos, sin = np.cos(angle), np.sin(angle)
    u = (dx * cos + dy * sin) / radii[1]
    v = (-dx * sin + dy * cos) / radii[0]
    return u * u + v * v <= 1.0


def synthetic_anatomy(size: int, num_structures: int, rng: np.random.Generator) -> np.ndarray:
    """
    Nested smooth structures: a large organ ellipse with each further structure
    placed inside the previous one. Later classes overwrite earlier ones.
    """
    label = np.zeros((size, size), dtype=np.int64)
    centre = np.array([size / 2, size / 2]) + rng.uniform(-0.08, 0.08, size=2) * size
    radii = np.array([rng.uniform(0.24, 0.34), rng.uniform(0.24, 0.34)]) * size
    for structure in range(1, num_structures + 1):
        angle = rng.uniform(0, np.pi)
        mask = _ellipse(label.shape, centre, radii, angle)
        label[mask] = structure
        # the next structure sits inside this one
        shrink = rng.uniform(0.4, 0.55)
        offset = rng.uniform(-0.2, 0.2, size=2) * radii * (1 - shrink)
        centre = centre + offset
        radii = radii * shrink
    return label


def generate_synthetic_benchmark(cfg: SynthConfig, out_dir) -> Tuple[DatasetManifest, ...]:
    """
    Writes images, labels and four manifests (a_train, a_test, b_train, b_test)
    under out_dir. Both modalities share the anatomy of each sample index.
    """
    if len(cfg.modality_a.levels) < cfg.num_classes or len(cfg.modality_b.levels) < cfg.num_classes:
        raise ValueError(f"modality styles define fewer intensity levels than {cfg.num_classes} classes")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    manifests = []
    splits = (("train", cfg.n_train), ("test", cfg.n_test))
    records = {(style.name, split): [] for style in (cfg.modality_a, cfg.modality_b) for split, _ in splits}
    for split, count in splits:
        for index in range(count):
            label = synthetic_anatomy(cfg.image_size, cfg.num_structures, rng)
            for style in (cfg.modality_a, cfg.modality_b):
                folder = f"modality_{style.name.lower()}/{split}"
                image_name = f"{folder}/img_{index:04d}.pgm"
                label_name = f"{folder}/label_{index:04d}.pgm"
                save_image(out_dir / image_name, style.render(label, rng))
                save_label(out_dir / label_name, label, cfg.num_classes)
                records[(style.name, split)].append(ManifestRecord(image_name, label_name, style.spacing_mm))
    for style in (cfg.modality_a, cfg.modality_b):
        for split, _ in splits:
            manifest = DatasetManifest(records[(style.name, split)], cfg.num_classes, style.name, out_dir)
            save_manifest(manifest, out_dir / f"{style.name.lower()}_{split}.json")
            manifests.append(manifest)
    logger.info("synthetic benchmark: %d train / %d test pairs in %s", cfg.n_train, cfg.n_test, out_dir)
    return tuple(manifests)
