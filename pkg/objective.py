"""Training losses (generation MSE, cross-entropy + Dice) and the Adam / AdamW optimizers."""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

import tensor
from tensor import Tensor, ShapeError
from model import ParameterSet
from data import LabelRangeError

logger = logging.getLogger(__name__)


class MissingGradientError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha_g: float = 1.0
    alpha_ce: float = 1.0
    alpha_dice: float = 1.0

    def __post_init__(self):
        if min(self.alpha_g, self.alpha_ce, self.alpha_dice) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def loss_gen(g: Tensor, x: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    if g.shape != x.shape:
        raise ShapeError(f"generated batch {g.shape} and target batch {x.shape} differ")
    diff = tensor.sub(g, x)
    return tensor.scale(tensor.mean(tensor.mul(diff, diff)), w.alpha_g)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """N x H x W class indices -> N x n x H x W indicator grid."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"labels must lie in [0, {num_classes}), found [{labels.min()}, {labels.max()}]")
    return (labels[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(dtype)


def _target(logits: Tensor, y: np.ndarray) -> Tensor:
    if logits.data.ndim != 4:
        raise ShapeError(f"logits must be N x n x H x W, got {logits.shape}")
    y = np.asarray(y)
    expected = (logits.shape[0],) + logits.shape[2:]
    if y.shape != expected:
        raise ShapeError(f"labels have shape {y.shape}, logits expect {expected}")
    return Tensor(one_hot(y, logits.shape[1], dtype=logits.data.dtype), dtype=logits.data.dtype)


def loss_ce(logits: Tensor, y: np.ndarray) -> Tensor:
    target = _target(logits, y)
    pixels = logits.shape[0] * logits.shape[2] * logits.shape[3]
    picked = tensor.sum(tensor.mul(tensor.log_softmax_channels(logits), target))
    return tensor.scale(picked, -1.0 / pixels)


def loss_dice(logits: Tensor, y: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - mean over classes (background included) of the smoothed soft Dice."""
    target = _target(logits, y)
    probs = tensor.softmax_channels(logits)
    axes = (0, 2, 3)
    intersection = tensor.sum(tensor.mul(probs, target), axes)
    predicted = tensor.sum(probs, axes)
    truth = Tensor(target.data.sum(axis=axes), dtype=logits.data.dtype)
    numerator = tensor.add_scalar(tensor.scale(intersection, 2.0), smooth)
    denominator = tensor.add_scalar(tensor.add(predicted, truth), smooth)
    return tensor.add_scalar(tensor.scale(tensor.mean(tensor.div(numerator, denominator)), -1.0), 1.0)


def loss_seg(logits: Tensor, y: np.ndarray, w: LossWeights = LossWeights()) -> Tensor:
    ce = tensor.scale(loss_ce(logits, y), w.alpha_ce)
    dice = tensor.scale(loss_dice(logits, y), w.alpha_dice)
    return tensor.add(ce, dice)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be 'adam' or 'adamw', got '{self.kind}'")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(state: OptimizerState, params: ParameterSet):
    """One Adam / AdamW update of every parameter in place; gradients are left for the caller to clear."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {len(missing)} parameter(s), first: {missing[0]}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        theta = t.data
        if state.kind == "adamw" and state.weight_decay:
            theta *= theta.dtype.type(1.0 - state.lr * state.weight_decay)
        grad = t.grad
        m = state.first_moment.setdefault(name, np.zeros_like(theta))
        v = state.second_moment.setdefault(name, np.zeros_like(theta))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        theta -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)
