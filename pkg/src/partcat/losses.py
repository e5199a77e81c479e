"""Training objectives: per-class BCE, disentanglement, object-part,
compositional (softmax / L1 variants), and the total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelOutputs
from .vocab import Vocabulary

BCE_EPS = 1e-7
KL_EPS = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_obj: float = 1.0
    lambda_part: float = 1.0
    lambda_comp: float = 1.0

    def __post_init__(self):
        if min(self.lambda_obj, self.lambda_part, self.lambda_comp) < 0:
            raise LossError("loss weights must be non-negative")


@dataclass
class GroundTruth:
    masks_obj: np.ndarray        # (h*w, |objects|) binary
    masks_part: np.ndarray       # (h*w, |parts|) binary
    masks_obj_part: np.ndarray   # (h*w, |obj_parts|) binary


def bce(target: np.ndarray, prob: Tensor) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [eps, 1-eps]."""
    target = np.asarray(target)
    prob = prob if isinstance(prob, Tensor) else Tensor(prob)
    if target.shape != prob.shape:
        raise LossError(f"bce shape mismatch: {target.shape} vs {prob.shape}")
    p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = Tensor(target.astype(p.dtype))
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()


def _per_class_bce_sum(target: np.ndarray, prob: Tensor) -> Tensor:
    # columns are equal-sized, so summing per-class means over pixels
    # equals n_classes times the overall mean
    return bce(target, prob) * target.shape[1]


def disentanglement_loss(outputs: ModelOutputs, gt: GroundTruth,
                         weights: LossWeights) -> Tensor:
    if outputs.pred_obj is None or outputs.pred_part is None:
        raise LossError("disentanglement loss needs object and part predictions")
    obj_term = _per_class_bce_sum(gt.masks_obj, outputs.pred_obj)
    part_term = _per_class_bce_sum(gt.masks_part, outputs.pred_part)
    return obj_term * weights.lambda_obj + part_term * weights.lambda_part


def obj_part_loss(outputs: ModelOutputs, gt: GroundTruth) -> Tensor:
    return _per_class_bce_sum(gt.masks_obj_part, outputs.pred_obj_part)


def class_distributions(cost_obj: Tensor, cost_obj_part: Tensor,
                        mode: str = "softmax") -> tuple[Tensor, Tensor]:
    """Per-pixel distributions over object classes and obj-part classes.

    softmax mode exponentiates the raw cosines; l1 mode shifts them by +1
    (cosines are >= -1) and divides by the row sum.
    """
    if mode == "softmax":
        return ad.softmax(cost_obj, axis=-1), ad.softmax(cost_obj_part, axis=-1)
    if mode == "l1":
        out = []
        for cost in (cost_obj, cost_obj_part):
            shifted = (cost + 1.0).clamp_min(0.0)
            row = shifted.sum(axis=-1, keepdims=True)
            if np.any(row.data < 1e-12):
                raise LossError("degenerate all-zero row in l1 normalization")
            out.append(shifted / row)
        return out[0], out[1]
    raise LossError(f"unknown distribution mode {mode!r}")


def aggregate_to_object(p_obj_part: Tensor, vocab: Vocabulary) -> Tensor:
    """Sum obj-part probabilities into their parent object class."""
    p_obj_part = p_obj_part if isinstance(p_obj_part, Tensor) else Tensor(p_obj_part)
    indicator = np.zeros((vocab.n_obj_parts, vocab.n_objects))
    indicator[np.arange(vocab.n_obj_parts), np.asarray(vocab.obj_index)] = 1.0
    return ad.matmul(p_obj_part, Tensor(indicator.astype(p_obj_part.dtype)))


def _kl(p: Tensor, q: Tensor) -> Tensor:
    # summed over classes, still per-pixel
    return (p * (p.clamp_min(KL_EPS).log() - q.clamp_min(KL_EPS).log())).sum(axis=-1)


def compositional_loss(p_obj: Tensor, p_obj_tilde: Tensor,
                       js_midpoint: bool = False) -> Tensor:
    """Symmetrized divergence between the object distribution and the
    part-aggregated object distribution, averaged over pixels.

    Default is the plain symmetrized KL, 0.5*(KL(P||P~) + KL(P~||P));
    `js_midpoint` switches to the midpoint (true Jensen-Shannon) form.
    """
    for name, t in (("p_obj", p_obj), ("p_obj_tilde", p_obj_tilde)):
        rows = t.data.sum(axis=-1)
        if np.any(np.abs(rows - 1.0) > 1e-6):
            raise LossError(f"{name} rows are not normalized")
    if js_midpoint:
        m = (p_obj + p_obj_tilde) * 0.5
        per_pixel = (_kl(p_obj, m) + _kl(p_obj_tilde, m)) * 0.5
    else:
        per_pixel = (_kl(p_obj, p_obj_tilde) + _kl(p_obj_tilde, p_obj)) * 0.5
    return per_pixel.mean()


def total_loss(outputs: ModelOutputs, gt: GroundTruth, vocab: Vocabulary,
               weights: LossWeights, comp_mode: str = "softmax",
               js_midpoint: bool = False) -> Tensor:
    """L = L_obj_part + L_disen + lambda_comp * L_comp (comp gated by mode)."""
    loss = obj_part_loss(outputs, gt)
    if outputs.pred_obj is not None:
        loss = loss + disentanglement_loss(outputs, gt, weights)
    if comp_mode != "off" and outputs.cost_obj is not None:
        p_obj, p_qp = class_distributions(outputs.cost_obj, outputs.cost_obj_part,
                                          mode=comp_mode)
        p_tilde = aggregate_to_object(p_qp, vocab)
        comp = compositional_loss(p_obj, p_tilde, js_midpoint=js_midpoint)
        loss = loss + comp * weights.lambda_comp
    return loss
