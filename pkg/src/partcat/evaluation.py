"""Prediction protocols and segmentation metrics.

Pred-All decodes every pixel from the obj-part probabilities alone, with a
sigmoid threshold deciding background. Oracle-Obj restricts the argmax at
each pixel to the parts of the ground-truth object there. Metrics come from
one confusion table accumulated over the whole dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import Vocabulary

BACKGROUND = -1
PGM_BACKGROUND = 255


class EvalError(ValueError):
    pass


@dataclass
class LabelMap:
    """Per-pixel class indices; BACKGROUND (-1) marks unlabeled pixels."""

    h: int
    w: int
    labels: np.ndarray   # (h, w) int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.h, self.w):
            raise EvalError(f"labels shape {self.labels.shape} != ({self.h},{self.w})")

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


def predict_pred_all(prob: np.ndarray, tau: float, h: int, w: int) -> LabelMap:
    """Argmax over classes; below-threshold pixels become background.

    Ties resolve to the lowest class index (argmax convention).
    """
    if not 0.0 < tau < 1.0:
        raise EvalError(f"tau must lie in (0,1), got {tau}")
    prob = np.asarray(prob)
    best = prob.argmax(axis=1)
    labels = np.where(prob[np.arange(prob.shape[0]), best] > tau, best, BACKGROUND)
    return LabelMap(h, w, labels.reshape(h, w))


def predict_oracle_obj(prob: np.ndarray, gt_object: LabelMap,
                       vocab: Vocabulary) -> LabelMap:
    """Restrict each pixel's argmax to the parts of its GT object."""
    prob = np.asarray(prob)
    flat_obj = gt_object.flat()
    if prob.shape[0] != flat_obj.size:
        raise EvalError("probability rows != object map pixels")
    labels = np.full(flat_obj.size, BACKGROUND, dtype=np.int64)
    for o in np.unique(flat_obj):
        if o == BACKGROUND:
            continue
        parts = vocab.parts_of_object(int(o))
        if not parts:
            raise EvalError(f"object {vocab.objects[int(o)]!r} has no parts in vocabulary")
        pix = np.flatnonzero(flat_obj == o)
        sub = prob[np.ix_(pix, parts)]
        labels[pix] = np.asarray(parts)[sub.argmax(axis=1)]
    return LabelMap(gt_object.h, gt_object.w, labels.reshape(gt_object.h, gt_object.w))


# ---------------------------------------------------------------------------
# confusion accumulation

class ConfusionAccumulator:
    """Global (n_classes+1)^2 confusion counts; slot n_classes = background."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.table = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)

    def add(self, pred: LabelMap, gt: LabelMap) -> None:
        if (pred.h, pred.w) != (gt.h, gt.w):
            raise EvalError("prediction/GT dimensions differ")
        p = pred.flat().copy()
        g = gt.flat().copy()
        p[p == BACKGROUND] = self.n_classes
        g[g == BACKGROUND] = self.n_classes
        idx = g * (self.n_classes + 1) + p
        self.table += np.bincount(idx, minlength=(self.n_classes + 1) ** 2) \
            .reshape(self.n_classes + 1, self.n_classes + 1)

    def merge(self, other: "ConfusionAccumulator") -> None:
        self.table += other.table

    def iou(self) -> dict[int, float]:
        """Per-class IoU over foreground classes; absent classes omitted."""
        out = {}
        for c in range(self.n_classes):
            inter = self.table[c, c]
            union = self.table[c, :].sum() + self.table[:, c].sum() - inter
            if union > 0:
                out[c] = inter / union
        return out

    def recall(self) -> dict[int, float]:
        out = {}
        for c in range(self.n_classes):
            gt_total = self.table[c, :].sum()
            if gt_total > 0:
                out[c] = self.table[c, c] / gt_total
        return out


def iou_per_class(pred: LabelMap, gt: LabelMap, n_classes: int) -> dict[int, float]:
    acc = ConfusionAccumulator(n_classes)
    acc.add(pred, gt)
    return acc.iou()


def recall_per_class(pred: LabelMap, gt: LabelMap, n_classes: int) -> dict[int, float]:
    acc = ConfusionAccumulator(n_classes)
    acc.add(pred, gt)
    return acc.recall()


def mean_iou(per_class: dict[int, float], class_subset) -> float:
    vals = [per_class[c] for c in class_subset if c in per_class]
    if not vals:
        raise EvalError("no defined classes in subset")
    return float(np.mean(vals))


def harmonic_mean(a: float, b: float) -> float:
    if a <= 0 or b <= 0:
        raise EvalError(f"harmonic mean needs positive inputs, got {a}, {b}")
    return 2.0 * a * b / (a + b)


@dataclass
class MetricsReport:
    protocol: str
    per_class_iou: dict[int, float]
    per_class_recall: dict[int, float]
    miou_seen: float
    miou_unseen: float
    h_iou: float
    recall_seen: float
    recall_unseen: float
    h_recall: float

    def to_kv(self, vocab: Vocabulary | None = None) -> str:
        lines = [f"protocol={self.protocol}"]
        for key in ("miou_seen", "miou_unseen", "h_iou",
                    "recall_seen", "recall_unseen", "h_recall"):
            lines.append(f"{key}={getattr(self, key):.6f}")
        for c in sorted(self.per_class_iou):
            name = vocab.obj_parts[c] if vocab else str(c)
            lines.append(f"iou[{name}]={self.per_class_iou[c]:.6f}")
        for c in sorted(self.per_class_recall):
            name = vocab.obj_parts[c] if vocab else str(c)
            lines.append(f"recall[{name}]={self.per_class_recall[c]:.6f}")
        return "\n".join(lines) + "\n"

    def format_table(self, vocab: Vocabulary | None = None) -> str:
        rows = [("metric", "seen", "unseen", "harmonic"),
                ("IoU", f"{self.miou_seen:.4f}", f"{self.miou_unseen:.4f}",
                 f"{self.h_iou:.4f}"),
                ("Recall", f"{self.recall_seen:.4f}", f"{self.recall_unseen:.4f}",
                 f"{self.h_recall:.4f}")]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
                 for row in rows]
        return f"[{self.protocol}]\n" + "\n".join(lines) + "\n"


def report_from_confusion(acc: ConfusionAccumulator, vocab: Vocabulary,
                          protocol: str) -> MetricsReport:
    iou = acc.iou()
    rec = acc.recall()
    seen = vocab.seen_obj_parts()
    novel = vocab.novel_obj_parts()
    miou_seen = mean_iou(iou, seen)
    miou_unseen = mean_iou(iou, novel)
    rec_seen = mean_iou(rec, seen)
    rec_unseen = mean_iou(rec, novel)
    return MetricsReport(
        protocol=protocol,
        per_class_iou=iou,
        per_class_recall=rec,
        miou_seen=miou_seen,
        miou_unseen=miou_unseen,
        h_iou=harmonic_mean(miou_seen, miou_unseen) if min(miou_seen, miou_unseen) > 0 else 0.0,
        recall_seen=rec_seen,
        recall_unseen=rec_unseen,
        h_recall=harmonic_mean(rec_seen, rec_unseen) if min(rec_seen, rec_unseen) > 0 else 0.0,
    )


def evaluate(params: dict, dataset, vocab: Vocabulary, config, protocol: str,
             tau: float = 0.5) -> MetricsReport:
    """Forward + protocol decoding per sample, one global confusion table."""
    from .model import forward  # local import to avoid a cycle

    if protocol not in ("pred-all", "oracle-obj"):
        raise EvalError(f"unknown protocol {protocol!r}")
    samples = list(dataset)
    if not samples:
        raise EvalError("empty evaluation dataset")
    acc = ConfusionAccumulator(vocab.n_obj_parts)
    for i, sample in enumerate(samples):
        try:
            out = forward(sample.embeddings, params, vocab, config)
            prob = out.pred_obj_part.numpy()
            h, w = sample.gt_obj_part_map.h, sample.gt_obj_part_map.w
            if protocol == "pred-all":
                pred = predict_pred_all(prob, tau, h, w)
            else:
                pred = predict_oracle_obj(prob, sample.gt_object_map, vocab)
            acc.add(pred, sample.gt_obj_part_map)
        except Exception as exc:
            raise EvalError(f"sample {i}: {exc}") from exc
    return report_from_confusion(acc, vocab, protocol)


# ---------------------------------------------------------------------------
# P5 graymap I/O

def write_pgm(path: str | Path, label_map: LabelMap) -> None:
    """Binary P5 graymap; 255 encodes background, classes use 0..254."""
    labels = label_map.labels
    if labels.max(initial=-1) > 254:
        raise EvalError("more than 255 classes cannot be stored in a P5 map")
    body = labels.copy()
    body[body == BACKGROUND] = PGM_BACKGROUND
    header = f"P5\n{label_map.w} {label_map.h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + body.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> LabelMap:
    raw = Path(path).read_bytes()
    off = 0

    def token() -> bytes:
        nonlocal off
        while off < len(raw) and raw[off:off + 1].isspace():
            off += 1
        start = off
        while off < len(raw) and not raw[off:off + 1].isspace():
            off += 1
        return raw[start:off]

    if token() != b"P5":
        raise EvalError(f"{path}: not a P5 graymap")
    w, h, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise EvalError(f"{path}: expected maxval 255")
    off += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(raw[off:off + h * w], dtype=np.uint8)
    if pixels.size != h * w:
        raise EvalError(f"{path}: truncated pixel data")
    labels = pixels.astype(np.int64).reshape(h, w)
    labels[labels == PGM_BACKGROUND] = BACKGROUND
    return LabelMap(h, w, labels)


def write_class_sidecar(path: str | Path, vocab: Vocabulary) -> None:
    lines = [f"{i}\t{name}" for i, name in enumerate(vocab.obj_parts)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
