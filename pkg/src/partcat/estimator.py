"""Scikit-learn style facade over the training and prediction pipeline.

X is a list of Sample (fit) or Sample/EmbeddingBundle (predict) objects
rather than a 2-D feature matrix; segmentation inputs do not flatten
usefully, but get_params/set_params/clone compose with sklearn tooling.
"""

from __future__ import annotations

from dataclasses import replace

from sklearn.base import BaseEstimator

from .evaluation import LabelMap, predict_oracle_obj, predict_pred_all, \
    report_from_confusion, ConfusionAccumulator
from .model import ModelConfig, forward
from .trainer import TrainConfig, train
from .vocab import Vocabulary


def _check_samples(X, need_gt: bool = False):
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a non-empty list of samples")
    for i, s in enumerate(X):
        if not hasattr(s, "embeddings"):
            raise ValueError(f"X[{i}] is not a Sample (missing embeddings)")
        if need_gt and not hasattr(s, "gt_obj_part_map"):
            raise ValueError(f"X[{i}] has no ground truth")
    return list(X)


class PartSegmenter(BaseEstimator):
    """Fit/predict wrapper around the cost-aggregation model.

    Parameters mirror the model and trainer configs; `vocab` carries the
    class taxonomy the estimator segments against.
    """

    def __init__(self, vocab: Vocabulary | None = None, c: int = 16, d: int = 16,
                 d_dino: int = 8, heads: int = 2, depth: int = 1,
                 guidance: str = "obj,part", learning_rate: float = 1e-4,
                 iterations: int = 2000, batch_size: int = 4,
                 comp_mode: str = "softmax", lambda_comp: float = 1.0,
                 seed: int = 0, tau: float = 0.5, protocol: str = "pred-all"):
        self.vocab = vocab
        self.c = c
        self.d = d
        self.d_dino = d_dino
        self.heads = heads
        self.depth = depth
        self.guidance = guidance
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.comp_mode = comp_mode
        self.lambda_comp = lambda_comp
        self.seed = seed
        self.tau = tau
        self.protocol = protocol

    def _configs(self):
        levels = tuple(g for g in self.guidance.split(",") if g) \
            if self.guidance not in ("", "none") else ()
        mc = ModelConfig(c=self.c, d=self.d, d_dino=self.d_dino, heads=self.heads,
                         depth=self.depth, guidance_levels=levels, seed=self.seed)
        tc = TrainConfig(learning_rate=self.learning_rate,
                         iterations=self.iterations, batch_size=self.batch_size,
                         comp_mode=self.comp_mode, lambda_comp=self.lambda_comp,
                         seed=self.seed)
        return mc, tc

    def fit(self, X, y=None):
        if self.vocab is None:
            raise ValueError("vocab must be set before fitting")
        samples = _check_samples(X, need_gt=True)
        mc, tc = self._configs()
        self.model_config_ = mc
        self.params_, self.train_log_ = train(tc, mc, samples, self.vocab)
        return self

    def predict(self, X) -> list[LabelMap]:
        self._require_fitted()
        samples = _check_samples(X, need_gt=(self.protocol == "oracle-obj"))
        out = []
        for s in samples:
            res = forward(s.embeddings, self.params_, self.vocab, self.model_config_)
            prob = res.pred_obj_part.numpy()
            h, w = s.embeddings.h, s.embeddings.w
            if self.protocol == "oracle-obj":
                out.append(predict_oracle_obj(prob, s.gt_object_map, self.vocab))
            else:
                out.append(predict_pred_all(prob, self.tau, h, w))
        return out

    def score(self, X, y=None) -> float:
        """Harmonic mean of seen/unseen mIoU over X."""
        self._require_fitted()
        samples = _check_samples(X, need_gt=True)
        acc = ConfusionAccumulator(self.vocab.n_obj_parts)
        for s, pred in zip(samples, self.predict(samples)):
            acc.add(pred, s.gt_obj_part_map)
        return report_from_confusion(acc, self.vocab, self.protocol).h_iou

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise ValueError("estimator is not fitted; call fit first")
