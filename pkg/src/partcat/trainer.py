"""Optimization loop, checkpointing, and the ablation harness."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluation import MetricsReport, evaluate
from .kvconfig import coerce_dataclass_kv, dataclass_to_kv, read_kv, write_kv
from .losses import LossWeights, total_loss
from .model import ModelConfig, forward, init_params
from .tensorio import read_tensor_container, write_tensor_container
from .vocab import Vocabulary


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 2000       # desk scale; paper-scale runs use 20000
    batch_size: int = 4          # paper-scale runs use 8
    lambda_obj: float = 1.0
    lambda_part: float = 1.0
    lambda_comp: float = 1.0
    comp_mode: str = "softmax"   # softmax | l1 | off
    js_midpoint: bool = False
    seed: int = 0
    checkpoint_interval: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainError("learning rate must be >= 0")
        if self.iterations < 1:
            raise TrainError("iterations must be >= 1")
        if self.comp_mode not in ("softmax", "l1", "off"):
            raise TrainError(f"unknown comp_mode {self.comp_mode!r}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_obj, self.lambda_part, self.lambda_comp)


def load_train_config(path: str | Path) -> TrainConfig:
    return coerce_dataclass_kv(TrainConfig, read_kv(path))


def save_train_config(config: TrainConfig, path: str | Path) -> None:
    write_kv(path, dataclass_to_kv(config))


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)   # dict per iteration

    def append(self, **kv):
        self.entries.append(kv)

    def to_tsv(self) -> str:
        if not self.entries:
            return ""
        cols = list(self.entries[0])
        lines = ["\t".join(cols)]
        for e in self.entries:
            lines.append("\t".join(f"{e[c]:.8g}" if isinstance(e[c], float)
                                   else str(e[c]) for c in cols))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(path: str | Path, params: dict, adam_m: dict, adam_v: dict,
                    step: int) -> None:
    records = {"meta.step": np.array([step], dtype=np.float64)}
    for name in sorted(params):
        records[f"param.{name}"] = params[name].data
        records[f"adam.m.{name}"] = adam_m[name]
        records[f"adam.v.{name}"] = adam_v[name]
    write_tensor_container(path, records)


def load_checkpoint(path: str | Path):
    from .autodiff import Tensor

    rec = read_tensor_container(path)
    step = int(rec["meta.step"][0])
    params, adam_m, adam_v = {}, {}, {}
    for key, arr in rec.items():
        if key.startswith("param."):
            params[key[6:]] = Tensor(arr, requires_grad=True)
        elif key.startswith("adam.m."):
            adam_m[key[7:]] = arr
        elif key.startswith("adam.v."):
            adam_v[key[7:]] = arr
    return params, adam_m, adam_v, step


def load_params(path: str | Path) -> dict:
    params, _, _, _ = load_checkpoint(path)
    return params


# ---------------------------------------------------------------------------
# training

def _batch_indices(n: int, batch_size: int, iteration: int, seed: int) -> list[int]:
    """Deterministic shuffled batches: a fresh seeded permutation per epoch,
    reconstructable at any iteration (checkpoint resume stays bit-exact)."""
    out = []
    for b in range(batch_size):
        pos = iteration * batch_size + b
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 17, epoch]).permutation(n)
        out.append(int(perm[offset]))
    return out


def _restrict_to_seen(samples, vocab: Vocabulary):
    """Drop novel obj-part classes from the class axis for training.

    Novel classes must not appear in the training vocabulary at all --
    keeping their (all-zero) mask columns would actively teach the model
    to suppress them. Parameters do not depend on the number of obj-part
    classes, so the full vocabulary slots back in at eval time.
    """
    seen_vocab, idx = vocab.seen_view()
    out = []
    for s in samples:
        emb = replace(s.embeddings,
                      language_obj_part=s.embeddings.language_obj_part[idx])
        gt = replace(s.gt, masks_obj_part=s.gt.masks_obj_part[:, idx])
        out.append(replace(s, embeddings=emb, gt=gt))
    return out, seen_vocab


def train(config: TrainConfig, model_config: ModelConfig, dataset,
          vocab: Vocabulary, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None) -> tuple[dict, TrainLog]:
    """AdamW (decoupled weight decay) on the total loss over shuffled
    mini-batches; fully deterministic for a fixed seed."""
    samples = list(dataset)
    if not samples:
        raise TrainError("empty training dataset")
    if not all(vocab.seen_mask):
        samples, vocab = _restrict_to_seen(samples, vocab)
    n = len(samples)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        params, adam_m, adam_v, start = load_checkpoint(resume_from)
    else:
        params = init_params(model_config, vocab)
        adam_m = {k: np.zeros_like(t.data) for k, t in params.items()}
        adam_v = {k: np.zeros_like(t.data) for k, t in params.items()}
        start = 0

    weights = config.weights
    log = TrainLog()
    for it in range(start, config.iterations):
        for t in params.values():
            t.zero_grad()
        batch_loss = 0.0
        for idx in _batch_indices(n, config.batch_size, it, config.seed):
            sample = samples[idx]
            out = forward(sample.embeddings, params, vocab, model_config)
            loss = total_loss(out, sample.gt, vocab, weights,
                              comp_mode=config.comp_mode,
                              js_midpoint=config.js_midpoint)
            loss = loss * (1.0 / config.batch_size)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainError(f"non-finite loss at iteration {it}")
            batch_loss += val
            loss.backward()

        t_step = it + 1
        bc1 = 1.0 - config.beta1 ** t_step
        bc2 = 1.0 - config.beta2 ** t_step
        for name in sorted(params):
            p = params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(p.data.dtype, copy=False)
            adam_m[name] = config.beta1 * adam_m[name] + (1 - config.beta1) * g
            adam_v[name] = config.beta2 * adam_v[name] + (1 - config.beta2) * g * g
            m_hat = adam_m[name] / bc1
            v_hat = adam_v[name] / bc2
            update = m_hat / (np.sqrt(v_hat) + config.adam_eps) \
                + config.weight_decay * p.data
            p.data = (p.data - config.learning_rate * update).astype(p.data.dtype)

        log.append(iteration=it, loss=batch_loss)
        if out_dir is not None and config.checkpoint_interval > 0 \
                and t_step % config.checkpoint_interval == 0:
            save_checkpoint(out_dir / f"checkpoint_{t_step:06d}.ptnsr",
                            params, adam_m, adam_v, t_step)

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.ptnsr",
                        params, adam_m, adam_v, config.iterations)
        (out_dir / "train_log.tsv").write_text(log.to_tsv(), encoding="utf-8")
    return params, log


# ---------------------------------------------------------------------------
# ablations

def worker_count() -> int:
    cap = os.environ.get("PARTCAT_THREADS")
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def _run_cell(args):
    label, seed, train_config, model_config, train_samples, eval_samples, vocab, tau = args
    tc = replace(train_config, seed=seed)
    mc = replace(model_config, seed=seed)
    params, _ = train(tc, mc, train_samples, vocab)
    reports = {
        proto: evaluate(params, eval_samples, vocab, mc, proto, tau=tau)
        for proto in ("pred-all", "oracle-obj")
    }
    return label, seed, reports


def run_ablation(cells, train_samples, eval_samples, vocab: Vocabulary,
                 seeds=(0, 1, 2), tau: float = 0.5,
                 parallel: bool = True) -> dict:
    """Train and evaluate every (label, train_config, model_config) cell on
    shared data with shared seeds.

    Returns {label: {protocol: {metric: median over seeds}, "reports": ...}}.
    """
    jobs = [(label, seed, tc, mc, train_samples, eval_samples, vocab, tau)
            for (label, tc, mc) in cells for seed in seeds]
    if parallel and len(jobs) > 1 and worker_count() > 1:
        with ProcessPoolExecutor(max_workers=min(worker_count(), len(jobs))) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    table: dict = {}
    for label, seed, reports in results:
        table.setdefault(label, {"reports": {}})["reports"][seed] = reports
    for label, row in table.items():
        for proto in ("pred-all", "oracle-obj"):
            per_seed = [row["reports"][s][proto] for s in sorted(row["reports"])]
            row[proto] = {
                key: float(np.median([getattr(r, key) for r in per_seed]))
                for key in ("miou_seen", "miou_unseen", "h_iou",
                            "recall_seen", "recall_unseen", "h_recall")
            }
    return table


def standard_ablation_cells(base_train: TrainConfig, base_model: ModelConfig,
                            axis: str = "comp"):
    """The two standard ablation matrices: compositional-loss variants and
    per-level structural guidance."""
    if axis == "comp":
        return [
            ("cost-agg", replace(base_train, comp_mode="off"),
             replace(base_model, guidance_levels=())),
            ("+guidance", replace(base_train, comp_mode="off"),
             replace(base_model, guidance_levels=("obj", "part"))),
            ("+guidance+comp-l1", replace(base_train, comp_mode="l1"),
             replace(base_model, guidance_levels=("obj", "part"))),
            ("+guidance+comp-sm", replace(base_train, comp_mode="softmax"),
             replace(base_model, guidance_levels=("obj", "part"))),
        ]
    if axis == "guidance":
        return [
            ("guidance:none", base_train, replace(base_model, guidance_levels=())),
            ("guidance:obj", base_train, replace(base_model, guidance_levels=("obj",))),
            ("guidance:part", base_train, replace(base_model, guidance_levels=("part",))),
            ("guidance:obj+part", base_train,
             replace(base_model, guidance_levels=("obj", "part"))),
        ]
    raise TrainError(f"unknown ablation axis {axis!r}")


def format_ablation_table(table: dict) -> str:
    cols = ["cell", "pred-all seen", "pred-all unseen", "pred-all h-IoU",
            "oracle seen", "oracle unseen", "oracle h-IoU"]
    rows = [cols]
    for label, row in table.items():
        pa, oo = row["pred-all"], row["oracle-obj"]
        rows.append([label] + [f"{v:.4f}" for v in
                               (pa["miou_seen"], pa["miou_unseen"], pa["h_iou"],
                                oo["miou_seen"], oo["miou_unseen"], oo["h_iou"])])
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
    return "\n".join("  ".join(cell.ljust(widths[i])
                               for i, cell in enumerate(row)) for row in rows) + "\n"
