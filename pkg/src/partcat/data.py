"""Synthetic compositional-shapes dataset and pseudo-encoder embeddings.

Each sample places one object template (a set of rectangular part regions)
on a small grid with jitter, rasterizes object / part / obj-part label
maps, and derives deterministic embeddings from shared seeded factor
matrices: one row per object class, one per generalized part. Novel
classes are unseen combinations of factors that individually appear in
training, which is what makes zero-shot transfer possible at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .evaluation import BACKGROUND, LabelMap, read_pgm, write_pgm
from .losses import GroundTruth
from .model import EmbeddingBundle
from .tensorio import read_tensor_container, write_tensor_container
from .vocab import Vocabulary


class DataError(ValueError):
    pass


Region = tuple[float, float, float, float]   # x0, y0, x1, y1 in the unit square


@dataclass(frozen=True)
class SceneSpec:
    h: int = 10
    w: int = 10
    # object class -> [(generalized part name, canonical region), ...]
    templates: dict = None
    jitter: float = 0.1          # max placement offset, fraction of grid
    label_noise: float = 0.0     # chance a part pixel's obj-part annotation
                                 # is attributed to the wrong object
    sigma: float = 0.1           # embedding noise scale
    c: int = 16
    d_dino: int = 8
    embed_seed: int = 0          # seeds the dataset-wide factor matrices
    text_obj_weight: float = 1.0  # object-factor weight in composite text

    def __post_init__(self):
        if self.templates is None:
            object.__setattr__(self, "templates", {})
        for obj, parts in self.templates.items():
            if not parts:
                raise DataError(f"object template {obj!r} has no parts")
            for part, (x0, y0, x1, y1) in parts:
                if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                    raise DataError(f"region for {obj!r}/{part!r} outside unit square")


@dataclass
class Sample:
    sample_id: str
    embeddings: EmbeddingBundle
    gt: GroundTruth
    gt_object_map: LabelMap
    gt_obj_part_map: LabelMap


# ---------------------------------------------------------------------------
# factor matrices shared across one dataset

def factor_matrices(vocab: Vocabulary, c: int, seed: int):
    """(objects x c, parts x c, background c) Gaussian factors."""
    rng = np.random.default_rng([seed, 101])
    w_obj = rng.normal(size=(vocab.n_objects, c))
    w_part = rng.normal(size=(vocab.n_parts, c))
    background = rng.normal(size=c)
    return w_obj, w_part, background


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_visual_embeddings(obj_part_map: LabelMap, vocab: Vocabulary,
                            c: int, sigma: float, factor_seed: int,
                            noise_seed: int = 0) -> np.ndarray:
    """Unit-norm per-pixel embeddings built from object+part factors.

    Factor matrices are shared dataset-wide via `factor_seed`; per-pixel
    noise draws from a stream keyed by (noise_seed, pixel index).
    """
    w_obj, w_part, background = factor_matrices(vocab, c, factor_seed)
    flat = obj_part_map.flat()
    base = np.empty((flat.size, c))
    for i, q in enumerate(flat):
        if q == BACKGROUND:
            base[i] = background
        else:
            base[i] = w_obj[vocab.object_of(int(q))] + w_part[vocab.part_of(int(q))]
        if sigma > 0:
            base[i] += sigma * np.random.default_rng([noise_seed, 211, i]).normal(size=c)
    return _normalize_rows(base)


def synth_language_embeddings(vocab: Vocabulary, c: int, seed: int,
                              obj_weight: float = 1.0):
    """Text embeddings from the same factors as the visual generator, so
    novel obj-part embeddings are composable from seen factors.

    `obj_weight` scales the object factor inside the COMPOSITE obj-part
    embeddings only. Below 1 it mimics composite prompts being dominated
    by the part word: direct visual/obj-part similarity then confuses the
    same part across objects, while the separate object and part
    embeddings stay clean.
    """
    w_obj, w_part, _ = factor_matrices(vocab, c, seed)
    lang_obj = _normalize_rows(w_obj)
    lang_part = _normalize_rows(w_part)
    lang_qp = _normalize_rows(
        obj_weight * w_obj[np.asarray(vocab.obj_index)]
        + w_part[np.asarray(vocab.part_index)])
    return lang_obj, lang_part, lang_qp


def synth_structural_features(obj_part_map: LabelMap, vocab: Vocabulary,
                              d_dino: int, seed: int) -> np.ndarray:
    """Structure-only features: shared per generalized part across objects,
    plus a smooth positional term."""
    rng = np.random.default_rng([seed, 307])
    u = rng.normal(size=(vocab.n_parts, d_dino))
    bg = rng.normal(size=d_dino)
    pos_proj = rng.normal(size=(4, d_dino))
    h, w = obj_part_map.h, obj_part_map.w
    ys, xs = np.divmod(np.arange(h * w), w)
    phase_x, phase_y = 2 * np.pi * xs / w, 2 * np.pi * ys / h
    pos = np.stack([np.sin(phase_x), np.cos(phase_x),
                    np.sin(phase_y), np.cos(phase_y)], axis=1) @ pos_proj
    flat = obj_part_map.flat()
    base = np.where(flat[:, None] == BACKGROUND, bg[None, :],
                    u[[vocab.part_of(int(q)) if q != BACKGROUND else 0 for q in flat]])
    return _normalize_rows(base + 0.25 * pos)


# ---------------------------------------------------------------------------
# scene generation

def _rasterize(spec: SceneSpec, vocab: Vocabulary, obj_name: str,
               rng: np.random.Generator) -> tuple[LabelMap, LabelMap]:
    h, w = spec.h, spec.w
    dx = rng.uniform(-spec.jitter, spec.jitter) * w
    dy = rng.uniform(-spec.jitter, spec.jitter) * h
    obj_idx = vocab.objects.index(obj_name)
    qp = np.full((h, w), BACKGROUND, dtype=np.int64)
    for part_name, (x0, y0, x1, y1) in spec.templates[obj_name]:
        try:
            q = vocab.obj_parts.index(f"{obj_name}'s {part_name}")
        except ValueError:
            raise DataError(f"template references unknown class "
                            f"{obj_name!r}/{part_name!r}") from None
        c0, c1 = int(round(x0 * w + dx)), int(round(x1 * w + dx))
        r0, r1 = int(round(y0 * h + dy)), int(round(y1 * h + dy))
        qp[max(r0, 0):min(r1, h), max(c0, 0):min(c1, w)] = q
    obj_map = np.where(qp == BACKGROUND, BACKGROUND, obj_idx)
    return LabelMap(h, w, obj_map), LabelMap(h, w, qp)


def _annotation_noise(qp_map: LabelMap, vocab: Vocabulary, rate: float,
                      rng: np.random.Generator) -> LabelMap:
    """Annotation-layer corruption: with probability `rate` a foreground
    pixel's obj-part label is re-attributed to the same generalized part of
    another (seen) object. Pixel appearance, the true maps, and the object
    and part masks are unaffected; only the obj-part supervision carries
    the error."""
    labels = qp_map.labels.copy()
    seen = set(vocab.seen_obj_parts())
    for i, q in enumerate(labels.flat):
        if q == BACKGROUND or rng.uniform() >= rate:
            continue
        alts = [q2 for q2 in seen
                if q2 != q and vocab.part_of(q2) == vocab.part_of(int(q))]
        if alts:
            labels.flat[i] = alts[rng.integers(len(alts))]
    return LabelMap(qp_map.h, qp_map.w, labels)


def masks_from_maps(obj_map: LabelMap, qp_map: LabelMap,
                    vocab: Vocabulary) -> GroundTruth:
    def onehot(flat, n):
        m = np.zeros((flat.size, n), dtype=np.float64)
        fg = flat != BACKGROUND
        m[np.flatnonzero(fg), flat[fg]] = 1.0
        return m

    qp_flat = qp_map.flat()
    part_flat = np.array([vocab.part_of(int(q)) if q != BACKGROUND else BACKGROUND
                          for q in qp_flat])
    return GroundTruth(
        masks_obj=onehot(obj_map.flat(), vocab.n_objects),
        masks_part=onehot(part_flat, vocab.n_parts),
        masks_obj_part=onehot(qp_flat, vocab.n_obj_parts),
    )


def generate_sample(spec: SceneSpec, vocab: Vocabulary, seed,
                    sample_id: str = "", exclude_novel: bool = False,
                    with_structural: bool = True) -> Sample:
    """Fully determined by (spec, seed). `exclude_novel` drops novel
    obj-part annotations (training-side ground truth)."""
    if not spec.templates:
        raise DataError("scene spec has no object templates")
    if exclude_novel:
        # novel parts are absent from training scenes entirely; blanking
        # their labels after the fact would mark wheel-looking pixels as
        # background and train the model to suppress exactly those classes
        novel = {vocab.obj_parts[q] for q in vocab.novel_obj_parts()}
        templates = {o: [(p, r) for p, r in parts
                         if f"{o}'s {p}" not in novel]
                     for o, parts in spec.templates.items()}
        templates = {o: ps for o, ps in templates.items() if ps}
        spec = replace(spec, templates=templates)
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 401])
    obj_name = sorted(spec.templates)[rng.integers(len(spec.templates))]
    obj_map, qp_map = _rasterize(spec, vocab, obj_name, rng)

    noise_seed = int(np.random.default_rng([*np.atleast_1d(seed).tolist(), 409])
                     .integers(2 ** 31))
    visual = synth_visual_embeddings(qp_map, vocab, spec.c, spec.sigma,
                                     spec.embed_seed, noise_seed)
    lang_obj, lang_part, lang_qp = synth_language_embeddings(
        vocab, spec.c, spec.embed_seed, obj_weight=spec.text_obj_weight)
    structural = synth_structural_features(qp_map, vocab, spec.d_dino,
                                           spec.embed_seed) \
        if with_structural else None

    if exclude_novel:
        novel = set(vocab.novel_obj_parts())
        labels = qp_map.labels.copy()
        labels[np.isin(labels, list(novel))] = BACKGROUND
        qp_map = LabelMap(spec.h, spec.w, labels)

    ann_map = qp_map
    if spec.label_noise > 0:
        ann_rng = np.random.default_rng(
            [*np.atleast_1d(seed).tolist(), 419])
        ann_map = _annotation_noise(qp_map, vocab, spec.label_noise, ann_rng)

    gt = masks_from_maps(obj_map, ann_map, vocab)
    bundle = EmbeddingBundle(spec.h, spec.w, visual, lang_obj, lang_part,
                             lang_qp, structural)
    return Sample(sample_id or f"s{seed}", bundle, gt, obj_map, qp_map)


# ---------------------------------------------------------------------------
# dataset building and manifest I/O

def apply_split_policy(vocab: Vocabulary, holdout: list[str]) -> Vocabulary:
    """Mark the named obj-parts novel and everything else seen."""
    unknown = [n for n in holdout if n not in vocab.obj_parts]
    if unknown:
        raise DataError(f"unknown classes in split policy: {unknown}")
    mask = tuple(name not in holdout for name in vocab.obj_parts)
    if all(mask) or not any(mask):
        raise DataError("split policy must leave at least one seen and one novel class")
    return replace(vocab, seen_mask=mask)


def save_sample(sample: Sample, container_path: Path, pgm_path: Path) -> None:
    bundle = sample.embeddings
    records = {
        "visual": bundle.visual.astype(np.float32),
        "language_obj": bundle.language_obj.astype(np.float32),
        "language_part": bundle.language_part.astype(np.float32),
        "language_obj_part": bundle.language_obj_part.astype(np.float32),
        "masks_obj": sample.gt.masks_obj.astype(np.uint8),
        "masks_part": sample.gt.masks_part.astype(np.uint8),
        "masks_obj_part": sample.gt.masks_obj_part.astype(np.uint8),
        "gt_object_map": np.where(sample.gt_object_map.labels == BACKGROUND,
                                  255, sample.gt_object_map.labels).astype(np.uint8),
    }
    if bundle.structural is not None:
        records["structural"] = bundle.structural.astype(np.float32)
    write_tensor_container(container_path, records)
    write_pgm(pgm_path, sample.gt_obj_part_map)


def load_sample(sample_id: str, container_path: str | Path,
                pgm_path: str | Path) -> Sample:
    rec = read_tensor_container(container_path)
    qp_map = read_pgm(pgm_path)
    obj_labels = rec["gt_object_map"].astype(np.int64)
    obj_labels[obj_labels == 255] = BACKGROUND
    obj_map = LabelMap(qp_map.h, qp_map.w, obj_labels)
    bundle = EmbeddingBundle(
        qp_map.h, qp_map.w,
        rec["visual"].astype(np.float64),
        rec["language_obj"].astype(np.float64),
        rec["language_part"].astype(np.float64),
        rec["language_obj_part"].astype(np.float64),
        rec["structural"].astype(np.float64) if "structural" in rec else None,
    )
    gt = GroundTruth(rec["masks_obj"].astype(np.float64),
                     rec["masks_part"].astype(np.float64),
                     rec["masks_obj_part"].astype(np.float64))
    return Sample(sample_id, bundle, gt, obj_map, qp_map)


def build_dataset(spec: SceneSpec, vocab: Vocabulary, n_train: int, n_eval: int,
                  out_dir: str | Path, seed: int = 0,
                  split_policy: list[str] | None = None) -> dict[str, Path]:
    """Generate train/eval samples on disk plus manifest files.

    Training ground truth never annotates novel obj-part classes; the
    evaluation split annotates everything.
    """
    if n_train < 1 or n_eval < 1:
        raise DataError("n_train and n_eval must be >= 1")
    if split_policy is not None:
        vocab = apply_split_policy(vocab, split_policy)
    if not vocab.seen_obj_parts() or not vocab.novel_obj_parts():
        raise DataError("vocabulary split leaves a branch empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_lines = [f"{'seen' if s else 'novel'}\t{n}"
                   for n, s in zip(vocab.obj_parts, vocab.seen_mask)]
    (out_dir / "classes.txt").write_text("\n".join(class_lines) + "\n",
                                         encoding="utf-8")
    manifests = {}
    for split, count, exclude in (("train", n_train, True), ("eval", n_eval, False)):
        lines = []
        for i in range(count):
            sid = f"{split}{i:04d}"
            sample = generate_sample(spec, vocab, seed=(seed, 0 if exclude else 1, i),
                                     sample_id=sid, exclude_novel=exclude)
            cpath = out_dir / f"{sid}.ptnsr"
            ppath = out_dir / f"{sid}.pgm"
            save_sample(sample, cpath, ppath)
            lines.append(f"{sid}\t{cpath.name}\t{ppath.name}")
        mpath = out_dir / f"{split}.manifest"
        mpath.write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifests[split] = mpath
    return manifests


def load_manifest(path: str | Path) -> list[Sample]:
    path = Path(path)
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        sid, cpath, ppath = fields
        samples.append(load_sample(sid, path.parent / cpath, path.parent / ppath))
    if not samples:
        raise DataError(f"empty manifest {path}")
    return samples


# ---------------------------------------------------------------------------
# ready-made toy setup

def demo_vocabulary() -> Vocabulary:
    from .vocab import build_vocabulary
    names = ["robot's cap", "robot's frame", "truck's frame", "truck's wheel",
             "crane's cap", "crane's frame", "crane's wheel",
             "buggy's frame", "buggy's cap", "buggy's wheel"]
    flags = [True, True, True, True, True, True, True, True, False, False]
    return build_vocabulary(names, flags)


def demo_scene_spec(h: int = 8, w: int = 8, c: int = 8, d_dino: int = 8,
                    sigma: float = 0.5, jitter: float = 0.1,
                    label_noise: float = 0.25,
                    text_obj_weight: float = 0.1) -> SceneSpec:
    templates = {
        "robot": [("cap", (0.30, 0.05, 0.70, 0.35)),
                  ("frame", (0.20, 0.35, 0.80, 0.95))],
        "truck": [("frame", (0.10, 0.20, 0.90, 0.70)),
                  ("wheel", (0.15, 0.70, 0.45, 0.95)),
                  ("wheel", (0.55, 0.70, 0.85, 0.95))],
        "crane": [("cap", (0.10, 0.05, 0.50, 0.35)),
                  ("frame", (0.15, 0.35, 0.85, 0.70)),
                  ("wheel", (0.25, 0.70, 0.75, 0.95))],
        "buggy": [("cap", (0.35, 0.05, 0.65, 0.30)),
                  ("frame", (0.25, 0.30, 0.75, 0.70)),
                  ("wheel", (0.30, 0.70, 0.70, 0.95))],
    }
    return SceneSpec(h=h, w=w, templates=templates, jitter=jitter,
                     label_noise=label_noise, sigma=sigma, c=c, d_dino=d_dino,
                     text_obj_weight=text_obj_weight)
