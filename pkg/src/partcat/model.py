"""Forward pipeline for disentangled image-text cost aggregation.

Two branch cost volumes (object-level and part-level) are embedded,
refined by spatial and class aggregation transformers, combined per
object-specific part class, re-scored against the obj-part text
embeddings, aggregated once more, and decoded into per-class
probability maps. Structural features can be injected into the
Query/Key of spatial aggregation at configurable levels.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kvconfig import coerce_dataclass_kv, dataclass_to_kv, read_kv, write_kv
from .vocab import Vocabulary

BRANCHES = ("obj", "part", "obj_part")
GUIDANCE_LEVELS = ("obj", "part", "obj_part")


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    c: int = 8                  # text/visual embedding width
    d: int = 16                 # cost feature width
    d_dino: int = 8             # structural feature width
    heads: int = 2
    depth: int = 1              # aggregation blocks per branch
    guidance_levels: tuple = ("obj", "part")
    upsample: int = 1
    seed: int = 0
    kernel_size: int = 3
    ffn_mult: int = 2
    positional_bias: bool = False
    pos_h: int = 0              # grid size, required when positional_bias
    pos_w: int = 0
    single_volume: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ModelError("kernel_size must be odd")
        if self.d % self.heads:
            raise ModelError("heads must divide d")
        bad = [g for g in self.guidance_levels if g not in GUIDANCE_LEVELS]
        if bad:
            raise ModelError(f"unknown guidance levels {bad}")
        if self.positional_bias and (self.pos_h <= 0 or self.pos_w <= 0):
            raise ModelError("positional_bias requires pos_h/pos_w")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def load_model_config(path: str | Path) -> ModelConfig:
    return coerce_dataclass_kv(ModelConfig, read_kv(path))


def save_model_config(config: ModelConfig, path: str | Path) -> None:
    write_kv(path, dataclass_to_kv(config))


@dataclass
class EmbeddingBundle:
    """Dense embeddings for one sample on an h x w grid."""

    h: int
    w: int
    visual: np.ndarray                 # (h*w, c)
    language_obj: np.ndarray           # (|objects|, c)
    language_part: np.ndarray          # (|parts|, c)
    language_obj_part: np.ndarray      # (|obj_parts|, c)
    structural: np.ndarray | None = None   # (h*w, d_dino)

    def validate(self):
        hw = self.h * self.w
        if self.visual.shape[0] != hw:
            raise ModelError(f"visual rows {self.visual.shape[0]} != h*w {hw}")
        c = self.visual.shape[1]
        for name in ("language_obj", "language_part", "language_obj_part"):
            if getattr(self, name).shape[1] != c:
                raise ModelError(f"{name} width differs from visual width {c}")
        if self.structural is not None and self.structural.shape[0] != hw:
            raise ModelError("structural rows != h*w")


@dataclass
class ModelOutputs:
    cost_obj: Tensor | None
    cost_part: Tensor | None
    cost_obj_part: Tensor
    pred_obj: Tensor | None
    pred_part: Tensor | None
    pred_obj_part: Tensor


# ---------------------------------------------------------------------------
# parameters

def _block_shapes(config: ModelConfig, guided: bool, spatial: bool) -> dict:
    d, m = config.d, config.ffn_mult
    din = d + (config.d_dino if guided else 0)
    shapes = {
        "wq": (din, d), "wk": (din, d), "wv": (d, d), "wo": (d, d),
        "ln1.gain": (d,), "ln1.bias": (d,),
        "ffn.w1": (d, m * d), "ffn.b1": (m * d,),
        "ffn.w2": (m * d, d), "ffn.b2": (d,),
        "ln2.gain": (d,), "ln2.bias": (d,),
    }
    if spatial and config.positional_bias:
        shapes["pos_table"] = (config.heads, 2 * config.pos_h - 1, 2 * config.pos_w - 1)
    return shapes


def param_shapes(config: ModelConfig, vocab: Vocabulary) -> dict[str, tuple]:
    """Name -> shape for every parameter; a pure function of the config."""
    k, d, c = config.kernel_size, config.d, config.c
    branches = ("obj_part",) if config.single_volume else BRANCHES
    shapes: dict[str, tuple] = {}
    for b in branches:
        shapes[f"embed.{b}.kernel"] = (k, k, 1, d)
        shapes[f"embed.{b}.bias"] = (d,)
        guided = b in config.guidance_levels
        for l in range(config.depth):
            for key, shp in _block_shapes(config, guided, spatial=True).items():
                shapes[f"sa.{b}.{l}.{key}"] = shp
            for key, shp in _block_shapes(config, False, spatial=False).items():
                shapes[f"ca.{b}.{l}.{key}"] = shp
        shapes[f"decoder.{b}.k1"] = (k, k, d, d)
        shapes[f"decoder.{b}.b1"] = (d,)
        shapes[f"decoder.{b}.k2"] = (k, k, d, 1)
        shapes[f"decoder.{b}.b2"] = (1,)
    if not config.single_volume:
        shapes["combine.weight"] = (2 * d, d)
        shapes["combine.bias"] = (d,)
        if d != c:
            shapes["align.weight"] = (d, c)
    return shapes


def init_params(config: ModelConfig, vocab: Vocabulary) -> dict[str, Tensor]:
    """Seeded uniform init scaled by 1/sqrt(fan-in); biases, gains at 0/1."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config, vocab).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "b1", "b2") or name.endswith("ln1.bias") or name.endswith("ln2.bias"):
            data = np.zeros(shape)
        elif leaf == "gain":
            data = np.ones(shape)
        elif leaf == "pos_table":
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[:-1]))
            s = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-s, s, size=shape)
        params[name] = Tensor(data.astype(config.np_dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# pipeline operations

def compute_cost(visual, language) -> Tensor:
    """Cosine similarity between every pixel embedding and class embedding."""
    visual = visual if isinstance(visual, Tensor) else Tensor(visual)
    language = language if isinstance(language, Tensor) else Tensor(language)
    if visual.shape[-1] != language.shape[-1]:
        raise ModelError(f"embedding widths differ: {visual.shape} vs {language.shape}")
    for name, t in (("visual", visual), ("language", language)):
        norms = np.linalg.norm(t.data, axis=-1)
        if np.any(norms < 1e-12):
            raise ModelError(f"zero-norm row in {name} embeddings")
    vn = visual * (visual * visual).sum(axis=-1, keepdims=True).sqrt() ** -1.0
    ln = language * (language * language).sum(axis=-1, keepdims=True).sqrt() ** -1.0
    return ad.matmul(vn, ln.swapaxes(-1, -2))


def embed_cost(cost: Tensor, kernel: Tensor, bias: Tensor, h: int, w: int) -> Tensor:
    """Lift a (h*w, T) cost volume to a (h*w, T, d) feature via conv."""
    t = cost.shape[1]
    grid = cost.reshape(h, w, t).transpose(2, 0, 1).reshape(t, h, w, 1)
    feat = ad.conv2d(grid, kernel, bias)                       # (T,h,w,d)
    return feat.reshape(t, h * w, feat.shape[-1]).transpose(1, 0, 2)


def _transformer_block(x: Tensor, qk_input: Tensor, params: dict, prefix: str,
                       heads: int, bias: Tensor | None = None) -> Tensor:
    p = lambda key: params[f"{prefix}.{key}"]
    q = ad.matmul(qk_input, p("wq"))
    k = ad.matmul(qk_input, p("wk"))
    v = ad.matmul(x, p("wv"))
    attn = ad.attention(q, k, v, heads=heads, bias=bias)
    y = ad.layer_norm(x + ad.matmul(attn, p("wo")), p("ln1.gain"), p("ln1.bias"))
    hidden = ad.matmul(y, p("ffn.w1")) + p("ffn.b1")
    ff = ad.matmul(hidden.relu(), p("ffn.w2")) + p("ffn.b2")
    return ad.layer_norm(y + ff, p("ln2.gain"), p("ln2.bias"))


def _relative_bias(params: dict, prefix: str, h: int, w: int) -> Tensor | None:
    key = f"{prefix}.pos_table"
    if key not in params:
        return None
    table = params[key]
    ys, xs = np.divmod(np.arange(h * w), w)
    dy = ys[:, None] - ys[None, :] + h - 1
    dx = xs[:, None] - xs[None, :] + w - 1
    return table[:, dy, dx]     # (heads, hw, hw)


def spatial_aggregate(f: Tensor, guidance, params: dict, branch: str,
                      config: ModelConfig, h: int, w: int, level: int = 0) -> Tensor:
    """Attention over spatial tokens, independently per class slice.

    With guidance, Query/Key come from [feature ; structural] while Value
    sees the feature alone; output width stays d so blocks compose.
    """
    hw, t, d = f.shape
    x = f.transpose(1, 0, 2)                                   # (T, hw, d)
    if guidance is not None:
        g = guidance.data if isinstance(guidance, Tensor) else np.asarray(guidance)
        if g.shape[0] != hw:
            raise ModelError(f"guidance length {g.shape[0]} != h*w {hw}")
        g = np.broadcast_to(g.astype(x.dtype, copy=False), (t,) + g.shape)
        qk_in = ad.concat([x, Tensor(g)], axis=-1)
    else:
        qk_in = x
    prefix = f"sa.{branch}.{level}"
    bias = _relative_bias(params, prefix, h, w)
    out = _transformer_block(x, qk_in, params, prefix, config.heads, bias=bias)
    return out.transpose(1, 0, 2)


def class_aggregate(f: Tensor, params: dict, branch: str, config: ModelConfig,
                    level: int = 0) -> Tensor:
    """Attention over class tokens per pixel; no positional term, so the
    class axis is permutation-equivariant."""
    if f.shape[1] < 1:
        raise ModelError("class aggregation needs at least one class")
    return _transformer_block(f, f, params, f"ca.{branch}.{level}", config.heads)


def aggregate_branch(f: Tensor, guidance, params: dict, branch: str,
                     config: ModelConfig, h: int, w: int) -> Tensor:
    g = guidance if branch in config.guidance_levels else None
    for level in range(config.depth):
        f = spatial_aggregate(f, g, params, branch, config, h, w, level)
        f = class_aggregate(f, params, branch, config, level)
    return f


def combine_obj_part(f_obj: Tensor, f_part: Tensor, vocab: Vocabulary,
                     weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate each obj-part's object and part feature, project 2d->d."""
    obj_slices = f_obj.take(np.asarray(vocab.obj_index), axis=1)
    part_slices = f_part.take(np.asarray(vocab.part_index), axis=1)
    stacked = ad.concat([obj_slices, part_slices], axis=-1)    # (hw, Q, 2d)
    return ad.matmul(stacked, weight) + bias


def rescore(f_combined: Tensor, language_obj_part, align: Tensor | None = None) -> Tensor:
    """Cosine of each combined feature against its class text embedding."""
    lang = language_obj_part if isinstance(language_obj_part, Tensor) \
        else Tensor(language_obj_part)
    if align is not None:
        f_combined = ad.matmul(f_combined, align)
    if f_combined.shape[-1] != lang.shape[-1]:
        raise ModelError("combined feature width != text width and no align projection")
    lnorm = np.linalg.norm(lang.data, axis=-1)
    if np.any(lnorm < 1e-12):
        raise ModelError("zero-norm text embedding")
    fnorm = (f_combined * f_combined).sum(axis=-1, keepdims=True).sqrt().clamp_min(1e-12)
    dots = (f_combined * lang).sum(axis=-1)                    # (hw, Q)
    return dots / (fnorm.reshape(fnorm.shape[:-1]) * Tensor(lnorm))


def decode(f: Tensor, params: dict, branch: str, config: ModelConfig,
           h: int, w: int) -> Tensor:
    """Two same-padded convs (d -> d -> 1) with a ReLU, then sigmoid."""
    hw, t, d = f.shape
    grid = f.transpose(1, 0, 2).reshape(t, h, w, d)
    hid = ad.conv2d(grid, params[f"decoder.{branch}.k1"], params[f"decoder.{branch}.b1"]).relu()
    logits = ad.conv2d(hid, params[f"decoder.{branch}.k2"], params[f"decoder.{branch}.b2"])
    if config.upsample > 1:
        logits = logits.repeat(config.upsample, axis=1).repeat(config.upsample, axis=2)
    hh, ww = h * config.upsample, w * config.upsample
    return logits.reshape(t, hh * ww).transpose(1, 0).sigmoid()


@contextmanager
def _stage(name: str):
    try:
        yield
    except ModelError:
        raise
    except Exception as exc:  # annotate with pipeline stage
        raise ModelError(f"stage {name}: {exc}") from exc


def forward(bundle: EmbeddingBundle, params: dict, vocab: Vocabulary,
            config: ModelConfig) -> ModelOutputs:
    """Run the full pipeline on one sample."""
    bundle.validate()
    h, w = bundle.h, bundle.w
    dt = config.np_dtype
    visual = bundle.visual.astype(dt, copy=False)
    lang_obj = bundle.language_obj.astype(dt, copy=False)
    lang_part = bundle.language_part.astype(dt, copy=False)
    lang_qp = bundle.language_obj_part.astype(dt, copy=False)
    guidance = bundle.structural.astype(dt, copy=False) \
        if bundle.structural is not None else None
    if guidance is None and config.guidance_levels:
        raise ModelError("config enables structural guidance but the sample "
                         "has no structural features")

    if config.single_volume:
        with _stage("cost/obj_part"):
            cost_qp = compute_cost(visual, lang_qp)
        with _stage("aggregate/obj_part"):
            f_qp = embed_cost(cost_qp, params["embed.obj_part.kernel"],
                              params["embed.obj_part.bias"], h, w)
            f_qp = aggregate_branch(f_qp, guidance, params, "obj_part", config, h, w)
        with _stage("decode/obj_part"):
            pred_qp = decode(f_qp, params, "obj_part", config, h, w)
        return ModelOutputs(None, None, cost_qp, None, None, pred_qp)

    with _stage("cost"):
        cost_obj = compute_cost(visual, lang_obj)
        cost_part = compute_cost(visual, lang_part)
    with _stage("aggregate/obj"):
        f_obj = embed_cost(cost_obj, params["embed.obj.kernel"],
                           params["embed.obj.bias"], h, w)
        f_obj = aggregate_branch(f_obj, guidance, params, "obj", config, h, w)
    with _stage("aggregate/part"):
        f_part = embed_cost(cost_part, params["embed.part.kernel"],
                            params["embed.part.bias"], h, w)
        f_part = aggregate_branch(f_part, guidance, params, "part", config, h, w)
    with _stage("combine"):
        f_comb = combine_obj_part(f_obj, f_part, vocab,
                                  params["combine.weight"], params["combine.bias"])
        cost_qp = rescore(f_comb, lang_qp, params.get("align.weight"))
    with _stage("aggregate/obj_part"):
        f_qp = embed_cost(cost_qp, params["embed.obj_part.kernel"],
                          params["embed.obj_part.bias"], h, w)
        f_qp = aggregate_branch(f_qp, guidance, params, "obj_part", config, h, w)
    with _stage("decode"):
        pred_obj = decode(f_obj, params, "obj", config, h, w)
        pred_part = decode(f_part, params, "part", config, h, w)
        pred_qp = decode(f_qp, params, "obj_part", config, h, w)
    return ModelOutputs(cost_obj, cost_part, cost_qp, pred_obj, pred_part, pred_qp)
