"""Finite-difference verification of every loss, end to end.

Runs on a 4x4 toy sample in float64: each loss is checked as a scalar
function of the model parameters, analytic tape gradients against central
differences.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .autodiff import Tensor, grad_check
from .data import demo_scene_spec, demo_vocabulary, generate_sample
from .losses import (LossWeights, bce, compositional_loss, class_distributions,
                     aggregate_to_object, disentanglement_loss, obj_part_loss,
                     total_loss)
from .model import ModelConfig, forward, init_params


def toy_setup(seed: int = 0, guidance: bool = True):
    vocab = demo_vocabulary()
    spec = demo_scene_spec(h=4, w=4, c=8, d_dino=4, sigma=0.1)
    sample = generate_sample(spec, vocab, seed=(seed, 7), exclude_novel=False)
    config = ModelConfig(c=8, d=8, d_dino=4, heads=2, depth=1,
                         guidance_levels=("obj", "part") if guidance else (),
                         seed=seed, dtype="float64")
    params = init_params(config, vocab)
    return vocab, sample, config, params


def _check_through_forward(loss_fn, seed: int, max_entries: int = 4) -> float:
    vocab, sample, config, params = toy_setup(seed)
    names = sorted(params)
    rng = np.random.default_rng(seed)

    def f(*tensors):
        p = dict(zip(names, tensors))
        out = forward(sample.embeddings, p, vocab, config)
        return loss_fn(out, sample, vocab)

    return grad_check(f, [params[n] for n in names], eps=1e-5,
                      max_entries_per_input=max_entries, rng=rng)


def run_gradient_suite(seed: int = 0) -> dict[str, float]:
    """Name -> max relative gradient error for every loss component."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    target = (rng.uniform(size=(5, 3)) > 0.5).astype(float)
    logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    results["bce"] = grad_check(lambda x: bce(target, x.sigmoid()), [logits])

    weights = LossWeights(0.7, 1.3, 1.0)
    results["disentanglement_loss"] = _check_through_forward(
        lambda out, s, v: disentanglement_loss(out, s.gt, weights), seed)
    results["obj_part_loss"] = _check_through_forward(
        lambda out, s, v: obj_part_loss(out, s.gt), seed)

    def comp_of(mode):
        def fn(out, s, v):
            p_obj, p_qp = class_distributions(out.cost_obj, out.cost_obj_part,
                                              mode=mode)
            return compositional_loss(p_obj, aggregate_to_object(p_qp, v))
        return fn

    results["compositional_loss[softmax]"] = _check_through_forward(
        comp_of("softmax"), seed)
    results["compositional_loss[l1]"] = _check_through_forward(comp_of("l1"), seed)

    for mode in ("softmax", "l1", "off"):
        results[f"total_loss[{mode}]"] = _check_through_forward(
            lambda out, s, v, m=mode: total_loss(out, s.gt, v, weights,
                                                 comp_mode=m), seed)
    return results
