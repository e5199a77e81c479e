"""Optimizer behavior, checkpointing, and determinism."""

from dataclasses import replace

import numpy as np
import pytest

from partcat.data import demo_scene_spec, demo_vocabulary, generate_sample
from partcat.evaluation import evaluate
from partcat.model import ModelConfig, init_params
from partcat.trainer import (TrainConfig, TrainError, _batch_indices,
                             load_checkpoint, load_train_config, save_checkpoint,
                             save_train_config, standard_ablation_cells, train)


def tiny_setup(n_train=4, h=4, w=4):
    vocab = demo_vocabulary()
    spec = demo_scene_spec(h=h, w=w, c=8, d_dino=4)
    samples = [generate_sample(spec, vocab, seed=(9, i), sample_id=f"s{i}",
                               exclude_novel=True) for i in range(n_train)]
    config = ModelConfig(c=8, d=8, d_dino=4, heads=2)
    return vocab, samples, config


def test_zero_lr_leaves_params_unchanged():
    vocab, samples, mc = tiny_setup()
    tc = TrainConfig(learning_rate=0.0, iterations=2, batch_size=2,
                     weight_decay=0.0)
    before = {k: t.data.copy() for k, t in init_params(mc, vocab).items()}
    params, _ = train(tc, mc, samples, vocab)
    for name in before:
        np.testing.assert_array_equal(params[name].data, before[name])


def test_loss_decreases():
    vocab, samples, mc = tiny_setup()
    tc = TrainConfig(learning_rate=1e-3, iterations=40, batch_size=2)
    _, log = train(tc, mc, samples, vocab)
    first = np.mean([e["loss"] for e in log.entries[:5]])
    last = np.mean([e["loss"] for e in log.entries[-5:]])
    assert last < first


def test_training_deterministic():
    vocab, samples, mc = tiny_setup()
    tc = TrainConfig(iterations=5, batch_size=2, seed=3)
    p1, log1 = train(tc, mc, samples, vocab)
    p2, log2 = train(tc, mc, samples, vocab)
    for name in p1:
        np.testing.assert_array_equal(p1[name].data, p2[name].data)
    assert [e["loss"] for e in log1.entries] == [e["loss"] for e in log2.entries]


def test_checkpoint_resume_bit_exact(tmp_path):
    vocab, samples, mc = tiny_setup()
    tc = TrainConfig(iterations=8, batch_size=2, checkpoint_interval=4)
    full, _ = train(tc, mc, samples, vocab, out_dir=tmp_path / "full")
    # interrupted run: stop at 4, resume to 8
    tc4 = replace(tc, iterations=4)
    train(tc4, mc, samples, vocab, out_dir=tmp_path / "half")
    resumed, _ = train(tc, mc, samples, vocab,
                       resume_from=tmp_path / "half" / "checkpoint_final.ptnsr")
    for name in full:
        np.testing.assert_array_equal(full[name].data, resumed[name].data)


def test_checkpoint_round_trip(tmp_path):
    vocab, samples, mc = tiny_setup()
    tc = TrainConfig(iterations=3, batch_size=2)
    params, _ = train(tc, mc, samples, vocab, out_dir=tmp_path)
    loaded, m, v, step = load_checkpoint(tmp_path / "checkpoint_final.ptnsr")
    assert step == 3
    assert set(loaded) == set(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name].data, params[name].data)
    assert set(m) == set(params) and set(v) == set(params)


def test_save_checkpoint_orders_params(tmp_path):
    vocab, _, mc = tiny_setup()
    params = init_params(mc, vocab)
    m = {k: np.zeros_like(t.data) for k, t in params.items()}
    save_checkpoint(tmp_path / "c1.ptnsr", params, m, m, 1)
    save_checkpoint(tmp_path / "c2.ptnsr", dict(reversed(list(params.items()))),
                    m, m, 1)
    assert (tmp_path / "c1.ptnsr").read_bytes() == \
        (tmp_path / "c2.ptnsr").read_bytes()


def test_comp_off_changes_trajectory():
    vocab, samples, mc = tiny_setup()
    on, _ = train(TrainConfig(iterations=3, batch_size=2), mc, samples, vocab)
    off, _ = train(TrainConfig(iterations=3, batch_size=2, comp_mode="off"),
                   mc, samples, vocab)
    assert any(not np.array_equal(on[n].data, off[n].data) for n in on)


def test_batch_indices_cover_epoch():
    n, bs = 6, 2
    seen = []
    for it in range(3):          # 3 iterations x batch 2 = one epoch
        seen.extend(_batch_indices(n, bs, it, seed=0))
    assert sorted(seen) == list(range(n))


def test_batch_indices_deterministic():
    a = [_batch_indices(5, 3, it, seed=7) for it in range(4)]
    b = [_batch_indices(5, 3, it, seed=7) for it in range(4)]
    assert a == b


def test_train_config_validation():
    with pytest.raises(TrainError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(TrainError):
        TrainConfig(iterations=0)
    with pytest.raises(TrainError):
        TrainConfig(comp_mode="bogus")


def test_train_config_round_trip(tmp_path):
    tc = TrainConfig(learning_rate=3e-4, iterations=7, comp_mode="l1",
                     js_midpoint=True)
    save_train_config(tc, tmp_path / "t.cfg")
    assert load_train_config(tmp_path / "t.cfg") == tc


def test_empty_dataset_rejected():
    vocab, _, mc = tiny_setup()
    with pytest.raises(TrainError):
        train(TrainConfig(iterations=1), mc, [], vocab)


def test_trained_model_evaluates():
    vocab, samples, mc = tiny_setup()
    params, _ = train(TrainConfig(iterations=5, batch_size=2), mc, samples, vocab)
    spec = demo_scene_spec(h=4, w=4, c=8, d_dino=4)
    # seeds chosen so both seen and novel classes appear in the eval set
    evals = [generate_sample(spec, vocab, seed=(10, i)) for i in (0, 1, 2)]
    rep = evaluate(params, evals, vocab, mc, "oracle-obj")
    assert 0.0 <= rep.miou_seen <= 1.0


def test_standard_ablation_cells_shape():
    tc, mc = TrainConfig(iterations=1), ModelConfig()
    comp = standard_ablation_cells(tc, mc, axis="comp")
    guid = standard_ablation_cells(tc, mc, axis="guidance")
    assert len(comp) == 4 and len(guid) == 4
    labels = [c[0] for c in comp]
    assert "cost-agg" in labels and "+guidance+comp-sm" in labels
    with pytest.raises(TrainError):
        standard_ablation_cells(tc, mc, axis="bogus")


def test_training_uses_seen_view():
    """Novel obj-part columns receive no supervision: their text rows are
    sliced away before training, so forward during training never sees them."""
    vocab, samples, mc = tiny_setup()
    view, idx = vocab.seen_view()
    assert view.n_obj_parts == len(idx) < vocab.n_obj_parts
    # train still returns params usable with the FULL vocabulary at eval
    params, _ = train(TrainConfig(iterations=2, batch_size=2), mc, samples, vocab)
    spec = demo_scene_spec(h=4, w=4, c=8, d_dino=4)
    evals = [generate_sample(spec, vocab, seed=(10, i)) for i in (0, 2)]
    rep = evaluate(params, evals, vocab, mc, "oracle-obj")
    assert rep.protocol == "oracle-obj"
