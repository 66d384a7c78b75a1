import os
from dataclasses import dataclass

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stutterdet.core import ExperimentConfig
from stutterdet.synthetic import MarkerInjector
from stutterdet.train import (
    CheckpointMismatch,
    StutterModel,
    atomic_write_bytes,
    cache_activations,
    check_compatible,
    load_checkpoint,
    make_checkpoint,
    make_optimizer,
    model_from_checkpoint,
    run_finetuning,
    run_pretraining,
    save_checkpoint,
    split_validation,
    subsample_balanced,
    utterance_scores,
)

CFG = ExperimentConfig(backbone_id="toy://0/2/8", pretrain_steps=8, finetune_steps=6, eval_every=4,
                       batch_size=2, finetune_batch_size=4, learning_rate=3e-3, finetune_learning_rate=1e-2)


@dataclass(frozen=True)
class Item:
    key: int
    label: bool


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), max_size=30), st.floats(0, 1), st.integers(0, 1000))
def test_subsample_keeps_rounded_share_of_each_class(labels, ratio, seed):
    data = [Item(i, y) for i, y in enumerate(labels)]
    out = subsample_balanced(data, ratio, np.random.default_rng(seed))
    for cls in (True, False):
        n = sum(1 for y in labels if y == cls)
        assert sum(1 for x in out if x.label == cls) == int(np.floor(ratio * n + 0.5))
    keys = [x.key for x in out]
    assert keys == sorted(keys)


def test_subsample_endpoints_and_bounds():
    data = [Item(i, i % 3 == 0) for i in range(10)]
    rng = np.random.default_rng(0)
    assert subsample_balanced(data, 0.0, rng) == []
    assert subsample_balanced(data, 1.0, rng) == data
    with pytest.raises(ValueError):
        subsample_balanced(data, 1.01, rng)


def test_split_validation_partitions_items():
    train, val = split_validation(list(range(10)), 0.2, np.random.default_rng(0))
    assert len(val) == 2 and sorted(train + val) == list(range(10))


@pytest.mark.parametrize("kind", ["hconv", "weighted_sum", "single_layer:0"])
def test_model_shapes_and_probabilities(kind):
    m = StutterModel(kind, 2, 8, vocab_size=6)
    stack = torch.randn(3, 11, 8)
    det, phon = m(stack)
    assert det.shape == (11, 2) and phon.shape == (11, 6)
    assert torch.allclose(det.exp().sum(-1), torch.ones(11), atol=1e-6)
    probs = m.predict(stack).probs
    assert torch.allclose(probs.sum(-1), torch.ones(11, dtype=probs.dtype))


def test_model_init_is_seeded():
    a, b = StutterModel("hconv", 2, 8, seed=5), StutterModel("hconv", 2, 8, seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_optimizer_uses_stage_learning_rate():
    m = StutterModel("hconv", 2, 8)
    assert make_optimizer(m, CFG).param_groups[0]["lr"] == CFG.learning_rate
    assert make_optimizer(m, CFG, "finetune").param_groups[0]["lr"] == CFG.finetune_learning_rate


def test_checkpoint_round_trip(tmp_path, backbone):
    m = StutterModel("weighted_sum", 2, 8, seed=2)
    ckpt = make_checkpoint(m, CFG.replace(interface_kind="weighted_sum"), "toy://0/2/8", "pretrain")
    save_checkpoint(ckpt, tmp_path / "c.pt")
    back = model_from_checkpoint(load_checkpoint(tmp_path / "c.pt"))
    stack = torch.randn(3, 5, 8)
    assert torch.equal(back(stack)[0], m(stack)[0])
    assert [p.name for p in tmp_path.iterdir()] == ["c.pt"]  # no temp file left behind
    with pytest.raises(CheckpointMismatch):
        check_compatible(ckpt, CFG, backbone)  # configured interface is hconv
    with pytest.raises(CheckpointMismatch):
        model_from_checkpoint({**ckpt, "format": "other"})


def test_checkpoint_dimension_mismatch(backbone):
    ckpt = make_checkpoint(StutterModel("hconv", 4, 32), CFG, "toy://0/4/32", "pretrain")
    with pytest.raises(CheckpointMismatch):
        check_compatible(ckpt, CFG, backbone)


def test_atomic_write_replaces_whole_file(tmp_path):
    target = tmp_path / "f.bin"
    atomic_write_bytes(target, b"first")
    atomic_write_bytes(target, b"second")
    assert target.read_bytes() == b"second"
    assert os.listdir(tmp_path) == ["f.bin"]


@pytest.fixture(scope="module")
def pretrained(backbone, speech):
    pre = speech.pretrain_set(5)
    inject = MarkerInjector(backbone, speech, 1.0)
    return run_pretraining(CFG, backbone, pre[1:], pre[:1], inject=inject)


def test_pretraining_history_and_best_checkpoint(pretrained):
    state, ckpt = pretrained
    assert [h["step"] for h in state.history] == [0, 4, 8]
    assert state.history[0]["train_loss"] is None
    best = min(state.history, key=lambda h: h["val_loss"])
    assert ckpt["best_step"] == best["step"] == state.best_step
    assert ckpt["stage"] == "pretrain"


def test_pretraining_is_deterministic(backbone, speech, pretrained):
    pre = speech.pretrain_set(5)
    state, ckpt = run_pretraining(CFG, backbone, pre[1:], pre[:1], inject=MarkerInjector(backbone, speech, 1.0))
    assert state.history == pretrained[0].history
    assert all(torch.equal(a, b) for a, b in zip(ckpt["model_state"].values(),
                                                 pretrained[1]["model_state"].values()))


def test_pretraining_rejects_empty_data(backbone):
    with pytest.raises(ValueError):
        run_pretraining(CFG, backbone, [])


def test_finetuning_keeps_earliest_best(backbone, speech, pretrained):
    labeled = speech.labeled_set(12)
    state, ckpt = run_finetuning(CFG, backbone, pretrained[1], labeled[:8], labeled[8:])
    f1s = [h["val_f1"] for h in state.history]
    assert ckpt["best_step"] == state.history[f1s.index(max(f1s))]["step"]
    assert ckpt["stage"] == "finetune"


def test_finetuning_argument_errors(backbone, speech, pretrained):
    labeled = speech.labeled_set(6)
    with pytest.raises(CheckpointMismatch):
        run_finetuning(CFG.replace(interface_kind="weighted_sum"), backbone, pretrained[1], labeled[:4], labeled[4:])
    with pytest.raises(ValueError):
        run_finetuning(CFG, backbone, pretrained[1], labeled[:4], [])
    with pytest.raises(ValueError):
        run_finetuning(CFG, backbone, pretrained[1], [], labeled[4:])


def test_utterance_score_is_max_frame_probability(backbone, speech):
    m = StutterModel("hconv", 2, 8)
    stacks = cache_activations(backbone, speech.labeled_set(3))
    scores = utterance_scores(m, stacks)
    for s, stack in zip(scores, stacks):
        assert s == float(m.predict(stack).positive.max())
