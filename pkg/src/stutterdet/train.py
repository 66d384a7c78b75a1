"""Prediction heads, two-stage training, checkpoints and balanced subsampling."""

from __future__ import annotations

import copy
import io
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .augment import AlignedUnit, AugmentedExample, AugmentPolicy, apply_plan, sample_plan
from .backbone import FrozenBackbone, LayerActivations
from .core import ExperimentConfig, FramePredictionSequence, FrameSequence, PhonemeSequence, seeded_rng
from .interface import build_interface, interface_out_dim
from .losses import finetune_loss, pretrain_loss
from .metrics import ScoredSet, sweep_thresholds

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stutterdet.checkpoint/1"


class CheckpointMismatch(ValueError):
    pass


class DetectionHead(nn.Module):
    """Two hidden GELU layers then a 2-way log-softmax (positive, negative)."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim), nn.GELU(),
            nn.Linear(dim, dim), nn.GELU(),
            nn.Linear(dim, 2),
        )

    def forward(self, x):
        return torch.log_softmax(self.net(x), dim=-1)


class PhonemeHead(nn.Module):
    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.proj = nn.Linear(dim, vocab_size)

    def forward(self, x):
        return torch.log_softmax(self.proj(x), dim=-1)


class StutterModel(nn.Module):
    """Trainable part of the detector: layer interface plus both heads."""

    def __init__(self, interface_kind: str, num_layers: int, hidden_dim: int, vocab_size: int = 40, seed: int = 0):
        super().__init__()
        self.interface_kind = interface_kind
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.vocab_size = vocab_size
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.interface = build_interface(interface_kind, num_layers + 1, hidden_dim)
            out_dim = interface_out_dim(self.interface, hidden_dim)
            self.detector = DetectionHead(out_dim)
            self.phoneme_head = PhonemeHead(out_dim, vocab_size)

    def forward(self, stack: torch.Tensor):
        feats = self.interface(stack)
        return self.detector(feats), self.phoneme_head(feats)

    @torch.no_grad()
    def predict(self, acts: LayerActivations | torch.Tensor) -> FramePredictionSequence:
        stack = acts.stack if isinstance(acts, LayerActivations) else acts
        det, _ = self(stack.to(next(self.parameters()).dtype))
        return FramePredictionSequence(det.exp().double() / det.exp().double().sum(-1, keepdim=True))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class PretrainUtterance:
    utt_id: str
    waveform: np.ndarray
    sample_rate: int
    units: tuple[AlignedUnit, ...]
    phonemes: PhonemeSequence


@dataclass(frozen=True)
class LabeledUtterance:
    utt_id: str
    waveform: np.ndarray
    sample_rate: int
    label: bool
    types: tuple[str, ...] = ()


def subsample_balanced(dataset: Sequence, ratio: float, rng: np.random.Generator) -> list:
    """Keep round(ratio * n_c) items of each class c, preserving input order."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    by_class: dict[bool, list[int]] = {}
    for i, item in enumerate(dataset):
        by_class.setdefault(bool(item.label), []).append(i)
    keep: list[int] = []
    for label in sorted(by_class):
        idx = by_class[label]
        n = max(0, int(math.floor(ratio * len(idx) + 0.5)))
        chosen = rng.permutation(len(idx))[:n]
        keep.extend(idx[j] for j in chosen)
    return [dataset[i] for i in sorted(keep)]


def split_validation(items: Sequence, fraction: float, rng: np.random.Generator):
    order = rng.permutation(len(items))
    n_val = max(1, int(round(fraction * len(items)))) if len(items) > 1 else 0
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return [items[i] for i in train], [items[i] for i in val]


# ---------------------------------------------------------------------------
# state and checkpoints


@dataclass
class TrainState:
    model: StutterModel
    optimizer: torch.optim.Optimizer
    stage: str
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_metric: float | None = None
    best_state: dict | None = None

    def best_model(self) -> StutterModel:
        model = copy.deepcopy(self.model)
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        return model


def make_optimizer(model: StutterModel, cfg: ExperimentConfig, stage: str = "pretrain") -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    lr = cfg.finetune_learning_rate if stage == "finetune" else cfg.learning_rate
    return torch.optim.Adam(params, lr=lr)


def make_checkpoint(model: StutterModel, cfg: ExperimentConfig, backbone_id: str, stage: str,
                    history: list[dict] | None = None, best_step: int = 0) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "interface_kind": model.interface_kind,
        "backbone_id": backbone_id,
        "num_layers": model.num_layers,
        "hidden_dim": model.hidden_dim,
        "vocab_size": model.vocab_size,
        "config": cfg.to_dict(),
        "history": list(history or []),
        "best_step": best_step,
        "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }


def model_from_checkpoint(ckpt: dict) -> StutterModel:
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"not a stutterdet checkpoint (format={ckpt.get('format')!r})")
    model = StutterModel(ckpt["interface_kind"], ckpt["num_layers"], ckpt["hidden_dim"], ckpt["vocab_size"])
    model.load_state_dict(ckpt["model_state"])
    return model


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def check_compatible(ckpt: dict, cfg: ExperimentConfig, backbone: FrozenBackbone) -> None:
    if ckpt["interface_kind"] != cfg.interface_kind:
        raise CheckpointMismatch(
            f"checkpoint interface {ckpt['interface_kind']!r} != configured {cfg.interface_kind!r}")
    d = backbone.descriptor
    if (ckpt["num_layers"], ckpt["hidden_dim"]) != (d.num_layers, d.hidden_dim):
        raise CheckpointMismatch(
            f"checkpoint expects {ckpt['num_layers']} layers x {ckpt['hidden_dim']} dims, "
            f"backbone {d.backbone_id} has {d.num_layers} x {d.hidden_dim}")


# ---------------------------------------------------------------------------
# pretraining

Inject = Callable[[AugmentedExample], FrameSequence]


def augment_example(backbone: FrozenBackbone, utt: PretrainUtterance, rng: np.random.Generator,
                    policy: AugmentPolicy, conv_cache: dict | None = None) -> AugmentedExample:
    frames = None if conv_cache is None else conv_cache.get(utt.utt_id)
    if frames is None:
        frames = backbone.extract_conv_features(utt.waveform, utt.sample_rate)
        if conv_cache is not None:
            conv_cache[utt.utt_id] = frames
    plan = sample_plan(utt.units, rng, policy)
    return apply_plan(frames, utt.units, plan, utt.phonemes)


def _pretrain_example_loss(model, backbone, example: AugmentedExample, cfg: ExperimentConfig, inject: Inject | None):
    frames = inject(example) if inject is not None else example.frames
    acts = backbone.run_transformer(frames)
    det, phone = model(acts.stack)
    return pretrain_loss(det, example.labels, phone, example.phoneme_targets, cfg.w_ctc, log_space=True,
                         ctc_reduction=cfg.ctc_reduction)


def run_pretraining(cfg: ExperimentConfig, backbone: FrozenBackbone, train: Sequence[PretrainUtterance],
                    val: Sequence[PretrainUtterance] | None = None, *, inject: Inject | None = None,
                    steps: int | None = None, model: StutterModel | None = None):
    """Synthetic-disfluency pretraining with the CTC auxiliary loss.

    Returns ``(state, checkpoint)`` where the checkpoint holds the parameters
    with the lowest validation loss seen.
    """
    if not train:
        raise ValueError("empty pretraining dataset")
    steps = cfg.pretrain_steps if steps is None else steps
    rng = seeded_rng(cfg.seed, 1)
    if val is None:
        train, val = split_validation(list(train), cfg.val_fraction, rng)
    if not val:
        raise ValueError("pretraining needs at least one validation utterance")
    d = backbone.descriptor
    model = model or StutterModel(cfg.interface_kind, d.num_layers, d.hidden_dim, cfg.vocab_size, seed=cfg.seed)
    state = TrainState(model, make_optimizer(model, cfg), stage="pretrain")
    policy = AugmentPolicy.from_config(cfg)
    conv_cache: dict = {}

    # validation plans are fixed per utterance so losses are comparable across evals
    val_examples = []
    for i, utt in enumerate(val):
        ex = augment_example(backbone, utt, seeded_rng(cfg.seed, 2, i), policy, conv_cache)
        frames = inject(ex) if inject is not None else ex.frames
        val_examples.append((backbone.run_transformer(frames).stack, ex))

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            losses = []
            for stack, ex in val_examples:
                det, phone = model(stack)
                losses.append(float(pretrain_loss(det, ex.labels, phone, ex.phoneme_targets, cfg.w_ctc,
                                                  log_space=True, ctc_reduction=cfg.ctc_reduction)))
        model.train()
        return float(np.mean(losses))

    def record(train_loss: float | None):
        val_loss = validate()
        state.history.append({"step": state.step, "train_loss": train_loss, "val_loss": val_loss})
        if state.best_metric is None or val_loss < state.best_metric:
            state.best_metric, state.best_step = val_loss, state.step
            state.best_state = copy.deepcopy(model.state_dict())
        log.info("pretrain step %d val_loss %.4f", state.step, val_loss)

    record(None)
    order: list[int] = []
    running = []
    for _ in range(steps):
        batch = []
        for _ in range(min(cfg.batch_size, len(train))):
            if not order:
                order = list(rng.permutation(len(train)))
            batch.append(train[order.pop()])
        state.optimizer.zero_grad()
        loss = sum(
            _pretrain_example_loss(model, backbone, augment_example(backbone, u, rng, policy, conv_cache),
                                   cfg, inject)
            for u in batch
        ) / len(batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite pretraining loss at step {state.step}")
        loss.backward()
        state.optimizer.step()
        state.step += 1
        running.append(float(loss.detach()))
        if state.step % cfg.eval_every == 0 or state.step == steps:
            record(float(np.mean(running)))
            running = []
    ckpt = make_checkpoint(state.best_model(), cfg, d.backbone_id, "pretrain", state.history, state.best_step)
    return state, ckpt


# ---------------------------------------------------------------------------
# finetuning


def utterance_scores(model: StutterModel, stacks: Sequence[torch.Tensor]) -> np.ndarray:
    """Max positive-class probability over frames, per utterance."""
    return np.array([float(model.predict(s).positive.max()) for s in stacks])


def cache_activations(backbone: FrozenBackbone, utts: Sequence[LabeledUtterance]) -> list[torch.Tensor]:
    return [backbone.forward_with_hook(u.waveform, u.sample_rate)[0].stack for u in utts]


def run_finetuning(cfg: ExperimentConfig, backbone: FrozenBackbone, init: dict | StutterModel,
                   train: Sequence[LabeledUtterance], val: Sequence[LabeledUtterance] | None = None, *,
                   steps: int | None = None):
    """Weak-label finetuning through the most-positive frame.

    Checkpoint selection maximises validation F1 over the configured
    threshold grid; ties keep the earliest evaluation.
    """
    steps = cfg.finetune_steps if steps is None else steps
    d = backbone.descriptor
    if isinstance(init, dict):
        check_compatible(init, cfg, backbone)
        model = model_from_checkpoint(init)
    else:
        if init.interface_kind != cfg.interface_kind:
            raise CheckpointMismatch("model interface does not match configuration")
        model = copy.deepcopy(init)
    rng = seeded_rng(cfg.seed, 3)
    train = list(train)
    if val is None:
        if len(train) < 2:
            raise ValueError("finetuning needs a validation set")
        train, val = split_validation(train, cfg.val_fraction, rng)
    val = list(val)
    if not val:
        raise ValueError("empty finetuning validation set")
    if steps and not train:
        raise ValueError("empty finetuning dataset")

    state = TrainState(model, make_optimizer(model, cfg, "finetune"), stage="finetune")
    train_stacks = cache_activations(backbone, train)
    val_stacks = cache_activations(backbone, val)
    val_labels = np.array([u.label for u in val], dtype=bool)
    grid = cfg.threshold_grid()

    def record(train_loss):
        model.eval()
        scores = utterance_scores(model, val_stacks)
        model.train()
        sweep = sweep_thresholds(ScoredSet(scores, val_labels), grid)
        state.history.append({"step": state.step, "train_loss": train_loss, "val_f1": sweep.f1,
                              "threshold": sweep.threshold})
        if state.best_metric is None or sweep.f1 > state.best_metric:
            state.best_metric, state.best_step = sweep.f1, state.step
            state.best_state = copy.deepcopy(model.state_dict())
        log.info("finetune step %d val_f1 %.4f @ %.2f", state.step, sweep.f1, sweep.threshold)

    record(None)
    order: list[int] = []
    running = []
    for _ in range(steps):
        idx = []
        for _ in range(min(cfg.finetune_batch_size, len(train))):
            if not order:
                order = list(rng.permutation(len(train)))
            idx.append(order.pop())
        state.optimizer.zero_grad()
        loss = sum(finetune_loss(model(train_stacks[i])[0], train[i].label, log_space=True) for i in idx) / len(idx)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite finetuning loss at step {state.step}")
        loss.backward()
        state.optimizer.step()
        state.step += 1
        running.append(float(loss.detach()))
        if state.step % cfg.eval_every == 0 or state.step == steps:
            record(float(np.mean(running)))
            running = []
    ckpt = make_checkpoint(state.best_model(), cfg, d.backbone_id, "finetune", state.history, state.best_step)
    return state, ckpt


def frame_predictions(model: StutterModel, backbone: FrozenBackbone, waveform, sample_rate: int) -> FramePredictionSequence:
    acts, _ = backbone.forward_with_hook(waveform, sample_rate)
    model.eval()
    return model.predict(acts)
