"""Shared value types, experiment configuration and seeded randomness."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

PROB_TOL = 1e-6

# 39-phone folded ARPAbet inventory; index 0 of the CTC vocabulary is blank
PHONES = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY",
    "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY",
    "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)
BLANK = 0
PHONE_INDEX = {p: i + 1 for i, p in enumerate(PHONES)}


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


@dataclass(frozen=True)
class FrameSequence:
    """Time-major feature matrix (T x D) at the backbone frame rate."""

    frames: torch.Tensor
    frame_rate_hz: float

    def __post_init__(self):
        frames = _as_tensor(self.frames)
        if frames.dim() != 2:
            raise ValueError(f"frames must be 2-D (T x D), got shape {tuple(frames.shape)}")
        if frames.shape[1] < 1:
            raise ValueError("feature dimensionality must be >= 1")
        if not self.frame_rate_hz > 0:
            raise ValueError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.frame_rate_hz


@dataclass(frozen=True)
class FrameLabelSequence:
    """Per-frame one-hot targets; column 0 is positive (stutter), column 1 negative."""

    onehot: np.ndarray

    def __post_init__(self):
        onehot = np.asarray(self.onehot, dtype=np.int8)
        if onehot.ndim != 2 or onehot.shape[1] != 2:
            raise ValueError("labels must have shape (T, 2)")
        if not np.all(onehot.sum(axis=1) == 1) or not np.all((onehot == 0) | (onehot == 1)):
            raise ValueError("every label row must be one-hot")
        onehot.setflags(write=False)
        object.__setattr__(self, "onehot", onehot)

    @classmethod
    def from_positive(cls, positive) -> "FrameLabelSequence":
        pos = np.asarray(positive, dtype=bool)
        return cls(np.stack([pos, ~pos], axis=1).astype(np.int8))

    @classmethod
    def negatives(cls, length: int) -> "FrameLabelSequence":
        return cls.from_positive(np.zeros(length, dtype=bool))

    @property
    def positive(self) -> np.ndarray:
        return self.onehot[:, 0].astype(bool)

    def __len__(self) -> int:
        return self.onehot.shape[0]


@dataclass(frozen=True)
class FramePredictionSequence:
    """Per-frame (positive, negative) probabilities."""

    probs: torch.Tensor

    def __post_init__(self):
        probs = _as_tensor(self.probs)
        if probs.dim() != 2 or probs.shape[1] != 2:
            raise ValueError("probs must have shape (T, 2)")
        p = probs.detach().double()
        if p.numel() and (p.min() < 0 or p.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if p.numel() and (p.sum(dim=1) - 1).abs().max() > PROB_TOL:
            raise ValueError("each (o_p, o_n) row must sum to 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "FramePredictionSequence":
        return cls(torch.softmax(logits, dim=-1))

    @property
    def positive(self) -> torch.Tensor:
        return self.probs[:, 0]

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class PhonemeSequence:
    phonemes: tuple[int, ...]
    vocab_size: int
    blank: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phonemes", tuple(int(p) for p in self.phonemes))
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 0 <= self.blank < self.vocab_size:
            raise ValueError("blank index outside the vocabulary")
        for p in self.phonemes:
            if not 0 <= p < self.vocab_size:
                raise ValueError(f"phoneme index {p} outside [0, {self.vocab_size})")
            if p == self.blank:
                raise ValueError("blank index may not appear in a target sequence")

    def __len__(self) -> int:
        return len(self.phonemes)


# ---------------------------------------------------------------------------
# configuration

INTERFACE_KINDS = ("hconv", "weighted_sum", "single_layer")
DATA_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    w_ctc: float = 0.3
    ctc_reduction: str = "mean"  # "mean" divides the sequence NLL by target length
    learning_rate: float = 1e-4
    finetune_learning_rate: float = 1e-4
    threshold_start: float = 0.0
    threshold_end: float = 1.0
    threshold_step: float = 0.05
    margin_seconds: float = 0.2
    data_ratio: float = 1.0
    interface_kind: str = "hconv"
    backbone_id: str = "toy://0/4/32"
    seed: int = 0
    # training schedule
    pretrain_steps: int = 500
    finetune_steps: int = 200
    batch_size: int = 4
    finetune_batch_size: int = 16
    eval_every: int = 50
    val_fraction: float = 0.2
    vocab_size: int = 40
    # synthetic augmentation policy
    edit_prob: float = 0.5
    repeat_min: int = 1
    repeat_max: int = 3
    max_edits: int = 3
    score_reduction: str = "max"

    def threshold_grid(self) -> np.ndarray:
        return threshold_grid(self.threshold_start, self.threshold_end, self.threshold_step)

    @property
    def interface_layer(self) -> int | None:
        """Layer index for ``single_layer:K`` interfaces, else None."""
        if self.interface_kind.startswith("single_layer"):
            return int(self.interface_kind.split(":", 1)[1])
        return None

    def replace(self, **changes) -> "ExperimentConfig":
        return validate_config(dataclasses.replace(self, **changes))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def threshold_grid(start: float = 0.0, end: float = 1.0, step: float = 0.05) -> np.ndarray:
    """Inclusive grid; rounding keeps 0.05 * k from drifting off the nominal values."""
    n = int(math.floor((end - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 10)


def _check(cond: bool, name: str, msg: str):
    if not cond:
        raise ConfigError(name, msg)


def validate_config(cfg: ExperimentConfig | Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Check every invariant, filling defaults for fields missing from a mapping."""
    if cfg is None:
        cfg = {}
    if isinstance(cfg, Mapping):
        known = {f.name: f for f in fields(ExperimentConfig)}
        values = {}
        for key, value in cfg.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration field")
            values[key] = _coerce(known[key], value)
        cfg = ExperimentConfig(**values)

    _check(cfg.w_ctc >= 0, "w_ctc", "must be nonnegative")
    _check(cfg.learning_rate > 0, "learning_rate", "must be positive")
    _check(cfg.finetune_learning_rate > 0, "finetune_learning_rate", "must be positive")
    _check(0.0 <= cfg.threshold_start < cfg.threshold_end <= 1.0, "threshold_start",
           "need 0 <= threshold_start < threshold_end <= 1")
    _check(cfg.threshold_step > 0, "threshold_step", "must be positive")
    _check(cfg.margin_seconds >= 0, "margin_seconds", "must be nonnegative")
    _check(0.0 <= cfg.data_ratio <= 1.0, "data_ratio", f"must lie in [0, 1], got {cfg.data_ratio}")
    kind = cfg.interface_kind
    if kind.startswith("single_layer"):
        head, _, k = kind.partition(":")
        _check(head == "single_layer" and k.isdigit(), "interface_kind",
               "single-layer interface must be written single_layer:K")
    else:
        _check(kind in INTERFACE_KINDS, "interface_kind", f"unknown interface {kind!r}")
    _check(bool(cfg.backbone_id), "backbone_id", "must be a non-empty identifier")
    _check(cfg.pretrain_steps >= 0, "pretrain_steps", "must be nonnegative")
    _check(cfg.finetune_steps >= 0, "finetune_steps", "must be nonnegative")
    _check(cfg.ctc_reduction in ("sum", "mean"), "ctc_reduction", "must be 'sum' or 'mean'")
    _check(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    _check(cfg.finetune_batch_size >= 1, "finetune_batch_size", "must be >= 1")
    _check(cfg.eval_every >= 1, "eval_every", "must be >= 1")
    _check(0.0 < cfg.val_fraction < 1.0, "val_fraction", "must lie in (0, 1)")
    _check(cfg.vocab_size >= 2, "vocab_size", "need at least one phoneme plus blank")
    _check(0.0 <= cfg.edit_prob <= 1.0, "edit_prob", "must lie in [0, 1]")
    _check(1 <= cfg.repeat_min <= cfg.repeat_max, "repeat_min", "need 1 <= repeat_min <= repeat_max")
    _check(cfg.max_edits >= 0, "max_edits", "must be nonnegative")
    _check(cfg.score_reduction in ("max", "mean"), "score_reduction", "must be 'max' or 'mean'")
    return cfg


def _coerce(f: dataclasses.Field, value: Any):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "float":
        return float(value)
    if kind == "int":
        if isinstance(value, str):
            return int(value.strip())
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f.name, f"expected an integer, got {value}")
        return int(value)
    return str(value).strip()


def dumps_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return validate_config(values)


def load_config(path: str | Path) -> ExperimentConfig:
    return loads_config(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))


# ---------------------------------------------------------------------------
# randomness


def seeded_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 stream; extra integer keys derive independent child streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys))))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)


def torch_seed(rng: np.random.Generator) -> int:
    """Draw a seed for torch initialisation from a numpy stream."""
    return int(rng.integers(0, 2**63 - 1))
