"""Synthetic stuttering spliced into conv-frame sequences.

Edits only ever insert copies of existing frames; the originals are kept
bitwise and the inserted frames are the positive labels. Deleting the
positives therefore recovers the source sequence exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import FrameLabelSequence, FrameSequence, PhonemeSequence

EDIT_KINDS = ("prolongation", "sound_repetition", "word_repetition")


@dataclass(frozen=True)
class AlignedUnit:
    kind: str  # "word" or "phone"
    start_frame: int
    end_frame: int
    phonemes: tuple[int, ...] = ()
    text: str = ""
    phones: tuple["AlignedUnit", ...] = ()

    def __post_init__(self):
        if self.kind not in ("word", "phone"):
            raise ValueError(f"unit kind must be word or phone, got {self.kind!r}")
        if not 0 <= self.start_frame < self.end_frame:
            raise ValueError(f"bad unit span [{self.start_frame}, {self.end_frame})")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame

    def shifted(self, positions: np.ndarray) -> "AlignedUnit":
        """Remap through ``positions`` (new index of every original frame)."""
        return AlignedUnit(
            self.kind,
            int(positions[self.start_frame]),
            int(positions[self.end_frame - 1]) + 1,
            self.phonemes,
            self.text,
            tuple(p.shifted(positions) for p in self.phones),
        )


@dataclass(frozen=True)
class Edit:
    kind: str
    unit: int  # index into the utterance's word units
    repeat_count: int

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {self.kind!r}")
        if self.repeat_count < 1:
            raise ValueError("repeat_count must be >= 1")


@dataclass(frozen=True)
class AugmentationPlan:
    edits: tuple[Edit, ...] = ()

    def __len__(self):
        return len(self.edits)


@dataclass(frozen=True)
class AugmentPolicy:
    prolongation_rate: float = 0.5
    sound_repetition_rate: float = 0.5
    word_repetition_rate: float = 0.5
    repeat_min: int = 1
    repeat_max: int = 3
    max_edits: int = 3

    @classmethod
    def from_config(cls, cfg) -> "AugmentPolicy":
        return cls(cfg.edit_prob, cfg.edit_prob, cfg.edit_prob, cfg.repeat_min, cfg.repeat_max, cfg.max_edits)

    def rate(self, kind: str) -> float:
        return getattr(self, f"{kind}_rate")


@dataclass(frozen=True)
class AugmentedExample:
    frames: FrameSequence
    labels: FrameLabelSequence
    phoneme_targets: PhonemeSequence
    plan: AugmentationPlan = field(default_factory=AugmentationPlan)

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise ValueError("frames and labels differ in length")


def _check_unit(unit: AlignedUnit, length: int):
    if unit.end_frame > length:
        raise IndexError(f"unit [{unit.start_frame}, {unit.end_frame}) outside sequence of length {length}")


def _splice(frames: FrameSequence, labels: FrameLabelSequence, at: int, source: np.ndarray):
    """Insert copies of ``frames[source]`` before index ``at``, labelled positive."""
    n = len(frames)
    index = np.concatenate([np.arange(at), source, np.arange(at, n)])
    pos = labels.positive
    new_pos = np.concatenate([pos[:at], np.ones(len(source), dtype=bool), pos[at:]])
    new_frames = frames.frames[torch.as_tensor(index, dtype=torch.long)]
    return FrameSequence(new_frames, frames.frame_rate_hz), FrameLabelSequence.from_positive(new_pos)


def apply_prolongation(frames: FrameSequence, labels: FrameLabelSequence, unit: AlignedUnit,
                       repeat_count: int, tail: int | None = None):
    """Tile the unit's final span ``repeat_count`` extra times right after it.

    The final span is ``tail`` frames if given, else the last phone of a word
    unit, else the unit's last frame.
    """
    if repeat_count < 1:
        raise ValueError("repeat_count must be >= 1")
    _check_unit(unit, len(frames))
    if tail is None:
        tail = unit.phones[-1].length if unit.phones else 1
    if not 1 <= tail <= unit.length:
        raise ValueError(f"tail span {tail} outside unit of length {unit.length}")
    source = np.tile(np.arange(unit.end_frame - tail, unit.end_frame), repeat_count)
    return _splice(frames, labels, unit.end_frame, source)


def apply_repetition(frames: FrameSequence, labels: FrameLabelSequence, unit: AlignedUnit,
                     repeat_count: int, granularity: str = "word"):
    """Insert ``repeat_count`` copies of the span immediately before it.

    ``granularity="word"`` repeats a whole word unit; ``"sound"`` repeats a
    phone unit, or the first phone of a word unit.
    """
    if repeat_count < 1:
        raise ValueError("repeat_count must be >= 1")
    if granularity == "word":
        if unit.kind != "word":
            raise ValueError("word repetition needs a word unit")
        span = unit
    elif granularity == "sound":
        if unit.kind == "phone":
            span = unit
        elif unit.phones:
            span = unit.phones[0]
        else:
            raise ValueError("sound repetition needs phone spans inside the word")
    else:
        raise ValueError(f"granularity must be word or sound, got {granularity!r}")
    _check_unit(span, len(frames))
    source = np.tile(np.arange(span.start_frame, span.end_frame), repeat_count)
    return _splice(frames, labels, span.start_frame, source)


def _apply_edit(frames, labels, unit, edit: Edit):
    if edit.kind == "prolongation":
        return apply_prolongation(frames, labels, unit, edit.repeat_count)
    granularity = "sound" if edit.kind == "sound_repetition" else "word"
    return apply_repetition(frames, labels, unit, edit.repeat_count, granularity)


def apply_plan(frames: FrameSequence, units: Sequence[AlignedUnit], plan: AugmentationPlan,
               phonemes: PhonemeSequence, labels: FrameLabelSequence | None = None) -> AugmentedExample:
    """Apply edits in order, remapping each target through earlier insertions."""
    if labels is None:
        labels = FrameLabelSequence.negatives(len(frames))
    targets = [e.unit for e in plan.edits]
    if len(set(targets)) != len(targets):
        raise ValueError("a unit may be targeted by at most one edit")
    positions = np.arange(len(frames))
    for edit in plan.edits:
        if not 0 <= edit.unit < len(units):
            raise IndexError(f"edit targets unit {edit.unit} of {len(units)}")
        unit = units[edit.unit]
        _check_unit(unit, len(positions))
        before = len(frames)
        frames, labels = _apply_edit(frames, labels, unit.shifted(positions), edit)
        grown = len(frames) - before
        at = _insertion_point(unit.shifted(positions), edit)
        positions = np.where(positions >= at, positions + grown, positions)
    return AugmentedExample(frames, labels, phonemes, plan)


def _insertion_point(unit: AlignedUnit, edit: Edit) -> int:
    if edit.kind == "prolongation":
        return unit.end_frame
    if edit.kind == "sound_repetition" and unit.kind == "word" and unit.phones:
        return unit.phones[0].start_frame
    return unit.start_frame


def sample_plan(units: Sequence[AlignedUnit], rng: np.random.Generator,
                policy: AugmentPolicy = AugmentPolicy()) -> AugmentationPlan:
    """Each edit kind fires independently with its rate, on a distinct word."""
    if not units:
        raise ValueError("need at least one aligned unit")
    words = [i for i, u in enumerate(units) if u.kind == "word"]
    edits = []
    used: set[int] = set()
    for kind in EDIT_KINDS:
        if len(edits) >= policy.max_edits:
            break
        if rng.random() >= policy.rate(kind):
            continue
        candidates = [i for i in words if i not in used and (kind != "sound_repetition" or units[i].phones)]
        if not candidates:
            continue
        target = candidates[int(rng.integers(len(candidates)))]
        count = int(rng.integers(policy.repeat_min, policy.repeat_max + 1))
        used.add(target)
        edits.append(Edit(kind, target, count))
    edits.sort(key=lambda e: units[e.unit].start_frame)
    return AugmentationPlan(tuple(edits))


def remove_positives(example: AugmentedExample) -> torch.Tensor:
    return example.frames.frames[torch.as_tensor(~example.labels.positive)]


# ---------------------------------------------------------------------------
# forced-alignment ingestion


def seconds_to_frames(start: float, end: float, frame_rate_hz: float) -> tuple[int, int]:
    return int(math.floor(start * frame_rate_hz + 1e-9)), int(math.ceil(end * frame_rate_hz - 1e-9))


def _quantize(spans, frame_rate_hz, lower=0, upper=None):
    out = []
    prev_end = lower
    for kind, start, end, text in spans:
        s, e = seconds_to_frames(start, end, frame_rate_hz)
        s = max(s, prev_end)
        if upper is not None:
            e = min(e, upper)
        if e <= s:
            raise ValueError(f"{kind} {text!r} [{start}, {end}] collapses to an empty frame span")
        out.append((kind, s, e, text))
        prev_end = e
    return out


def parse_alignment(text: str, frame_rate_hz: float, phone_index: dict[str, int], vocab_size: int,
                    num_frames: int | None = None) -> tuple[list[AlignedUnit], PhonemeSequence]:
    """Parse ``kind<TAB>start<TAB>end<TAB>symbol`` lines (seconds) into word units.

    Phone lines are attached to the word whose time span contains them. Spans
    map to frames with floor at the start and ceil at the end; a span that
    would overlap its predecessor is trimmed to start where it ends.
    """
    words, phones = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 4 or parts[0] not in ("word", "phone"):
            raise ValueError(f"alignment line {lineno}: expected kind, start, end, symbol")
        kind, start, end, sym = parts[0], float(parts[1]), float(parts[2]), parts[3].strip()
        if not 0 <= start < end:
            raise ValueError(f"alignment line {lineno}: need 0 <= start < end")
        (words if kind == "word" else phones).append((kind, start, end, sym))
    words.sort(key=lambda w: w[1])
    phones.sort(key=lambda p: p[1])
    qwords = _quantize(words, frame_rate_hz, upper=num_frames)
    units = []
    all_phonemes = []
    for (_, ws, we, wtext), (_, s, e, _) in zip(words, qwords):
        inside = [p for p in phones if p[1] >= ws - 1e-9 and p[2] <= we + 1e-9]
        qphones = _quantize(inside, frame_rate_hz, lower=s, upper=e)
        ids = []
        phone_units = []
        for _, ps, pe, sym in qphones:
            if sym not in phone_index:
                raise ValueError(f"unknown phone symbol {sym!r}")
            ids.append(phone_index[sym])
            phone_units.append(AlignedUnit("phone", ps, pe, (phone_index[sym],), sym))
        all_phonemes.extend(ids)
        units.append(AlignedUnit("word", s, e, tuple(ids), wtext, tuple(phone_units)))
    return units, PhonemeSequence(tuple(all_phonemes), vocab_size)


def read_alignment(path: str | Path, frame_rate_hz: float, phone_index: dict[str, int], vocab_size: int,
                   num_frames: int | None = None):
    return parse_alignment(Path(path).read_text(), frame_rate_hz, phone_index, vocab_size, num_frames)


def format_alignment(rows: Sequence[tuple[str, float, float, str]]) -> str:
    return "".join(f"{k}\t{s:.4f}\t{e:.4f}\t{sym}\n" for k, s, e, sym in rows)
