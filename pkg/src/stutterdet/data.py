"""Audio files and dataset manifests.

Manifests are JSON-lines files; relative paths inside them resolve against
the manifest's own directory.
"""

from __future__ import annotations

import hashlib
import wave
from pathlib import Path

import numpy as np

from .augment import read_alignment
from .backbone import num_frames
from .core import PHONE_INDEX
from .train import LabeledUtterance, PretrainUtterance
from .wordeval import read_jsonl


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        rate = fh.getframerate()
        channels = fh.getnchannels()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    data = data.reshape(-1, channels).mean(axis=1) if channels > 1 else data
    return (data / 32768.0).astype(np.float32), rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_pretrain_manifest(path: str | Path, frame_rate_hz: float, vocab_size: int = 40) -> dict[str, list[PretrainUtterance]]:
    """Rows: ``{"utt_id", "audio", "alignment", "split"}``; returns utterances grouped by split."""
    base = Path(path).parent
    out: dict[str, list[PretrainUtterance]] = {}
    for row in read_jsonl(path):
        wav, rate = read_wav(_resolve(base, row["audio"]))
        units, phonemes = read_alignment(_resolve(base, row["alignment"]), frame_rate_hz, PHONE_INDEX,
                                         vocab_size, num_frames(len(wav)))
        utt = PretrainUtterance(row["utt_id"], wav, rate, tuple(units), phonemes)
        out.setdefault(row.get("split", "train"), []).append(utt)
    return out


def load_labeled_manifest(path: str | Path) -> dict[str, list[LabeledUtterance]]:
    """Rows: ``{"utt_id", "audio", "label", "types", "split"}``."""
    base = Path(path).parent
    out: dict[str, list[LabeledUtterance]] = {}
    for row in read_jsonl(path):
        wav, rate = read_wav(_resolve(base, row["audio"]))
        utt = LabeledUtterance(row["utt_id"], wav, rate, bool(row["label"]), tuple(row.get("types", ())))
        out.setdefault(row.get("split", "train"), []).append(utt)
    return out


def resolve_audio(manifest_path: str | Path, audio: str) -> Path:
    return _resolve(Path(manifest_path).parent, audio)
