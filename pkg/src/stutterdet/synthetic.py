"""Desk-scale synthetic speech for end-to-end runs without licensed corpora.

Each phone is a pair of stationary tones. Disfluent stretches additionally
carry a high-band noise marker, which is the detectable pattern the model
has to find. Repetitions and prolongations, which frame splicing can
imitate, use one band; blocks and interjections, which it cannot, use a
lower band that only partly overlaps it.
Fluent read speech (with phone alignments) stands in for pretraining data;
labelled clips stand in for utterance-level finetuning data; CHAT, ASR and
WAV triples stand in for the clinical word-level set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AlignedUnit, AugmentedExample, format_alignment
from .backbone import HOP, SAMPLE_RATE, FrozenBackbone
from .core import PHONE_INDEX, PHONES, FrameSequence, PhonemeSequence, seeded_rng
from .train import LabeledUtterance, PretrainUtterance
from .wordeval import AsrWord, format_asr

FRAME = 1.0 / (SAMPLE_RATE / HOP)
TAIL_PAD = 80  # makes a clip of k hops yield exactly k conv frames
FILLER_PHONE = PHONE_INDEX["AH"]
UTTERANCE_DISFLUENCIES = ("block", "interjection", "prolongation", "sound_repetition", "word_repetition")
WORD_DISFLUENCIES = ("block", "prolongation", "sound_repetition", "broken_word")
UNSPLICED = ("block", "interjection")


@dataclass
class SynthWord:
    text: str
    phones: tuple[int, ...]
    start: float  # full extent including any disfluent stretch
    end: float
    phone_spans: list[tuple[int, float, float]] = field(default_factory=list)
    disfluency: str | None = None
    filler: bool = False
    asr_start: float = 0.0
    asr_end: float = 0.0


@dataclass
class SynthUtterance:
    utt_id: str
    waveform: np.ndarray
    words: list[SynthWord]
    marker_frames: np.ndarray  # bool per conv frame

    @property
    def types(self) -> tuple[str, ...]:
        kinds = {w.disfluency for w in self.words if w.disfluency}
        return tuple(sorted(kinds))


class SyntheticSpeech:
    def __init__(self, seed: int = 0, lexicon_size: int = 48, marker_amp: float = 0.1,
                 marker_band: tuple[float, float] = (5500.0, 7500.0),
                 unspliced_band: tuple[float, float] | None = (4600.0, 6000.0)):
        self.seed = seed
        self.marker_amp = marker_amp
        self.marker_band = marker_band
        # None puts every disfluency type in marker_band
        self.unspliced_band = unspliced_band or marker_band
        g = np.random.default_rng(10_000 + seed)
        self.freqs = {i: (g.uniform(200, 1200), g.uniform(1300, 3600)) for i in range(1, len(PHONES) + 1)}
        lexicon: dict[str, tuple[int, ...]] = {}
        while len(lexicon) < lexicon_size:
            phones = tuple(int(p) for p in g.integers(1, len(PHONES) + 1, size=int(g.integers(2, 5))))
            text = "".join(PHONES[p - 1].lower() for p in phones)
            lexicon.setdefault(text, phones)
        self.lexicon = sorted(lexicon.items())

    # -- rendering primitives

    def _tone(self, phone: int, n_frames: int, rng) -> np.ndarray:
        t = np.arange(n_frames * HOP) / SAMPLE_RATE
        f1, f2 = self.freqs[phone]
        return (0.3 * np.sin(2 * np.pi * f1 * t + rng.uniform(0, 2 * np.pi))
                + 0.2 * np.sin(2 * np.pi * f2 * t + rng.uniform(0, 2 * np.pi)))

    def band(self, kind: str) -> tuple[float, float]:
        return self.unspliced_band if kind in UNSPLICED else self.marker_band

    def _marker(self, n_samples: int, rng, band: tuple[float, float] | None = None) -> np.ndarray:
        """Band-limited Gaussian noise with RMS ``marker_amp``."""
        spec = np.fft.rfft(rng.standard_normal(n_samples))
        hz = np.fft.rfftfreq(n_samples, 1.0 / SAMPLE_RATE)
        lo, hi = band or self.marker_band
        spec[(hz < lo) | (hz > hi)] = 0
        noise = np.fft.irfft(spec, n_samples)
        return self.marker_amp * noise / max(float(np.sqrt(np.mean(noise ** 2))), 1e-12)

    def utterance(self, rng: np.random.Generator, utt_id: str, n_words: int | None = None,
                  disfluency: str | None = None, words: list[tuple[str, tuple[int, ...]]] | None = None,
                  stutter_at: dict[int, str] | None = None, filler_at: set[int] = frozenset(),
                  lead: int = 3) -> SynthUtterance:
        """Render one clip; ``disfluency`` places that event on a random word."""
        if words is None:
            n_words = n_words or int(rng.integers(4, 8))
            words = [self.lexicon[int(i)] for i in rng.integers(0, len(self.lexicon), size=n_words)]
        stutter_at = dict(stutter_at or {})
        if disfluency is not None:
            stutter_at[int(rng.integers(len(words)))] = disfluency
        chunks: list[np.ndarray] = []
        marked: list[tuple[int, int, str]] = []
        cursor = 0

        def emit(samples, marker: str | None = None):
            nonlocal cursor
            n = len(samples) // HOP
            if marker:
                marked.append((cursor, cursor + n, marker))
            chunks.append(samples)
            cursor += n

        def silence(n):
            emit(np.zeros(n * HOP))

        gain = rng.uniform(0.6, 1.0)
        silence(lead)
        out_words = []
        for k, (text, phones) in enumerate(words):
            if k:
                silence(int(rng.integers(4, 7)))
            if k in filler_at:
                f0 = cursor
                emit(self._tone(FILLER_PHONE, int(rng.integers(4, 7)), rng))
                out_words.append(SynthWord("uh", (FILLER_PHONE,), f0 * FRAME, cursor * FRAME,
                                           [(FILLER_PHONE, f0 * FRAME, cursor * FRAME)], filler=True))
                silence(int(rng.integers(4, 7)))
            kind = stutter_at.get(k)
            w0 = cursor
            if kind == "block":
                emit(np.zeros(int(rng.integers(4, 8)) * HOP), marker=kind)
            elif kind == "interjection":
                emit(self._tone(FILLER_PHONE, int(rng.integers(5, 9)), rng), marker=kind)
                silence(2)
            elif kind == "sound_repetition":
                for _ in range(int(rng.integers(1, 3))):
                    emit(self._tone(phones[0], int(rng.integers(3, 5)), rng), marker=kind)
                    emit(np.zeros(HOP), marker=kind)
            elif kind == "word_repetition":
                for p in phones:
                    emit(self._tone(p, 3, rng), marker=kind)
                emit(np.zeros(HOP), marker=kind)
            spans = []
            for j, p in enumerate(phones):
                p0 = cursor
                emit(self._tone(p, int(rng.integers(3, 6)), rng))
                if kind == "prolongation" and j == len(phones) - 1:
                    emit(self._tone(p, int(rng.integers(5, 10)), rng), marker=kind)
                if kind == "broken_word" and j == 0 and len(phones) > 1:
                    emit(np.zeros(int(rng.integers(3, 6)) * HOP), marker=kind)
                spans.append((p, p0 * FRAME, cursor * FRAME))
            w = SynthWord(text, phones, w0 * FRAME, cursor * FRAME, spans, kind)
            # the recogniser clips the onset of a silent block
            w.asr_start = (w0 + 1) * FRAME if kind == "block" else w0 * FRAME
            w.asr_end = cursor * FRAME
            out_words.append(w)
        silence(lead)
        wave = gain * np.concatenate(chunks)
        mask = np.zeros(cursor, dtype=bool)
        for a, b, kind in marked:
            wave[a * HOP:b * HOP] += self._marker((b - a) * HOP, rng, self.band(kind))
            mask[a:b] = True
        wave = np.concatenate([wave, np.zeros(TAIL_PAD)])
        wave += 0.005 * rng.standard_normal(len(wave))
        for w in out_words:
            w.asr_start = max(0.0, w.asr_start)
        return SynthUtterance(utt_id, wave.astype(np.float32), out_words, mask)

    # -- pretraining data

    def fluent_utterance(self, rng, utt_id: str) -> tuple[PretrainUtterance, SynthUtterance]:
        u = self.utterance(rng, utt_id)
        return to_pretrain(u), u

    def pretrain_set(self, n: int, seed: int | None = None) -> list[PretrainUtterance]:
        rng = seeded_rng(self.seed if seed is None else seed, 11)
        return [self.fluent_utterance(rng, f"pre{i:04d}")[0] for i in range(n)]

    # -- finetuning data

    def labeled_set(self, n: int, seed: int | None = None, positive_fraction: float = 0.5) -> list[LabeledUtterance]:
        rng = seeded_rng(self.seed if seed is None else seed, 12)
        n_pos = int(round(n * positive_fraction))
        out = []
        for i in range(n):
            kind = UTTERANCE_DISFLUENCIES[i % len(UTTERANCE_DISFLUENCIES)] if i < n_pos else None
            u = self.utterance(rng, f"utt{i:04d}", disfluency=kind)
            out.append(LabeledUtterance(u.utt_id, u.waveform, SAMPLE_RATE, kind is not None, u.types))
        order = rng.permutation(n)
        return [out[i] for i in order]

    # -- word-level clinical-style data

    def session(self, rng, audio_id: str, n_lines: int = 5, stutter_prob: float = 0.15,
                filler_prob: float = 0.1, asr_error_prob: float = 0.05):
        """Returns (CHAT text, ASR words, waveform, per-CHAT-word stutter flags)."""
        chat_lines, asr_words, flags = [], [], []
        waves = []
        offset = 0.0
        for li in range(n_lines):
            n_words = int(rng.integers(3, 7))
            words = [self.lexicon[int(i)] for i in rng.integers(0, len(self.lexicon), size=n_words)]
            stutter_at = {k: WORD_DISFLUENCIES[int(rng.integers(len(WORD_DISFLUENCIES)))]
                          for k in range(n_words) if rng.random() < stutter_prob}
            filler_at = {k for k in range(1, n_words) if rng.random() < filler_prob}
            u = self.utterance(rng, f"{audio_id}_{li}", words=words, stutter_at=stutter_at,
                               filler_at=filler_at, lead=8)
            tokens = []
            for w in u.words:
                if w.filler:
                    tokens.append("&-uh")
                    flags.append(False)
                    continue
                tokens.append(chat_token(w.text, w.disfluency))
                flags.append(w.disfluency is not None)
                text = w.text
                if rng.random() < asr_error_prob:
                    text = text[:-1] + ("x" if text[-1] != "x" else "y")
                asr_words.append(AsrWord(text, round(offset + w.asr_start, 3), round(offset + w.asr_end, 3)))
            chat_lines.append("*PAR:\t" + " ".join(tokens) + " .")
            wave = u.waveform[:-TAIL_PAD]
            waves.append(wave)
            offset += len(wave) / SAMPLE_RATE
        header = ["@UTF8", "@Begin", "@Languages:\teng", "@Participants:\tPAR Participant"]
        chat = "\n".join(header + chat_lines + ["@End"]) + "\n"
        wave = np.concatenate(waves + [np.zeros(TAIL_PAD, dtype=np.float32)])
        return chat, asr_words, wave, flags


def chat_token(text: str, disfluency: str | None) -> str:
    if disfluency == "block":
        return "≠" + text
    if disfluency == "prolongation":
        return text[0] + "ː" + text[1:]
    if disfluency == "sound_repetition":
        return f"↫{text[0]}-{text[0]}↫{text}"
    if disfluency == "broken_word":
        return text[:2] + "^" + text[2:]
    return text


def to_pretrain(u: SynthUtterance, vocab_size: int = 40) -> PretrainUtterance:
    rate = SAMPLE_RATE / HOP
    units = []
    phonemes = []
    for w in u.words:
        phones = tuple(AlignedUnit("phone", round(s * rate), round(e * rate), (p,), PHONES[p - 1])
                       for p, s, e in w.phone_spans)
        units.append(AlignedUnit("word", round(w.start * rate), round(w.end * rate), w.phones, w.text, phones))
        phonemes.extend(w.phones)
    return PretrainUtterance(u.utt_id, u.waveform, SAMPLE_RATE, tuple(units), PhonemeSequence(tuple(phonemes), vocab_size))


def alignment_rows(u: SynthUtterance) -> list[tuple[str, float, float, str]]:
    rows = []
    for w in u.words:
        rows.append(("word", w.start, w.end, w.text))
        rows.extend(("phone", s, e, PHONES[p - 1]) for p, s, e in w.phone_spans)
    return rows


class MarkerInjector:
    """Adds the marker's mean conv-feature signature to inserted (positive) frames.

    The signature is measured as conv(phone + marker) - conv(phone) over the
    phone inventory plus silence, scaled by ``strength``.
    """

    def __init__(self, backbone: FrozenBackbone, speech: SyntheticSpeech, strength: float = 1.0, seed: int = 0):
        rng = seeded_rng(seed, 13)
        diffs = []
        for p in range(len(PHONES) + 1):
            tone = speech._tone(p, 12, rng) if p else np.zeros(12 * HOP)
            tone = np.concatenate([tone, np.zeros(TAIL_PAD)]) + 0.005 * rng.standard_normal(12 * HOP + TAIL_PAD)
            marker = speech._marker(len(tone), rng)
            a = backbone.extract_conv_features(tone, SAMPLE_RATE).frames
            b = backbone.extract_conv_features(tone + marker, SAMPLE_RATE).frames
            diffs.append((b - a)[1:-1].mean(dim=0))
        self.signature = strength * torch.stack(diffs).mean(dim=0)

    def __call__(self, example: AugmentedExample) -> FrameSequence:
        pos = torch.as_tensor(example.labels.positive)
        frames = example.frames.frames + pos[:, None].to(example.frames.frames.dtype) * self.signature
        return FrameSequence(frames, example.frames.frame_rate_hz)


# ---------------------------------------------------------------------------
# fixture writer


def write_fixtures(out: str | Path, seed: int = 0, n_pretrain: int = 20, n_labeled: int = 40,
                   n_sessions: int = 3, speech: SyntheticSpeech | None = None) -> dict[str, Path]:
    """Write a complete offline fixture tree; returns the key paths."""
    from .data import write_wav

    out = Path(out)
    speech = speech or SyntheticSpeech(seed)
    for sub in ("pretrain", "labeled", "chat", "asr", "audio"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rng = seeded_rng(seed, 21)
    rows = []
    n_val = max(1, n_pretrain // 5)
    for i in range(n_pretrain):
        _, u = speech.fluent_utterance(rng, f"pre{i:04d}")
        write_wav(out / "pretrain" / f"{u.utt_id}.wav", u.waveform, SAMPLE_RATE)
        (out / "pretrain" / f"{u.utt_id}.tsv").write_text(format_alignment(alignment_rows(u)))
        rows.append({"utt_id": u.utt_id, "audio": f"pretrain/{u.utt_id}.wav",
                     "alignment": f"pretrain/{u.utt_id}.tsv", "split": "val" if i < n_val else "train"})
    _write_jsonl(out / "pretrain.jsonl", rows)

    rows = []
    labeled = speech.labeled_set(n_labeled, seed=seed)
    n_val = n_test = max(2, n_labeled // 5)
    for i, u in enumerate(labeled):
        write_wav(out / "labeled" / f"{u.utt_id}.wav", u.waveform, SAMPLE_RATE)
        split = "val" if i < n_val else "test" if i < n_val + n_test else "train"
        rows.append({"utt_id": u.utt_id, "audio": f"labeled/{u.utt_id}.wav", "label": int(u.label),
                     "types": list(u.types), "split": split})
    _write_jsonl(out / "labeled.jsonl", rows)

    rng = seeded_rng(seed, 22)
    partitions = ("fluencybank", "stuttering_bilinguals", "nonstuttering_bilinguals")
    for s in range(n_sessions):
        part = partitions[s % len(partitions)]
        audio_id = f"session{s:02d}"
        chat, asr, wave, _ = speech.session(rng, audio_id, stutter_prob=0.02 if part.startswith("non") else 0.2)
        (out / "chat" / part).mkdir(exist_ok=True)
        (out / "chat" / part / f"{audio_id}.cha").write_text(chat, encoding="utf-8")
        (out / "asr" / f"{audio_id}.tsv").write_text(format_asr(asr))
        write_wav(out / "audio" / f"{audio_id}.wav", wave, SAMPLE_RATE)
    return {"root": out, "pretrain": out / "pretrain.jsonl", "labeled": out / "labeled.jsonl",
            "chat": out / "chat", "asr": out / "asr", "audio": out / "audio"}


def _write_jsonl(path: Path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
