"""Word-level evaluation sets from CHAT transcripts and timestamped ASR output.

The CHAT words are aligned to ASR words by DTW over surface forms; only
exact matches inherit ASR timestamps and become evaluation words.
"""

from __future__ import annotations

import json
import logging
import math
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import FramePredictionSequence
from .metrics import STUTTER_CODES

log = logging.getLogger(__name__)

PARTITIONS = ("stuttering_bilinguals", "nonstuttering_bilinguals", "fluencybank")


class ChatParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class CodeMap:
    """Maps CHAT annotation glyphs and bracketed codes to categories.

    ``glyphs`` are characters marked inside a word; ``brackets`` are exact
    bracketed codes following a word or ``<...>`` group; ``bracket_prefixes``
    are bracket families that are recognised but carry no disfluency.
    """

    glyphs: dict[str, str] = field(default_factory=lambda: {
        "↫": "sound_syllable_repetition",
        "≠": "block",
        "^": "broken_word",
        "ː": "prolongation",
        ":": "prolongation",
    })
    brackets: dict[str, str] = field(default_factory=lambda: {
        "[^pr]": "prolongation",
        "[^ep]": "epenthesis",
        "[^bw]": "broken_word",
        "[^bl]": "block",
        "[^ssr]": "sound_syllable_repetition",
        "[/]": "word_repetition",
        "[//]": "revision",
        "[///]": "reformulation",
        "[/-]": "false_start",
        "[?]": "uncertain",
        "[!]": "stressed",
    })
    bracket_prefixes: tuple[str, ...] = ("[: ", "[:: ", "[= ", "[=! ", "[+ ", "[* ", "[% ", "[- ", "[>", "[<")


DEFAULT_CODE_MAP = CodeMap()


@dataclass(frozen=True)
class ChatWord:
    surface: str
    codes: frozenset = frozenset()
    raw: str = ""

    @property
    def stutter_codes(self) -> frozenset:
        return self.codes & frozenset(STUTTER_CODES)


@dataclass(frozen=True)
class ChatUtterance:
    speaker: str
    words: tuple[ChatWord, ...]
    lineno: int


@dataclass(frozen=True)
class ChatTranscript:
    utterances: tuple[ChatUtterance, ...]
    headers: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def flat_words(self) -> list[tuple[int, ChatWord]]:
        return [(u, w) for u, utt in enumerate(self.utterances) for w in utt.words]


_TOKEN = re.compile(r"\[[^\]]*\]|<|>|[^\s<>\[\]]+")
_BULLET = re.compile("\x15[^\x15]*\x15")
_PAUSE = re.compile(r"^\(\.+\)$|^\([0-9.:]+\)$")
_SKIP = {",", ";", "„", "‡", "0", "+<", "+^", "+,", "++", "+\""}


def normalize(text: str) -> str:
    """Lowercase, drop accents and everything but letters, digits and inner apostrophes."""
    text = unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode()
    text = re.sub(r"[^a-z0-9']", "", text.lower())
    return text.strip("'")


def _is_terminator(tok: str) -> bool:
    return tok in {".", "?", "!"} or (tok.startswith("+") and tok[-1] in ".?!")


def _clean_word(tok: str, code_map: CodeMap) -> tuple[str, set[str]]:
    codes = set()
    if tok.startswith("&-"):
        codes.add("filler")
        tok = tok[2:]
    elif tok.startswith("&+"):
        codes.add("fragment")
        tok = tok[2:]
    if "↫" in code_map.glyphs and tok.count("↫") >= 2:
        codes.add(code_map.glyphs["↫"])
        tok = re.sub("↫[^↫]*↫", "", tok)
    for glyph, cat in code_map.glyphs.items():
        if glyph != "↫" and glyph in tok:
            codes.add(cat)
            tok = tok.replace(glyph, "")
    tok = tok.split("@", 1)[0]
    tok = tok.replace("(", "").replace(")", "")
    return tok, codes


def parse_chat(text: str, code_map: CodeMap = DEFAULT_CODE_MAP, speakers: Iterable[str] | None = None) -> ChatTranscript:
    """Parse a CHAT document; each main tier becomes one utterance."""
    keep = None if speakers is None else set(speakers)
    logical: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line[0] == "\t":
            if not logical:
                raise ChatParseError(lineno, "continuation line before any tier")
            start, prev = logical[-1]
            logical[-1] = (start, prev + " " + line.strip())
        elif line[0] in "@*%":
            logical.append((lineno, line))
        else:
            raise ChatParseError(lineno, f"unrecognised line {line[:30]!r}")

    headers, utterances, warnings = [], [], []
    for lineno, line in logical:
        if line[0] == "@":
            headers.append(line)
            continue
        if line[0] == "%":
            continue
        m = re.match(r"^\*([A-Za-z0-9_+\-]+):\s+(.*)$", line)
        if m is None:
            raise ChatParseError(lineno, "main tier must look like '*SPK:<tab>text'")
        speaker, body = m.group(1), _BULLET.sub(" ", m.group(2))
        if keep is not None and speaker not in keep:
            continue
        words: list[list] = []  # [surface, codes, raw]
        group: list[int] | None = None
        last: list[int] = []
        for tok in _TOKEN.findall(body):
            if tok == "<":
                group = []
                continue
            if tok == ">":
                last = group or []
                group = None
                continue
            if tok.startswith("["):
                code = code_map.brackets.get(tok)
                if code is None and not tok.startswith(code_map.bracket_prefixes):
                    code = tok
                    warnings.append(f"line {lineno}: unknown code {tok}")
                    log.warning("line %d: unknown CHAT code %s kept as opaque", lineno, tok)
                if code is not None:
                    for i in last:
                        words[i][1].add(code)
                continue
            if _is_terminator(tok) or tok in _SKIP or _PAUSE.match(tok) or tok.startswith("&="):
                last = []
                continue
            surface, codes = _clean_word(tok, code_map)
            if not normalize(surface):
                last = []
                continue
            words.append([surface, codes, tok])
            last = [len(words) - 1]
            if group is not None:
                group.append(len(words) - 1)
        if group is not None:
            raise ChatParseError(lineno, "unclosed '<' group")
        utterances.append(ChatUtterance(
            speaker, tuple(ChatWord(s, frozenset(c), r) for s, c, r in words), lineno))
    return ChatTranscript(tuple(utterances), tuple(headers), tuple(warnings))


def read_chat(path: str | Path, **kw) -> ChatTranscript:
    return parse_chat(Path(path).read_text(encoding="utf-8"), **kw)


# ---------------------------------------------------------------------------
# ASR transcripts


@dataclass(frozen=True)
class AsrWord:
    text: str
    start: float
    end: float


@dataclass(frozen=True)
class AsrTranscript:
    words: tuple[AsrWord, ...]

    def __post_init__(self):
        prev = -math.inf
        for w in self.words:
            if not 0 <= w.start < w.end:
                raise ValueError(f"ASR word {w.text!r}: need 0 <= start < end")
            if w.start < prev:
                raise ValueError(f"ASR word {w.text!r} out of time order")
            prev = w.start


def parse_asr(text: str) -> AsrTranscript:
    """``word<TAB>start<TAB>end`` per line, times in seconds."""
    words = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ValueError(f"ASR line {lineno}: expected word, start, end")
        words.append(AsrWord(parts[0], float(parts[1]), float(parts[2])))
    return AsrTranscript(tuple(words))


def read_asr(path: str | Path) -> AsrTranscript:
    return parse_asr(Path(path).read_text(encoding="utf-8"))


def format_asr(words: Sequence[AsrWord]) -> str:
    return "".join(f"{w.text}\t{w.start:.3f}\t{w.end:.3f}\n" for w in words)


# ---------------------------------------------------------------------------
# DTW


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def word_cost(a: str, b: str) -> float:
    """0 for equal normalised forms, else edit distance over the longer length."""
    a, b = normalize(a), normalize(b)
    if a == b:
        return 0.0
    return edit_distance(a, b) / max(len(a), len(b))


def _surface(w) -> str:
    if isinstance(w, str):
        return w
    return getattr(w, "surface", None) or getattr(w, "text")


# tie tolerance for accumulated costs built from rationals in different orders
TIE_TOL = 1e-9
# traceback preference: diagonal, then advance ASR only, then advance CHAT only
STEPS = ((1, 1), (1, 0), (0, 1))


@dataclass(frozen=True)
class WordAlignment:
    path: tuple[tuple[int, int], ...]
    exact: tuple[bool, ...]
    cost: float
    n_asr: int
    n_chat: int

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """Exact one-to-one pairs; strictly increasing in both indices."""
        return tuple(p for p, e in zip(self.path, self.exact) if e)

    @property
    def unmatched_asr(self) -> tuple[int, ...]:
        hit = {i for i, _ in self.pairs}
        return tuple(i for i in range(self.n_asr) if i not in hit)

    @property
    def unmatched_chat(self) -> tuple[int, ...]:
        hit = {j for _, j in self.pairs}
        return tuple(j for j in range(self.n_chat) if j not in hit)


def dtw_cost_matrix(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Minimum-cost monotone path from (0, 0) to (n-1, m-1) over a cost matrix."""
    rows = np.asarray(cost, dtype=float).tolist()
    n, m = len(rows), len(rows[0])
    inf = math.inf
    # plain lists: this runs per session and in exhaustive tests, numpy scalar access is slow
    acc = [[inf] * (m + 1) for _ in range(n + 1)]
    acc[0][0] = 0.0
    for i in range(1, n + 1):
        prev, cur, row = acc[i - 1], acc[i], rows[i - 1]
        for j in range(1, m + 1):
            a, b, c = prev[j - 1], prev[j], cur[j - 1]
            cur[j] = row[j - 1] + (a if a <= b and a <= c else b if b <= c else c)
    path = [(n - 1, m - 1)]
    i, j = n, m
    while i != 1 or j != 1:
        cands = [(acc[i - di][j - dj], di, dj) for di, dj in STEPS]
        best = min(cands[0][0], cands[1][0], cands[2][0])
        _, di, dj = next(c for c in cands if c[0] <= best + TIE_TOL)
        i, j = i - di, j - dj
        path.append((i - 1, j - 1))
    return float(acc[n][m]), path[::-1]


def dtw_align(asr_words: Sequence, chat_words: Sequence, cost: Callable[[str, str], float] = word_cost) -> WordAlignment:
    if not asr_words or not chat_words:
        raise ValueError("both word sequences must be non-empty")
    a = [_surface(w) for w in asr_words]
    c = [_surface(w) for w in chat_words]
    matrix = np.array([[cost(x, y) for y in c] for x in a], dtype=float)
    total, path = dtw_cost_matrix(matrix)
    used_a, used_c = set(), set()
    exact = []
    for i, j in path:
        ok = normalize(a[i]) == normalize(c[j]) and i not in used_a and j not in used_c
        if ok:
            used_a.add(i)
            used_c.add(j)
        exact.append(ok)
    return WordAlignment(tuple(path), tuple(exact), total, len(a), len(c))


# ---------------------------------------------------------------------------
# labels, slices and scores


@dataclass(frozen=True)
class LabeledWord:
    surface: str
    start: float
    end: float
    label: str  # "stutter" or "fluent"
    partition: str = "fluencybank"
    audio_id: str = ""
    utterance: int = 0
    chat_index: int = 0
    asr_index: int = 0
    codes: frozenset = frozenset()

    @property
    def is_stutter(self) -> bool:
        return self.label == "stutter"


def stutter_label(codes: Iterable[str]) -> str:
    return "stutter" if set(codes) & set(STUTTER_CODES) else "fluent"


def margin_spans(asr: AsrTranscript, margin: float, duration: float | None = None) -> list[tuple[float, float]]:
    """Widen every ASR word by ``margin`` each side without crossing neighbour midpoints."""
    words = asr.words
    spans = []
    for k, w in enumerate(words):
        lo = w.start - margin
        hi = w.end + margin
        if k > 0:
            lo = max(lo, 0.5 * (words[k - 1].end + w.start))
        if k + 1 < len(words):
            hi = min(hi, 0.5 * (w.end + words[k + 1].start))
        lo = max(lo, 0.0)
        if duration is not None:
            hi = min(hi, duration)
        spans.append((lo, max(lo, hi)))
    return spans


def derive_word_labels(alignment: WordAlignment, chat: ChatTranscript, asr: AsrTranscript,
                       margin_seconds: float = 0.2, duration: float | None = None,
                       partition: str = "fluencybank", audio_id: str = "") -> list[LabeledWord]:
    if partition not in PARTITIONS:
        raise ValueError(f"unknown partition {partition!r}")
    flat = chat.flat_words()
    spans = margin_spans(asr, margin_seconds, duration)
    out = []
    for i, j in alignment.pairs:
        utt, word = flat[j]
        lo, hi = spans[i]
        out.append(LabeledWord(word.surface, lo, hi, stutter_label(word.codes), partition, audio_id,
                               utt, j, i, word.codes))
    return out


@dataclass(frozen=True)
class Segment:
    utterance: int
    start: float
    end: float
    audio: np.ndarray | None = field(default=None, repr=False, compare=False)


def slice_utterances(words: Sequence[LabeledWord], chat: ChatTranscript, audio=None,
                     sample_rate: int | None = None) -> tuple[list[Segment], list[int]]:
    """One segment per CHAT line spanning its first to last exact word.

    Returns the segments and the indices of lines skipped for lack of exact words.
    """
    by_line: dict[int, list[LabeledWord]] = {}
    for w in words:
        by_line.setdefault(w.utterance, []).append(w)
    segments, skipped = [], []
    for u in range(len(chat.utterances)):
        line_words = by_line.get(u)
        if not line_words:
            skipped.append(u)
            log.info("utterance %d has no exactly aligned words; skipped", u)
            continue
        start = min(w.start for w in line_words)
        end = max(w.end for w in line_words)
        clip = None
        if audio is not None:
            clip = np.asarray(audio)[int(round(start * sample_rate)):int(round(end * sample_rate))]
        segments.append(Segment(u, start, end, clip))
    segments.sort(key=lambda s: s.start)
    return segments, skipped


def word_frame_span(start: float, end: float, frame_rate_hz: float, num_frames: int, offset: float = 0.0,
                    slack: int = 2) -> tuple[int, int]:
    lo = int(math.floor((start - offset) * frame_rate_hz + 1e-9))
    hi = int(math.ceil((end - offset) * frame_rate_hz - 1e-9))
    lo = max(lo, 0)
    hi = max(hi, lo + 1)
    # the strided encoder drops up to a frame at the tail of a clip
    if hi > num_frames and hi - num_frames <= slack:
        hi = num_frames
        lo = min(lo, hi - 1)
    if lo < 0 or hi > num_frames or lo >= hi:
        raise ValueError(f"word span [{start}, {end}] outside the {num_frames}-frame prediction")
    return lo, hi


def score_words(frame_probs: FramePredictionSequence, words: Sequence[LabeledWord], frame_rate_hz: float,
                offset: float = 0.0, reduction: str = "max") -> np.ndarray:
    """Reduce positive-class probability over each word's frames (max by default)."""
    pos = frame_probs.positive.detach().double().numpy()
    out = []
    for w in words:
        lo, hi = word_frame_span(w.start, w.end, frame_rate_hz, len(pos), offset)
        seg = pos[lo:hi]
        out.append(float(seg.max() if reduction == "max" else seg.mean()))
    return np.array(out)


# ---------------------------------------------------------------------------
# manifests

WORD_FIELDS = ("audio_id", "partition", "surface", "start", "end", "label",
               "utterance", "index", "segment_start", "segment_end", "audio")


def manifest_rows(chat: ChatTranscript, words: Sequence[LabeledWord], segments: Sequence[Segment],
                  audio_id: str, partition: str, audio_path: str) -> list[dict]:
    """One row per CHAT word; words without exact alignment carry nulls for timing and label."""
    by_chat = {w.chat_index: w for w in words}
    seg_by_line = {s.utterance: s for s in segments}
    rows = []
    for j, (u, cw) in enumerate(chat.flat_words()):
        lw = by_chat.get(j)
        seg = seg_by_line.get(u)
        rows.append({
            "audio_id": audio_id,
            "partition": partition,
            "surface": cw.surface,
            "start": None if lw is None else round(lw.start, 6),
            "end": None if lw is None else round(lw.end, 6),
            "label": None if lw is None else lw.label,
            "utterance": u,
            "index": j,
            "segment_start": None if seg is None else round(seg.start, 6),
            "segment_end": None if seg is None else round(seg.end, 6),
            "audio": audio_path,
        })
    return rows


def dumps_jsonl(rows: Iterable[dict], fields: Sequence[str] | None = None) -> str:
    out = []
    for row in rows:
        if fields is not None:
            row = {k: row[k] for k in fields}
        out.append(json.dumps(row, ensure_ascii=False))
    return "".join(line + "\n" for line in out)


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows
