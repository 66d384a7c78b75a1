import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import dtw_brute, levenshtein
from stutterdet.core import FramePredictionSequence
from stutterdet.wordeval import (
    AsrTranscript,
    AsrWord,
    ChatParseError,
    CodeMap,
    derive_word_labels,
    dtw_align,
    dtw_cost_matrix,
    dumps_jsonl,
    format_asr,
    manifest_rows,
    margin_spans,
    normalize,
    parse_asr,
    parse_chat,
    read_jsonl,
    score_words,
    slice_utterances,
    stutter_label,
    word_cost,
    word_frame_span,
)

HEADER = "@UTF8\n@Begin\n@Participants:\tPAR Participant\n"


def chat(*lines):
    return parse_chat(HEADER + "".join(f"*PAR:\t{l}\n" for l in lines) + "@End\n")


def asr(*triples):
    return AsrTranscript(tuple(AsrWord(*t) for t in triples))


# --- CHAT parsing ---------------------------------------------------------------

def test_single_prolongation_code():
    t = chat("I want soː much .")
    words = t.utterances[0].words
    assert [w.surface for w in words] == ["I", "want", "so", "much"]
    assert words[2].codes == {"prolongation"}
    assert all(not w.codes for k, w in enumerate(words) if k != 2)


def test_fluent_line_has_no_codes():
    assert all(not w.codes for w in chat("the cat sat .").utterances[0].words)


def test_block_and_sound_repetition_on_one_word():
    w = chat("≠b↫b-b↫all .").utterances[0].words[0]
    assert w.surface == "ball"
    assert w.stutter_codes == {"block", "sound_syllable_repetition"}


def test_bracket_codes_attach_to_word_or_group():
    t = chat("<I want> [/] I want [^bl] it .")
    words = t.utterances[0].words
    assert [sorted(w.codes) for w in words[:2]] == [["word_repetition"], ["word_repetition"]]
    assert words[3].codes == {"block"}
    assert not words[4].codes


def test_fillers_pauses_events_and_continuations():
    t = parse_chat(HEADER + "*PAR:\t&-um the (.) &=laughs dog@c\n\twent home .\n%mor:\tn|dog\n@End\n")
    words = t.utterances[0].words
    assert [w.surface for w in words] == ["um", "the", "dog", "went", "home"]
    assert words[0].codes == {"filler"}
    assert t.headers[-1] == "@End" and len(t.headers) == 4


def test_speaker_filter_and_unknown_code_warning():
    text = HEADER + "*INV:\tso what .\n*PAR:\tit [^zz] goes .\n@End\n"
    t = parse_chat(text, speakers=["PAR"])
    assert len(t.utterances) == 1 and t.utterances[0].speaker == "PAR"
    assert t.utterances[0].words[0].codes == {"[^zz]"}
    assert t.warnings


def test_custom_code_map():
    cm = CodeMap(glyphs={"#": "block"}, brackets={}, bracket_prefixes=())
    assert chat("#go .").utterances[0].words[0].codes == set()  # default map ignores '#'
    t = parse_chat(HEADER + "*PAR:\t#go .\n", code_map=cm)
    assert t.utterances[0].words[0].codes == {"block"}


@pytest.mark.parametrize("text", ["*PAR:\tgo <home .\n", "hello\n", "\tcontinued\n", "*PAR go .\n"])
def test_chat_errors_carry_line_numbers(text):
    with pytest.raises(ChatParseError) as exc:
        parse_chat(text)
    assert exc.value.lineno == 1


# --- ASR files --------------------------------------------------------------------

def test_asr_round_trip():
    words = (AsrWord("hello", 0.1, 0.4), AsrWord("there", 0.5, 0.9))
    assert parse_asr(format_asr(words)).words == words


@pytest.mark.parametrize("text", ["a\t0.5\t0.4\n", "a\t0.1\n", "a\t0.5\t0.6\nb\t0.2\t0.3\n"])
def test_asr_errors(text):
    with pytest.raises(ValueError):
        parse_asr(text)


# --- DTW -------------------------------------------------------------------------

def test_cost_definition():
    assert word_cost("Cat,", "cat") == 0.0
    assert word_cost("cat", "cart") == levenshtein("cat", "cart") / 4
    assert normalize("Don't!") == "don't"


def test_identity_alignment():
    words = ["a", "dog", "ran"]
    al = dtw_align(words, words)
    assert al.path == ((0, 0), (1, 1), (2, 2)) and all(al.exact) and al.cost == 0


def test_inserted_filler_absorbed():
    al = dtw_align(["the", "cat"], ["the", "uh", "cat"])
    assert al.pairs == ((0, 0), (1, 2))
    assert al.unmatched_chat == (1,)
    cost, path = dtw_brute([[word_cost(a, c) for c in ["the", "uh", "cat"]] for a in ["the", "cat"]])
    assert al.cost == cost and list(al.path) == path


def test_disjoint_vocabularies_give_no_pairs():
    assert dtw_align(["xx", "yy"], ["aa", "bb", "cc"]).pairs == ()


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        dtw_align([], ["a"])


WORDS = ["the", "then", "cat", "cart", "a", "uh", "dog", "do"]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=6),
       st.lists(st.sampled_from(WORDS), min_size=1, max_size=6))
def test_dtw_matches_brute_force_with_graded_costs(a, c):
    al = dtw_align(a, c)
    cost, path = dtw_brute([[word_cost(x, y) for y in c] for x in a])
    assert abs(al.cost - cost) <= 1e-9
    assert list(al.path) == path
    pairs = al.pairs
    assert all(p[0] < q[0] and p[1] < q[1] for p, q in zip(pairs, pairs[1:]))
    assert len(pairs) <= min(len(a), len(c))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_dtw_on_random_real_matrices(n, m, data):
    vals = data.draw(st.lists(st.floats(0, 1, allow_nan=False), min_size=n * m, max_size=n * m))
    cost = np.array(vals).reshape(n, m)
    got, path = dtw_cost_matrix(cost)
    want, bpath = dtw_brute(cost.tolist())
    assert abs(got - want) <= 1e-9
    assert sum(cost[i, j] for i, j in path) == pytest.approx(want, abs=1e-9)
    assert path[0] == (0, 0) and path[-1] == (n - 1, m - 1)


# --- labels, margins, segments -------------------------------------------------------

def two_line_session():
    t = chat("I ≠want it .", "so much .")
    a = asr(("i", 0.5, 0.7), ("want", 0.8, 1.2), ("it", 1.3, 1.5), ("so", 3.0, 3.2), ("much", 3.3, 3.6))
    return t, a


def test_labels_from_exact_words_with_margin():
    t, a = two_line_session()
    words = derive_word_labels(dtw_align(a.words, [w for _, w in t.flat_words()]), t, a, 0.2, 4.0)
    assert [w.label for w in words] == ["fluent", "stutter", "fluent", "fluent", "fluent"]
    # 0.8 - 0.2 = 0.6 is within the midpoint 0.75 to the previous word, so it stays
    assert words[1].start == pytest.approx(0.75) and words[1].end == pytest.approx(1.25)
    assert words[0].start == pytest.approx(0.3)


def test_non_exact_pair_excluded():
    t = chat("I want it .")
    a = asr(("i", 0.1, 0.2), ("wand", 0.3, 0.4), ("it", 0.5, 0.6))
    words = derive_word_labels(dtw_align(a.words, [w for _, w in t.flat_words()]), t, a)
    assert [w.surface for w in words] == ["I", "it"]


def test_label_depends_only_on_code_inventory():
    assert stutter_label({"block"}) == "stutter"
    assert stutter_label({"word_repetition", "filler"}) == "fluent"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(0.0, 0.5)), min_size=1, max_size=8),
       st.floats(0, 0.5))
def test_margins_never_overlap_or_leave_audio(layout, margin):
    t, words = 0.0, []
    for length, gap in layout:
        t += gap
        words.append(AsrWord("w", t, t + length))
        t += length
    spans = margin_spans(AsrTranscript(tuple(words)), margin, duration=t)
    for (lo, hi), w in zip(spans, words):
        assert 0 <= lo <= hi <= t
        assert lo <= w.start and hi >= w.end
    assert all(p[1] <= q[0] + 1e-12 for p, q in zip(spans, spans[1:]))


def test_segments_one_per_line_in_time_order():
    t, a = two_line_session()
    words = derive_word_labels(dtw_align(a.words, [w for _, w in t.flat_words()]), t, a, 0.2, 4.0)
    audio = np.arange(64000, dtype=np.float32)
    segs, skipped = slice_utterances(words, t, audio, 16000)
    assert skipped == []
    assert [(s.utterance, s.start, s.end) for s in segs] == [(0, pytest.approx(0.3), pytest.approx(1.7)),
                                                            (1, pytest.approx(2.8), pytest.approx(3.8))]
    assert segs[0].end <= segs[1].start
    assert segs[0].audio[0] == 0.3 * 16000


def test_line_without_exact_words_is_skipped():
    t = chat("hello there .", "nothing matches .")
    a = asr(("hello", 0.1, 0.3), ("there", 0.4, 0.6))
    words = derive_word_labels(dtw_align(a.words, [w for _, w in t.flat_words()]), t, a)
    segs, skipped = slice_utterances(words, t)
    assert len(segs) == 1 and skipped == [1]


def probs(p):
    p = torch.tensor(p, dtype=torch.float64)
    return FramePredictionSequence(torch.stack([p, 1 - p], 1))


def test_score_is_max_over_word_frames():
    from stutterdet.wordeval import LabeledWord
    fp = probs([0.0, 0.1, 0.9, 0.2, 0.5, 0.3])
    w1 = LabeledWord("a", 0.02, 0.08, "fluent")  # frames 1..3
    w2 = LabeledWord("b", 0.10, 0.12, "fluent")  # frame 5
    assert score_words(fp, [w1, w2], 50.0).tolist() == [0.9, 0.3]
    assert score_words(fp, [w1], 50.0, reduction="mean")[0] == pytest.approx(1.2 / 3)
    # perturbing frames outside w1 leaves its score alone
    assert score_words(probs([0.7, 0.1, 0.9, 0.2, 0.99, 0.99]), [w1], 50.0)[0] == 0.9


def test_word_span_outside_prediction_rejected():
    assert word_frame_span(0.0, 0.14, 50.0, 6) == (0, 6)  # one frame of tail slack
    with pytest.raises(ValueError):
        word_frame_span(0.0, 0.5, 50.0, 6)


def test_manifest_rows_cover_every_chat_word(tmp_path):
    t, a = two_line_session()
    words = derive_word_labels(dtw_align(a.words, [w for _, w in t.flat_words()]), t, a, 0.2, 4.0)
    segs, _ = slice_utterances(words, t)
    rows = manifest_rows(t, words, segs, "s1", "fluencybank", "s1.wav")
    assert len(rows) == 5 and rows[1]["label"] == "stutter"
    path = tmp_path / "m.jsonl"
    path.write_text(dumps_jsonl(rows))
    assert read_jsonl(path) == rows
