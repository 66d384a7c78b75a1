import json
import shutil

import numpy as np
import pytest

from stutterdet import cli
from stutterdet.cli import main, render_html
from stutterdet.core import ExperimentConfig, save_config
from stutterdet.metrics import ScoredSet, build_report
from stutterdet.synthetic import write_fixtures
from stutterdet.wordeval import read_jsonl

SMALL = ExperimentConfig(backbone_id="toy://0/2/8", pretrain_steps=6, finetune_steps=4, eval_every=3,
                         batch_size=2, finetune_batch_size=4, learning_rate=3e-3, finetune_learning_rate=1e-2)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_fixtures(root / "fx", seed=0, n_pretrain=6, n_labeled=20, n_sessions=3)
    save_config(SMALL, root / "small.cfg")
    return root


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pretrained(work):
    out = work / "pre"
    assert run("pretrain", "--config", work / "small.cfg", "--manifest", work / "fx/pretrain.jsonl",
               "--output", out, "--inject-marker", "1.0") == 0
    return out


@pytest.fixture(scope="module")
def curated(work):
    out = work / "cur/words.jsonl"
    assert run("curate", "--config", work / "small.cfg", "--chat", work / "fx/chat", "--asr", work / "fx/asr",
               "--audio", work / "fx/audio", "--output", out) == 0
    return out


def test_pretrain_outputs_and_run_record(pretrained):
    assert (pretrained / "checkpoint.pt").stat().st_size > 0
    curve = json.loads((pretrained / "loss_curve.json").read_text())
    assert [h["step"] for h in curve] == [0, 3, 6]
    record = json.loads((pretrained / "manifest.json").read_text())
    assert record["command"] == "pretrain" and set(record["outputs"]) == {"checkpoint.pt", "loss_curve.json"}
    assert record["input_hash"] and record["inputs"]


def test_pretrain_is_deterministic(work, pretrained):
    again = work / "pre2"
    assert run("pretrain", "--config", work / "small.cfg", "--manifest", work / "fx/pretrain.jsonl",
               "--output", again, "--inject-marker", "1.0") == 0
    for name in ("loss_curve.json", "checkpoint.pt"):
        assert (again / name).read_bytes() == (pretrained / name).read_bytes()


def test_ratio_zero_passes_checkpoint_through(work, pretrained):
    out = work / "ft0"
    assert run("finetune", "--config", work / "small.cfg", "--checkpoint", pretrained / "checkpoint.pt",
               "--manifest", work / "fx/labeled.jsonl", "--data-ratio", "0", "--output", out) == 0
    assert (out / "checkpoint.pt").read_bytes() == (pretrained / "checkpoint.pt").read_bytes()
    counts = json.loads((out / "counts.json").read_text())
    assert counts["used"] == {"positive": 0, "negative": 0}


def test_partial_ratio_counts(work, pretrained):
    out = work / "ft5"
    assert run("finetune", "--config", work / "small.cfg", "--checkpoint", pretrained / "checkpoint.pt",
               "--manifest", work / "fx/labeled.jsonl", "--data-ratio", "0.5", "--output", out) == 0
    counts = json.loads((out / "counts.json").read_text())
    avail = counts["available"]
    # round-half-up of half of each class
    assert counts["used"] == {k: int(np.floor(0.5 * v + 0.5)) for k, v in avail.items()}
    assert len(json.loads((out / "loss_curve.json").read_text())) == 3


def test_utterance_evaluation_reports_type_columns(work, pretrained):
    out = work / "ev_utt"
    assert run("evaluate", "--config", work / "small.cfg", "--checkpoint", pretrained / "checkpoint.pt",
               "--manifest", work / "fx/labeled.jsonl", "--level", "utterance", "--split", "test",
               "--output", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert set(rep["utterance"]["types"]) == {"block", "interjection", "prolongation", "sound_repetition",
                                               "word_repetition"}
    preds = read_jsonl(out / "predictions.jsonl")
    direct = build_report(utterance_set=ScoredSet([p["score"] for p in preds], [p["label"] for p in preds],
                                                  types=[p["types"] for p in preds]), config=SMALL)
    assert rep["utterance"] == json.loads(direct.to_json())["utterance"]


def test_curate_outputs(curated):
    rows = read_jsonl(curated)
    assert rows and all(list(r) == list(rows[0]) for r in rows)
    assert {r["partition"] for r in rows} == {"fluencybank", "stuttering_bilinguals", "nonstuttering_bilinguals"}
    durations = json.loads(curated.with_name("words.durations.json").read_text())
    assert all(v > 0 for v in durations.values())
    assert curated.with_name("words.skips.txt").exists()


def test_curate_logs_missing_inputs(work):
    fx = work / "fx_missing"
    shutil.copytree(work / "fx", fx)
    (fx / "asr/session01.tsv").unlink()
    out = work / "cur_missing/words.jsonl"
    assert run("curate", "--chat", fx / "chat", "--asr", fx / "asr", "--audio", fx / "audio", "--output", out) == 0
    skips = out.with_name("words.skips.txt").read_text()
    assert "session01\tmissing asr" in skips
    assert {r["audio_id"] for r in read_jsonl(out)} == {"session00", "session02"}


def test_word_evaluation_matches_direct_metrics(work, pretrained, curated):
    out = work / "ev_word"
    assert run("evaluate", "--config", work / "small.cfg", "--checkpoint", pretrained / "checkpoint.pt",
               "--manifest", curated, "--level", "word", "--output", out) == 0
    preds = [p for p in read_jsonl(out / "predictions.jsonl") if p["score"] is not None]
    rows = {(r["audio_id"], r["index"]): r for r in read_jsonl(curated)}
    direct = build_report(word_set=ScoredSet([p["score"] for p in preds], [p["label"] == "stutter" for p in preds],
                                             partitions=[rows[p["audio_id"], p["index"]]["partition"] for p in preds]),
                          config=SMALL)
    assert json.loads((out / "report.json").read_text())["word"] == json.loads(direct.to_json())["word"]


def test_evaluate_is_deterministic(work, pretrained, curated):
    outs = [work / f"ev_det{k}" for k in range(2)]
    for out in outs:
        assert run("evaluate", "--config", work / "small.cfg", "--checkpoint", pretrained / "checkpoint.pt",
                   "--manifest", curated, "--level", "word", "--output", out) == 0
    for name in ("report.json", "predictions.jsonl"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_render_counts_highlights(work, curated):
    rows = read_jsonl(curated)
    evaluated = [r for r in rows if r["label"] is not None]
    preds = [{"audio_id": r["audio_id"], "index": r["index"], "surface": r["surface"], "label": r["label"],
              "score": 0.1, "predicted": k in (0, 3)} for k, r in enumerate(evaluated)]
    pred_path = work / "preds2.jsonl"
    pred_path.write_text("".join(json.dumps(p) + "\n" for p in preds))
    page = work / "render/page.html"
    assert run("render", "--predictions", pred_path, "--manifest", curated, "--output", page) == 0
    text = page.read_text()
    assert text.count('class="eval hit"') == 2
    assert text.count('class="eval') == len(evaluated)


def test_render_unit_cases():
    words = [{"audio_id": "a", "index": 0, "surface": "hi", "start": 0.1, "label": "fluent", "utterance": 0},
             {"audio_id": "a", "index": 1, "surface": "uh", "start": None, "label": None, "utterance": 0},
             {"audio_id": "a", "index": 2, "surface": "yo", "start": 0.5, "label": "fluent", "utterance": 0}]
    fluent = {("a", 0): {"predicted": False, "score": 0.1}, ("a", 2): {"predicted": False, "score": 0.2}}
    page = render_html(words, fluent)
    assert "hit" not in page.split("</style>")[1]
    assert "<span>uh</span>" in page
    gap = render_html(words, {("a", 0): {"predicted": True, "score": 0.9}})
    assert 'class="gap"' in gap and gap.count('class="eval hit"') == 1


@pytest.mark.parametrize("argv", [
    [],
    ["pretrain"],
    ["pretrain", "--manifest", "m", "--output", "o", "--interface", "lstm"],
    ["finetune", "--checkpoint", "c", "--manifest", "m", "--output", "o", "--data-ratio", "1.5"],
    ["evaluate", "--checkpoint", "c", "--manifest", "m", "--output", "o", "--level", "frame"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_missing_config_exit_1(work):
    assert run("pretrain", "--config", work / "nope.cfg", "--manifest", work / "fx/pretrain.jsonl",
               "--output", work / "x") == 1


def test_bad_config_value_exit_1(work):
    bad = work / "bad.cfg"
    bad.write_text("learning_rate = -1\n")
    assert run("pretrain", "--config", bad, "--manifest", work / "fx/pretrain.jsonl", "--output", work / "x") == 1


def test_data_errors_exit_2(work, pretrained, curated):
    assert run("pretrain", "--config", work / "small.cfg", "--manifest", work / "missing.jsonl",
               "--output", work / "x") == 2
    empty = work / "empty.jsonl"
    empty.write_text("")
    assert run("evaluate", "--config", work / "small.cfg", "--checkpoint", pretrained / "checkpoint.pt",
               "--manifest", empty, "--level", "word", "--output", work / "x") == 2
    # word manifest evaluated as utterances
    assert run("evaluate", "--config", work / "small.cfg", "--checkpoint", pretrained / "checkpoint.pt",
               "--manifest", curated, "--level", "utterance", "--output", work / "x") == 2
    # checkpoint from another interface
    assert run("evaluate", "--config", work / "small.cfg", "--interface", "ws",
               "--checkpoint", pretrained / "checkpoint.pt", "--manifest", curated, "--level", "word",
               "--output", work / "x") == 2


def test_numeric_failure_exit_3(work, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("non-finite pretraining loss at step 0")

    monkeypatch.setattr(cli, "run_pretraining", boom)
    assert run("pretrain", "--config", work / "small.cfg", "--manifest", work / "fx/pretrain.jsonl",
               "--output", work / "x") == 3


def test_version_and_help_exit_0(capsys):
    assert main(["--version"]) == 0
    assert main(["--help"]) == 0
