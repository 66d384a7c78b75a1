"""Command-line entry points: pretrain, finetune, curate, evaluate, render, fixtures.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes its outputs atomically and finishes with a
``manifest.json`` run record listing content hashes of inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import html
import json
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .backbone import load_backbone
from .core import ConfigError, ExperimentConfig, load_config, seeded_rng, validate_config
from .data import load_labeled_manifest, load_pretrain_manifest, read_wav, sha256_file
from .metrics import ScoredSet, build_report
from .train import (
    CheckpointMismatch,
    atomic_write_bytes,
    cache_activations,
    check_compatible,
    load_checkpoint,
    model_from_checkpoint,
    run_finetuning,
    run_pretraining,
    save_checkpoint,
    subsample_balanced,
    utterance_scores,
)
from .wordeval import (
    PARTITIONS,
    ChatParseError,
    derive_word_labels,
    dtw_align,
    dumps_jsonl,
    manifest_rows,
    read_asr,
    read_chat,
    read_jsonl,
    score_words,
    slice_utterances,
    LabeledWord,
)

log = logging.getLogger("stutterdet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    inputs: dict[str, str]
    output_dir: str
    seed: int
    started: str
    finished: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    input_hash: str = ""
    version: str = __version__

    def finalize(self, outputs: dict[str, str]) -> None:
        self.outputs = dict(sorted(outputs.items()))
        joined = "".join(f"{k}\0{v}\n" for k, v in sorted(self.inputs.items()))
        self.input_hash = hashlib.sha256(joined.encode()).hexdigest()
        self.finished = _now()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _hash_inputs(paths: Sequence[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                out[str(f)] = sha256_file(f)
        elif p.exists():
            out[str(p)] = sha256_file(p)
    return out


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _finish(manifest: RunManifest, out_dir: Path, produced: Sequence[Path]) -> None:
    manifest.finalize({str(p.relative_to(out_dir) if p.is_relative_to(out_dir) else p): sha256_file(p)
                       for p in produced})
    _write_text(out_dir / "manifest.json", manifest.to_json())


# ---------------------------------------------------------------------------
# shared option handling


def _interface_kind(value: str) -> str:
    if value == "hconv":
        return "hconv"
    if value == "ws":
        return "weighted_sum"
    if value.startswith("layer:"):
        k = value.split(":", 1)[1]
        if not k.isdigit():
            raise argparse.ArgumentTypeError(f"layer index must be a nonnegative integer, got {k!r}")
        return f"single_layer:{int(k)}"
    raise argparse.ArgumentTypeError(f"expected hconv, ws or layer:K, got {value!r}")


def _ratio(value: str) -> float:
    try:
        r = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if not 0.0 <= r <= 1.0:
        raise argparse.ArgumentTypeError(f"data ratio must lie in [0, 1], got {r}")
    return r


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config not found: {path}")
        cfg = load_config(path)
    else:
        cfg = ExperimentConfig()
    overrides = {
        "seed": args.seed,
        "interface_kind": args.interface,
        "backbone_id": args.backbone,
        "margin_seconds": getattr(args, "margin", None),
        "data_ratio": getattr(args, "data_ratio", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else validate_config(cfg)


def _setup(args) -> ExperimentConfig:
    cfg = resolve_config(args)
    torch.set_num_threads(max(1, args.workers))
    return cfg


def _loss_curve_json(history: list[dict]) -> str:
    return json.dumps(history, indent=2, sort_keys=True) + "\n"


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _setup(args)
    out = Path(args.output)
    manifest = RunManifest("pretrain", args.config, _hash_inputs([Path(args.manifest)] + _config_inputs(args)),
                           str(out), cfg.seed, _now())
    backbone = load_backbone(cfg.backbone_id)
    splits = load_pretrain_manifest(args.manifest, backbone.descriptor.frame_rate_hz, cfg.vocab_size)
    train = splits.get("train", [])
    val = splits.get("val")
    if not train:
        raise DataError(f"{args.manifest}: no training utterances")
    inject = None
    if args.inject_marker:
        from .synthetic import MarkerInjector, SyntheticSpeech

        inject = MarkerInjector(backbone, SyntheticSpeech(cfg.seed), args.inject_marker, seed=cfg.seed)
    state, ckpt = run_pretraining(cfg, backbone, train, val, inject=inject)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "checkpoint.pt")
    _write_text(out / "loss_curve.json", _loss_curve_json(state.history))
    _finish(manifest, out, [out / "checkpoint.pt", out / "loss_curve.json"])
    print(f"pretrain: best step {state.best_step} val_loss {state.best_metric:.4f} -> {out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _setup(args)
    out = Path(args.output)
    manifest = RunManifest("finetune", args.config,
                           _hash_inputs([Path(args.checkpoint), Path(args.manifest)] + _config_inputs(args)),
                           str(out), cfg.seed, _now())
    backbone = load_backbone(cfg.backbone_id)
    ckpt = load_checkpoint(args.checkpoint)
    check_compatible(ckpt, cfg, backbone)
    splits = load_labeled_manifest(args.manifest)
    full = splits.get("train", [])
    train = subsample_balanced(full, cfg.data_ratio, seeded_rng(cfg.seed, 4))
    counts = {
        "available": {"positive": sum(u.label for u in full), "negative": sum(not u.label for u in full)},
        "used": {"positive": sum(u.label for u in train), "negative": sum(not u.label for u in train)},
        "data_ratio": cfg.data_ratio,
    }
    out.mkdir(parents=True, exist_ok=True)
    if not train:
        # evaluation-only passthrough: the pretrained checkpoint is the result
        shutil.copyfile(args.checkpoint, out / "checkpoint.pt")
        history: list[dict] = []
    else:
        val = splits.get("val")
        if not val:
            raise DataError(f"{args.manifest}: no validation utterances (split 'val')")
        state, new = run_finetuning(cfg, backbone, ckpt, train, val)
        save_checkpoint(new, out / "checkpoint.pt")
        history = state.history
    _write_text(out / "loss_curve.json", _loss_curve_json(history))
    _write_text(out / "counts.json", json.dumps(counts, indent=2, sort_keys=True) + "\n")
    _finish(manifest, out, [out / "checkpoint.pt", out / "loss_curve.json", out / "counts.json"])
    best = max((h["val_f1"] for h in history), default=None)
    print(f"finetune: used {counts['used']} of {counts['available']}"
          + (f", best val F1 {best:.4f}" if best is not None else ", checkpoint passed through"))
    return EXIT_OK


def cmd_curate(args) -> int:
    cfg = _setup(args)
    chat_dir, asr_dir, audio_dir = Path(args.chat), Path(args.asr), Path(args.audio)
    for d in (chat_dir, asr_dir, audio_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    out_path = Path(args.output)
    out_dir = out_path.parent
    manifest = RunManifest("curate", args.config, _hash_inputs([chat_dir, asr_dir, audio_dir] + _config_inputs(args)),
                           str(out_dir), cfg.seed, _now())

    chats = sorted(chat_dir.rglob("*.cha"))
    asr_files = {p.stem: p for p in asr_dir.glob("*.tsv")}
    audio_files = {p.stem: p for p in audio_dir.glob("*.wav")}
    skips: list[str] = []
    jobs = []
    for cha in chats:
        stem = cha.stem
        partition = cha.parent.name if cha.parent != chat_dir else "fluencybank"
        missing = [kind for kind, table in (("asr", asr_files), ("audio", audio_files)) if stem not in table]
        if partition not in PARTITIONS:
            skips.append(f"{stem}\tunknown partition {partition!r}")
        elif missing:
            skips.append(f"{stem}\tmissing {' and '.join(missing)}")
        else:
            jobs.append((stem, partition, cha, asr_files[stem], audio_files[stem]))
    for stem in sorted((set(asr_files) | set(audio_files)) - {c.stem for c in chats}):
        skips.append(f"{stem}\tmissing chat")

    def process(job):
        stem, partition, cha, asr_path, wav_path = job
        try:
            chat = read_chat(cha)
            asr = read_asr(asr_path)
            wave, sr = read_wav(wav_path)
        except (ChatParseError, ValueError) as exc:
            return partition, None, [f"{stem}\t{exc}"]
        duration = len(wave) / sr
        alignment = dtw_align(asr.words, [w for _, w in chat.flat_words()])
        words = derive_word_labels(alignment, chat, asr, cfg.margin_seconds, duration, partition, stem)
        segments, skipped = slice_utterances(words, chat)
        rel = _relpath(wav_path, out_dir)
        rows = manifest_rows(chat, words, segments, stem, partition, rel)
        notes = [f"{stem}\tline {u}: no exactly aligned words" for u in skipped]
        notes += [f"{stem}\t{w}" for w in chat.warnings]
        seconds = sum(s.end - s.start for s in segments)
        return partition, (rows, seconds), notes

    rows: list[dict] = []
    durations: dict[str, float] = {p: 0.0 for p in PARTITIONS}
    for partition, result, notes in _map(process, jobs, args.workers):
        skips.extend(notes)
        if result is not None:
            rows.extend(result[0])
            durations[partition] += result[1]

    _write_text(out_path, dumps_jsonl(rows))
    skip_path = out_path.with_name(out_path.stem + ".skips.txt")
    _write_text(skip_path, "".join(s + "\n" for s in skips))
    dur_path = out_path.with_name(out_path.stem + ".durations.json")
    _write_text(dur_path, json.dumps({k: round(v, 6) for k, v in durations.items()}, indent=2, sort_keys=True) + "\n")
    _finish(manifest, out_dir, [out_path, skip_path, dur_path])
    evaluated = sum(r["label"] is not None for r in rows)
    print(f"curate: {len(rows)} words ({evaluated} evaluated) from {len(jobs)} sessions, {len(skips)} skip notes")
    for part in PARTITIONS:
        print(f"  {durations[part] / 60:.2f} min of {part} speech")
    return EXIT_OK


def _relpath(path: Path, base: Path) -> str:
    try:
        return str(path.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(path.resolve())


def _manifest_level(rows: list[dict]) -> str:
    if all("surface" in r for r in rows):
        return "word"
    if all("label" in r and "utt_id" in r for r in rows):
        return "utterance"
    return "mixed"


def cmd_evaluate(args) -> int:
    cfg = _setup(args)
    out = Path(args.output)
    manifest = RunManifest("evaluate", args.config,
                           _hash_inputs([Path(args.checkpoint), Path(args.manifest)] + _config_inputs(args)),
                           str(out), cfg.seed, _now())
    rows = read_jsonl(args.manifest)
    if not rows:
        raise DataError(f"{args.manifest}: empty manifest")
    level = _manifest_level(rows)
    if level != args.level:
        raise DataError(f"{args.manifest} is a {level}-level manifest but --level {args.level} was given")
    backbone = load_backbone(cfg.backbone_id)
    ckpt = load_checkpoint(args.checkpoint)
    check_compatible(ckpt, cfg, backbone)
    model = model_from_checkpoint(ckpt)
    model.eval()
    grid = cfg.threshold_grid()
    if args.level == "utterance":
        report, preds = _evaluate_utterances(args, cfg, backbone, model, grid)
    else:
        report, preds = _evaluate_words(args, cfg, backbone, model, rows, grid)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "report.json", report.to_json())
    _write_text(out / "predictions.jsonl", dumps_jsonl(preds))
    _finish(manifest, out, [out / "report.json", out / "predictions.jsonl"])
    block = report.data[args.level]["all"]
    print(f"evaluate ({args.level}): F1 {block['f1']:.4f} at threshold {block['threshold']:.2f} "
          f"over {block['count']} items")
    return EXIT_OK


def _evaluate_utterances(args, cfg, backbone, model, grid):
    splits = load_labeled_manifest(args.manifest)
    utts = splits.get(args.split, []) if args.split else [u for part in splits.values() for u in part]
    if not utts:
        raise DataError(f"{args.manifest}: no utterances in split {args.split!r}")
    stacks = _map(lambda u: cache_activations(backbone, [u])[0], utts, args.workers)
    scores = utterance_scores(model, stacks)
    labels = np.array([u.label for u in utts])
    scored = ScoredSet(scores, labels, types=tuple(frozenset(u.types) for u in utts))
    report = build_report(utterance_set=scored, config=cfg, grid=grid)
    thr = report.data["utterance"]["all"]["threshold"]
    preds = [{"utt_id": u.utt_id, "label": bool(u.label), "types": list(u.types), "score": round(float(s), 10),
              "predicted": bool(s >= thr)} for u, s in zip(utts, scores)]
    return report, preds


def _evaluate_words(args, cfg, backbone, model, rows, grid):
    base = Path(args.manifest).parent
    segments: dict[tuple, list[int]] = {}
    for i, r in enumerate(rows):
        if r.get("label") is not None:
            if r.get("start") is None or r.get("segment_start") is None:
                raise DataError(f"{args.manifest}: labelled word {i} lacks timing")
            segments.setdefault((r["audio"], r["segment_start"], r["segment_end"]), []).append(i)
    if not segments:
        raise DataError(f"{args.manifest}: no evaluated words")
    audio_cache: dict[str, tuple[np.ndarray, int]] = {}
    for key in segments:
        if key[0] not in audio_cache:
            path = Path(key[0]) if Path(key[0]).is_absolute() else base / key[0]
            audio_cache[key[0]] = read_wav(path)

    def score_segment(key):
        audio, s0, s1 = key
        wave, sr = audio_cache[audio]
        clip = wave[int(round(s0 * sr)):int(round(s1 * sr))]
        acts, _ = backbone.forward_with_hook(clip, sr)
        probs = model.predict(acts)
        words = [LabeledWord(rows[i]["surface"], rows[i]["start"], rows[i]["end"], rows[i]["label"])
                 for i in segments[key]]
        return score_words(probs, words, acts.frame_rate_hz, offset=s0, reduction=cfg.score_reduction)

    keys = list(segments)
    scores = np.zeros(len(rows))
    for key, s in zip(keys, _map(score_segment, keys, args.workers)):
        scores[segments[key]] = s
    idx = [i for key in keys for i in segments[key]]
    idx.sort()
    scored = ScoredSet(scores[idx], np.array([rows[i]["label"] == "stutter" for i in idx]),
                       partitions=tuple(rows[i]["partition"] for i in idx))
    report = build_report(word_set=scored, config=cfg, grid=grid)
    thr = report.data["word"]["all"]["threshold"]
    evaluated = set(idx)
    preds = []
    for i, r in enumerate(rows):
        ev = i in evaluated
        preds.append({"audio_id": r["audio_id"], "index": r["index"], "surface": r["surface"],
                      "label": r["label"], "score": round(float(scores[i]), 10) if ev else None,
                      "predicted": bool(scores[i] >= thr) if ev else None})
    return report, preds


def cmd_render(args) -> int:
    out = Path(args.output)
    manifest = RunManifest("render", None, _hash_inputs([Path(args.predictions), Path(args.manifest)]),
                           str(out.parent), 0, _now())
    words = read_jsonl(args.manifest)
    preds = {(p["audio_id"], p["index"]): p for p in read_jsonl(args.predictions)}
    _write_text(out, render_html(words, preds))
    _finish(manifest, out.parent, [out])
    n = sum(1 for p in preds.values() if p.get("predicted"))
    print(f"render: {len(words)} words, {n} highlighted -> {out}")
    return EXIT_OK


def render_html(words: list[dict], preds: dict) -> str:
    """Static page: evaluated words underlined, predicted stutters highlighted."""
    lines: dict[tuple[str, int], list[str]] = {}
    for w in words:
        key = (w["audio_id"], w["index"])
        p = preds.get(key)
        text = html.escape(w["surface"])
        timed = w.get("start") is not None and w.get("label") is not None
        if timed and p is None:
            cell = f'<span class="gap" title="no prediction">{text}?</span>'
        elif timed:
            cls = "eval hit" if p.get("predicted") else "eval"
            cell = f'<span class="{cls}" title="score {p.get("score")}">{text}</span>'
        else:
            cell = f"<span>{text}</span>"
        lines.setdefault((w["audio_id"], w["utterance"]), []).append(cell)
    body = []
    current = None
    for (audio_id, utt), cells in lines.items():
        if audio_id != current:
            body.append(f"<h2>{html.escape(audio_id)}</h2>")
            current = audio_id
        body.append(f'<p class="line"><span class="n">{utt}</span> ' + " ".join(cells) + "</p>")
    style = ("body{font-family:sans-serif;max-width:60em;margin:2em auto}"
             ".eval{text-decoration:underline}.hit{color:#c00;font-weight:bold}"
             ".gap{background:#eee;color:#666}.n{color:#999;font-size:80%;margin-right:.5em}")
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>stutter highlights</title>"
            f"<style>{style}</style></head><body>\n" + "\n".join(body) + "\n</body></html>\n")


def cmd_fixtures(args) -> int:
    from .synthetic import write_fixtures

    out = Path(args.output)
    write_fixtures(out, seed=args.seed or 0, n_pretrain=args.n_pretrain, n_labeled=args.n_labeled,
                   n_sessions=args.n_sessions)
    print(f"fixtures written to {out}")
    return EXIT_OK


def _config_inputs(args) -> list[Path]:
    return [Path(args.config)] if args.config else []


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value experiment config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--interface", type=_interface_kind, help="hconv | ws | layer:K")
    common.add_argument("--backbone", help="registry id, model name or toy://seed/layers/dim")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stutterdet", description="Stuttering detection experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="synthetic-disfluency pretraining")
    p.add_argument("--manifest", required=True, help="alignment manifest (jsonl)")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--inject-marker", type=float, default=0.0, metavar="STRENGTH",
                   help="add the synthetic marker signature to inserted frames")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="weak-label finetuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="labelled utterance manifest (jsonl)")
    p.add_argument("--data-ratio", type=_ratio)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("curate", parents=[common], help="build the word-level manifest")
    p.add_argument("--chat", required=True)
    p.add_argument("--asr", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--margin", type=float)
    p.add_argument("--output", required=True, help="manifest path (jsonl)")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("evaluate", parents=[common], help="score a manifest and write a report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--level", choices=("utterance", "word"), required=True)
    p.add_argument("--split", help="utterance manifests: evaluate only this split")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="HTML word-highlight report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True, help="word manifest from curate")
    p.add_argument("--output", required=True, help="HTML file")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fixtures", help="write the synthetic offline fixture tree")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-pretrain", type=int, default=20)
    p.add_argument("--n-labeled", type=int, default=40)
    p.add_argument("--n-sessions", type=int, default=3)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DataError, CheckpointMismatch, ChatParseError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        return _fail(EXIT_DATA, exc)


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    if isinstance(exc, KeyError):
        msg = f"missing field {exc}"
    print(f"stutterdet: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
