"""The desk-scale synthetic experiment: pretrain, finetune at several data ratios, evaluate.

Everything runs in memory on the toy backbone; ``scripts/`` and the
acceptance tests drive it.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import FrozenBackbone, load_backbone
from .core import ExperimentConfig, seeded_rng
from .metrics import ScoredSet, build_report
from .synthetic import MarkerInjector, SyntheticSpeech
from .train import (
    StutterModel,
    cache_activations,
    model_from_checkpoint,
    run_finetuning,
    run_pretraining,
    subsample_balanced,
    utterance_scores,
)
from .wordeval import AsrTranscript, derive_word_labels, dtw_align, parse_chat, score_words, slice_utterances


@dataclass(frozen=True)
class SyntheticSettings:
    seed: int = 0
    interface_kind: str = "hconv"
    n_pretrain: int = 60
    n_utterances: int = 200  # split 60/20/20 into train/val/test
    n_sessions: int = 6
    pretrain_steps: int = 300
    finetune_steps: int = 200
    learning_rate: float = 3e-3
    finetune_learning_rate: float = 1e-2
    inject_strength: float = 1.0
    unspliced_band: tuple[float, float] | None = (4600.0, 6000.0)
    data_ratios: tuple[float, ...] = (0.0, 1.0)
    layers: int = 4
    dim: int = 32

    def config(self) -> ExperimentConfig:
        return ExperimentConfig(
            seed=self.seed, interface_kind=self.interface_kind, learning_rate=self.learning_rate,
            finetune_learning_rate=self.finetune_learning_rate,
            pretrain_steps=self.pretrain_steps, finetune_steps=self.finetune_steps, eval_every=25,
            backbone_id=f"toy://{self.seed}/{self.layers}/{self.dim}",
        )


@dataclass
class SyntheticResult:
    settings: SyntheticSettings
    pretrain_history: list[dict]
    finetune_history: dict[float, list[dict]] = field(default_factory=dict)
    utterance: dict[float, dict] = field(default_factory=dict)  # ratio -> report block
    word: dict[float, dict] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "settings": asdict(self.settings),
            "pretrain_history": self.pretrain_history,
            "finetune_history": {str(k): v for k, v in self.finetune_history.items()},
            "utterance": {str(k): v for k, v in self.utterance.items()},
            "word": {str(k): v for k, v in self.word.items()},
            "seconds": self.seconds,
        }


def score_session(model: StutterModel, backbone: FrozenBackbone, chat_text: str, asr_words, wave: np.ndarray,
                  sample_rate: int, margin: float, partition: str = "fluencybank", audio_id: str = ""):
    """Curate one session in memory and score its exactly aligned words."""
    chat = parse_chat(chat_text)
    asr = AsrTranscript(tuple(asr_words))
    alignment = dtw_align(asr.words, [w for _, w in chat.flat_words()])
    words = derive_word_labels(alignment, chat, asr, margin, len(wave) / sample_rate, partition, audio_id)
    segments, _ = slice_utterances(words, chat, wave, sample_rate)
    scored = []
    for seg in segments:
        acts, _ = backbone.forward_with_hook(seg.audio, sample_rate)
        probs = model.predict(acts)
        in_seg = [w for w in words if w.utterance == seg.utterance]
        scores = score_words(probs, in_seg, acts.frame_rate_hz, offset=seg.start)
        scored.extend(zip(in_seg, scores))
    return scored


def run_synthetic_experiment(settings: SyntheticSettings = SyntheticSettings()) -> SyntheticResult:
    t0 = time.perf_counter()
    cfg = settings.config()
    backbone = load_backbone(cfg.backbone_id)
    speech = SyntheticSpeech(settings.seed, unspliced_band=settings.unspliced_band)
    pre = speech.pretrain_set(settings.n_pretrain)
    labeled = speech.labeled_set(settings.n_utterances)
    n_tr, n_va = int(0.6 * len(labeled)), int(0.2 * len(labeled))
    train, val, test = labeled[:n_tr], labeled[n_tr:n_tr + n_va], labeled[n_tr + n_va:]
    rng = seeded_rng(settings.seed, 31)
    sessions = [speech.session(rng, f"s{k:02d}") for k in range(settings.n_sessions)]
    inject = MarkerInjector(backbone, speech, settings.inject_strength, seed=settings.seed)
    t1 = time.perf_counter()

    n_val = max(1, len(pre) // 6)
    state, pre_ckpt = run_pretraining(cfg, backbone, pre[n_val:], pre[:n_val], inject=inject)
    result = SyntheticResult(settings, state.history)
    t2 = time.perf_counter()
    result.seconds.update(data=t1 - t0, pretrain=t2 - t1)

    test_stacks = cache_activations(backbone, test)
    test_labels = np.array([u.label for u in test])
    test_types = tuple(frozenset(u.types) for u in test)
    for ratio in settings.data_ratios:
        t3 = time.perf_counter()
        subset = subsample_balanced(train, ratio, seeded_rng(settings.seed, 4))
        if subset:
            ft_state, ckpt = run_finetuning(cfg, backbone, pre_ckpt, subset, val)
            result.finetune_history[ratio] = ft_state.history
        else:
            ckpt = pre_ckpt
            result.finetune_history[ratio] = []
        model = model_from_checkpoint(ckpt)
        model.eval()
        utt = ScoredSet(utterance_scores(model, test_stacks), test_labels, types=test_types)
        words, wscores = [], []
        for k, (chat, asr, wave, _) in enumerate(sessions):
            for w, s in score_session(model, backbone, chat, asr, wave, 16000, cfg.margin_seconds, audio_id=f"s{k:02d}"):
                words.append(w)
                wscores.append(s)
        wset = ScoredSet(np.array(wscores), np.array([w.is_stutter for w in words]),
                         partitions=tuple(w.partition for w in words))
        report = build_report(word_set=wset, utterance_set=utt, config=cfg)
        result.utterance[ratio] = report.data["utterance"]
        result.word[ratio] = report.data["word"]
        result.seconds[f"finetune_eval_{ratio}"] = time.perf_counter() - t3
    result.seconds["total"] = time.perf_counter() - t0
    return result
