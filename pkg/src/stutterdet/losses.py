"""Frame disfluency, CTC phoneme, pretraining and weak-label finetuning losses.

All losses are differentiable torch expressions. Detection losses accept
probabilities (``log_space=False``) or log-probabilities, column 0 being
the positive (stutter) class.
"""

from __future__ import annotations

import numpy as np
import torch

from .core import FrameLabelSequence, FramePredictionSequence, PhonemeSequence

_TINY = 1e-300
_UNREACHABLE = -1e30


def _log_probs(preds, log_space: bool) -> torch.Tensor:
    if isinstance(preds, FramePredictionSequence):
        preds = preds.probs
    preds = torch.as_tensor(preds)
    if log_space:
        return preds
    return torch.log(preds.clamp_min(_TINY if preds.dtype == torch.float64 else 1e-38))


def _positive_mask(labels) -> torch.Tensor:
    if isinstance(labels, FrameLabelSequence):
        return torch.as_tensor(labels.positive)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return torch.as_tensor(labels[:, 0].astype(bool))
    return torch.as_tensor(labels.astype(bool))


def frame_disfluency_loss(preds, labels, log_space: bool = False) -> torch.Tensor:
    """Mean over frames of -log(probability of the true class)."""
    logp = _log_probs(preds, log_space)
    pos = _positive_mask(labels)
    if logp.shape[0] != pos.shape[0]:
        raise ValueError(f"{logp.shape[0]} predictions for {pos.shape[0]} labels")
    if logp.shape[0] == 0:
        raise ValueError("empty sequence")
    true = torch.where(pos, logp[:, 0], logp[:, 1])
    return -true.mean()


def ctc_min_frames(target) -> int:
    """Shortest input that can emit ``target``: one frame per symbol plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def ctc_phoneme_loss(log_probs: torch.Tensor, target: PhonemeSequence | list[int], blank: int = 0,
                     reduction: str = "sum") -> torch.Tensor:
    """CTC negative log-likelihood by the forward algorithm in log space.

    ``log_probs`` is (T, V) with per-frame log-distributions. ``reduction``
    "sum" gives the sequence NLL; "mean" divides it by the target length.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    if isinstance(target, PhonemeSequence):
        blank = target.blank
        target = list(target.phonemes)
    target = [int(t) for t in target]
    log_probs = torch.as_tensor(log_probs)
    T = log_probs.shape[0]
    if T < ctc_min_frames(target):
        raise ValueError(f"target of length {len(target)} cannot be emitted in {T} frames")

    ext = [blank]
    for t in target:
        ext += [t, blank]
    S = len(ext)
    ext_idx = torch.tensor(ext, dtype=torch.long)
    # transitions from s-2 allowed only into non-blank symbols differing from s-2
    skip = torch.zeros(S, dtype=torch.bool)
    for s in range(2, S):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    # unreachable states hold a large finite negative: logsumexp over all -inf has NaN gradients
    neg_inf = torch.tensor(_UNREACHABLE, dtype=log_probs.dtype)
    emit = log_probs[:, ext_idx]  # (T, S)
    alpha = torch.full((S,), _UNREACHABLE, dtype=log_probs.dtype)
    alpha = torch.cat([emit[0, :2], alpha[2:]]) if S > 1 else emit[0, :1]
    for t in range(1, T):
        stay = alpha
        step = torch.cat([neg_inf.reshape(1), alpha[:-1]])
        jump = torch.cat([neg_inf.expand(2), alpha[:-2]]) if S > 2 else torch.full_like(alpha, _UNREACHABLE)
        jump = torch.where(skip, jump, neg_inf)
        alpha = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[t]
    end = alpha[-2:] if S > 1 else alpha
    nll = -torch.logsumexp(end, dim=0)
    return nll / max(len(target), 1) if reduction == "mean" else nll


def pretrain_loss(preds, labels, log_probs, target, w_ctc: float = 0.3, log_space: bool = False,
                  ctc_reduction: str = "sum") -> torch.Tensor:
    """Frame disfluency loss plus ``w_ctc`` times the CTC phoneme loss."""
    dis = frame_disfluency_loss(preds, labels, log_space=log_space)
    if w_ctc == 0:
        return dis
    return dis + w_ctc * ctc_phoneme_loss(log_probs, target, reduction=ctc_reduction)


def argmax_frame(preds, log_space: bool = False) -> int:
    """Frame with the largest positive probability; ties go to the earliest frame."""
    logp = _log_probs(preds, log_space)
    if logp.shape[0] == 0:
        raise ValueError("empty sequence")
    # torch.argmax returns the first maximal index
    return int(torch.argmax(logp[:, 0].detach()))


def finetune_loss(preds, utterance_label: bool, log_space: bool = False) -> torch.Tensor:
    """Cross entropy of the utterance label at the most-positive frame."""
    logp = _log_probs(preds, log_space)
    t = argmax_frame(logp, log_space=True)
    return -(logp[t, 0] if utterance_label else logp[t, 1])
