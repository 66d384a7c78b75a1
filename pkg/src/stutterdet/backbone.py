"""Frozen self-supervised speech backbones.

Every backbone exposes three stages: the convolutional feature encoder, the
transformer stack, and a hook between the two where synthetic disfluencies
are spliced into the frame sequence.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .core import FrameLabelSequence, FrameSequence

CACHE_ENV = "STUTTERDET_CACHE"

# conv front-end arithmetic shared by WavLM, wav2vec 2.0 and data2vec audio
RECEPTIVE_FIELD = 400
HOP = 320
SAMPLE_RATE = 16000

Hook = Callable[[FrameSequence], "tuple[FrameSequence, FrameLabelSequence]"]


@dataclass(frozen=True)
class BackboneDescriptor:
    backbone_id: str
    num_layers: int
    hidden_dim: int
    frame_rate_hz: float
    checkpoint_uri: str
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be >= 1")


@dataclass(frozen=True)
class LayerActivations:
    """(L+1) x T x D stack; index 0 is the post-convolution input to the transformer."""

    stack: torch.Tensor
    frame_rate_hz: float

    def __post_init__(self):
        if self.stack.dim() != 3:
            raise ValueError("activation stack must be (L+1) x T x D")

    @property
    def num_layers(self) -> int:
        return self.stack.shape[0] - 1

    def __len__(self) -> int:
        return self.stack.shape[1]

    def layer(self, k: int) -> FrameSequence:
        return FrameSequence(self.stack[k], self.frame_rate_hz)


def num_frames(num_samples: int) -> int:
    """Output length of the strided conv encoder for ``num_samples`` inputs."""
    if num_samples < RECEPTIVE_FIELD:
        return 0
    return (num_samples - RECEPTIVE_FIELD) // HOP + 1


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FrozenBackbone(nn.Module):
    """Base class: subclasses implement ``_conv`` and ``_transformer`` on raw tensors."""

    descriptor: BackboneDescriptor

    def freeze(self) -> "FrozenBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # dropout and masking stay off whatever the caller asks for
        return super().train(False)

    @property
    def frame_rate_hz(self) -> float:
        return self.descriptor.frame_rate_hz

    def _conv(self, wave: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _transformer(self, frames: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def extract_conv_features(self, waveform, sample_rate: int) -> FrameSequence:
        if sample_rate != self.descriptor.sample_rate:
            raise ValueError(
                f"sample rate {sample_rate} does not match backbone rate {self.descriptor.sample_rate}"
            )
        wave = torch.as_tensor(np.asarray(waveform, dtype=np.float32)).reshape(-1)
        if wave.numel() == 0:
            raise ValueError("empty waveform")
        if wave.numel() < RECEPTIVE_FIELD:
            raise ValueError(f"waveform shorter than the {RECEPTIVE_FIELD}-sample receptive field")
        return FrameSequence(self._conv(wave), self.frame_rate_hz)

    @torch.no_grad()
    def run_transformer(self, frames: FrameSequence) -> LayerActivations:
        if len(frames) == 0:
            raise ValueError("empty frame sequence")
        if frames.dim != self.descriptor.hidden_dim:
            raise ValueError(f"frame dim {frames.dim} != backbone hidden_dim {self.descriptor.hidden_dim}")
        stack = self._transformer(frames.frames.float())
        return LayerActivations(stack, self.frame_rate_hz)

    @torch.no_grad()
    def forward_with_hook(self, waveform, sample_rate: int, hook: Hook | None = None):
        frames = self.extract_conv_features(waveform, sample_rate)
        if hook is None:
            labels = FrameLabelSequence.negatives(len(frames))
        else:
            frames, labels = hook(frames)
            if len(frames) != len(labels):
                raise ValueError(f"hook returned {len(frames)} frames but {len(labels)} labels")
        return self.run_transformer(frames), labels

    def checksum(self) -> str:
        return parameter_checksum(self)


# ---------------------------------------------------------------------------
# toy backbone


class _ToyLayer(nn.Module):
    def __init__(self, dim: int, heads: int, residual_scale: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.residual_scale = residual_scale

    def forward(self, x):
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + self.residual_scale * a
        return x + self.residual_scale * self.ff(self.norm2(x))


class ToyBackbone(FrozenBackbone):
    """Randomly initialised stand-in with the real conv arithmetic (400/320 at 16 kHz).

    The conv encoder is a log-spaced bank of quadrature Gabor filters followed
    by log energy and a seeded random projection, so stationary tones map to
    stable frames.
    """

    def __init__(self, seed: int = 0, num_layers: int = 4, hidden_dim: int = 32,
                 num_filters: int | None = None, residual_scale: float = 0.5):
        super().__init__()
        num_filters = num_filters or 2 * hidden_dim
        heads = 2 if hidden_dim % 2 == 0 else 1
        self.descriptor = BackboneDescriptor(
            backbone_id=f"toy://{seed}/{num_layers}/{hidden_dim}",
            num_layers=num_layers,
            hidden_dim=hidden_dim,
            frame_rate_hz=SAMPLE_RATE / HOP,
            checkpoint_uri=f"toy://{seed}/{num_layers}/{hidden_dim}",
        )
        freqs = np.geomspace(100.0, 7600.0, num_filters)
        t = np.arange(RECEPTIVE_FIELD) / SAMPLE_RATE
        window = np.hanning(RECEPTIVE_FIELD)
        kernels = np.concatenate([window * np.cos(2 * np.pi * freqs[:, None] * t),
                                  window * np.sin(2 * np.pi * freqs[:, None] * t)])
        self.register_buffer("filters", torch.tensor(kernels[:, None, :], dtype=torch.float32))
        self.register_buffer("filter_freqs", torch.tensor(freqs, dtype=torch.float32))

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.proj = nn.Linear(num_filters, hidden_dim)
            self.layers = nn.ModuleList(_ToyLayer(hidden_dim, heads, residual_scale) for _ in range(num_layers))
        self.freeze()

    def _conv(self, wave):
        out = nn.functional.conv1d(wave[None, None], self.filters, stride=HOP)[0]
        half = out.shape[0] // 2
        energy = out[:half] ** 2 + out[half:] ** 2
        feats = torch.log(energy + 1e-3).T
        feats = (feats - feats.mean(dim=1, keepdim=True)) / 4.0
        return self.proj(feats)

    def _transformer(self, frames):
        x = frames[None]
        outs = [x[0]]
        for layer in self.layers:
            x = layer(x)
            outs.append(x[0])
        return torch.stack(outs)


def toy_backbone(seed: int = 0, num_layers: int = 4, hidden_dim: int = 32) -> ToyBackbone:
    return ToyBackbone(seed, num_layers, hidden_dim)


# ---------------------------------------------------------------------------
# published checkpoints


class HuggingFaceBackbone(FrozenBackbone):
    """Adapter for transformers' Wav2Vec2 / WavLM / Data2VecAudio models."""

    def __init__(self, model: nn.Module, backbone_id: str, checkpoint_uri: str = "", normalize: bool = False):
        super().__init__()
        self.model = model
        self.normalize = normalize
        cfg = model.config
        self.descriptor = BackboneDescriptor(
            backbone_id=backbone_id,
            num_layers=cfg.num_hidden_layers,
            hidden_dim=cfg.hidden_size,
            frame_rate_hz=SAMPLE_RATE / int(np.prod(cfg.conv_stride)),
            checkpoint_uri=checkpoint_uri or backbone_id,
        )
        self.freeze()

    def _conv(self, wave):
        if self.normalize:
            wave = (wave - wave.mean()) / torch.sqrt(wave.var() + 1e-7)
        extract = self.model.feature_extractor(wave[None]).transpose(1, 2)
        hidden, _ = self.model.feature_projection(extract)
        return hidden[0]

    def _transformer(self, frames):
        out = self.model.encoder(frames[None], output_hidden_states=True, return_dict=True)
        return torch.stack([h[0] for h in out.hidden_states])


# Known pretrained backbones; the registry key is the backbone_id used in configs.
REGISTRY: dict[str, tuple[str, bool]] = {
    "wavlm_large": ("microsoft/wavlm-large", True),
    "wavlm_base": ("microsoft/wavlm-base", False),
    "wav2vec2_large": ("facebook/wav2vec2-large-lv60", True),
    "wav2vec2_base": ("facebook/wav2vec2-base", False),
    "data2vec_large": ("facebook/data2vec-audio-large", True),
    "data2vec_base": ("facebook/data2vec-audio-base", False),
}


def parse_toy_locator(locator: str) -> tuple[int, int, int]:
    body = locator[len("toy://"):]
    try:
        seed, layers, dim = (int(x) for x in body.split("/"))
    except ValueError:
        raise ValueError(f"toy locator must be toy://seed/layers/dim, got {locator!r}") from None
    return seed, layers, dim


def load_backbone(locator: str) -> FrozenBackbone:
    """Resolve a registry id, Hugging Face model name, or ``toy://seed/layers/dim``."""
    if locator.startswith("toy://"):
        return toy_backbone(*parse_toy_locator(locator))
    if locator in REGISTRY:
        name, normalize = REGISTRY[locator]
    else:
        name, normalize = locator, False
    from transformers import AutoModel

    model = AutoModel.from_pretrained(name, cache_dir=os.environ.get(CACHE_ENV))
    return HuggingFaceBackbone(model, locator, checkpoint_uri=name, normalize=normalize)
