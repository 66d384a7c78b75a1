"""Layer aggregation: hierarchical convolution, weighted sum, single layer."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import LayerActivations
from .core import FrameSequence


def hconv_level_count(num_layers: int) -> int:
    """Number of pairwise merge levels needed to reduce ``num_layers`` entries to one."""
    levels = 0
    while num_layers > 1:
        num_layers = math.ceil(num_layers / 2)
        levels += 1
    return levels


def _stack(acts) -> torch.Tensor:
    return acts.stack if isinstance(acts, LayerActivations) else acts


class WeightedSumInterface(nn.Module):
    """Softmax-normalised learnable layer weights; raw weights start at zero (uniform)."""

    def __init__(self, num_entries: int):
        super().__init__()
        self.weights = nn.Parameter(torch.zeros(num_entries))

    def normalized(self) -> torch.Tensor:
        return torch.softmax(self.weights, dim=0)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.shape[0] != self.weights.shape[0]:
            raise ValueError(f"{self.weights.shape[0]} weights for {stack.shape[0]} layers")
        w = self.normalized().to(stack.dtype)
        return torch.einsum("l,ltd->td", w, stack)


class HConvInterface(nn.Module):
    """Binary-tree reduction over the layer axis.

    Each level merges adjacent pairs with one width-2 convolution over the
    layer axis (shared across the level) followed by GELU. An odd entry is
    paired with a copy of itself. A single-entry stack goes through one
    projection of the same form.
    """

    def __init__(self, num_entries: int, dim: int, out_dim: int | None = None):
        super().__init__()
        out_dim = out_dim or dim
        self.num_entries = num_entries
        self.out_dim = out_dim
        depth = hconv_level_count(num_entries)
        if depth == 0:
            self.project = nn.Linear(dim, out_dim)
            self.levels = nn.ModuleList()
        else:
            self.project = None
            self.levels = nn.ModuleList(
                nn.Linear(2 * (dim if i == 0 else out_dim), out_dim) for i in range(depth)
            )
        self.act = nn.GELU()
        self._init_as_average(dim, out_dim)

    @torch.no_grad()
    def _init_as_average(self, dim, out_dim):
        # start close to a plain average of each pair so early training is stable
        for i, lin in enumerate(self.levels):
            d_in = dim if i == 0 else out_dim
            if d_in == out_dim:
                lin.weight.mul_(0.1)
                eye = torch.eye(out_dim)
                lin.weight[:, :d_in] += 0.5 * eye
                lin.weight[:, d_in:] += 0.5 * eye
                lin.bias.zero_()

    @property
    def depth(self) -> int:
        return len(self.levels)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.shape[0] != self.num_entries:
            raise ValueError(f"interface built for {self.num_entries} layers, got {stack.shape[0]}")
        if self.project is not None:
            return self.act(self.project(stack[0]))
        x = stack
        for lin in self.levels:
            if x.shape[0] % 2:
                x = torch.cat([x, x[-1:]], dim=0)
            pairs = torch.cat([x[0::2], x[1::2]], dim=-1)
            x = self.act(lin(pairs))
        return x[0]


class SingleLayerInterface(nn.Module):
    def __init__(self, num_entries: int, layer: int):
        super().__init__()
        if not 0 <= layer < num_entries:
            raise IndexError(f"layer {layer} outside [0, {num_entries - 1}]")
        self.layer = layer

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        return stack[self.layer]


def build_interface(kind: str, num_entries: int, dim: int) -> nn.Module:
    if kind == "hconv":
        return HConvInterface(num_entries, dim)
    if kind == "weighted_sum":
        return WeightedSumInterface(num_entries)
    if kind.startswith("single_layer:"):
        return SingleLayerInterface(num_entries, int(kind.split(":", 1)[1]))
    raise ValueError(f"unknown interface kind {kind!r}")


def interface_out_dim(module: nn.Module, dim: int) -> int:
    return module.out_dim if isinstance(module, HConvInterface) else dim


# functional forms over LayerActivations


def weighted_sum_aggregate(acts: LayerActivations, params: WeightedSumInterface | torch.Tensor) -> FrameSequence:
    if isinstance(params, torch.Tensor):
        module = WeightedSumInterface(params.shape[0])
        module.weights.data = params.detach().clone()
        params = module
    return FrameSequence(params(acts.stack), acts.frame_rate_hz)


def hconv_aggregate(acts: LayerActivations, params: HConvInterface) -> FrameSequence:
    return FrameSequence(params(acts.stack), acts.frame_rate_hz)


def select_layer(acts: LayerActivations, k: int) -> FrameSequence:
    if not 0 <= k <= acts.num_layers:
        raise IndexError(f"layer {k} outside [0, {acts.num_layers}]")
    return acts.layer(k)


def export_learned_weights(params: WeightedSumInterface | torch.Tensor) -> np.ndarray:
    raw = params.weights if isinstance(params, WeightedSumInterface) else torch.as_tensor(params)
    return torch.softmax(raw.detach().double(), dim=0).numpy()


def write_weights(weights: np.ndarray, path: str | Path) -> None:
    """One normalised weight per line, layer 0 first."""
    Path(path).write_text("".join(f"{w!r}\n" for w in map(float, weights)))


def read_weights(path: str | Path) -> np.ndarray:
    return np.array([float(line) for line in Path(path).read_text().split()])
