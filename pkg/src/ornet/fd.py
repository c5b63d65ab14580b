"""Frequency decomposition and coarse-to-fine enhancement.

Bands are produced by learnable strided convolutions and upsampled
subtraction. A pyramid of stems ``s_0 = Conv(I)``, ``s_1 = Conv_down(I)``,
``s_j = Conv_down(s_{j-1})`` yields bands ``f_j = s_j - up2(s_{j+1})`` with
the coarsest band equal to its stem, so
``s_0 = f_0 + up2(f_1 + up2(f_2 + ...))`` holds identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import DimensionError
from .tensor import (
    Conv2dParams,
    Tensor,
    bilinear_upsample,
    concat_channels,
    conv2d,
    global_avg_pool,
    mul,
    relu,
    sigmoid,
    sub,
    add,
)


@dataclass
class FrequencyBands:
    """Decomposed bands plus the stem features they were computed from.

    ``bands`` runs from coarsest to finest (``f_l, f_m, f_h`` for three
    branches); ``stems`` runs from finest to coarsest
    (``Conv(I), Conv_down(I), Conv_down(Conv_down(I))``).
    """

    bands: list[Tensor]
    stems: list[Tensor]

    @property
    def f_l(self) -> Tensor:
        return self.bands[0]

    @property
    def f_m(self) -> Tensor:
        if len(self.bands) < 3:
            raise AttributeError("f_m needs at least three branches")
        return self.bands[-2]

    @property
    def f_h(self) -> Tensor:
        return self.bands[-1]

    @property
    def stem_full(self) -> Tensor:
        return self.stems[0]

    @property
    def stem_half(self) -> Tensor:
        return self.stems[1]

    @property
    def stem_quarter(self) -> Tensor:
        return self.stems[2]


@dataclass
class FeuStage:
    conv: Conv2dParams
    att_down: Conv2dParams | None = None
    att_up: Conv2dParams | None = None


@dataclass
class FeuParams:
    """Dense cascade of 3x3 stages with per-stage channel attention."""

    stages: list[FeuStage]
    fusion: Conv2dParams

    @property
    def channels(self) -> int:
        return self.fusion.out_channels

    def tensors(self) -> list[Tensor]:
        out = []
        for st in self.stages:
            for p in (st.conv, st.att_down, st.att_up):
                if p is not None:
                    out.extend(p.tensors())
        out.extend(self.fusion.tensors())
        return out


@dataclass
class BranchParams:
    """One enhancement branch.

    ``adapters[i]`` maps the i-th coarser enhanced band (coarsest first)
    to this branch's width; ``entry`` maps the concatenated input to the
    branch width and is omitted when the band already has that width and
    nothing is concatenated.
    """

    feus: list[FeuParams]
    entry: Conv2dParams | None = None
    adapters: list[Conv2dParams] = field(default_factory=list)


def decompose(image: Tensor, stems: Sequence[Conv2dParams]) -> FrequencyBands:
    """Split ``image`` into ``len(stems)`` frequency bands.

    ``stems[0]`` must be a stride-1 convolution on the image and every
    further stem a stride-2 convolution on the preceding stem output.
    """
    if image.ndim != 4:
        raise DimensionError(f"decompose: expected NCHW input, got {image.shape}")
    if not stems:
        raise ValueError("decompose: at least one stem is required")
    levels = len(stems)
    div = 2 ** max(levels - 1, 2)
    if image.shape[2] % div or image.shape[3] % div:
        raise ValueError(f"decompose: spatial dims {image.shape[2:]} must be divisible by {div}")
    if stems[0].stride != 1 or any(p.stride != 2 for p in stems[1:]):
        raise ValueError("decompose: expected one stride-1 stem followed by stride-2 stems")
    pyramid = [conv2d(image, stems[0])]
    if levels > 1:
        pyramid.append(conv2d(image, stems[1]))
        for p in stems[2:]:
            pyramid.append(conv2d(pyramid[-1], p))
    bands = [pyramid[-1]]
    for j in range(levels - 2, -1, -1):
        bands.append(sub(pyramid[j], bilinear_upsample(pyramid[j + 1], 2)))
    return FrequencyBands(bands=bands, stems=pyramid)


def channel_attention(y: Tensor, stage: FeuStage) -> Tensor:
    """Squeeze-excite per-channel scale in (0, 1), shape (N, C, 1, 1)."""
    z = relu(conv2d(global_avg_pool(y), stage.att_down))
    return sigmoid(conv2d(z, stage.att_up))


def feu_forward(x: Tensor, p: FeuParams, attention: bool = True) -> Tensor:
    """Frequency enhancement unit: dense stages, channel gates, 1x1 fusion, residual."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"feu_forward: expected {p.channels} channels, got shape {x.shape}")
    outputs: list[Tensor] = []
    for stage in p.stages:
        inp = concat_channels([x] + outputs) if outputs else x
        y = relu(conv2d(inp, stage.conv))
        if attention and stage.att_up is not None:
            y = mul(y, channel_attention(y, stage))
        outputs.append(y)
    fused = conv2d(concat_channels(outputs) if len(outputs) > 1 else outputs[0], p.fusion)
    return add(x, fused)


def feu_chain(x: Tensor, feus: Sequence[FeuParams], attention: bool = True) -> Tensor:
    for p in feus:
        x = feu_forward(x, p, attention)
    return x


def enhance(bands: FrequencyBands, branches: Sequence[BranchParams],
            attention: bool = True) -> list[Tensor]:
    """Enhance bands coarse-to-fine; finer branches see every coarser result.

    Returns enhanced bands coarsest first. Cross-feeds are adapted by a
    1x1 convolution before upsampling, which equals adapting afterwards
    because bilinear weights sum to one.
    """
    if len(branches) != len(bands.bands):
        raise DimensionError(f"enhance: {len(branches)} branch parameter sets for {len(bands.bands)} bands")
    enhanced: list[Tensor] = []
    for level, (band, bp) in enumerate(zip(bands.bands, branches)):
        if len(bp.adapters) != level:
            raise DimensionError(f"enhance: branch {level} needs {level} adapters, has {len(bp.adapters)}")
        parts = [band]
        for coarse_level, (coarse, adapter) in enumerate(zip(enhanced, bp.adapters)):
            factor = 2 ** (level - coarse_level)
            parts.append(bilinear_upsample(conv2d(coarse, adapter), factor))
        x = concat_channels(parts) if len(parts) > 1 else band
        if bp.entry is not None:
            x = conv2d(x, bp.entry)
        enhanced.append(feu_chain(x, bp.feus, attention))
    return enhanced
