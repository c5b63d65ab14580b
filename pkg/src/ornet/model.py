"""OR-Net assembly: stems, frequency branches, aggregation and reconstruction head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import fd, rfa
from .errors import ConfigError, DimensionError
from .tensor import (
    Conv2dParams,
    Tensor,
    absolute,
    add,
    conv2d,
    kaiming_conv,
    mean_all,
    relu,
    sub,
)

RFA_MODES = ("dynamic", "plain_spatial_attention", "off")


def _default_branch_channels(branches: int) -> tuple[int, ...]:
    return (128,) * (branches - 1) + (64,)


def _default_feu_counts(branches: int) -> tuple[int, ...]:
    return ((4,) * 4 + (3, 2))[-branches:] if branches > 1 else (2,)


@dataclass
class ModelConfig:
    """Architecture switches. Per-branch tuples run from the coarsest branch to the finest."""

    branch_count: int = 3
    branch_channels: tuple[int, ...] | None = None
    feu_counts: tuple[int, ...] | None = None
    rfa_mode: str = "dynamic"
    feu_attention: bool = True
    basis_kernels: int = 5
    scale: int = 4
    stem_channels: int = 64
    feu_stages: int = 3
    feu_growth: int = 32
    attention_reduction: int = 8
    kernel_size: int = 3
    head_channels: int = 64
    output_init_scale: float = 0.1

    def __post_init__(self):
        if self.branch_count not in (1, 2, 3, 4):
            raise ConfigError(f"branch_count must be in 1..4, got {self.branch_count}")
        if self.branch_channels is None:
            self.branch_channels = _default_branch_channels(self.branch_count)
        if self.feu_counts is None:
            self.feu_counts = _default_feu_counts(self.branch_count)
        self.branch_channels = tuple(int(c) for c in self.branch_channels)
        self.feu_counts = tuple(int(c) for c in self.feu_counts)
        if len(self.branch_channels) != self.branch_count or len(self.feu_counts) != self.branch_count:
            raise ConfigError("branch_channels and feu_counts need one entry per branch")
        if self.rfa_mode not in RFA_MODES:
            raise ConfigError(f"rfa_mode must be one of {RFA_MODES}, got {self.rfa_mode!r}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.basis_kernels < 1:
            raise ConfigError("basis_kernels must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        positive = ("stem_channels", "feu_stages", "feu_growth", "attention_reduction", "head_channels")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.output_init_scale < 0:
            raise ConfigError("output_init_scale must be non-negative")
        if min(self.branch_channels) < 1 or min(self.feu_counts) < 0:
            raise ConfigError("branch widths must be positive and FEU counts non-negative")

    @property
    def effective_basis_kernels(self) -> int:
        return 1 if self.rfa_mode == "plain_spatial_attention" else self.basis_kernels

    @property
    def omni_channels(self) -> int:
        return sum(self.branch_channels)

    @property
    def divisor(self) -> int:
        return 2 ** max(self.branch_count - 1, 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_channels"] = list(self.branch_channels)
        d["feu_counts"] = list(self.feu_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def desk_config(**overrides) -> ModelConfig:
    """Full OR-Net topology at widths that train in minutes on one CPU core."""
    base = dict(stem_channels=8, feu_growth=8, head_channels=16, attention_reduction=4)
    branches = overrides.get("branch_count", 3)
    base["branch_channels"] = (16,) * (branches - 1) + (8,)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ReconstructionHead:
    fusion: Conv2dParams
    body: list[Conv2dParams]
    output: Conv2dParams


@dataclass
class ForwardTrace:
    """Intermediate results of one forward pass, for analysis."""

    bands: fd.FrequencyBands
    enhanced: list[Tensor]
    omni: Tensor
    band_slices: list[tuple[int, int]]
    attention: rfa.AttentionMap | None
    sr: Tensor


class ORNet:
    """Parameter container and forward pass for one configuration.

    Parameters are created in a fixed order from ``seed`` so that two
    models with equal configs and seeds are bitwise identical.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        k = cfg.kernel_size
        sc = cfg.stem_channels

        self.stems = [self._conv(rng, "stem.0", 3, sc, k, 1)]
        if cfg.branch_count > 1:
            self.stems.append(self._conv(rng, "stem.1", 3, sc, k, 2))
            for j in range(2, cfg.branch_count):
                self.stems.append(self._conv(rng, f"stem.{j}", sc, sc, k, 2))

        self.branches: list[fd.BranchParams] = []
        for level, (width, count) in enumerate(zip(cfg.branch_channels, cfg.feu_counts)):
            prefix = f"branch.{level}"
            adapters = [self._conv(rng, f"{prefix}.adapter.{i}", cfg.branch_channels[i], width, 1)
                        for i in range(level)]
            in_width = sc + level * width
            entry = None if in_width == width and level == 0 else \
                self._conv(rng, f"{prefix}.entry", in_width, width, 1)
            feus = [self._feu(rng, f"{prefix}.feu.{u}", width) for u in range(count)]
            self.branches.append(fd.BranchParams(feus=feus, entry=entry, adapters=adapters))

        omni = cfg.omni_channels
        self.pool = None
        if cfg.rfa_mode != "off":
            m = cfg.effective_basis_kernels
            std = np.sqrt(2.0 / (omni * k * k))
            basis = self._register("rfa.basis", Tensor(rng.normal(0.0, std, size=(m, omni, omni, k, k)), True))
            bias = self._register("rfa.bias", Tensor(np.zeros(omni), True))
            embedding = self._conv(rng, "rfa.embedding", omni, m, 1)
            self.pool = rfa.KernelPool(basis=basis, bias=bias, embedding=embedding)

        hc = cfg.head_channels
        self.head = ReconstructionHead(
            fusion=self._conv(rng, "head.fusion", omni, hc, 1),
            body=[self._conv(rng, f"head.body.{i}", hc, hc, k) for i in range(2)],
            output=self._conv(rng, "head.output", hc, 3, k),
        )
        # a damped last layer starts the residual near zero, so sr begins close to the bicubic input
        self.head.output.weight.data *= cfg.output_init_scale

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t.name = name
        self.params[name] = t
        return t

    def _conv(self, rng, name, cin, cout, k, stride=1) -> Conv2dParams:
        p = kaiming_conv(rng, cin, cout, k, stride)
        self._register(f"{name}.weight", p.weight)
        self._register(f"{name}.bias", p.bias)
        return p

    def _feu(self, rng, prefix: str, width: int) -> fd.FeuParams:
        cfg = self.cfg
        g = cfg.feu_growth
        hidden = max(1, g // cfg.attention_reduction)
        stages = []
        for s in range(cfg.feu_stages):
            conv = self._conv(rng, f"{prefix}.stage.{s}.conv", width + s * g, g, cfg.kernel_size)
            down = up = None
            if cfg.feu_attention:
                down = self._conv(rng, f"{prefix}.stage.{s}.att_down", g, hidden, 1)
                up = self._conv(rng, f"{prefix}.stage.{s}.att_up", hidden, g, 1)
            stages.append(fd.FeuStage(conv=conv, att_down=down, att_up=up))
        fusion = self._conv(rng, f"{prefix}.fusion", cfg.feu_stages * g, width, 1)
        return fd.FeuParams(stages=stages, fusion=fusion)

    # -- parameter access -------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise DimensionError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    # -- forward ----------------------------------------------------------

    def trace(self, lr_up: Tensor) -> ForwardTrace:
        """Run the network on a bicubically pre-upsampled batch N x 3 x H x W."""
        if lr_up.ndim != 4 or lr_up.shape[1] != 3:
            raise DimensionError(f"expected N x 3 x H x W input, got {lr_up.shape}")
        div = self.cfg.divisor
        if lr_up.shape[2] % div or lr_up.shape[3] % div:
            raise ValueError(f"input spatial dims {lr_up.shape[2:]} must be divisible by {div}")
        bands = fd.decompose(lr_up, self.stems)
        enhanced = fd.enhance(bands, self.branches, attention=self.cfg.feu_attention)
        omni, slices = rfa.assemble_omni(enhanced)
        attention = None
        if self.pool is not None:
            attention = rfa.attention_map(omni, self.pool, slices)
            f = rfa.aggregate(attention, omni)
        else:
            f = omni
        h = conv2d(f, self.head.fusion)
        for p in self.head.body:
            h = relu(conv2d(h, p))
        sr = add(conv2d(h, self.head.output), lr_up)
        return ForwardTrace(bands=bands, enhanced=enhanced, omni=omni, band_slices=slices,
                            attention=attention, sr=sr)

    def forward(self, lr_up: Tensor) -> Tensor:
        return self.trace(lr_up).sr

    __call__ = forward


def apply_ablation(cfg: ModelConfig, seed: int = 0) -> ORNet:
    """Build the network wired for ``cfg``'s ablation switches."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("apply_ablation expects a ModelConfig")
    return ORNet(cfg, seed=seed)


def l1_loss(sr: Tensor, hr: Tensor) -> Tensor:
    if sr.shape != hr.shape:
        raise DimensionError(f"l1_loss: {sr.shape} vs {hr.shape}")
    return mean_all(absolute(sub(sr, hr)))


# Full-scale DRealSR x4 PSNR (dB) for each ablation row, shown for context only.
REFERENCE_PSNR = {
    "bran.=1": 32.25,
    "bran.=2": 32.40,
    "bran.=3": 32.59,
    "bran.=4": 32.52,
    "RFA+FEU": 32.59,
    "FEU only": 32.34,
    "RFA only": 32.23,
    "neither": 32.11,
    "SA+FEU": 32.46,
}
