"""Adam, augmentation and the deterministic training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import PatchPair, bicubic_resize
from .errors import ConfigError, NumericError
from .metrics import psnr, ssim
from .model import ModelConfig, ORNet, l1_loss
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "l1", "psnr", "ssim")


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_decay: float = 0.5
    batch_size: int = 8
    crop: int = 192
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 1
    max_steps: int = 0
    seed: int = 0
    flip: bool = True
    rotation: bool = True
    val_count: int = 0
    eval_every: int = 1
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr0 must be positive and lr_decay in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1; max_epochs and max_steps >= 0")
        if self.crop < 0 or self.val_count < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("crop, val_count, eval_every, checkpoint_every must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update applied in place to ``params``."""
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))[:3]}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise RuntimeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _transform(img: np.ndarray, flip: int, rot: int) -> np.ndarray:
    if flip == 1:
        img = img[:, :, ::-1]
    elif flip == 2:
        img = img[:, ::-1, :]
    return np.ascontiguousarray(np.rot90(img, rot, axes=(1, 2)))


def augment(pair: PatchPair, rng: np.random.Generator, flip: bool = True, rotation: bool = True,
            crop: int = 0) -> PatchPair:
    """Random aligned crop (``crop`` is the HR edge, 0 disables), flip and rotation.

    Flip is one of identity / horizontal / vertical; rotation a multiple
    of 90 degrees counter-clockwise. The same transform is applied to LR
    and HR.
    """
    s = pair.scale
    lr, hr = pair.lr, pair.hr
    top = left = 0
    if crop:
        if crop % s:
            raise ValueError(f"crop {crop} is not a multiple of scale {s}")
        c = crop // s
        h, w = lr.shape[1:]
        if c > h or c > w:
            raise ValueError(f"crop {crop} larger than HR image {hr.shape[1:]}")
        top = int(rng.integers(0, h - c + 1))
        left = int(rng.integers(0, w - c + 1))
        lr = lr[:, top:top + c, left:left + c]
        hr = hr[:, s * top:s * (top + c), s * left:s * (left + c)]
    f = int(rng.integers(0, 3)) if flip else 0
    r = int(rng.integers(0, 4)) if rotation else 0
    if not crop and not f and not r:
        return pair
    meta = dict(pair.meta, crop=(top, left, crop), flip=f, rot90=r)
    return PatchPair(lr=_transform(lr, f, r), hr=_transform(hr, f, r), scale=s,
                     source=pair.source, tag=pair.tag, meta=meta)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def network_input(pairs: Sequence[PatchPair]) -> tuple[Tensor, Tensor]:
    """Stack bicubic-upsampled LR inputs and HR targets into NCHW tensors."""
    shapes = {p.hr.shape for p in pairs}
    if len(shapes) != 1:
        raise ConfigError(f"batch mixes image sizes {sorted(shapes)}; enable cropping")
    x = np.stack([bicubic_resize(p.lr, p.hr.shape[1], p.hr.shape[2]) for p in pairs])
    y = np.stack([p.hr for p in pairs])
    return Tensor(x), Tensor(y)


def trim_pair(pair: PatchPair, divisor: int) -> PatchPair:
    """Crop a pair from the top-left so the HR size is divisible by ``divisor``."""
    s = pair.scale
    step = divisor // math.gcd(divisor, s)
    h = pair.lr.shape[1] - pair.lr.shape[1] % step
    w = pair.lr.shape[2] - pair.lr.shape[2] % step
    if h < 1 or w < 1:
        raise ValueError(f"{pair.source}: image too small for divisor {divisor}")
    if (h, w) == pair.lr.shape[1:]:
        return pair
    return PatchPair(lr=pair.lr[:, :h, :w], hr=pair.hr[:, :s * h, :s * w], scale=s,
                     source=pair.source, tag=pair.tag, meta=pair.meta)


def predict(model: ORNet, pair: PatchPair) -> tuple[np.ndarray, np.ndarray]:
    """Super-resolve one trimmed pair; returns (sr, bicubic) arrays before clipping."""
    x, _ = network_input([pair])
    with no_grad():
        sr = model(x).data[0]
    return sr, x.data[0]


def evaluate(model: ORNet, pairs: Sequence[PatchPair]) -> dict:
    """Mean L1 / PSNR / SSIM of clipped model outputs over ``pairs``."""
    rows = []
    for pair in pairs:
        pair = trim_pair(pair, model.cfg.divisor)
        sr, bic = predict(model, pair)
        out = np.clip(sr, 0.0, 1.0)
        rows.append((float(np.abs(sr - pair.hr).mean()), psnr(out, pair.hr), ssim(out, pair.hr),
                     psnr(np.clip(bic, 0.0, 1.0), pair.hr)))
    a = np.array(rows)
    return {"l1": float(a[:, 0].mean()), "psnr": float(a[:, 1].mean()), "ssim": float(a[:, 2].mean()),
            "psnr_bicubic": float(a[:, 3].mean())}


@dataclass
class TrainResult:
    model: ORNet
    checkpoint: Checkpoint
    log: list[dict]
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["l1"] for r in self.log if r["psnr"] == ""]


def split_dataset(dataset: Sequence[PatchPair], val_count: int):
    """Last ``val_count`` pairs validate; with 0 the training pairs are reused."""
    if val_count >= len(dataset):
        raise ConfigError(f"val_count {val_count} leaves no training data")
    if val_count == 0:
        return list(dataset), list(dataset)
    return list(dataset[:-val_count]), list(dataset[-val_count:])


def _snapshot(model: ORNet, state: AdamState, tcfg: TrainConfig, epoch: int, step: int,
              rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(
        model_config=model.cfg.to_dict(), params=model.state_dict(), train_config=tcfg.to_dict(),
        adam_m={k: v.copy() for k, v in state.m.items()}, adam_v={k: v.copy() for k, v in state.v.items()},
        adam_t=state.t, epoch=epoch, step=step, rng_state=rng.bit_generator.state,
    )


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})


def train_loop(cfg: TrainConfig, model_cfg: ModelConfig, dataset: Sequence[PatchPair],
               out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    """Train on ``dataset`` and return the final model, checkpoint and log rows.

    One epoch is one pass over the training split in an order drawn from
    the run's generator. With ``out_dir`` a checkpoint is written every
    ``checkpoint_every`` epochs and ``metrics.csv`` at the end. Resuming
    from a checkpoint continues with the next epoch and reproduces the
    uninterrupted run exactly.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    dataset = [trim_pair(p, model_cfg.divisor) for p in dataset]
    train_set, val_set = split_dataset(dataset, cfg.val_count)
    rng = np.random.default_rng(cfg.seed)
    model = ORNet(model_cfg, seed=cfg.seed)
    state = AdamState()
    start_epoch, step = 0, 0
    if resume is not None:
        if resume.config_hash != model_cfg.config_hash():
            raise ConfigError("checkpoint was written for a different model config")
        model.load_state_dict(resume.params)
        state = AdamState(m={k: v.copy() for k, v in resume.adam_m.items()},
                          v={k: v.copy() for k, v in resume.adam_v.items()}, t=resume.adam_t)
        rng.bit_generator.state = resume.rng_state
        start_epoch, step = resume.epoch + 1, resume.step
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    written: list[Path] = []
    params = model.params
    epoch = start_epoch - 1
    done = False
    for epoch in range(start_epoch, cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            batch = [augment(train_set[i], rng, cfg.flip, cfg.rotation, cfg.crop)
                     for i in order[start:start + cfg.batch_size]]
            x, y = network_input(batch)
            model.zero_grad()
            try:
                loss = l1_loss(model(x), y)
            except NumericError as exc:
                raise NumericError(f"step {step + 1}, epoch {epoch}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step + 1}, epoch {epoch}")
            loss.backward()
            adam_step(params, {k: t.grad for k, t in params.items() if t.grad is not None}, state, lr,
                      cfg.beta1, cfg.beta2, cfg.eps)
            step += 1
            rows.append({"step": step, "epoch": epoch, "lr": lr, "l1": value, "psnr": "", "ssim": ""})
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        last = done or epoch == cfg.max_epochs - 1
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            m = evaluate(model, val_set)
            rows.append({"step": step, "epoch": epoch, "lr": lr, "l1": m["l1"], "psnr": m["psnr"],
                         "ssim": m["ssim"]})
            log.info("epoch %d step %d val psnr %.3f ssim %.4f", epoch, step, m["psnr"], m["ssim"])
        if ckpt_dir is not None and cfg.checkpoint_every and ((epoch + 1) % cfg.checkpoint_every == 0 or last):
            path = ckpt_dir / f"epoch_{epoch:04d}.ornt"
            save_checkpoint(_snapshot(model, state, cfg, epoch, step, rng), path)
            written.append(path)
        if done:
            break
    final = _snapshot(model, state, cfg, epoch, step, rng)
    if out_dir is not None:
        write_log(rows, Path(out_dir) / "metrics.csv")
    return TrainResult(model=model, checkpoint=final, log=rows, checkpoints=written)
