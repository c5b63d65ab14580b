"""Command-line interface.

Every subcommand reads a plain ``key = value`` config file (``--config``)
with ``--set KEY=VALUE`` overrides, writes only inside ``--out`` and
echoes the effective configuration there as ``effective.cfg``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data, freq
from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigError, DimensionError, ImageDecodeError, NumericError
from .metrics import psnr, ssim
from .model import REFERENCE_PSNR, ModelConfig, ORNet, desk_config
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, predict, train_loop, trim_pair

log = logging.getLogger("ornet")

MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
RUN_DEFAULTS = {
    "preset": "full",
    "manifest": "",
    "checkpoint": "",
    "levels": "4",
    "degradation": "bicubic",
    "ablate_seeds": "",
    "toy_count": "4",
    "toy_size": "96",
    "toy_kind": "bicubic",
}
TUPLE_KEYS = {"branch_channels", "feu_counts"}
BOOL_KEYS = {"feu_attention", "flip", "rotation"}
FLOAT_KEYS = {"lr0", "lr_decay", "beta1", "beta2", "eps", "output_init_scale"}
EVAL_COLUMNS = ("image", "psnr_model", "ssim_model", "psnr_bicubic", "ssim_bicubic")


class UsageError(Exception):
    pass


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _parse_bool(key, v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _convert(key: str, v: str):
    try:
        if key in TUPLE_KEYS:
            return None if v.lower() in ("", "default") else tuple(int(x) for x in v.split(","))
        if key in BOOL_KEYS:
            return _parse_bool(key, v)
        if key in FLOAT_KEYS:
            return float(v)
        if key == "rfa_mode":
            return v
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {v!r}") from None


@dataclass
class RunConfig:
    """Merged model, training and run settings."""

    model: ModelConfig
    train: TrainConfig
    run: dict[str, str] = field(default_factory=dict)
    raw: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        model_kw, train_kw, run = {}, {}, dict(RUN_DEFAULTS)
        for key, value in pairs.items():
            if key in MODEL_KEYS:
                model_kw[key] = _convert(key, value)
            elif key in TRAIN_KEYS:
                train_kw[key] = _convert(key, value)
            elif key in RUN_DEFAULTS:
                run[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if run["preset"] not in ("full", "desk"):
            raise ConfigError(f"preset must be full or desk, got {run['preset']!r}")
        model = desk_config(**model_kw) if run["preset"] == "desk" else ModelConfig(**model_kw)
        return cls(model=model, train=TrainConfig(**train_kw), run=run, raw=dict(pairs))

    def with_model(self, **overrides) -> ModelConfig:
        """Configured model with ``overrides``; a new branch count resizes the per-branch tuples."""
        kw = self.model.to_dict()
        if "branch_count" in overrides:
            b = overrides["branch_count"]
            for key in TUPLE_KEYS:
                base = tuple(kw[key])
                kw[key] = (base[0],) * max(0, b - len(base)) + base[-b:]
        kw.update(overrides)
        return ModelConfig(**kw)

    def lines(self) -> list[str]:
        out = [f"{k} = {_fmt(v)}" for k, v in sorted(self.model.to_dict().items())]
        out += [f"{k} = {_fmt(v)}" for k, v in sorted(self.train.to_dict().items())]
        out += [f"{k} = {v}" for k, v in sorted(self.run.items())]
        return out

    def echo(self, out_dir: Path) -> None:
        (out_dir / "effective.cfg").write_text("\n".join(self.lines()) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def load_run_config(args) -> RunConfig:
    pairs: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        pairs.update(parse_config_text(path.read_text(), str(path)))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    for name in ("manifest", "checkpoint"):
        value = getattr(args, name, None)
        if value:
            pairs[name] = value
    return RunConfig.from_pairs(pairs)


def _dataset(rc: RunConfig) -> list[data.PatchPair]:
    if not rc.run["manifest"]:
        raise UsageError("no manifest configured (set manifest=PATH)")
    return data.load_pairs(rc.run["manifest"], seed=rc.train.seed)


def _pairs_from_inputs(rc: RunConfig, inputs) -> list[data.PatchPair]:
    """Manifest pairs, or positional HR images degraded per ``degradation``."""
    if not inputs:
        return _dataset(rc)
    kind = rc.run["degradation"]
    rng = np.random.default_rng(rc.train.seed)
    return [data.synthesize_degradation(data.decode_image(p).data, kind, rc.model.scale, rng, source=str(p))
            for p in inputs]


def _model_for(rc: RunConfig) -> ORNet:
    if rc.run["checkpoint"]:
        return load_checkpoint(rc.run["checkpoint"]).build_model()
    return ORNet(rc.model, seed=rc.train.seed)


# -- commands -------------------------------------------------------------

def cmd_train(rc: RunConfig, out: Path, args) -> int:
    dataset = _dataset(rc)
    resume = load_checkpoint(args.resume) if getattr(args, "resume", None) else None
    result = train_loop(rc.train, rc.model, dataset, out_dir=out, resume=resume)
    final = [r for r in result.log if r["psnr"] != ""]
    if final:
        log.info("final validation psnr %.3f ssim %.4f", final[-1]["psnr"], final[-1]["ssim"])
    print(f"wrote {len(result.checkpoints)} checkpoints to {out / 'checkpoints'}")
    return 0


def eval_rows(model: ORNet, pairs) -> list[dict]:
    rows = []
    for pair in pairs:
        pair = trim_pair(pair, model.cfg.divisor)
        sr, bic = predict(model, pair)
        sr, bic = np.clip(sr, 0.0, 1.0), np.clip(bic, 0.0, 1.0)
        rows.append({"image": pair.source, "psnr_model": psnr(sr, pair.hr), "ssim_model": ssim(sr, pair.hr),
                     "psnr_bicubic": psnr(bic, pair.hr), "ssim_bicubic": ssim(bic, pair.hr)})
    if rows:
        mean = {"image": "mean"}
        for col in EVAL_COLUMNS[1:]:
            mean[col] = float(np.mean([r[col] for r in rows]))
        rows.append(mean)
    return rows


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_eval(rc: RunConfig, out: Path, args) -> int:
    if not rc.run["checkpoint"]:
        raise UsageError("eval needs a checkpoint (--checkpoint PATH)")
    model = load_checkpoint(rc.run["checkpoint"]).build_model()
    rows = eval_rows(model, _dataset(rc))
    _write_csv(out / "eval.csv", EVAL_COLUMNS, rows)
    if rows:
        m = rows[-1]
        print(f"mean psnr {m['psnr_model']:.3f} dB (bicubic {m['psnr_bicubic']:.3f} dB)")
    return 0


def _input_tensor(model: ORNet, pair: data.PatchPair) -> Tensor:
    pair = trim_pair(pair, model.cfg.divisor)
    return Tensor(data.upsample_lr(pair)[None])


def _tag(i: int, pair: data.PatchPair) -> str:
    return f"{i:03d}_{Path(pair.source).stem or 'image'}"


def cmd_analyze(rc: RunConfig, out: Path, args) -> int:
    levels = int(rc.run["levels"])
    pairs = _pairs_from_inputs(rc, args.inputs)
    if args.mode == "degradation":
        profiles = []
        for i, pair in enumerate(pairs):
            trimmed = trim_pair(pair, 2 ** levels)
            profiles.append(freq.degradation_profile(data.upsample_lr(trimmed), trimmed.hr, levels,
                                                     source=_tag(i, pair)))
        freq.write_profiles_csv(profiles, out / "degradation_profiles.csv")
        return 0
    model = _model_for(rc)
    if args.mode == "feature-bands":
        profiles = []
        for i, pair in enumerate(pairs):
            with no_grad():
                tr = model.trace(_input_tensor(model, pair))
            names = _band_names(len(tr.band_slices))
            for name, (a, b) in zip(names, tr.band_slices):
                profiles.append(freq.feature_band_profile(tr.omni.data[0, a:b], levels,
                                                          source=f"{_tag(i, pair)}:{name}"))
        freq.write_profiles_csv(profiles, out / "feature_profiles.csv")
        return 0
    for i, pair in enumerate(pairs):
        with no_grad():
            tr = model.trace(_input_tensor(model, pair))
        bands = tr.bands.bands
        names = _band_names(len(bands))
        for name, band in zip(names, bands):
            data.encode_pgm(np.abs(band.data[0]).mean(axis=0), out / f"{_tag(i, pair)}_{name}.pgm")
    return 0


def _band_names(n: int) -> list[str]:
    if n == 1:
        return ["f_h"]
    if n == 2:
        return ["f_l", "f_h"]
    return ["f_l"] + [f"f_m{j}" if n > 3 else "f_m" for j in range(1, n - 1)] + ["f_h"]


ABLATION_ROWS = (
    ("branches", "bran.=1", dict(branch_count=1)),
    ("branches", "bran.=2", dict(branch_count=2)),
    ("branches", "bran.=3", dict(branch_count=3)),
    ("branches", "bran.=4", dict(branch_count=4)),
    ("switches", "RFA+FEU", dict(rfa_mode="dynamic", feu_attention=True)),
    ("switches", "FEU only", dict(rfa_mode="off", feu_attention=True)),
    ("switches", "RFA only", dict(rfa_mode="dynamic", feu_attention=False)),
    ("switches", "neither", dict(rfa_mode="off", feu_attention=False)),
    ("switches", "SA+FEU", dict(rfa_mode="plain_spatial_attention", feu_attention=True)),
)
ABLATION_COLUMNS = ("group", "row", "branch_count", "rfa_mode", "feu_attention", "seeds",
                    "l1", "psnr", "ssim", "reference_psnr")


def run_ablation(rc: RunConfig, dataset, seeds) -> list[dict]:
    """Train every ablation row with the same budget; scores are medians over ``seeds``."""
    cache: dict[tuple, dict] = {}
    rows = []
    for group, name, overrides in ABLATION_ROWS:
        mcfg = rc.with_model(**overrides)
        scores = []
        for seed in seeds:
            key = (mcfg.config_hash(), seed)
            if key not in cache:
                tcfg = TrainConfig(**dict(rc.train.to_dict(), seed=seed))
                result = train_loop(tcfg, mcfg, dataset)
                cache[key] = evaluate(result.model, dataset)
            scores.append(cache[key])
        rows.append({
            "group": group, "row": name, "branch_count": mcfg.branch_count, "rfa_mode": mcfg.rfa_mode,
            "feu_attention": "on" if mcfg.feu_attention else "off", "seeds": " ".join(map(str, seeds)),
            "l1": statistics.median(s["l1"] for s in scores),
            "psnr": statistics.median(s["psnr"] for s in scores),
            "ssim": statistics.median(s["ssim"] for s in scores),
            "reference_psnr": f"{REFERENCE_PSNR[name]:.2f}",
        })
    return rows


def cmd_ablate(rc: RunConfig, out: Path, args) -> int:
    seeds = [int(s) for s in rc.run["ablate_seeds"].split(",") if s.strip()] or [rc.train.seed]
    rows = run_ablation(rc, _dataset(rc), seeds)
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    return 0


def cmd_make_toy(rc: RunConfig, out: Path, args) -> int:
    manifest = data.write_toy_dataset(out, int(rc.run["toy_count"]), int(rc.run["toy_size"]),
                                      rc.model.scale, rc.run["toy_kind"], rc.train.seed)
    print(manifest)
    return 0


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--out", required=True, help="output directory (the only place written to)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ornet", description="OR-Net super-resolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--manifest")
    tr.add_argument("--resume", help="checkpoint to continue from")
    ev = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a checkpoint against bicubic")
    ev.add_argument("--checkpoint")
    ev.add_argument("--manifest")
    for name, helptext in (("analyze", "frequency analysis"), ("decompose", "dump f_l/f_m/f_h as PGM")):
        an = sub.add_parser(name, parents=[common], help=helptext)
        if name == "analyze":
            an.add_argument("--mode", required=True, choices=("degradation", "feature-bands", "decompose-dump"))
        an.add_argument("--checkpoint")
        an.add_argument("--manifest")
        an.add_argument("inputs", nargs="*", help="HR images (instead of a manifest)")
    ab = sub.add_parser("ablate", parents=[common], help="branch sweep and switch grid at toy scale")
    ab.add_argument("--manifest")
    sub.add_parser("make-toy", parents=[common], help="write a procedural toy dataset and manifest")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "decompose": cmd_analyze,
            "ablate": cmd_ablate, "make-toy": cmd_make_toy}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "decompose":
        args.mode = "decompose-dump"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        rc = load_run_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rc.echo(out)
        return COMMANDS[args.command](rc, out, args)
    except (UsageError, ConfigError) as exc:
        print(f"ornet: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"ornet: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ImageDecodeError, NumericError, DimensionError, OSError, ValueError) as exc:
        print(f"ornet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
