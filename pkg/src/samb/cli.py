"""Experiment driver: data generation, training, ablation sweeps, and
assignment-map export.

Config files are flat ``key=value`` text.  Every command is deterministic
under identical inputs.  Exit codes: 0 success, 2 config error, 3 numeric
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys

import numpy as np

from .alignment import GrlConfig
from .attention import GumbelConfig, MessagePassingMode
from .data import Dataset, SyntheticSpec, batch_iter, generate
from .errors import (ConfigError, ContractError, DegenerateMaskError,
                     FormatError, NumericError)
from .model import ModelConfig, VitSamb
from .trainer import Scheme, TrainConfig, Trainer


# ---------------------------------------------------------------------------
# flat key=value config files

def parse_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


class _KeyReader:
    """Typed access with defaults; flags unknown keys at the end."""

    def __init__(self, raw: dict[str, str]):
        self.raw = raw
        self.used: set[str] = set()

    def _get(self, key, default):
        self.used.add(key)
        return self.raw.get(key, default)

    def str(self, key, default):
        return str(self._get(key, default))

    def int(self, key, default):
        v = self._get(key, default)
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected integer, got {v!r}")

    def float(self, key, default):
        v = self._get(key, default)
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected number, got {v!r}")

    def bool(self, key, default):
        v = str(self._get(key, default)).lower()
        if v in ("1", "true", "yes"):
            return True
        if v in ("0", "false", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected boolean, got {v!r}")

    def finish(self):
        unknown = set(self.raw) - self.used
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")


def spec_from_config(raw: dict[str, str]) -> SyntheticSpec:
    r = _KeyReader(raw)
    spec = SyntheticSpec(
        num_classes=r.int("num_classes", 4),
        train_per_class=r.int("train_per_class", 50),
        eval_per_class=r.int("eval_per_class", 25),
        image_size=r.int("image_size", 16),
        brightness_delta=r.float("brightness_delta", 0.3),
        texture_id=r.int("texture_id", 1),
        noise_sigma=r.float("noise_sigma", 0.1),
        hue_rotation=r.float("hue_rotation", 0.5),
        seed=r.int("seed", 0),
    )
    r.finish()
    return spec


def _parse_enum(cls, value: str, what: str):
    try:
        return cls(value)
    except ValueError:
        valid = ", ".join(m.value for m in cls)
        raise ConfigError(f"invalid {what} {value!r}; expected one of: {valid}")


def train_config_from(raw: dict[str, str], source_train: Dataset) -> tuple[TrainConfig, str]:
    """Build a TrainConfig; image geometry and class count come from the data."""
    r = _KeyReader(raw)
    data_dir = r.str("data_dir", "")
    if not data_dir:
        raise ConfigError("config must set data_dir")
    h = source_train.images.shape[2]
    seed = r.int("seed", 0)
    model = ModelConfig(
        image_size=h,
        patch_size=r.int("patch_size", 4),
        in_channels=source_train.images.shape[1],
        embed_dim=r.int("embed_dim", 32),
        depth=r.int("depth", 2),
        heads=r.int("heads", 4),
        mlp_ratio=r.int("mlp_ratio", 4),
        num_classes=source_train.num_classes,
        num_group_tokens=r.int("num_group_tokens", 4),
        mode=_parse_enum(MessagePassingMode, r.str("mode", "samb-d"), "mode"),
        gumbel=GumbelConfig(temperature=r.float("temperature", 1.0),
                            noise_enabled=r.bool("gumbel_noise", True),
                            rng_seed=seed),
    )
    cfg = TrainConfig(
        model=model,
        scheme=_parse_enum(Scheme, r.str("scheme", "ada-then-joint"), "scheme"),
        iterations_1=r.int("iterations_1", 200),
        iterations_2=r.int("iterations_2", 200),
        lr=r.float("lr", 1e-2),
        momentum=r.float("momentum", 0.9),
        weight_decay=r.float("weight_decay", 1e-4),
        batch_size=r.int("batch_size", 16),
        seed=seed,
        grl=GrlConfig(lambda_max=r.float("lambda_max", 1.0),
                      gamma=r.float("gamma", 10.0)),
        eval_every=r.int("eval_every", 0),
        wallclock=r.bool("wallclock", False),
    )
    r.finish()
    return cfg, data_dir


def write_manifest(raw: dict[str, str], out_dir: str):
    """Resolved config plus a content hash, written before training starts."""
    lines = [f"{k}={raw[k]}" for k in sorted(raw)]
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines))
        f.write(f"\nconfig_hash={digest}\n")


def load_datasets(data_dir: str) -> dict[str, Dataset]:
    out = {}
    for name in ("source_train", "source_eval", "target_train", "target_eval"):
        domain = name.split("_")[0]
        out[name] = Dataset.load(os.path.join(data_dir, f"{name}.sdsh"), domain)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    spec = spec_from_config(parse_config(args.spec))
    os.makedirs(args.out, exist_ok=True)
    for name, ds in generate(spec).items():
        ds.save(os.path.join(args.out, f"{name}.sdsh"))
    return 0


def _apply_overrides(raw: dict[str, str], args) -> dict[str, str]:
    for key in ("scheme", "mode", "seed", "iterations_1", "iterations_2"):
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = str(v)
    return raw


def _run_training(raw: dict[str, str], out_dir: str) -> Trainer:
    ds = load_datasets(raw.get("data_dir", ""))
    cfg, _ = train_config_from(raw, ds["source_train"])
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(raw, out_dir)
    trainer = Trainer(cfg, ds["source_train"], ds["target_train"],
                      ds["source_eval"], ds["target_eval"])
    trainer.run(out_dir)
    return trainer

def cmd_train(args) -> int:
    raw = _apply_overrides(parse_config(args.config), args)
    _run_training(raw, args.out)
    return 0


_SWEEP_KEYS = {"tokens": "num_group_tokens", "scheme": "scheme", "mode": "mode"}


def cmd_sweep(args) -> int:
    if args.axis not in _SWEEP_KEYS:
        raise ConfigError(f"invalid sweep axis {args.axis!r}")
    key = _SWEEP_KEYS[args.axis]
    base = parse_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for value in args.values.split(","):
        value = value.strip()
        raw = dict(base)
        raw[key] = value
        run_dir = os.path.join(args.out, f"{args.axis}_{value}")
        try:
            trainer = _run_training(raw, run_dir)
            last = trainer.log.records[-1]
            rows.append([args.axis, value, "ok",
                         f"{last.acc_src:.6f}" if last.acc_src is not None else "",
                         f"{last.acc_tgt:.6f}" if last.acc_tgt is not None else ""])
        except Exception as e:  # record the failure, keep sweeping
            rows.append([args.axis, value, f"error: {e}", "", ""])
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["axis", "value", "status", "final_acc_src", "final_acc_tgt"])
        w.writerows(rows)
    return 0


def cmd_export_attn(args) -> int:
    raw = parse_config(args.config)
    data = Dataset.load(args.data, "target")
    cfg, _ = train_config_from(raw, data)
    if not cfg.model.mode.dynamic:
        raise ContractError(
            f"mode {cfg.model.mode.value} has no dynamic assignments to export")
    model = VitSamb(cfg.model, np.random.default_rng(cfg.seed))
    model.load(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    grid = cfg.model.grid
    csv_path = os.path.join(args.out, "assignments.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "layer", "token_index", "row", "col", "group"])
        for batch in batch_iter(data, 16, seed=0, shuffle=False):
            out = model.forward(batch.images.data, train=False)
            for b, sid in enumerate(batch.sample_ids):
                lines = []
                for layer, assignment in enumerate(out.assignments):
                    hard = assignment.hard[b]
                    lines.append(f"layer {layer}")
                    for row in range(grid):
                        cells = hard[row * grid:(row + 1) * grid]
                        lines.append(" ".join(str(int(c)) for c in cells))
                    for tok in range(len(hard)):
                        w.writerow([int(sid), layer, tok, tok // grid,
                                    tok % grid, int(hard[tok])])
                with open(os.path.join(args.out, f"sample_{int(sid):05d}.txt"),
                          "w") as g:
                    g.write("\n".join(lines) + "\n")
    from . import tensor as T
    T.clear_tape()
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samb",
                                description="group-token UDA experiment driver")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the four SDSH dataset splits")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--scheme")
    t.add_argument("--mode")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations-1", dest="iterations_1", type=int)
    t.add_argument("--iterations-2", dest="iterations_2", type=int)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="ablation sweep over one axis")
    s.add_argument("--axis", required=True, choices=sorted(_SWEEP_KEYS))
    s.add_argument("--values", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    e = sub.add_parser("export-attn", help="dump per-layer assignment maps")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_export_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, DegenerateMaskError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
