"""Command-line entry point: train, eval, infer, synth, gradcheck.

Settings resolve as command-line flag > JSON config file (``--config``) >
built-in default.  ``CAMB_SEED`` supplies the seed when neither a flag nor
the config file sets one.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numerical failure (non-finite loss, failed gradient check).
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import read_dataset, synth_dataset, write_dataset
from .errors import CambError, ConfigError, FormatError
from .fileio import load_checkpoint, read_ppm, save_checkpoint, write_pfm
from .gradcheck import default_checks, pipeline_error
from .loss import Ablation, LossConfig
from .metrics import HEADERS, MetricsReport, aggregate, evaluate
from .network import AdamState, ModelConfig, init_model
from .train import LOG_COLUMNS, TrainConfig, evaluate_model, predict, stack, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("cambdepth")

# training defaults plus desk-scale settings for the synthetic scenes
DEFAULTS: Dict[str, object] = {
    "lr": 1e-4,
    "batch_size": 8,
    "steps": 300,
    "seed": 0,
    "alpha": 1.0,
    "beta": 0.8,
    "theta": 0.5,
    "block_size": 2,
    "p": 3.0,
    "reduction": 4,
    "zeta": 0.3,
    "eta": 0.3,
    "no_camb": False,
    "no_grad_loss": False,
    "no_diag": False,
    "no_ssim_weight": False,
    "stage_channels": [16, 32, 64, 128],
    "depth_max": 80.0,
    "size": 32,
    "n_shapes": 4,
    "n_train": 64,
    "n_eval": 16,
    "n": 16,
    "data_seed": 0,
    "eval_seed": 100000,
    "min_valid_depth": 1e-3,
    "data_root": None,
    "checkpoint": "model.ckpt",
    "out": None,
    "gt_as_pred": False,
}

FLAGS = [
    # (flag, key, type, help)
    ("--lr", "lr", float, "Adam learning rate"),
    ("--batch-size", "batch_size", int, "images per Adam step"),
    ("--steps", "steps", int, "number of Adam steps"),
    ("--seed", "seed", int, "seed for initialisation, batching and augmentation"),
    ("--alpha", "alpha", float, "weight of the depth term"),
    ("--beta", "beta", float, "weight of the gradient term"),
    ("--theta", "theta", float, "offset inside ln(x + theta)"),
    ("--block-size", "block_size", int, "pixel-block size b of the gradient term"),
    ("--p", "p", float, "power-average pooling exponent"),
    ("--reduction", "reduction", int, "channel reduction ratio of the attention MLP"),
    ("--zeta", "zeta", float, "vertical flip probability"),
    ("--eta", "eta", float, "horizontal flip probability"),
    ("--depth-max", "depth_max", float, "far-plane depth of synthetic scenes; also SSIM range and output scale"),
    ("--size", "size", int, "synthetic scene height and width"),
    ("--n-shapes", "n_shapes", int, "rectangles per synthetic scene"),
    ("--n-train", "n_train", int, "synthetic training scenes when --data-root is absent"),
    ("--n-eval", "n_eval", int, "synthetic evaluation scenes when --data-root is absent"),
    ("--n", "n", int, "scenes written by synth"),
    ("--data-seed", "data_seed", int, "first scene seed of the synthetic training set"),
    ("--eval-seed", "eval_seed", int, "first scene seed of the synthetic evaluation set"),
    ("--min-valid-depth", "min_valid_depth", float, "ground truth below this is ignored"),
    ("--data-root", "data_root", str, "dataset directory of <id>.ppm / <id>.pfm pairs"),
    ("--checkpoint", "checkpoint", str, "checkpoint path"),
    ("--out", "out", str, "output path (log, table, or directory depending on command)"),
]

SWITCHES = [
    ("--no-camb", "no_camb", "skip connections bypass the attention block"),
    ("--no-grad-loss", "no_grad_loss", "drop the gradient term"),
    ("--no-diag", "no_diag", "drop the diagonal gradient"),
    ("--no-ssim-weight", "no_ssim_weight", "fix lambda to 1 instead of 1 - SSIM"),
]

COMMANDS = {
    "train": "train a model and write a checkpoint plus loss log",
    "eval": "evaluate a checkpoint; per-image rows plus an aggregate row",
    "infer": "write a predicted depth PFM for each input image",
    "synth": "write a synthetic dataset directory",
    "gradcheck": "compare autodiff against finite differences",
}


@dataclass
class RunConfig:
    command: str
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    toggles: Ablation
    settings: Dict[str, object] = field(default_factory=dict)

    def __getattr__(self, name):
        settings = self.__dict__.get("settings", {})
        if name in settings:
            return settings[name]
        raise AttributeError(name)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings (flags override it)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    for flag, key, typ, text in FLAGS:
        common.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS,
                            help=f"{text} (default: {DEFAULTS[key]})")
    for flag, key, text in SWITCHES:
        common.add_argument(flag, dest=key, action="store_true", default=argparse.SUPPRESS,
                            help=f"{text} (default: off)")
    parser = argparse.ArgumentParser(prog="cambdepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "eval":
            p.add_argument("--gt-as-pred", dest="gt_as_pred", action="store_true", default=argparse.SUPPRESS,
                           help="score ground truth against itself, no checkpoint needed (default: off)")
        if name == "infer":
            p.add_argument("inputs", nargs="*", help="PPM images (default: every .ppm in --data-root)")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file, environment and flags, then validate."""
    settings = dict(DEFAULTS)
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "inputs")}
    file_settings = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_settings = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_settings, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_settings) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    settings.update(file_settings)
    if "seed" not in explicit and "seed" not in file_settings and os.environ.get("CAMB_SEED"):
        try:
            settings["seed"] = int(os.environ["CAMB_SEED"])
        except ValueError:
            raise ConfigError(f"CAMB_SEED must be an integer, got {os.environ['CAMB_SEED']!r}") from None
    settings.update(explicit)
    settings["inputs"] = list(getattr(args, "inputs", []) or [])

    try:
        model = ModelConfig(stage_channels=tuple(settings["stage_channels"]), reduction=int(settings["reduction"]),
                            p=float(settings["p"]), use_camb=not settings["no_camb"],
                            depth_scale=float(settings["depth_max"]))
        loss = LossConfig(alpha=float(settings["alpha"]), beta=float(settings["beta"]),
                          theta=float(settings["theta"]), block_size=int(settings["block_size"]),
                          depth_range=float(settings["depth_max"]))
        cfg = TrainConfig(lr=float(settings["lr"]), batch_size=int(settings["batch_size"]),
                          steps=int(settings["steps"]), seed=int(settings["seed"]),
                          zeta=float(settings["zeta"]), eta=float(settings["eta"]))
    except (CambError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    toggles = Ablation(no_camb=bool(settings["no_camb"]), no_grad_loss=bool(settings["no_grad_loss"]),
                       no_diag=bool(settings["no_diag"]), no_ssim_weight=bool(settings["no_ssim_weight"]))
    _validate(settings, loss)
    return RunConfig(args.command, model, loss, cfg, toggles, settings)


def _validate(s, loss: LossConfig) -> None:
    problems = []
    if not s["lr"] > 0:
        problems.append("--lr must be positive")
    if s["batch_size"] < 1:
        problems.append("--batch-size must be >= 1")
    if s["steps"] < 0:
        problems.append("--steps must be >= 0")
    if s["seed"] < 0:
        problems.append("--seed must be nonnegative")
    for key in ("zeta", "eta"):
        if not 0.0 <= s[key] <= 1.0:
            problems.append(f"--{key} must lie in [0, 1]")
    if s["size"] < 16 or s["size"] % 16:
        problems.append("--size must be a positive multiple of 16")
    elif loss.block_size > s["size"] - 1:
        problems.append("--block-size must be smaller than the image size")
    for key in ("n_train", "n_eval", "n"):
        if s[key] < 1:
            problems.append(f"--{key.replace('_', '-')} must be >= 1")
    if not s["min_valid_depth"] > 0:
        problems.append("--min-valid-depth must be positive")
    if problems:
        raise ConfigError("; ".join(problems))


def _writable(path: str, what: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise PermissionError(f"{what} location {path!r} is not writable")


def _training_samples(rc: RunConfig):
    if rc.data_root:
        samples = read_dataset(rc.data_root)
        if not samples:
            raise FormatError(f"no samples found under {rc.data_root}")
        return samples
    return synth_dataset(rc.n_train, seed=rc.data_seed, height=rc.size, width=rc.size,
                         n_shapes=rc.n_shapes, depth_max=rc.depth_max)


def _eval_samples(rc: RunConfig):
    if rc.data_root:
        samples = read_dataset(rc.data_root)
        if not samples:
            raise FormatError(f"no samples found under {rc.data_root}")
        return samples
    return synth_dataset(rc.n_eval, seed=rc.eval_seed, height=rc.size, width=rc.size,
                         n_shapes=rc.n_shapes, depth_max=rc.depth_max)


def cmd_train(rc: RunConfig) -> int:
    log_path = rc.out or os.path.splitext(rc.checkpoint)[0] + "_log.csv"
    _writable(rc.checkpoint, "checkpoint")
    _writable(log_path, "log")
    samples = _training_samples(rc)
    params = init_model(rc.model, seed=rc.train.seed)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

        def on_step(row):
            writer.writerow([row["step"]] + [f"{row[c]:.9g}" for c in LOG_COLUMNS[1:]])

        if rc.train.steps:
            params, state, history = train(samples, rc.model, rc.loss, rc.toggles, rc.train,
                                           params=params, on_step=on_step)
        else:
            state = AdamState.zeros_like(params)
    save_checkpoint(params, state, rc.checkpoint)
    print(f"wrote {rc.checkpoint} ({params.count()} parameters) and {log_path}")
    return EXIT_OK


def write_table(rows: List[tuple], path: Optional[str]) -> str:
    lines = [",".join(("id",) + HEADERS + ("n_valid",))]
    lines += [r.format_row(label) for label, r in rows]
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
        with open(os.path.splitext(path)[0] + ".json", "w") as fh:
            json.dump({label: r.to_dict() for label, r in rows}, fh, indent=2)
    return text


def cmd_eval(rc: RunConfig) -> int:
    if rc.out:
        _writable(rc.out, "output")
    samples = _eval_samples(rc)
    if rc.gt_as_pred:
        reports = [evaluate(s.depth, s.depth, rc.min_valid_depth) for s in samples]
        overall = aggregate(reports)
    else:
        if not os.path.exists(rc.checkpoint):
            raise FileNotFoundError(f"checkpoint {rc.checkpoint!r} does not exist")
        params, _ = load_checkpoint(rc.checkpoint)
        reports, overall = evaluate_model(params, samples, rc.min_valid_depth)
    rows = [(s.id, r) for s, r in zip(samples, reports)] + [("aggregate", overall)]
    sys.stdout.write(write_table(rows, rc.out))
    return EXIT_OK


def cmd_infer(rc: RunConfig) -> int:
    if not os.path.exists(rc.checkpoint):
        raise FileNotFoundError(f"checkpoint {rc.checkpoint!r} does not exist")
    inputs = rc.inputs
    if not inputs:
        if not rc.data_root:
            raise ConfigError("infer needs input images or --data-root")
        inputs = sorted(os.path.join(rc.data_root, n) for n in os.listdir(rc.data_root) if n.endswith(".ppm"))
    out_dir = rc.out or "predictions"
    os.makedirs(out_dir, exist_ok=True)
    params, _ = load_checkpoint(rc.checkpoint)
    for path in inputs:
        depth = predict(params, read_ppm(path)[None])[0]
        target = os.path.join(out_dir, os.path.splitext(os.path.basename(path))[0] + ".pfm")
        write_pfm(target, depth)
        print(target)
    return EXIT_OK


def cmd_synth(rc: RunConfig) -> int:
    root = rc.out or rc.data_root
    if not root:
        raise ConfigError("synth needs --out (or --data-root) for the dataset directory")
    samples = synth_dataset(rc.n, seed=rc.data_seed, height=rc.size, width=rc.size,
                            n_shapes=rc.n_shapes, depth_max=rc.depth_max)
    ids = write_dataset(root, samples)
    print(f"wrote {len(ids)} samples to {root}")
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig) -> int:
    failures = 0
    for check in default_checks(rc.train.seed):
        err = check.run()
        ok = np.isfinite(err) and err < check.tolerance
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {check.name:<36s} max_rel_err={err:.3e}  tol={check.tolerance:g}")
    per_param = pipeline_error(rc.train.seed)
    bad = [name for name, err in per_param.items() if not err < 1e-3]
    for name in bad:
        print(f"FAIL  pipeline tensor {name}: max_rel_err={per_param[name]:.3e}")
    failures += len(bad)
    print(f"{failures} failure(s)")
    return EXIT_NUMERIC if failures else EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "synth": cmd_synth,
            "gradcheck": cmd_gradcheck}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        return HANDLERS[rc.command](rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
