"""Command-line entry point: ``comboseg synth|train|eval|sweep-beta|gradcheck``.

Every subcommand takes ``--config FILE`` (``key = value`` lines) and a flag
per RunConfig field (``--beta 0.7``, ``--widths 8,16``); flags win over the
file.  Output files start with ``#`` lines echoing the full configuration and
the build id.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import cvol
from . import losses as L
from .config import ConfigError, RunConfig, build_config, field_names, read_config_file
from .experiments import Setup, Trial, run_trials
from .metrics import write_report_csv
from .net import NetError, NetworkConfig, load_checkpoint, save_checkpoint
from .synth import PhantomConfig, default_organs, generate_cases
from .training import (LOSS_CHECKS, Case, TrainConfig, TrainingError, loss_gradcheck,
                       parameter_gradcheck, tiny_gradcheck_setup, train)
from .training import evaluate as evaluate_cases
from .volume import OneHotMask, Volume, VolumeError

log = logging.getLogger("comboseg")

SWEEP_COLUMNS = ("beta", "seed", "dice", "hd_mm", "fpr", "fnr")


class CliError(RuntimeError):
    pass


# -- data ---------------------------------------------------------------------

def case_paths(root: Path, i: int) -> Tuple[Path, Path]:
    return root / f"case_{i:03d}_image.cvol", root / f"case_{i:03d}_mask.cvol"


def load_cases(root, spacing) -> List[Case]:
    root = Path(root)
    images = sorted(root.glob("case_*_image.cvol"))
    if not images:
        raise CliError(f"no cases found in {root}")
    cases = []
    for img in images:
        mask_path = img.with_name(img.name.replace("_image", "_mask"))
        if not mask_path.exists():
            raise CliError(f"missing mask for {img.name}")
        vol, mask = cvol.read_volume(img), cvol.read_mask(mask_path)
        if vol.dims != mask.dims:
            raise CliError(f"{img.name}: image and mask dims differ")
        cases.append((Volume(vol.data, spacing), OneHotMask(mask.bits, spacing)))
    return cases


def phantom_config(cfg: RunConfig) -> PhantomConfig:
    organs = default_organs(cfg.dims, cfg.spacing, cfg.organs, cfg.presence_prob)
    return PhantomConfig(dims=cfg.dims, spacing=cfg.spacing, organs=tuple(organs),
                         noise_sigma=cfg.noise_sigma, blur_sigma=cfg.blur_sigma, seed=cfg.seed)


def train_config(cfg: RunConfig, channels: int) -> TrainConfig:
    return TrainConfig(
        loss=cfg.loss, loss_params=cfg.loss_params(),
        net=NetworkConfig(1, channels, cfg.widths, cfg.batch_norm, cfg.seed),
        steps=cfg.steps, window=cfg.window, n_per_organ=cfg.n_per_organ,
        n_background=cfg.n_background, n_random=cfg.n_random, batch_size=cfg.batch_size,
        rho=cfg.rho, eps=cfg.eps, lr=cfg.lr, normalize_windows=cfg.normalize_windows,
        eval_every=cfg.eval_every, eval_stride=cfg.stride, threshold=cfg.threshold, seed=cfg.seed)


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}") from None
    return p


def _write_csv(path: Path, header: Sequence[str], columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 10))
    return str(v)


# -- subcommands --------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> List[Path]:
    out = _out_dir(cfg.out)
    written = []
    for i, (vol, mask) in enumerate(generate_cases(phantom_config(cfg), cfg.n_cases)):
        img_p, mask_p = case_paths(out, i)
        cvol.write_volume(img_p, vol)
        cvol.write_mask(mask_p, mask)
        written += [img_p, mask_p]
    (out / "synth_config.txt").write_text("".join(f"# {l}\n" for l in cfg.header_lines()))
    return written


def cmd_train(cfg: RunConfig) -> Tuple[Path, Path]:
    cases = load_cases(cfg.data, cfg.spacing)
    if cfg.val_cases >= len(cases):
        raise CliError(f"val_cases={cfg.val_cases} leaves no training data out of {len(cases)} cases")
    split = len(cases) - cfg.val_cases
    train_cases, val_cases = cases[:split], cases[split:]
    tcfg = train_config(cfg, cases[0][1].channels)
    out = _out_dir(cfg.out)
    try:
        result = train(tcfg, train_cases, val_cases)
    except TrainingError as exc:
        raise CliError(str(exc)) from None
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.cnet"
    save_checkpoint(ckpt, result.net)
    curve = out / "loss_curve.csv"
    header = cfg.header_lines() + [f"best_step={result.best_step}", f"best_val_dice={_fmt(result.best_val_dice)}"]
    _write_csv(curve, header, ("step", "loss"), [(i + 1, _fmt(v)) for i, v in enumerate(result.losses)])
    return ckpt, curve


def cmd_eval(cfg: RunConfig) -> Path:
    if not cfg.checkpoint or not Path(cfg.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {cfg.checkpoint or '(none given)'}")
    net = load_checkpoint(cfg.checkpoint)
    cases = load_cases(cfg.test_data or cfg.data, cfg.spacing)
    if cases[0][1].channels != net.cfg.class_channels:
        raise CliError(f"checkpoint predicts {net.cfg.class_channels} organs, data has {cases[0][1].channels}")
    names = [o.name for o in default_organs(n_organs=net.cfg.class_channels)] \
        if net.cfg.class_channels <= 5 else None
    report, preds = evaluate_cases(net, cases, cfg.window, cfg.stride, cfg.threshold,
                                   cfg.normalize_windows, names)
    out_dir = _out_dir(cfg.out)
    for i, pred in enumerate(preds):
        cvol.write_mask(out_dir / f"case_{i:03d}_pred.cvol", pred)
    out = out_dir / "metrics.csv"
    write_report_csv(out, report, cfg.header_lines())
    return out


def cmd_sweep_beta(cfg: RunConfig) -> Path:
    if len(cfg.betas) < 2:
        raise CliError("sweep-beta needs at least two beta values")
    train_cases = load_cases(cfg.data, cfg.spacing)
    test_cases = load_cases(cfg.test_data, cfg.spacing) if cfg.test_data else train_cases
    setup = Setup(phantom=phantom_config(cfg), train=train_config(replace(cfg, loss="combo"),
                                                                  train_cases[0][1].channels),
                  stride=cfg.stride)
    trials = [Trial.make("combo", {"alpha": cfg.alpha, "beta": b, "smooth": cfg.smooth}, s)
              for b in cfg.betas for s in cfg.seeds]
    rows = run_trials(setup, trials, cfg.jobs, (train_cases, test_cases))
    out = _out_dir(cfg.out) / "sweep.csv"
    header = cfg.header_lines() + ["dice = mean over organs and cases; fpr/fnr pooled over organs per case"]
    _write_csv(out, header, SWEEP_COLUMNS, [[_fmt(r[c]) for c in SWEEP_COLUMNS] for r in rows])
    return out


def _mutated_checks(mutate: str) -> Dict[str, Callable]:
    checks = dict(LOSS_CHECKS)
    if mutate == "combo-sign":
        base = checks["combo"]

        def flipped(p, t):
            r = base(p, t)
            return L.LossResult(r.value, -r.grad)
        checks["combo"] = flipped
    return checks


def cmd_gradcheck(cfg: RunConfig) -> Tuple[bool, List[str]]:
    checks = _mutated_checks(cfg.mutate)
    worst = loss_gradcheck(n_pairs=100, max_n=64, seed=cfg.seed, checks=checks)
    lines = [f"{name:8s} max_rel_err={err:.3e} {'PASS' if err < cfg.tolerance else 'FAIL'}"
             for name, err in worst.items()]
    ok = all(err < cfg.tolerance for err in worst.values())
    net, x, t = tiny_gradcheck_setup(seed=cfg.seed)
    combo = checks["combo"]
    perr = parameter_gradcheck(net, x, t, lambda p, tt: combo(p, tt))
    pmax = max(perr.values())
    lines.append(f"{'params':8s} max_rel_err={pmax:.3e} {'PASS' if pmax < cfg.param_tolerance else 'FAIL'}")
    ok = ok and pmax < cfg.param_tolerance
    return ok, lines


# -- argument parsing ---------------------------------------------------------

COMMANDS = {
    "synth": "generate phantom image/mask pairs as CVOL files",
    "train": "train one model; writes a checkpoint and a loss-curve CSV",
    "eval": "evaluate a checkpoint on labeled cases; writes a metrics CSV",
    "sweep-beta": "train and evaluate one combo model per beta and seed",
    "gradcheck": "finite-difference check of every loss and the network",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comboseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="plain-text key = value file")
        for f in field_names():
            p.add_argument(f"--{f.replace('_', '-')}", dest=f"opt_{f}", metavar="VALUE")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {f: getattr(args, f"opt_{f}") for f in field_names() if getattr(args, f"opt_{f}") is not None}
    return build_config(file_values, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "synth":
            files = cmd_synth(cfg)
            print(f"wrote {len(files)} files to {cfg.out}")
        elif args.command == "train":
            ckpt, curve = cmd_train(cfg)
            print(f"checkpoint {ckpt}\nloss curve {curve}")
        elif args.command == "eval":
            print(f"metrics {cmd_eval(cfg)}")
        elif args.command == "sweep-beta":
            print(f"sweep {cmd_sweep_beta(cfg)}")
        elif args.command == "gradcheck":
            ok, lines = cmd_gradcheck(cfg)
            print("\n".join(lines))
            print("gradcheck " + ("PASS" if ok else "FAIL"))
            return 0 if ok else 1
    except (CliError, ConfigError, VolumeError, NetError, L.LossError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
