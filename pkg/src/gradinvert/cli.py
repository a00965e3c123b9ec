"""Command-line entry point.

Subcommands: ``generate`` (synthetic dataset), ``simulate`` (victim
gradient), ``attack`` (reconstruction), ``sweep`` (coefficient grid) and
``selftest``. Exit status is 0 on success, 1 on a runtime failure and 2 on a
usage error.
"""

from __future__ import annotations

import argparse
import itertools
import math
import sys
from dataclasses import replace
from pathlib import Path

from .attack import AttackConfig, attack_with_priors
from .config import ConfigError, check_keys, parse_float_list, parse_lines
from .data import SyntheticSpec, default_threads, generate_synthetic, load_manifest, read_image, write_dataset, write_image
from .fl import prepare_params, read_capture, victim_round, write_capture
from .io_util import atomic_write_text
from .labels import restore_label
from .losses import LossWeights
from .metrics import fmt, mse, paired_report, psnr, ssim
from .models import ModelSpec, build_model, convnet_s

DEFAULT_GRID = {"s_a": [0.1, 0.5, 1.0], "s_g": [1.0, 5.0, 10.0], "s_s": [1.0, 10.0, 10000.0]}
GRID_KEYS = ("s_a", "s_g", "s_s", "alpha_tv")
BUILTIN_MODELS = {"convnet-s": convnet_s}

RESULT_HEADER = "prior_id,restart_id,seed,label,loss,l_g,tv,l_a,l_s,best_iteration,fallback,flags,best"
TRACE_HEADER = "prior_id,restart_id,t,total,l_g,tv,l_a,l_s"


def load_model_spec(arg: str) -> ModelSpec:
    if arg in BUILTIN_MODELS:
        return BUILTIN_MODELS[arg]()
    return ModelSpec.from_text(Path(arg).read_text())


def bundled_train_samples(spec: ModelSpec):
    """Held-out training pairs of the default synthetic task for ``spec``'s input shape."""
    c, h, w = spec.input_shape
    ds = generate_synthetic(SyntheticSpec(num_classes=spec.num_classes, channels=c, height=h, width=w))
    return [(s.image, s.label) for s in ds.split("train")]


def _train_samples(spec, manifest):
    if manifest is None:
        return bundled_train_samples(spec)
    return [(s.image, s.label) for s in load_manifest(manifest).split("train")]


def _csv(lines) -> str:
    return "\n".join(lines) + "\n"


def _fmt_row(values) -> str:
    return ",".join(fmt(v) if not isinstance(v, str) else v for v in values)


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    spec = SyntheticSpec(
        num_classes=args.classes, victims_per_class=args.victims_per_class,
        priors_per_class=args.priors_per_class, train_per_class=args.train_per_class,
        channels=args.channels, height=args.size, width=args.size, sigma_intra=args.sigma_intra,
        separation=args.separation, seed=args.seed,
    )
    manifest = write_dataset(generate_synthetic(spec), args.out)
    print(f"manifest {manifest}")
    return 0


def cmd_simulate(args):
    spec = load_model_spec(args.model)
    _, params = build_model(spec, args.params_seed)
    image = read_image(args.image)
    train = _train_samples(spec, args.train_manifest) if args.train_steps > 0 else None
    capture = victim_round(spec, params, image, args.label, train_steps=args.train_steps, train_samples=train,
                           seed=args.params_seed, reveal_label=args.reveal_label)
    write_capture(capture, args.out)
    print(f"fingerprint {capture.fingerprint}")
    print(f"gradient_norm {fmt(capture.norm)}")
    return 0


def _attack_outputs(results, best, truth=None):
    header = RESULT_HEADER + (",mse,psnr,ssim" if truth is not None else "")
    rows, traces, walls = [header], [TRACE_HEADER], ["prior_id,restart_id,wall_time"]
    for r in results:
        c = r.components
        vals = [r.prior_id, r.restart, r.seed, r.label, r.loss, c["l_g"], c["tv"], c["l_a"], c["l_s"],
                r.best_iteration, int(r.fallback), ";".join(r.flags), int(r is best)]
        if truth is not None:
            vals += [mse(r.image, truth), psnr(r.image, truth), ssim(r.image, truth)]
        rows.append(_fmt_row(vals))
        for t, *losses in r.trace:
            traces.append(_fmt_row([r.prior_id, r.restart, t, *losses]))
        walls.append(_fmt_row([r.prior_id, r.restart, r.wall_time]))
    return _csv(rows), _csv(traces), _csv(walls)


def cmd_attack(args):
    spec = load_model_spec(args.model)
    capture = read_capture(args.capture)
    capture.check_model(spec)
    config = AttackConfig.from_text(Path(args.config).read_text())
    _, params = build_model(spec, args.params_seed)
    if capture.train_steps > 0:
        params = prepare_params(spec, params, capture.train_steps, _train_samples(spec, args.train_manifest),
                                seed=args.params_seed)
    label = capture.label if capture.label is not None else restore_label(capture, spec)
    priors = []
    if args.priors:
        priors = [s for s in load_manifest(args.priors).samples if args.prior_split in ("any", s.split)]
    best, results = attack_with_priors(capture, spec, params, priors, config, label=label,
                                       workers=args.workers or default_threads())
    truth = read_image(args.ground_truth) if args.ground_truth else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results_csv, traces_csv, wall_csv = _attack_outputs(results, best, truth)
    write_image(best.image, out / "best.pgm")
    atomic_write_text(out / "results.csv", results_csv)
    atomic_write_text(out / "traces.csv", traces_csv)
    atomic_write_text(out / "walltime.csv", wall_csv)
    print(f"label {label}")
    print(f"best prior {'none' if best.prior_id is None else best.prior_id} restart {best.restart} "
          f"loss {fmt(best.loss)}" + (" (gradient-only fallback)" if best.fallback else ""))
    if truth is not None:
        print(f"psnr {fmt(psnr(best.image, truth))} ssim {fmt(ssim(best.image, truth))}")
    return 0


def parse_grid(text: str) -> dict:
    cfg = parse_lines(text)
    check_keys(cfg, GRID_KEYS, "grid")
    grid = {}
    for key, value in cfg.items():
        values = parse_float_list(value)
        if not values:
            raise ConfigError(f"grid axis {key!r} is empty")
        grid[key] = values
    if not grid:
        raise ConfigError("grid is empty")
    return grid


def grid_cells(grid: dict, base: LossWeights) -> list[LossWeights]:
    axes = {k: grid.get(k, [getattr(base, k)]) for k in GRID_KEYS}
    return [
        LossWeights(s_a=a, s_g=g, s_s=s, alpha_tv=tv, layer_weights=base.layer_weights,
                    style_layers=base.style_layers)
        for a, g, s, tv in itertools.product(axes["s_a"], axes["s_g"], axes["s_s"], axes["alpha_tv"])
    ]


def cmd_sweep(args):
    spec = load_model_spec(args.model)
    grid = parse_grid(Path(args.grid).read_text()) if args.grid else DEFAULT_GRID
    config = AttackConfig.from_text(Path(args.config).read_text()) if args.config else AttackConfig()
    cells = grid_cells(grid, config.weights)
    if args.data:
        data = load_manifest(args.data)
    else:
        c, h, w = spec.input_shape
        data = generate_synthetic(SyntheticSpec(num_classes=spec.num_classes, channels=c, height=h, width=w))
    victims = data.split("victim")[: args.victims] if args.victims else data.split("victim")
    priors = data.split("prior")
    if not victims:
        raise ConfigError("no victims in the dataset")
    _, params = build_model(spec, args.params_seed)
    if args.train_steps > 0:
        params = prepare_params(spec, params, args.train_steps, _train_samples(spec, args.train_manifest),
                                seed=args.params_seed)
    workers = args.workers or default_threads()
    truths = [v.image for v in victims]
    captures = [victim_round(spec, params, v.image, v.label) for v in victims]
    labels = [restore_label(c, spec) for c in captures]
    baseline_cfg = config.with_weights(s_g=1.0, s_a=0.0, s_s=0.0)
    base = [attack_with_priors(c, spec, params, [], baseline_cfg, label=y, workers=workers)[0]
            for c, y in zip(captures, labels)]

    out = Path(args.out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    summary = []
    for i, weights in enumerate(cells):
        cfg = replace(config, weights=weights)
        ours = [attack_with_priors(c, spec, params, priors, cfg, label=y, workers=workers)[0]
                for c, y in zip(captures, labels)]
        report = paired_report(ours, base, truths, victim_ids=[v.id for v in victims])
        atomic_write_text(out / "cells" / f"cell_{i:03d}.csv", report.to_csv())
        summary.append((i, weights, report))
        print(f"cell {i}: s_a={weights.s_a!r} s_g={weights.s_g!r} s_s={weights.s_s!r} "
              f"mean d_psnr {fmt(report.mean('d_psnr'))}", flush=True)
    ranked = sorted(summary, key=lambda item: (_rank_key(item[2].mean("d_psnr")), item[0]))
    lines = ["rank,cell,s_a,s_g,s_s,alpha_tv,mean_d_mse,mean_d_psnr,mean_d_ssim,max_d_psnr,psnr_direction"]
    for rank, (i, w, report) in enumerate(ranked, 1):
        s = report.summary()
        lines.append(_fmt_row([rank, i, w.s_a, w.s_g, w.s_s, w.alpha_tv, s["mse"]["mean"], s["psnr"]["mean"],
                               s["ssim"]["mean"], s["psnr"]["max"], s["psnr"]["direction"]]))
    atomic_write_text(out / "summary.csv", _csv(lines))
    best_i, best_w, best_r = ranked[0]
    print(f"best cell {best_i}: s_a={best_w.s_a!r} s_g={best_w.s_g!r} s_s={best_w.s_s!r} "
          f"mean d_psnr {fmt(best_r.mean('d_psnr'))}")
    return 0


def _rank_key(value: float) -> float:
    # descending by mean PSNR gain; NaN sorts last
    return math.inf if math.isnan(value) else -value


def cmd_selftest(args):
    from . import selftest

    suites = args.suite or None
    if args.inject_fault:
        with selftest.injected_fault(args.inject_fault):
            results = selftest.run(suites)
    else:
        results = selftest.run(suites)
    ok = all(r.passed == r.total for r in results)
    print("selftest " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradinvert", description="Gradient inversion with attacker-held priors.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--victims-per-class", type=int, default=2)
    p.add_argument("--priors-per-class", type=int, default=3)
    p.add_argument("--train-per-class", type=int, default=4)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--sigma-intra", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="compute a victim's shared gradient")
    p.add_argument("--model", required=True, help="model config file or 'convnet-s'")
    p.add_argument("--params-seed", type=int, required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--train-steps", type=int, default=0)
    p.add_argument("--train-manifest", help="training images (default: the bundled synthetic task)")
    p.add_argument("--reveal-label", action="store_true", help="store the label in the capture")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="reconstruct the image behind a capture")
    p.add_argument("--capture", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--params-seed", type=int, required=True)
    p.add_argument("--priors", help="manifest of attacker-held images")
    p.add_argument("--prior-split", default="prior", help="manifest split to use as priors ('any' for all)")
    p.add_argument("--config", required=True)
    p.add_argument("--ground-truth")
    p.add_argument("--train-manifest")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="paired comparison over a grid of loss coefficients")
    p.add_argument("--grid", help="grid file (default: s_a 0.1,0.5,1 x s_g 1,5,10 x s_s 1,10,10000)")
    p.add_argument("--model", default="convnet-s")
    p.add_argument("--params-seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--data", help="manifest with victim and prior splits (default: bundled synthetic set)")
    p.add_argument("--victims", type=int, default=0, help="use only the first N victims")
    p.add_argument("--train-steps", type=int, default=0)
    p.add_argument("--train-manifest")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the built-in correctness checks")
    p.add_argument("--suite", action="append", choices=["gradcheck", "double-backprop", "idlg", "metrics"])
    p.add_argument("--inject-fault", metavar="OP", help="negate the VJP of OP to demonstrate detection")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "inject_fault", None) and args.inject_fault not in _op_names():
        parser.error(f"unknown op {args.inject_fault!r}")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"gradinvert {args.command}: error: {exc}", file=sys.stderr)
        return 1


def _op_names():
    from .autodiff import OPS

    return set(OPS)


if __name__ == "__main__":
    sys.exit(main())
