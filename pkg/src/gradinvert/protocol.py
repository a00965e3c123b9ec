"""The desk-scale paired comparison: gradient-only baseline vs prior-augmented attack.

Victim ``i`` (in id order) is attacked on a ConvNet-S initialized with
parameter seed ``PARAMS_SEED_BASE + i``; both methods start from the same
initial image (attack seed ``i``). Optionally the model is trained first with
plain SGD on the dataset's train split.

Baseline viability is judged on ``VIABILITY_PER_CLASS`` victims of each
class (the first ones in id order); the paired comparison uses every victim.

Run ``python -m gradinvert.protocol OUT_DIR`` to regenerate the calibration
record.
"""

from __future__ import annotations

import argparse
import math
from dataclasses import dataclass, replace
from pathlib import Path

from .attack import AttackConfig, attack_with_priors, run_jobs
from .data import SyntheticSpec, default_threads, generate_synthetic
from .fl import prepare_params, victim_round
from .io_util import atomic_write_text
from .labels import restore_label
from .losses import LossWeights
from .metrics import fmt, paired_report
from .models import build_model, convnet_s

DATASET = SyntheticSpec(num_classes=10, victims_per_class=10, priors_per_class=3, train_per_class=4,
                        sigma_intra=0.1, seed=0)
PARAMS_SEED_BASE = 100
VIABILITY_PER_CLASS = 2
BASE_CONFIG = AttackConfig(iterations=2000, lr=0.1)


@dataclass
class Comparison:
    victims: list
    baseline: list
    ours: list
    report: object
    train_steps: int
    captures: list

    @property
    def baseline_psnr(self):
        return [r.psnr_base for r in self.report.rows]

    def viability_indices(self, per_class: int = VIABILITY_PER_CLASS) -> list:
        """Positions of the first ``per_class`` victims of every class."""
        seen, out = {}, []
        for i, v in enumerate(self.victims):
            seen[v.label] = seen.get(v.label, 0) + 1
            if seen[v.label] <= per_class:
                out.append(i)
        return out


def victim_setups(train_steps: int = 0, dataset: SyntheticSpec = DATASET, count: int | None = None):
    """``(victim, spec, params, capture)`` for every victim of the protocol."""
    ds = generate_synthetic(dataset)
    spec = convnet_s(dataset.num_classes)
    train = [(s.image, s.label) for s in ds.split("train")]
    victims = ds.split("victim")[:count]
    out = []
    for i, v in enumerate(victims):
        seed = PARAMS_SEED_BASE + i
        _, params = build_model(spec, seed)
        params = prepare_params(spec, params, train_steps, train, seed=seed)
        out.append((v, spec, params, victim_round(spec, params, v.image, v.label)))
    return ds, out


def baseline_config(seed: int, config: AttackConfig = BASE_CONFIG) -> AttackConfig:
    return replace(config, seed=seed, weights=LossWeights.gradient_only(config.weights.alpha_tv))


def run_baseline(setups, config: AttackConfig = BASE_CONFIG, workers: int = 1):
    jobs = [(cap, spec, params, None, None, baseline_config(i, config), restore_label(cap, spec), 0)
            for i, (_, spec, params, cap) in enumerate(setups)]
    return run_jobs(jobs, workers)


def run_ours(setups, priors, config: AttackConfig = BASE_CONFIG, workers: int = 1):
    out = []
    for i, (_, spec, params, cap) in enumerate(setups):
        best, _ = attack_with_priors(cap, spec, params, priors, replace(config, seed=i), workers=workers)
        out.append(best)
    return out


def compare(train_steps: int = 0, config: AttackConfig = BASE_CONFIG, workers: int = 1,
            count: int | None = None, baseline=None) -> Comparison:
    ds, setups = victim_setups(train_steps, count=count)
    victims = [v for v, *_ in setups]
    base = baseline if baseline is not None else run_baseline(setups, config, workers)
    ours = run_ours(setups, ds.split("prior"), config, workers)
    report = paired_report(ours, base, [v.image for v in victims], victim_ids=[v.id for v in victims])
    return Comparison(victims, base, ours, report, train_steps, [cap for *_, cap in setups])


def record(comparisons) -> str:
    lines = ["train_steps,victim_id,label,params_seed,psnr_base,psnr_ours,mse_base,mse_ours"]
    for c in comparisons:
        for i, (v, row) in enumerate(zip(c.victims, c.report.rows)):
            lines.append(",".join(fmt(x) for x in (c.train_steps, v.id, v.label, PARAMS_SEED_BASE + i, row.psnr_base,
                                                   row.psnr_ours, row.mse_base, row.mse_ours)))
    return "\n".join(lines) + "\n"


def sign_test_p(diffs) -> float:
    """One-sided exact binomial p-value for "more positive than negative differences"; ties dropped."""
    from scipy.stats import binomtest

    pos = sum(d > 0 for d in diffs)
    n = sum(d != 0 and not math.isnan(d) for d in diffs)
    return float(binomtest(pos, n, 0.5, alternative="greater").pvalue) if n else 1.0


def main(argv=None):
    parser = argparse.ArgumentParser(description="Regenerate the desk-scale calibration record.")
    parser.add_argument("out", type=Path)
    parser.add_argument("--train-steps", type=int, nargs="*", default=[0, 200])
    args = parser.parse_args(argv)
    comparisons = []
    for steps in args.train_steps:
        c = compare(steps, workers=default_threads())
        s = c.report.summary()
        print(f"train_steps {steps}: mean baseline psnr {fmt(sum(c.baseline_psnr) / len(c.baseline_psnr))} "
              f"mean d_psnr {fmt(s['psnr']['mean'])} mean d_mse {fmt(s['mse']['mean'])} "
              f"sign test p {fmt(sign_test_p([r.d_psnr for r in c.report.rows]))}", flush=True)
        comparisons.append(c)
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(args.out / "desk_protocol.csv", record(comparisons))


if __name__ == "__main__":
    main()
