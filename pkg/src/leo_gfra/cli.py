"""Command-line entry point: ``leo-gfra <simulate|sweep|train|calibrate|export> [flags]``.

Exit codes: 0 success, 2 invalid configuration, 3 sweep dominated by
divergence-flagged trials.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import harness
from .grid import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
DIVERGED_FRACTION = 0.5

log = logging.getLogger("leo_gfra")


def _snr_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (u64)")
    p.add_argument("--algo", action="append",
                   help="delta | conv:<beta> | learned:<path>; repeat for several")
    p.add_argument("--snr", type=_snr_list, help="SNR list in dB, e.g. '0,5,10'")
    p.add_argument("--trials", type=int, help="measurement trials per point")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker processes")
    p.add_argument("--paper-literal", action="store_true",
                   help="squared-variance second moment and the M*N*Ny*Nz noise denominator")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leo-gfra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one trial with per-iteration diagnostics")
    _add_common(p)
    p.add_argument("--trial-seed", type=int, help="explicit trial seed (default: derived from --seed)")
    p.add_argument("--threshold", type=float, help="detection threshold")

    p = sub.add_parser("sweep", help="Monte Carlo sweep over the SNR list")
    _add_common(p)
    p.add_argument("--no-resume", action="store_true", help="ignore finished trials in <out>")

    p = sub.add_parser("train", help="learn DL-GAMP filters")
    _add_common(p)
    p.add_argument("--samples", type=int, help="training slices (default 2000; 20000 for the full-size set)")
    p.add_argument("--steps", type=int, help="Adam steps")
    p.add_argument("--lr", type=float, help="Adam learning rate")

    p = sub.add_parser("calibrate", help="fit detection thresholds only")
    _add_common(p)

    p = sub.add_parser("export", help="re-aggregate and re-export a results directory")
    _add_common(p)
    p.add_argument("results", help="directory containing trials.csv")
    return parser


def load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_file(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.algo:
        cfg.algorithms = list(args.algo)
    if args.snr is not None:
        cfg.snr_db = args.snr
    if args.trials is not None:
        cfg.trials = args.trials
    if args.out:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    if args.paper_literal:
        cfg.literal_second_moment = True
        cfg.literal_denominator = True
    if getattr(args, "samples", None) is not None:
        cfg.train_samples = args.samples
    if getattr(args, "steps", None) is not None:
        cfg.train_steps = args.steps
    if getattr(args, "lr", None) is not None:
        cfg.lr = args.lr
    if getattr(args, "threshold", None) is not None:
        cfg.threshold = args.threshold
    return cfg.validate()


def cmd_simulate(cfg, args) -> int:
    seed = args.trial_seed if args.trial_seed is not None else harness.trial_seed(cfg.seed, harness.MEASURE, 0)
    for algo in cfg.algorithms:
        for snr in cfg.snr_db:
            rec = harness.run_trial(cfg, seed, snr, algo)
            print(f"{rec.algorithm:>10s}  snr {snr:5.1f} dB  NMSE {rec.nmse_db:7.2f} dB  "
                  f"iters {rec.iterations}  damping {rec.damping:g}  {rec.runtime_s:.1f}s"
                  + (f"  [{rec.flags}]" if rec.flags else ""))
            print("    energies " + " ".join(f"{e:.3g}" for e in rec.energies)
                  + "    active " + "".join(map(str, rec.lambda_true)))
            if math.isfinite(rec.pe):
                print(f"    threshold {rec.threshold:.3g}  detected "
                      + "".join(map(str, rec.lambda_hat)) + f"  Pe {rec.pe:.2f}")
    return EXIT_OK


def _progress(done, total, rec):
    log.info("[%d/%d] %s %s snr %.1f NMSE %.2f dB", done, total, rec.role, rec.algorithm,
             rec.snr_db, rec.nmse_db)


def cmd_sweep(cfg, args) -> int:
    res = harness.run_sweep(cfg, resume=not args.no_resume, progress=_progress)
    harness.export_sweep(res)
    for p in res.points:
        print(f"{p.algorithm:>10s}  snr {p.snr_db:5.1f} dB  NMSE {p.nmse_db:7.2f} dB "
              f"(+-{p.nmse_hw:.3g})  Pe {p.pe_mean:.3f} (+-{p.pe_hw:.3g})  n={p.trials}"
              + (f"  flagged {p.flagged}" if p.flagged else ""))
    print(f"results in {cfg.out} (config {res.config_hash})")
    if res.flagged_fraction > DIVERGED_FRACTION:
        print(f"error: {res.flagged_fraction:.0%} of trials flagged for divergence", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    filters, curve, paths = harness.run_training(cfg)
    print(f"trained {len(curve.step)} steps, best step {curve.best_step}"
          + (" (early stop)" if curve.stopped_early else ""))
    print("W1 =", np.array2string(filters.W1, precision=4))
    print("W2 =", np.array2string(filters.W2, precision=4))
    print(f"a = {filters.a_learned:.4f}")
    print(f"filters written to {paths['filters']}")
    return EXIT_OK


def cmd_calibrate(cfg, args) -> int:
    cal = harness.run_calibration(cfg)
    out = Path(cfg.out)
    path = harness._atomic_write(out / "calibration.json", json.dumps(
        {"config_hash": harness.config_hash(cfg), "calibration": cal}, indent=2))
    for c in cal:
        print(f"{c['algorithm']:>10s}  snr {c['snr_db']:5.1f} dB  threshold {c['threshold']:.4g}  "
              f"error {c['error']:.3f}" + ("  [flagged]" if c["flagged"] else ""))
    print(f"written to {path}")
    return EXIT_OK


def cmd_export(cfg, args) -> int:
    src = Path(args.results)
    try:
        records = harness.load_trials_csv(src / "trials.csv")
    except OSError as e:
        raise ConfigurationError(f"cannot read {src / 'trials.csv'}: {e}") from None
    summary = src / "summary.json"
    calibration = json.loads(summary.read_text()).get("calibration", []) if summary.exists() else []
    points = harness.aggregate(records)
    out = Path(args.out) if args.out else src
    paths = harness.export_results(records, out, None, points, calibration, formats=("json", "tsv"))
    for name, p in paths.items():
        print(f"wrote {p}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "train": cmd_train,
            "calibrate": cmd_calibrate, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
