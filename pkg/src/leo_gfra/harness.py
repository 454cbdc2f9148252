"""Trial orchestration, Monte Carlo sweeps, persistence.

A trial draws U devices (exactly U_a active), fresh Gaussian pilots and unit
noise from its own seed, builds all M delay slices, estimates them with one
batched call (slices never interact) and scores NMSE and activity errors.

Seeding: trial ``idx`` of stream ``s`` under master seed ``m`` uses
``SeedSequence([m, s, idx])``. The same trial seed is reused for every SNR and
algorithm, so comparisons run on common channels, pilots and noise shapes.
Calibration trials use a separate stream.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .channel import PathDistribution, assemble_all_slices, device_dda, sample_devices
from .detect import (calibrate_threshold, detect_activity, device_energies, error_probability,
                     slice_nmse, to_db)
from .gamp import DAMPING_LADDER, VAR_MIN, GampDivergence, Operator
from .grid import ConfigurationError, make_grid
from .hyper import (EmOptions, EmResult, Kernel2D, LearnedFilters, TrainingSchedule, TrainingSet,
                    curve_to_json, run_conv_gamp, run_dl_gamp, run_em_gamp, train_filters)
from .measurement import build_all_measurements, gen_pilots, snr_to_sigma2, synth_observation

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MEASURE, CALIBRATE, PILOTS, TRAIN, VALIDATE = 0, 1, 2, 3, 4
NUMERIC_MODULES = ("grid", "channel", "measurement", "gamp", "_kernels", "hyper", "detect")


# --------------------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    # grid (reference scale)
    M: int = 16
    N: int = 35
    delta_f: float = 3750.0
    M_cp: int = 42
    # devices and array
    U: int = 5
    U_a: int = 1
    Ny: int = 4
    Nz: int = 4
    paths: dict = field(default_factory=dict)
    # sweep
    snr_db: list = field(default_factory=lambda: [0.0, 5.0, 10.0])
    trials: int = 100
    calibration_trials: int = 50
    algorithms: list = field(default_factory=lambda: ["delta", "conv:1.0"])
    seed: int = 0
    fixed_pilots: bool = False
    # noise variance override (0 gives noiseless observations)
    sigma2: float | None = None
    threshold: float | None = None
    # estimator
    T_max: int = 600
    damping: float = 0.0
    a: float = 1.1
    b: float = 1e-4
    r: float = 1e-4
    s: float = 1e-4
    # stop once no slice's estimate moves by more than tol (relative); T_max stays the cap
    tol: float = 1e-4
    literal_second_moment: bool = False
    literal_denominator: bool = False
    # training
    train_samples: int = 2000
    val_samples: int = 64
    train_snr_db: float = 10.0
    train_steps: int = 100
    lr: float = 1e-4
    batch_size: int = 16
    t_train: int = 30
    # 0: validate at deployment settings (T_max, tol)
    t_val: int = 0
    fd_step: float = 1e-3
    eval_every: int = 5
    patience: int = 4
    init_kernel: str = "conv:1.0"
    # runtime (never affects results)
    out: str = "results"
    threads: int = 1

    RUNTIME_FIELDS = ("out", "threads")

    def __post_init__(self):
        self.snr_db = [float(x) for x in np.atleast_1d(self.snr_db)]
        self.algorithms = [str(a) for a in np.atleast_1d(self.algorithms)]

    def validate(self) -> "ExperimentConfig":
        if not 0 <= self.U_a <= self.U:
            raise ConfigurationError(f"need 0 <= U_a <= U, got U_a={self.U_a}, U={self.U}")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.calibration_trials < 0:
            raise ConfigurationError("calibration_trials must be >= 0")
        if self.Ny < 1 or self.Nz < 1:
            raise ConfigurationError("array dimensions must be positive")
        if not self.snr_db:
            raise ConfigurationError("need at least one SNR point")
        if self.T_max < 1:
            raise ConfigurationError("T_max must be >= 1")
        if not 0 <= self.damping < 1:
            raise ConfigurationError(f"damping must lie in [0, 1), got {self.damping}")
        if min(self.a, self.b) <= 0 or min(self.r, self.s) < 0:
            raise ConfigurationError("Gamma parameters must be positive")
        if self.sigma2 is not None and self.sigma2 < 0:
            raise ConfigurationError("sigma2 must be >= 0")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        make_grid(self.M, self.N, self.delta_f, self.M_cp)
        self.path_distribution().validate()
        for text in self.algorithms:
            Algorithm.parse(text)
        return self

    @property
    def grid(self):
        return make_grid(self.M, self.N, self.delta_f, self.M_cp)

    @property
    def array(self) -> tuple[int, int]:
        return (self.Ny, self.Nz)

    def path_distribution(self) -> PathDistribution:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.paths.items()}
        try:
            return PathDistribution(**kw)
        except TypeError as e:
            raise ConfigurationError(f"bad [paths] table: {e}") from None

    def em_options(self) -> EmOptions:
        return EmOptions(a=self.a, b=self.b, r=self.r, s=self.s, T_max=self.T_max,
                         damping=self.damping, tol=self.tol,
                         literal_second_moment=self.literal_second_moment,
                         denominator_slices=self.M if self.literal_denominator else 1)

    def snapshot(self) -> dict:
        d = asdict(self)
        for k in self.RUNTIME_FIELDS:
            d.pop(k)
        # resolved, so an explicit [paths] table equal to the defaults hashes the same
        d["paths"] = {k: list(v) if isinstance(v, tuple) else v
                      for k, v in asdict(self.path_distribution()).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(str(e)) from None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from None
        try:
            d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as e:
            raise ConfigurationError(f"cannot parse config {path}: {e}") from None
        return cls.from_dict(d)


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    snap = config.snapshot()
    snap["algorithms"] = [Algorithm.parse(a).fingerprint() for a in config.algorithms]
    return _sha(snap)[:16]


@lru_cache(maxsize=1)
def code_fingerprint() -> str:
    """Hash of the numerical modules; resumed trials must come from identical code."""
    here = Path(__file__).parent
    h = hashlib.sha256()
    for name in NUMERIC_MODULES:
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------- algorithms


@lru_cache(maxsize=32)
def _load_filters(path: str) -> LearnedFilters:
    return LearnedFilters.load(path)


@dataclass(frozen=True)
class Algorithm:
    """Estimator selector: ``delta``, ``conv:<beta>`` or ``learned:<path>``."""

    kind: str
    beta: float | None = None
    path: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Algorithm":
        kind, _, arg = str(text).partition(":")
        if kind == "delta" and not arg:
            return cls("delta")
        if kind == "conv":
            try:
                beta = float(arg)
            except ValueError:
                raise ConfigurationError(f"bad ConvGAMP weight in {text!r}") from None
            if not 0 <= beta <= 1:
                raise ConfigurationError(f"ConvGAMP weight must lie in [0, 1], got {beta}")
            return cls("conv", beta=beta)
        if kind == "learned" and arg:
            return cls("learned", path=arg)
        raise ConfigurationError(f"unknown algorithm {text!r} (delta | conv:<beta> | learned:<path>)")

    @property
    def label(self) -> str:
        if self.kind == "conv":
            return f"conv:{self.beta:g}"
        if self.kind == "learned":
            return "learned"
        return "delta"

    def filters(self) -> LearnedFilters:
        try:
            return _load_filters(str(Path(self.path).resolve()))
        except (OSError, ValueError, KeyError) as e:
            raise ConfigurationError(f"cannot load filters {self.path}: {e}") from None

    def fingerprint(self) -> str:
        if self.kind == "learned":
            return "learned:" + _sha(self.filters().to_json())[:16]
        return self.label

    def run(self, op, Y, opts: EmOptions) -> EmResult:
        if self.kind == "delta":
            return run_em_gamp(op, Y, opts)
        if self.kind == "conv":
            return run_conv_gamp(op, Y, Kernel2D.uniform(self.beta), opts)
        return run_dl_gamp(op, Y, self.filters(), opts)


# --------------------------------------------------------------------------- trials


def trial_seed(master: int, stream: int, index: int) -> int:
    """64-bit seed of one trial, independent of scheduling order."""
    return int(np.random.SeedSequence([master, stream, index]).generate_state(1, np.uint64)[0])


@dataclass
class Instance:
    H: np.ndarray          # (M, UMN, J)
    X: np.ndarray          # (M, N, UMN)
    Y: np.ndarray          # (M, N, J)
    sigma2: float
    lambda_true: np.ndarray


def make_instance(config: ExperimentConfig, seed: int, snr_db: float) -> Instance:
    grid = config.grid
    ss_channel, ss_pilots, ss_noise = np.random.SeedSequence(seed).spawn(3)
    devices = sample_devices(np.random.default_rng(ss_channel), grid, config.U, config.U_a,
                             config.path_distribution())
    H = assemble_all_slices(devices, [device_dda(d, grid, config.array) for d in devices])
    if config.fixed_pilots:
        ss_pilots = np.random.SeedSequence([config.seed, PILOTS])
    X = build_all_measurements(gen_pilots(np.random.default_rng(ss_pilots), config.U, grid), grid)
    sigma2 = snr_to_sigma2(snr_db, grid) if config.sigma2 is None else float(config.sigma2)
    Y = synth_observation(np.random.default_rng(ss_noise), X, H, sigma2)
    return Instance(H, X, Y, sigma2, np.array([d.active for d in devices]))


@dataclass
class TrialRecord:
    seed: int
    snr_db: float
    algorithm: str
    nmse: float
    nmse_db: float
    pe: float
    energies: list
    runtime_s: float
    config_hash: str
    trial: int = 0
    role: str = "measure"
    lambda_true: list = field(default_factory=list)
    lambda_hat: list = field(default_factory=list)
    threshold: float = math.nan
    damping: float = 0.0
    iterations: int = 0
    gamma_min: float = math.nan
    sigma2_min: float = math.nan
    diverged_slices: list = field(default_factory=list)
    flags: str = ""

    @property
    def flagged(self) -> bool:
        return bool(self.flags)


def _estimate(algo: Algorithm, X, Y, opts: EmOptions):
    """Run the estimator, escalating damping on divergence.

    Returns (h_hat, gamma_hat, sigma2, iterations, damping, diverged slice list).
    Slices that diverge at every damping level are zeroed and reported.
    """
    op = Operator(X)
    ladder = [opts.damping] + [d for d in DAMPING_LADDER if d > opts.damping]
    for rho in ladder:
        try:
            res = algo.run(op, Y, replace(opts, damping=rho))
            return res.h_hat, res.gamma_hat, res.sigma2, res.diagnostics.iterations, rho, []
        except GampDivergence as e:
            log.warning("%s diverged at damping %.2f (slices %s)", algo.label, rho, e.slices)
    # last resort: slice by slice at the strongest damping
    rho = ladder[-1]
    M = X.shape[0]
    h_hat = np.zeros((M, X.shape[-1], Y.shape[-1]), dtype=complex)
    gamma_hat = np.full(h_hat.shape, VAR_MIN)
    sigma2 = np.full(M, np.nan)
    bad, iters = [], 0
    for l in range(M):
        try:
            res = algo.run(Operator(X[l:l + 1]), Y[l:l + 1], replace(opts, damping=rho))
        except GampDivergence:
            bad.append(l)
            continue
        h_hat[l], gamma_hat[l], sigma2[l] = res.h_hat[0], res.gamma_hat[0], res.sigma2[0]
        iters = max(iters, res.diagnostics.iterations)
    return h_hat, gamma_hat, sigma2, iters, rho, bad


def run_trial(config: ExperimentConfig, seed: int, snr_db: float | None = None,
              algorithm: str | None = None, threshold: float | None = None,
              *, trial: int = 0, role: str = "measure", chash: str | None = None) -> TrialRecord:
    """One end-to-end trial.

    ``seed`` is the trial's own seed (see :func:`trial_seed`). Detection uses
    ``threshold`` (or ``config.threshold``); without one, ``pe`` is NaN and
    the energies are still recorded for later calibration.
    """
    snr_db = config.snr_db[0] if snr_db is None else float(snr_db)
    algo = Algorithm.parse(algorithm or config.algorithms[0])
    t0 = time.perf_counter()
    inst = make_instance(config, seed, snr_db)
    h_hat, gamma_hat, sigma2, iters, rho, bad = _estimate(algo, inst.X, inst.Y, config.em_options())

    keep = np.ones(config.M, dtype=bool)
    keep[bad] = False
    keep &= np.sum(np.abs(inst.H) ** 2, axis=(-2, -1)) > 0
    nmse = float(np.mean(slice_nmse(inst.H[keep], h_hat[keep]))) if keep.any() else math.nan
    energies = device_energies(h_hat, config.U)

    flags = []
    if rho > config.damping:
        flags.append(f"damping={rho:g}")
    if bad:
        flags.append("diverged")
    if not (np.all(np.isfinite(h_hat)) and np.all(np.isfinite(gamma_hat))):
        flags.append("nonfinite")

    rec = TrialRecord(
        seed=int(seed), snr_db=snr_db, algorithm=algo.label, nmse=nmse, nmse_db=to_db(nmse),
        pe=math.nan, energies=[float(e) for e in energies], runtime_s=time.perf_counter() - t0,
        config_hash=chash or config_hash(config), trial=trial, role=role,
        lambda_true=[int(x) for x in inst.lambda_true], damping=float(rho), iterations=int(iters),
        gamma_min=float(gamma_hat[keep].min()) if keep.any() else math.nan,
        sigma2_min=float(np.nanmin(sigma2)) if np.any(np.isfinite(sigma2)) else math.nan,
        diverged_slices=[int(l) for l in bad], flags=";".join(flags),
    )
    thr = threshold if threshold is not None else config.threshold
    if thr is not None:
        apply_threshold(rec, thr)
    return rec


def apply_threshold(rec: TrialRecord, threshold: float) -> TrialRecord:
    decision = detect_activity(rec.energies, threshold)
    rec.threshold = float(threshold)
    rec.lambda_hat = [int(x) for x in decision.lambda_hat]
    rec.pe = error_probability(rec.lambda_true, decision.lambda_hat)
    return rec


# --------------------------------------------------------------------------- sweeps


@dataclass
class SweepPoint:
    algorithm: str
    snr_db: float
    trials: int
    flagged: int
    nmse_mean: float
    nmse_hw: float
    nmse_db: float
    pe_mean: float
    pe_hw: float
    threshold: float = math.nan
    calibration_error: float = math.nan
    calibration_flagged: bool = False
    calibration_note: str = ""


@dataclass
class SweepResult:
    config: ExperimentConfig
    config_hash: str
    records: list
    calibration: list
    points: list
    paths: dict = field(default_factory=dict)
    calibration_records: list = field(default_factory=list)

    @property
    def flagged_fraction(self) -> float:
        return sum(r.flagged for r in self.records) / max(len(self.records), 1)


def _half_width(x: np.ndarray) -> float:
    """95% normal-approximation half-width of the mean."""
    if x.size < 2:
        return 0.0
    return float(1.96 * np.std(x, ddof=1) / math.sqrt(x.size))


def aggregate(records: list[TrialRecord], calibrations: dict | None = None) -> list[SweepPoint]:
    """Per (algorithm, snr) means in first-seen order; NMSE in dB is the dB of the mean."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.algorithm, r.snr_db), []).append(r)
    points = []
    for (algo, snr), recs in groups.items():
        nm = np.array([r.nmse for r in recs if math.isfinite(r.nmse)])
        pe = np.array([r.pe for r in recs if math.isfinite(r.pe)])
        mean = float(np.mean(nm)) if nm.size else math.nan
        pt = SweepPoint(algo, snr, len(recs), sum(r.flagged for r in recs), mean, _half_width(nm),
                        to_db(mean) if nm.size else math.nan,
                        float(np.mean(pe)) if pe.size else math.nan, _half_width(pe))
        cal = (calibrations or {}).get((algo, snr))
        if cal is not None:
            pt.threshold, pt.calibration_error = cal.threshold, cal.error
            pt.calibration_flagged, pt.calibration_note = cal.flagged, cal.note
        points.append(pt)
    return points


class TrialStore:
    """Append-only JSON-lines log of finished trials, keyed for resumption."""

    def __init__(self, path: Path | None):
        self.path = path
        self.done: dict = {}
        if path is not None and path.exists():
            for line in path.read_text().splitlines():
                try:
                    obj = json.loads(line)
                except ValueError:
                    continue  # torn last line of an interrupted run
                self.done[obj["key"]] = TrialRecord(**obj["record"])

    def add(self, key: str, rec: TrialRecord):
        self.done[key] = rec
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps({"key": key, "record": asdict(rec)}) + "\n")


def _task_key(snapshot_hash: str, algo_fp: str, snr: float, stream: int, idx: int) -> str:
    return _sha([snapshot_hash, code_fingerprint(), algo_fp, repr(snr), stream, idx])[:24]


def _trial_physics_hash(config: ExperimentConfig) -> str:
    """Hash of everything that shapes a single trial (not the sweep layout)."""
    snap = config.snapshot()
    for k in ("snr_db", "trials", "calibration_trials", "algorithms", "threshold",
              "train_samples", "val_samples", "train_snr_db", "train_steps", "lr", "batch_size",
              "t_train", "t_val", "fd_step", "eval_every", "patience", "init_kernel"):
        snap.pop(k)
    return _sha(snap)


def _worker_init():
    from threadpoolctl import threadpool_limits
    threadpool_limits(1)


def _run_task(args):
    config, algo, snr, stream, idx, chash = args
    role = "calibrate" if stream == CALIBRATE else "measure"
    return run_trial(config, trial_seed(config.seed, stream, idx), snr, algo,
                     trial=idx, role=role, chash=chash)


def run_sweep(config: ExperimentConfig, resume: bool = True, progress=None) -> SweepResult:
    """Monte Carlo over every (algorithm, SNR) point.

    Calibration trials (own seed stream) fit the detection threshold of each
    point; measurement trials are then scored with it. Finished trials are
    appended to ``<out>/trials.jsonl`` as they complete, so an interrupted or
    repeated sweep with identical settings reuses them.
    """
    config.validate()
    chash = config_hash(config)
    out = Path(config.out) if config.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    store = TrialStore(out / "trials.jsonl" if out is not None and resume else None)
    phys = _trial_physics_hash(config)

    tasks, keys = [], []
    for text in config.algorithms:
        algo = Algorithm.parse(text)
        for snr in config.snr_db:
            for stream, n in ((CALIBRATE, config.calibration_trials), (MEASURE, config.trials)):
                for idx in range(n):
                    tasks.append((config, text, snr, stream, idx, chash))
                    keys.append(_task_key(phys, algo.fingerprint(), snr, stream, idx))
    pending = [i for i, k in enumerate(keys) if k not in store.done]
    log.info("sweep %s: %d trials, %d to run", chash, len(tasks), len(pending))

    def finished(i, rec):
        store.add(keys[i], rec)
        if progress:
            progress(len(tasks) - len(pending) + n_done, len(tasks), rec)

    n_done = 0
    if config.threads > 1 and len(pending) > 1:
        with ProcessPoolExecutor(config.threads, initializer=_worker_init) as pool:
            futures = {pool.submit(_run_task, tasks[i]): i for i in pending}
            for fut in as_completed(futures):
                n_done += 1
                finished(futures[fut], fut.result())
    else:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(1):
            for i in pending:
                n_done += 1
                finished(i, _run_task(tasks[i]))

    records, cal_records, calibration, cal_map = [], [], [], {}
    for text in config.algorithms:
        label = Algorithm.parse(text).label
        for snr in config.snr_db:
            idx = [i for i, t in enumerate(tasks) if t[1] == text and t[2] == snr]
            cal = [store.done[keys[i]] for i in idx if tasks[i][3] == CALIBRATE]
            meas = [store.done[keys[i]] for i in idx if tasks[i][3] == MEASURE]
            if cal:
                c = calibrate_threshold(np.concatenate([r.energies for r in cal]),
                                        np.concatenate([r.lambda_true for r in cal]))
            elif config.threshold is not None:
                c = None
            else:
                raise ConfigurationError("no calibration trials and no fixed threshold")
            thr = c.threshold if c is not None else config.threshold
            for r in cal + meas:
                r.config_hash = chash
                apply_threshold(r, thr)
            if c is not None:
                cal_map[(label, snr)] = c
                calibration.append({"algorithm": label, "snr_db": snr, **asdict(c)})
            records.extend(meas)
            cal_records.extend(cal)
    points = aggregate(records, cal_map)
    return SweepResult(config, chash, records, calibration, points, calibration_records=cal_records)


def run_calibration(config: ExperimentConfig) -> list[dict]:
    """Calibration trials only; returns one threshold entry per (algorithm, SNR)."""
    config.validate()
    chash = config_hash(config)
    out = []
    for text in config.algorithms:
        label = Algorithm.parse(text).label
        for snr in config.snr_db:
            recs = [_run_task((config, text, snr, CALIBRATE, i, chash))
                    for i in range(max(config.calibration_trials, 1))]
            c = calibrate_threshold(np.concatenate([r.energies for r in recs]),
                                    np.concatenate([r.lambda_true for r in recs]))
            out.append({"algorithm": label, "snr_db": snr, **asdict(c)})
    return out


# --------------------------------------------------------------------------- training


class SyntheticSlices:
    """Lazily generated (X_l, Y_l, H_l) training samples, one per delay slice.

    Sample ``i`` is slice ``i % M`` of trial ``i // M`` on the given seed
    stream; trials are regenerated on demand so memory stays bounded.
    """

    def __init__(self, config: ExperimentConfig, n_samples: int, stream: int, snr_db: float):
        self.config = config
        self.n = int(n_samples)
        self.stream = stream
        self.snr_db = snr_db

    def __len__(self):
        return self.n

    @lru_cache(maxsize=8)
    def _trial(self, t: int) -> Instance:
        return make_instance(self.config, trial_seed(self.config.seed, self.stream, t), self.snr_db)

    def subset(self, idx) -> TrainingSet:
        M = self.config.M
        parts = [(self._trial(int(i) // M), int(i) % M) for i in np.atleast_1d(idx)]
        return TrainingSet(np.stack([p.X[l] for p, l in parts]), np.stack([p.Y[l] for p, l in parts]),
                           np.stack([p.H[l] for p, l in parts]))

    def materialize(self) -> TrainingSet:
        return self.subset(np.arange(self.n))


def initial_filters(config: ExperimentConfig) -> LearnedFilters:
    algo = Algorithm.parse(config.init_kernel)
    if algo.kind == "learned":
        return algo.filters()
    kernel = Kernel2D.delta() if algo.kind == "delta" else Kernel2D.uniform(algo.beta)
    return LearnedFilters.from_kernel(kernel, a=config.a, t_train=config.t_train)


def run_training(config: ExperimentConfig):
    """Train DL-GAMP filters on synthetic slices; writes filters.json and curve.json to ``out``.

    Training starts from the ConvGAMP kernel named by ``init_kernel``.
    Returns ``(filters, curve, paths)``.
    """
    config.validate()
    schedule = TrainingSchedule(steps=config.train_steps, lr=config.lr, batch_size=config.batch_size,
                                t_train=config.t_train, t_val=config.t_val, fd_step=config.fd_step,
                                eval_every=config.eval_every, patience=config.patience,
                                seed=config.seed, em=config.em_options())
    init = initial_filters(config)
    train = SyntheticSlices(config, config.train_samples, TRAIN, config.train_snr_db)
    val = SyntheticSlices(config, config.val_samples, VALIDATE, config.train_snr_db)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(1):
        filters, curve = train_filters(train, init, schedule, val.materialize() if len(val) else None)
    out = Path(config.out)
    paths = {
        "filters": _atomic_write(out / "filters.json", json.dumps(filters.to_json(), indent=2)),
        "curve": _atomic_write(out / "curve.json", json.dumps(
            {"config_hash": config_hash(config), **curve_to_json(curve)}, indent=2)),
    }
    return filters, curve, paths


# --------------------------------------------------------------------------- export

CSV_FIELDS = ["seed", "trial", "role", "snr_db", "algorithm", "nmse", "nmse_db", "pe", "threshold",
              "damping", "iterations", "gamma_min", "sigma2_min", "energies", "lambda_true",
              "lambda_hat", "flags", "config_hash"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def _atomic_write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
    return path


def records_to_csv(records: list[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        d = asdict(r)
        w.writerow([_fmt(d[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def load_trials_csv(path) -> list[TrialRecord]:
    def num(x):
        return float(x) if x else math.nan

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TrialRecord(
                seed=int(row["seed"]), trial=int(row["trial"]), role=row["role"],
                snr_db=float(row["snr_db"]), algorithm=row["algorithm"], nmse=num(row["nmse"]),
                nmse_db=num(row["nmse_db"]), pe=num(row["pe"]), threshold=num(row["threshold"]),
                damping=float(row["damping"]), iterations=int(row["iterations"]),
                gamma_min=num(row["gamma_min"]), sigma2_min=num(row["sigma2_min"]),
                energies=[float(x) for x in row["energies"].split()],
                lambda_true=[int(x) for x in row["lambda_true"].split()],
                lambda_hat=[int(x) for x in row["lambda_hat"].split()],
                flags=row["flags"], config_hash=row["config_hash"], runtime_s=math.nan))
    return out


def _tsv(points: list[SweepPoint], metric: str) -> str:
    algos = list(dict.fromkeys(p.algorithm for p in points))
    snrs = sorted({p.snr_db for p in points})
    table = {(p.algorithm, p.snr_db): getattr(p, metric) for p in points}
    lines = ["snr_db\t" + "\t".join(algos)]
    for snr in snrs:
        lines.append("\t".join([repr(snr)] + [repr(table.get((a, snr), math.nan)) for a in algos]))
    return "\n".join(lines) + "\n"


def export_results(records: list[TrialRecord], out_dir, config: ExperimentConfig | None = None,
                   points: list[SweepPoint] | None = None, calibration: list | None = None,
                   formats=("csv", "json", "tsv")) -> dict:
    """Write trials.csv, timings.csv, summary.json and the two per-figure TSVs.

    Every file is staged to a temporary name first, so a failure leaves no
    partial output behind. Wall-clock runtimes go to timings.csv only, which
    keeps trials.csv byte-reproducible.
    """
    out = Path(out_dir)
    points = aggregate(records) if points is None else points
    chash = config_hash(config) if config is not None else (records[0].config_hash if records else "")
    texts = {}
    if "csv" in formats:
        texts["trials.csv"] = records_to_csv(records)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "trial", "snr_db", "algorithm", "runtime_s", "config_hash"])
        for r in records:
            w.writerow([r.seed, r.trial, repr(r.snr_db), r.algorithm, repr(r.runtime_s), r.config_hash])
        texts["timings.csv"] = buf.getvalue()
    if "json" in formats:
        texts["summary.json"] = json.dumps({
            "config_hash": chash,
            "config": config.snapshot() if config is not None else None,
            "points": [asdict(p) for p in points],
            "calibration": calibration or [],
        }, indent=2)
    if "tsv" in formats:
        header = f"# config_hash {chash}\n"
        texts["fig2_nmse_db.tsv"] = header + _tsv(points, "nmse_db")
        texts["fig3_pe.tsv"] = header + _tsv(points, "pe_mean")

    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    staged = []
    try:
        for name, text in texts.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.")
            staged.append((tmp, out / name))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return {name: out / name for name in texts}


def export_sweep(result: SweepResult, out_dir=None) -> dict:
    paths = export_results(result.records, out_dir or result.config.out, result.config,
                           result.points, result.calibration)
    result.paths = paths
    return paths
