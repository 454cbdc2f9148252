"""Energy-based activity detection and the NMSE / error-probability metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ActivityDecision:
    energies: np.ndarray
    threshold: float
    lambda_hat: np.ndarray


@dataclass
class Calibration:
    threshold: float
    error: float
    n_active: int
    n_inactive: int
    flagged: bool = False
    note: str = ""


def device_energies(h_hat_slices: np.ndarray, U: int) -> np.ndarray:
    """(1/M) sum_l sum_{rows of u} sum_j |H_l[i, j]|^2 for every device u.

    ``h_hat_slices`` has shape (M, U*M*N, J); device u owns rows u*MN .. (u+1)*MN - 1.
    """
    h = np.asarray(h_hat_slices)
    M = h.shape[0]
    per_row = np.sum(h.real ** 2 + h.imag ** 2, axis=(0, 2)) if np.iscomplexobj(h) \
        else np.sum(h ** 2, axis=(0, 2))
    return per_row.reshape(U, -1).sum(axis=1) / M


def device_energy(h_hat_slices, u: int, U: int) -> float:
    return float(device_energies(h_hat_slices, U)[u])


def detect_activity(energies, threshold: float) -> ActivityDecision:
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    energies = np.asarray(energies, dtype=float)
    return ActivityDecision(energies, float(threshold), (energies > threshold).astype(int))


def error_probability(lambda_true, lambda_hat) -> float:
    lambda_true = np.asarray(lambda_true)
    lambda_hat = np.asarray(lambda_hat)
    if lambda_true.shape != lambda_hat.shape:
        raise ValueError("activity vectors differ in length")
    return float(np.mean(np.abs(lambda_true - lambda_hat)))


def calibrate_threshold(energies, labels, n_grid: int = 200) -> Calibration:
    """Pick the threshold minimising the empirical error rate on labelled energies.

    The grid is log-spaced over [min inactive energy, max active energy];
    ties go to the smallest threshold.
    """
    energies = np.asarray(energies, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if energies.size == 0:
        raise ValueError("no calibration energies")
    active = energies[labels == 1]
    inactive = energies[labels == 0]
    tiny = np.finfo(float).tiny
    if active.size == 0 or inactive.size == 0:
        # one class only: put the threshold beyond the observed class
        if active.size == 0:
            thr = 2.0 * max(inactive.max(), tiny)
            note = "no active devices in calibration set"
        else:
            thr = 0.5 * max(active.min(), tiny)
            note = "no inactive devices in calibration set"
        log.warning("threshold calibration: %s; using %.3g", note, thr)
        err = float(np.mean((energies > thr) != labels))
        return Calibration(thr, err, active.size, inactive.size, flagged=True, note=note)

    lo = max(inactive.min(), tiny)
    hi = max(active.max(), tiny)
    if hi <= lo:
        lo, hi = max(energies.min(), tiny), max(energies.max(), tiny)
    grid = np.geomspace(lo, hi, n_grid) if hi > lo else np.array([lo])
    errors = np.mean((energies[None, :] > grid[:, None]) != labels[None, :].astype(bool), axis=1)
    best = int(np.argmin(errors))  # argmin returns the first, i.e. smallest, minimiser
    flagged = bool(errors[best] > 0.5 * min(active.size, inactive.size) / energies.size)
    note = "classes overlap heavily" if flagged else ""
    return Calibration(float(grid[best]), float(errors[best]), active.size, inactive.size,
                       flagged=flagged, note=note)


def slice_nmse(h_true: np.ndarray, h_hat: np.ndarray) -> np.ndarray:
    num = np.sum(np.abs(h_true - h_hat) ** 2, axis=(-2, -1))
    den = np.sum(np.abs(h_true) ** 2, axis=(-2, -1))
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / den


def nmse(h_true_slices, h_hat_slices) -> float:
    """(1/M) sum_l ||H_l - H_hat_l||_F^2 / ||H_l||_F^2; all-zero true slices are skipped."""
    h_true = np.asarray(h_true_slices)
    h_hat = np.asarray(h_hat_slices)
    if h_true.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h_true.shape} vs {h_hat.shape}")
    per = slice_nmse(h_true, h_hat)
    keep = np.sum(np.abs(h_true) ** 2, axis=(-2, -1)) > 0
    if not keep.all():
        log.warning("nmse: skipping %d all-zero true slice(s)", int((~keep).sum()))
    if not keep.any():
        return math.nan
    return float(np.mean(per[keep]))


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf
