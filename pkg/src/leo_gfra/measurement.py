"""Gaussian delay-Doppler pilots, per-slice block-circulant operators, noisy observations."""

from __future__ import annotations

import numpy as np

from .grid import OtfsGrid, centered_mod


def gen_pilots(rng: np.random.Generator, U: int, grid: OtfsGrid) -> list[np.ndarray]:
    """U pilot grids of shape (N, M) with i.i.d. CN(0, 1/(MN)) entries."""
    if U < 1:
        raise ValueError(f"need at least one device, got U={U}")
    scale = np.sqrt(0.5 / (grid.M * grid.N))
    return [scale * (rng.standard_normal((grid.N, grid.M)) + 1j * rng.standard_normal((grid.N, grid.M)))
            for _ in range(U)]


def _doppler_shift_rows(grid: OtfsGrid) -> np.ndarray:
    """Storage row of <k - k'>_N for every (row(k), row(k')) pair."""
    k = grid.doppler_indices()
    return centered_mod(k[:, None] - k[None, :], grid.N) + grid.doppler_offset


def build_measurement(pilots: list[np.ndarray], l: int, grid: OtfsGrid) -> np.ndarray:
    """Dense ``X_l`` of shape (N, U*M*N).

    Column ``u*M*N + l'*N + k'_row`` holds ``X^DD_u[<k - k'>_N, (l - l')_M]``
    for every output row ``k_row``.
    """
    M, N = grid.M, grid.N
    if not 0 <= l < M:
        raise IndexError(f"delay slice {l} outside [0, {M - 1}]")
    rows = _doppler_shift_rows(grid)                      # (N, N)
    cols = (l - np.arange(M)) % M                         # (M,)
    blocks = [p[rows[:, None, :], cols[None, :, None]].reshape(N, M * N) for p in pilots]
    return np.concatenate(blocks, axis=1)


def build_all_measurements(pilots: list[np.ndarray], grid: OtfsGrid) -> np.ndarray:
    """``X_l`` for every slice, shape (M, N, U*M*N)."""
    return np.stack([build_measurement(pilots, l, grid) for l in range(grid.M)])


def snr_to_sigma2(snr_db: float, grid: OtfsGrid) -> float:
    return 1.0 / (grid.M * grid.N * 10.0 ** (snr_db / 10.0))


def complex_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-variance circular complex Gaussian samples."""
    return np.sqrt(0.5) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synth_observation(rng: np.random.Generator, X: np.ndarray, H: np.ndarray,
                      sigma2: float) -> np.ndarray:
    """``Y = X H + Z`` with Z i.i.d. CN(0, sigma2); works on stacked slices too."""
    if X.shape[-1] != H.shape[-2] or X.shape[:-2] != H.shape[:-2]:
        raise ValueError(f"cannot multiply X{X.shape} by H{H.shape}")
    clean = X @ H
    if sigma2 == 0:
        return clean
    return clean + np.sqrt(sigma2) * complex_noise(rng, clean.shape)
