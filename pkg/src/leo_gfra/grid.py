"""OTFS numerology and delay/Doppler tap arithmetic.

Every other module indexes the Doppler axis the same way: the centered index
``k`` in ``{ceil(-N/2), ..., ceil(N/2) - 1}`` is stored at row ``k + N // 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Raised for physically meaningless numerology or sampling ranges."""


@dataclass(frozen=True)
class OtfsGrid:
    """Delay-Doppler grid: M delay bins (subcarriers) by N Doppler bins (symbols)."""

    M: int
    N: int
    delta_f: float
    M_cp: int
    T_s: float = field(init=False)
    T: float = field(init=False)
    T_sym: float = field(init=False)

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ConfigurationError(f"grid needs M, N >= 1, got M={self.M}, N={self.N}")
        if not self.delta_f > 0:
            raise ConfigurationError(f"subcarrier spacing must be positive, got {self.delta_f}")
        if self.M_cp < 0:
            raise ConfigurationError(f"CP length must be >= 0, got {self.M_cp}")
        T_s = 1.0 / (self.M * self.delta_f)
        object.__setattr__(self, "T_s", T_s)
        object.__setattr__(self, "T", self.M * T_s)
        object.__setattr__(self, "T_sym", (self.M + self.M_cp) * T_s)

    @property
    def doppler_offset(self) -> int:
        """Storage row of centered Doppler index 0."""
        return self.N // 2

    def doppler_indices(self) -> np.ndarray:
        """Centered Doppler index of every storage row."""
        return np.arange(self.N) - self.N // 2


@dataclass(frozen=True)
class TapDecomposition:
    l: int
    c: int
    k: int
    k_frac: float
    b: int


def make_grid(M: int, N: int, delta_f: float, M_cp: int) -> OtfsGrid:
    return OtfsGrid(int(M), int(N), float(delta_f), int(M_cp))


def default_grid() -> OtfsGrid:
    """Default numerology: 3.75 kHz spacing, 16 delay x 35 Doppler bins, 42-sample CP."""
    return make_grid(16, 35, 3750.0, 42)


def centered_mod(x, N: int):
    """((x + N//2) mod N) - N//2, the centered residue of ``x``; works on arrays."""
    return (x + N // 2) % N - N // 2


def delay_to_taps(tau: float, grid: OtfsGrid) -> tuple[int, int]:
    """Split a delay into inner tap ``l`` and outer tap ``c`` (nearest-sample rounding)."""
    if tau < 0:
        raise ConfigurationError(f"delay must be non-negative, got {tau}")
    total = int(round(tau * grid.M * grid.delta_f))
    c, l = divmod(total, grid.M)
    return l, c


def doppler_to_taps(nu: float, grid: OtfsGrid) -> tuple[int, float, int]:
    """Split a Doppler shift into (inner tap k, fractional part, outer tap b).

    ``nu * N * T_sym = k + k_frac + b * N`` with ``k`` centered and
    ``k_frac`` in (-1/2, 1/2].
    """
    x = nu * grid.N * grid.T_sym
    # ceil(x - 1/2) puts exact half-integers on the lower integer, so k_frac = +0.5
    nearest = math.ceil(x - 0.5)
    k_frac = x - nearest
    k = int(centered_mod(nearest, grid.N))
    b = (nearest - k) // grid.N
    return k, float(k_frac), int(b)


def taps_to_doppler(k: int, k_frac: float, b: int, grid: OtfsGrid) -> float:
    return (k + k_frac + b * grid.N) / (grid.N * grid.T_sym)


def taps_to_delay(l: int, c: int, grid: OtfsGrid) -> float:
    return (l + c * grid.M) / (grid.M * grid.delta_f)


def decompose(tau: float, nu: float, grid: OtfsGrid) -> TapDecomposition:
    l, c = delay_to_taps(tau, grid)
    k, k_frac, b = doppler_to_taps(nu, grid)
    return TapDecomposition(l=l, c=c, k=k, k_frac=k_frac, b=b)
