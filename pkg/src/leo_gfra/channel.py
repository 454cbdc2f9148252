"""Physical path sampling and delay-Doppler-space / delay-Doppler-angle channels.

Tensor layouts used throughout:

* DDS tensor of one device: ``(N, M, M, Ny, Nz)`` indexed
  ``[k_row, l_prime, l, n_y, n_z]``; ``l_prime`` is the inner delay tap of
  the path, ``l`` the output delay index.
* DDA tensor of one device: ``(N, M, M, Ny * Nz)`` indexed
  ``[k_row, l_prime, l, a]`` with ``a = a_z + Nz * a_y``.
* Slice matrix ``H_l``: ``(U * M * N, Ny * Nz)``, row ``u*M*N + l_prime*N + k_row``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import ConfigurationError, OtfsGrid, TapDecomposition, decompose


@dataclass(frozen=True)
class PathDistribution:
    """Sampling ranges for the two-path (LoS + NLoS) device channel."""

    delay_range: tuple[float, float] = (0.0, 699e-6)
    doppler_range: tuple[float, float] = (-3880.0, 3880.0)
    cos_range: tuple[float, float] = (-1.0, 1.0)
    n_los: int = 1
    n_nlos: int = 1
    rician_db: float = 8.0

    def validate(self):
        lo, hi = self.delay_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad delay range {self.delay_range}")
        lo, hi = self.doppler_range
        if hi < lo:
            raise ConfigurationError(f"bad Doppler range {self.doppler_range}")
        lo, hi = self.cos_range
        if hi < lo or lo < -1 or hi > 1:
            raise ConfigurationError(f"directional cosines must lie in [-1, 1], got {self.cos_range}")
        if self.n_los < 0 or self.n_nlos < 0 or self.n_los + self.n_nlos < 1:
            raise ConfigurationError("need at least one path")
        if math.isnan(self.rician_db):
            raise ConfigurationError("Rician factor is NaN")


@dataclass(frozen=True)
class PathParams:
    gain: complex
    tau: float
    nu: float
    cos_y: float
    cos_z: float
    taps: TapDecomposition


@dataclass
class DeviceChannel:
    paths: list[PathParams]
    active: int = 1

    @property
    def power(self) -> float:
        return float(sum(abs(p.gain) ** 2 for p in self.paths))


def rician_powers(rician_db: float, n_los: int = 1, n_nlos: int = 1) -> tuple[float, float]:
    """Per-path powers (LoS, NLoS) so that the total power is one."""
    if n_nlos == 0:
        return 1.0 / n_los, 0.0
    if n_los == 0:
        return 0.0, 1.0 / n_nlos
    if math.isinf(rician_db):
        return (1.0 / n_los, 0.0) if rician_db > 0 else (0.0, 1.0 / n_nlos)
    K = 10.0 ** (rician_db / 10.0)
    return K / (K + 1) / n_los, 1.0 / (K + 1) / n_nlos


def make_path(gain: complex, tau: float, nu: float, cos_y: float, cos_z: float,
              grid: OtfsGrid) -> PathParams:
    """Build a path with its delay snapped to the nearest sample tap."""
    taps = decompose(tau, nu, grid)
    tau_on_grid = (taps.l + taps.c * grid.M) * grid.T_s
    return PathParams(complex(gain), tau_on_grid, float(nu), float(cos_y), float(cos_z), taps)


def sample_device(rng: np.random.Generator, grid: OtfsGrid,
                  dist: PathDistribution | None = None, active: int = 1) -> DeviceChannel:
    dist = dist or PathDistribution()
    dist.validate()
    p_los, p_nlos = rician_powers(dist.rician_db, dist.n_los, dist.n_nlos)
    powers = [p_los] * dist.n_los + [p_nlos] * dist.n_nlos
    paths = []
    for power in powers:
        phase = rng.uniform(0.0, 2 * np.pi)
        tau = rng.uniform(*dist.delay_range)
        nu = rng.uniform(*dist.doppler_range)
        cos_y = rng.uniform(*dist.cos_range)
        cos_z = rng.uniform(*dist.cos_range)
        paths.append(make_path(math.sqrt(power) * np.exp(1j * phase), tau, nu, cos_y, cos_z, grid))
    return DeviceChannel(paths=paths, active=int(active))


def sample_devices(rng: np.random.Generator, grid: OtfsGrid, U: int, U_a: int,
                   dist: PathDistribution | None = None) -> list[DeviceChannel]:
    """U devices of which exactly U_a, chosen uniformly, are active."""
    if not 0 <= U_a <= U:
        raise ConfigurationError(f"need 0 <= U_a <= U, got U_a={U_a}, U={U}")
    active = np.zeros(U, dtype=int)
    active[rng.choice(U, size=U_a, replace=False)] = 1
    return [sample_device(rng, grid, dist, active=a) for a in active]


def _path_gain_sequence(path: PathParams, rho, grid: OtfsGrid):
    return path.gain * np.exp(2j * np.pi * (np.asarray(rho) - path.taps.l) * grid.T_s * path.nu)


def time_variant_gain(device: DeviceChannel, rho: int, l: int, grid: OtfsGrid) -> complex:
    """Gain of delay tap ``l`` at time ``rho * T_s``; zero if no path sits on the tap."""
    total = 0j
    for path in device.paths:
        if path.taps.l == l:
            total += complex(_path_gain_sequence(path, rho, grid))
    return total


def steering_phases(cos_y: float, cos_z: float, Ny: int, Nz: int) -> np.ndarray:
    """``exp(j*pi*n_y*cos_y) * exp(j*pi*n_z*cos_z)`` on an (Ny, Nz) array."""
    vy = np.exp(1j * np.pi * np.arange(Ny) * cos_y)
    vz = np.exp(1j * np.pi * np.arange(Nz) * cos_z)
    return np.outer(vy, vz)


def effective_dds_channel(device: DeviceChannel, grid: OtfsGrid,
                          array: tuple[int, int]) -> np.ndarray:
    """Effective channel of every antenna, shape ``(N, M, M, Ny, Nz)``.

    Paths landing on the same inner delay tap add, each with its own
    phase-compensation factor.
    """
    Ny, Nz = array
    M, N, M_cp = grid.M, grid.N, grid.M_cp
    out = np.zeros((N, M, M, Ny, Nz), dtype=complex)
    j = np.arange(N)
    rho = M_cp + j * (M + M_cp)
    k_centered = grid.doppler_indices()
    dft = np.exp(-2j * np.pi * np.outer(k_centered, j) / N) / N
    l_out = np.arange(M)
    for path in device.paths:
        t = path.taps
        doppler = dft @ _path_gain_sequence(path, rho, grid)
        comp = np.exp(2j * np.pi * (t.k + t.k_frac + t.b * N) * (l_out - t.c * M) / ((M + M_cp) * N))
        steer = steering_phases(path.cos_y, path.cos_z, Ny, Nz)
        out[:, t.l] += doppler[:, None, None, None] * comp[None, :, None, None] * steer[None, None]
    return out


def dds_to_dda(dds: np.ndarray) -> np.ndarray:
    """Unitary 2D-DFT over the antenna axes; flattens (a_y, a_z) to a = a_z + Nz*a_y."""
    dda = np.fft.fft2(dds, axes=(-2, -1), norm="ortho")
    return dda.reshape(dda.shape[:-2] + (-1,))


def pi_kernel(x, n: int):
    """(1/n) * sum_{i<n} exp(-j*2*pi*x*i/n), evaluated by direct summation."""
    x = np.asarray(x, dtype=float)
    i = np.arange(n)
    return np.exp(-2j * np.pi * x[..., None] * i / n).sum(axis=-1) / n


def analytic_dda_reference(device: DeviceChannel, grid: OtfsGrid, array: tuple[int, int],
                           k_row: int, l_prime: int, l: int, a_y: int, a_z: int) -> complex:
    """Closed-form delay-Doppler-angle channel entry, summed over paths."""
    Ny, Nz = array
    k = k_row - grid.doppler_offset
    total = 0j
    for path in device.paths:
        if path.taps.l != l_prime:
            continue
        nu = path.nu
        val = (math.sqrt(Ny * Nz) * path.gain
               * np.exp(2j * np.pi * (grid.M_cp + l) * grid.T_s * nu)
               * np.exp(-2j * np.pi * path.tau * nu)
               * pi_kernel(k - grid.N * grid.T_sym * nu, grid.N)
               * pi_kernel(a_y - Ny * path.cos_y / 2, Ny)
               * pi_kernel(a_z - Nz * path.cos_z / 2, Nz))
        total += complex(val)
    return total


def analytic_dda_tensor(device: DeviceChannel, grid: OtfsGrid, array: tuple[int, int]) -> np.ndarray:
    """The closed form of :func:`analytic_dda_reference` on the full ``(N, M, M, Ny*Nz)`` grid."""
    Ny, Nz = array
    M, N = grid.M, grid.N
    k = grid.doppler_indices()
    l_out = np.arange(M)
    out = np.zeros((N, M, M, Ny, Nz), dtype=complex)
    for path in device.paths:
        nu = path.nu
        lead = (math.sqrt(Ny * Nz) * path.gain * np.exp(-2j * np.pi * path.tau * nu)
                * np.exp(2j * np.pi * (grid.M_cp + l_out) * grid.T_s * nu))           # (M,)
        dopp = pi_kernel(k - N * grid.T_sym * nu, N)                                 # (N,)
        ang = np.outer(pi_kernel(np.arange(Ny) - Ny * path.cos_y / 2, Ny),
                       pi_kernel(np.arange(Nz) - Nz * path.cos_z / 2, Nz))          # (Ny, Nz)
        out[:, path.taps.l] += dopp[:, None, None, None] * lead[None, :, None, None] * ang[None, None]
    return out.reshape(N, M, M, Ny * Nz)


def device_dda(device: DeviceChannel, grid: OtfsGrid, array: tuple[int, int]) -> np.ndarray:
    return dds_to_dda(effective_dds_channel(device, grid, array))


def slice_row_index(u: int, l_prime: int, k_row: int, grid: OtfsGrid) -> int:
    return u * grid.M * grid.N + l_prime * grid.N + k_row


def slice_row_coords(i: int, grid: OtfsGrid) -> tuple[int, int, int]:
    u, rem = divmod(i, grid.M * grid.N)
    l_prime, k_row = divmod(rem, grid.N)
    return u, l_prime, k_row


def assemble_slice(devices: list[DeviceChannel], dda: list[np.ndarray], l: int) -> np.ndarray:
    """Ground-truth ``H_l``: per device vec(H^DDA_u[:, :, l]) (Doppler fastest), times lambda_u."""
    if len(devices) != len(dda):
        raise ValueError(f"{len(devices)} devices but {len(dda)} DDA tensors")
    shapes = {t.shape for t in dda}
    if len(shapes) != 1:
        raise ValueError(f"DDA tensors disagree in shape: {shapes}")
    N, M, _, A = dda[0].shape
    blocks = []
    for dev, t in zip(devices, dda):
        block = t[:, :, l, :].transpose(1, 0, 2).reshape(M * N, A)
        blocks.append(block * dev.active)
    return np.concatenate(blocks, axis=0)


def assemble_all_slices(devices: list[DeviceChannel], dda: list[np.ndarray]) -> np.ndarray:
    """All M slices stacked, shape ``(M, U*M*N, Ny*Nz)``."""
    M = dda[0].shape[2]
    return np.stack([assemble_slice(devices, dda, l) for l in range(M)])


def channels_to_json(devices: list[DeviceChannel], seed=None) -> dict:
    return {
        "seed": seed,
        "devices": [
            {
                "gains": [[p.gain.real, p.gain.imag] for p in dev.paths],
                "taus": [p.tau for p in dev.paths],
                "nus": [p.nu for p in dev.paths],
                "cosines": [[p.cos_y, p.cos_z] for p in dev.paths],
                "active": int(dev.active),
            }
            for dev in devices
        ],
    }


def channels_from_json(obj: dict, grid: OtfsGrid) -> list[DeviceChannel]:
    devices = []
    for d in obj["devices"]:
        paths = [make_path(complex(g[0], g[1]), tau, nu, c[0], c[1], grid)
                 for g, tau, nu, c in zip(d["gains"], d["taus"], d["nus"], d["cosines"])]
        devices.append(DeviceChannel(paths=paths, active=int(d["active"])))
    return devices


def dump_channels(path, devices: list[DeviceChannel], seed=None):
    Path(path).write_text(json.dumps(channels_to_json(devices, seed), indent=2))


def load_channels(path, grid: OtfsGrid) -> tuple[list[DeviceChannel], object]:
    obj = json.loads(Path(path).read_text())
    return channels_from_json(obj, grid), obj.get("seed")
