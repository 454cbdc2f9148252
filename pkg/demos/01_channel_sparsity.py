"""
Where does a device's channel energy land on the delay-Doppler-angle grid?
===========================================================================

One LoS + one NLoS path, first on the grid (integer Doppler bin, angle
cosines that hit a DFT bin) and then off it. The on-grid channel occupies a
handful of entries; the off-grid one leaks into neighbouring Doppler and angle
bins, which is the structure the coupled priors try to exploit.
"""

import numpy as np

from leo_gfra.channel import DeviceChannel, device_dda, make_path, sample_device
from leo_gfra.grid import default_grid, taps_to_doppler

grid = default_grid()
array = (4, 4)
print(f"grid: M={grid.M} delay bins, N={grid.N} Doppler bins, T_s={grid.T_s * 1e6:.2f} us")


def occupancy(dda, frac=0.95):
    """Number of entries holding ``frac`` of the energy."""
    e = np.sort(np.abs(dda.ravel()) ** 2)[::-1]
    return int(np.searchsorted(np.cumsum(e) / e.sum(), frac) + 1)


# on-grid: Doppler bin 3, delay tap 5 and 11, cosines at DFT points
nu = taps_to_doppler(3, 0.0, 0, grid)
on = DeviceChannel([make_path(0.9 + 0.0j, 5 * grid.T_s, nu, 0.5, 0.0, grid),
                    make_path(0.3j, 11 * grid.T_s, -nu, -0.5, 0.5, grid)])
dda_on = device_dda(on, grid, array)
print("tensor shape (Doppler, delay', delay, angle):", dda_on.shape)
print("on-grid  : 95% of energy in", occupancy(dda_on), "of", dda_on.size, "entries")

# off-grid: fractional Doppler and arbitrary cosines
rng = np.random.default_rng(7)
off = sample_device(rng, grid)
dda_off = device_dda(off, grid, array)
print("off-grid : 95% of energy in", occupancy(dda_off), "of", dda_off.size, "entries")

# energy profile along Doppler for the strongest (delay', angle) column
k, lp, l, a = np.unravel_index(np.abs(dda_off).argmax(), dda_off.shape)
profile = np.abs(dda_off[:, lp, l, a]) ** 2
profile /= profile.max()
print(f"\nDoppler profile at delay'={lp}, delay={l}, angle={a} (peak-normalised):")
for kk in range(max(0, k - 4), min(grid.N, k + 5)):
    print(f"  k={kk - grid.doppler_offset:+3d} {'#' * int(round(40 * profile[kk])):<40s} {profile[kk]:.3f}")
