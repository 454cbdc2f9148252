"""GAMP for Y = X H + Z with AWGN output channel and a per-entry Gaussian prior.

Arrays may carry leading batch axes (one entry per delay slice); every
message update acts elementwise or through a per-slice matrix product, so
slices never interact. Complex Gaussians follow CN(0, v) with E|x|^2 = v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

VAR_MIN = 1e-12
VAR_MAX = 1e12
THETA_INIT = 0.01
# a final residual this many times ||Y|| counts as divergence: a runaway can
# settle at a finite but useless fixed point that the non-finite check misses.
# Only the returned estimate is tested, since converging runs with a flat prior
# overshoot ||Y|| by tens of times on the way
RESIDUAL_GROWTH = 100.0
# damping values tried in turn after a divergence
DAMPING_LADDER = (0.3, 0.6, 0.85)


class GampDivergence(FloatingPointError):
    """Non-finite messages or a runaway residual; ``slices`` lists the offending batch entries."""

    def __init__(self, iteration, slices=None):
        self.iteration = iteration
        self.slices = [] if slices is None else list(slices)
        super().__init__(f"GAMP diverged at iteration {iteration} (slices {self.slices})")


@dataclass
class Operator:
    """Measurement matrix with the products GAMP needs precomputed."""

    X: np.ndarray
    XH: np.ndarray = field(init=False, repr=False)
    A2: np.ndarray = field(init=False, repr=False)
    A2T: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=complex)
        self.XH = np.ascontiguousarray(np.conj(np.swapaxes(self.X, -1, -2)))
        self.A2 = np.abs(self.X) ** 2
        self.A2T = np.ascontiguousarray(np.swapaxes(self.A2, -1, -2))

    @property
    def n_rows(self) -> int:
        return self.X.shape[-2]

    @property
    def n_unknowns(self) -> int:
        return self.X.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.X.shape[:-2]


def as_operator(X) -> Operator:
    return X if isinstance(X, Operator) else Operator(X)


@dataclass
class GampState:
    h_hat: np.ndarray
    gamma_hat: np.ndarray
    s_hat: np.ndarray
    p_hat: np.ndarray
    tau_p: np.ndarray
    tau_s: np.ndarray
    r_hat: np.ndarray
    tau_r: np.ndarray
    g_hat: np.ndarray
    tau_g: np.ndarray
    iteration: int = 1
    # sum of (1 - gamma/theta) per slice from the last input step
    dof: np.ndarray | None = None


def init_state(n_unknowns: int, n_cols: int, n_rows: int, batch: tuple = (),
               theta0: float = THETA_INIT) -> GampState:
    """Prior-mean start: h = 0, gamma = theta0, s = 0."""
    hshape = tuple(batch) + (n_unknowns, n_cols)
    yshape = tuple(batch) + (n_rows, n_cols)
    return GampState(
        h_hat=np.zeros(hshape, dtype=complex),
        gamma_hat=np.full(hshape, float(theta0)),
        s_hat=np.zeros(yshape, dtype=complex),
        p_hat=np.zeros(yshape, dtype=complex),
        tau_p=np.zeros(yshape),
        tau_s=np.zeros(yshape),
        r_hat=np.zeros(hshape, dtype=complex),
        tau_r=np.zeros(hshape),
        g_hat=np.zeros(yshape, dtype=complex),
        tau_g=np.zeros(yshape),
    )


def _batch_scalar(x, ndim_tail=2):
    """Reshape a per-slice scalar so it broadcasts against (..., rows, cols)."""
    x = np.asarray(x, dtype=float)
    return x.reshape(x.shape + (1,) * ndim_tail)


def output_step(state: GampState, X, Y: np.ndarray, sigma2, damping: float = 0.0,
                Xh: np.ndarray | None = None) -> GampState:
    """Output-node messages: p, tau_p, the AWGN posterior (g, tau_g), then s, tau_s."""
    op = as_operator(X)
    s2 = _batch_scalar(sigma2)
    if Xh is None:
        Xh = op.X @ state.h_hat
    tau_p = np.clip(op.A2 @ state.gamma_hat, VAR_MIN, VAR_MAX)
    p_hat = Xh - state.s_hat * tau_p
    denom = tau_p + s2
    gain = tau_p / denom
    state.g_hat = p_hat + gain * (Y - p_hat)
    state.tau_g = gain * s2
    # (g - p)/tau_p and (1 - tau_g/tau_p)/tau_p, simplified to avoid cancellation
    s_new = (Y - p_hat) / denom
    state.tau_s = np.clip(1.0 / denom, VAR_MIN, VAR_MAX)
    if damping:
        s_new = (1.0 - damping) * s_new + damping * state.s_hat
    state.s_hat = s_new
    state.p_hat = p_hat
    state.tau_p = tau_p
    return state


def input_step(state: GampState, X, theta, damping: float = 0.0) -> GampState:
    """Input-node messages (r, tau_r) and the Gaussian-prior posterior (h, gamma).

    tau_r = 1 / sum_o |X_oi|^2 tau_s,  r = h + tau_r X^H s,
    h <- theta r / (theta + tau_r),    gamma <- theta tau_r / (theta + tau_r).
    """
    op = as_operator(X)
    shape = state.h_hat.shape
    theta = np.ascontiguousarray(np.broadcast_to(np.asarray(theta, dtype=float), shape))
    xhs = op.XH @ state.s_hat
    a2ts = op.A2T @ state.tau_s
    h_new = np.empty(shape, dtype=complex)
    gamma = np.empty(shape)
    r_hat = np.empty(shape, dtype=complex)
    tau_r = np.empty(shape)
    dof = np.empty(int(np.prod(shape[:-2], dtype=int)))
    flat = (dof.size, -1)
    _kernels.input_update(np.ascontiguousarray(state.h_hat).reshape(flat), xhs.reshape(flat),
                          a2ts.reshape(flat), theta.reshape(flat), float(damping),
                          h_new.reshape(flat), gamma.reshape(flat), r_hat.reshape(flat),
                          tau_r.reshape(flat), dof)
    state.dof = dof.reshape(shape[:-2])
    state.h_hat = h_new
    state.gamma_hat = gamma
    state.r_hat = r_hat
    state.tau_r = tau_r
    state.iteration += 1
    return state


@dataclass
class Diagnostics:
    """Per-iteration traces, shape (iterations,) + batch shape."""

    residual: list = field(default_factory=list)
    mean_gamma: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    damping: float = 0.0
    iterations: int = 0
    hyper: object = None

    def record(self, residual, gamma, sigma2=None):
        self.residual.append(residual)
        self.mean_gamma.append(gamma.mean(axis=(-2, -1)))
        if sigma2 is not None:
            self.sigma2.append(np.array(sigma2, dtype=float))
        self.iterations += 1

    def as_arrays(self) -> dict:
        out = {"residual": np.array(self.residual), "mean_gamma": np.array(self.mean_gamma)}
        if self.sigma2:
            out["sigma2"] = np.array(self.sigma2)
        return out


def residual_norm(Y, Xh):
    return np.sqrt(np.sum(np.abs(Y - Xh) ** 2, axis=(-2, -1)))


def check_finite(iteration: int, *arrays):
    bad = np.zeros(np.shape(arrays[0]), dtype=bool)
    for a in arrays:
        bad |= ~np.isfinite(a)
    if bad.any():
        raise GampDivergence(iteration, np.flatnonzero(bad.ravel()).tolist())


def check_growth(iteration: int, rss, y_energy):
    """Raise when a slice's squared residual exceeds RESIDUAL_GROWTH^2 ||Y||^2."""
    bad = ~(rss <= RESIDUAL_GROWTH ** 2 * np.maximum(y_energy, VAR_MIN))
    if np.any(bad):
        raise GampDivergence(iteration, np.flatnonzero(np.ravel(bad)).tolist())


def _fixed_prior_pass(op: Operator, Y, theta, sigma2, T, damping):
    batch = op.batch_shape
    state = init_state(op.n_unknowns, Y.shape[-1], op.n_rows, batch)
    diag = Diagnostics(damping=damping)
    y_energy = np.sum(np.abs(Y) ** 2, axis=(-2, -1))
    for t in range(1, T + 1):
        Xh = op.X @ state.h_hat
        res = residual_norm(Y, Xh)
        check_finite(t, res)
        output_step(state, op, Y, sigma2, damping, Xh=Xh)
        input_step(state, op, theta, damping)
        diag.record(res, state.gamma_hat)
    res = residual_norm(Y, op.X @ state.h_hat)
    check_finite(T, res, state.gamma_hat.sum(axis=(-2, -1)))
    check_growth(T, res ** 2, y_energy)
    return state, diag


def run_fixed_prior(X, Y, theta, sigma2, T: int = 200, damping: float = 0.0,
                    restart_damping: float = 0.5):
    """T GAMP iterations with frozen prior variances ``theta`` and noise ``sigma2``.

    Returns ``(h_hat, gamma_hat, diagnostics)``. A divergent run is retried
    once with ``restart_damping`` before the error is raised.
    """
    if T < 1:
        raise ValueError("need T >= 1")
    if not 0 <= damping < 1:
        raise ValueError(f"damping must lie in [0, 1), got {damping}")
    op = as_operator(X)
    Y = np.asarray(Y, dtype=complex)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), op.batch_shape + (op.n_unknowns, Y.shape[-1]))
    try:
        state, diag = _fixed_prior_pass(op, Y, theta, sigma2, T, damping)
    except GampDivergence:
        if damping >= restart_damping:
            raise
        state, diag = _fixed_prior_pass(op, Y, theta, sigma2, T, restart_damping)
    return state.h_hat, state.gamma_hat, diag


def lmmse(X: np.ndarray, y: np.ndarray, theta, sigma2: float) -> np.ndarray:
    """Closed-form posterior mean Theta X^H (X Theta X^H + sigma2 I)^-1 y for one slice."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        theta = np.full(X.shape[1], float(theta))
    if theta.ndim == 2:
        y = y.reshape(X.shape[0], -1)
        return np.stack([lmmse(X, y[:, j], theta[:, j], sigma2) for j in range(y.shape[1])], axis=1)
    XT = X * theta[None, :]
    C = XT @ X.conj().T + sigma2 * np.eye(X.shape[0])
    return (theta * (X.conj().T @ np.linalg.solve(C, y)).T).T
