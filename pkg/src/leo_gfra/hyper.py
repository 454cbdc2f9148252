"""EM hyperparameter learning around GAMP with a kernel-coupled Gaussian prior.

The prior variance of entry (i, j) is the inverse of a kernel-weighted sum
of neighbouring precisions. Precisions follow the EM rule
``alpha = a / (b + omega)`` where ``omega`` is the kernel-convolved posterior
second moment. ConvGAMP uses one fixed kernel for both passes; DL-GAMP
replaces each pass by a learned 3x3 convolutional layer plus ReLU.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels
from .detect import slice_nmse
from .gamp import (DAMPING_LADDER, THETA_INIT, VAR_MIN, Diagnostics, GampDivergence, GampState,
                   as_operator, check_finite, check_growth, init_state, input_step, output_step)

log = logging.getLogger(__name__)

EPSILON_FLOOR = 1e-8
SIGMA2_MIN = 1e-12


@dataclass(frozen=True)
class Kernel2D:
    """Coupling weights ``beta[p + d_x, q + d_y]`` for offsets |p| <= d_x, |q| <= d_y."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 2 or beta.shape[0] % 2 == 0 or beta.shape[1] % 2 == 0:
            raise ValueError(f"kernel must be 2-D with odd sides, got shape {beta.shape}")
        if beta.min() < 0 or beta.max() > 1:
            raise ValueError("kernel weights must lie in [0, 1]")
        if beta[beta.shape[0] // 2, beta.shape[1] // 2] <= 0:
            raise ValueError("kernel centre must be positive")
        object.__setattr__(self, "beta", beta)

    @property
    def d_x(self) -> int:
        return self.beta.shape[0] // 2

    @property
    def d_y(self) -> int:
        return self.beta.shape[1] // 2

    @classmethod
    def delta(cls, d_x: int = 1, d_y: int = 1) -> "Kernel2D":
        beta = np.zeros((2 * d_x + 1, 2 * d_y + 1))
        beta[d_x, d_y] = 1.0
        return cls(beta)

    @classmethod
    def uniform(cls, beta: float, d_x: int = 1, d_y: int = 1) -> "Kernel2D":
        """Centre 1, every neighbour ``beta``."""
        w = np.full((2 * d_x + 1, 2 * d_y + 1), float(beta))
        w[d_x, d_y] = 1.0
        return cls(w)


@dataclass
class Hyperparams:
    alpha: np.ndarray
    theta: np.ndarray
    sigma2: np.ndarray
    a: float = 1.0
    b: float = 1e-4
    r: float = 1e-4
    s: float = 1e-4


@dataclass
class LearnedFilters:
    """Two conv-layer filters (cross-correlation semantics) and the learned Gamma shape."""

    W1: np.ndarray
    W2: np.ndarray
    a_learned: float = 1.0
    epsilon_floor: float = EPSILON_FLOOR
    t_train: int = 30

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        if self.W1.shape != self.W2.shape:
            raise ValueError(f"filter shapes differ: {self.W1.shape} vs {self.W2.shape}")
        if not (np.all(np.isfinite(self.W1)) and np.all(np.isfinite(self.W2))):
            raise ValueError("filters must be finite")
        if not self.a_learned > 0:
            raise ValueError(f"a_learned must be positive, got {self.a_learned}")

    @property
    def d_x(self) -> int:
        return self.W1.shape[0] // 2

    @property
    def d_y(self) -> int:
        return self.W1.shape[1] // 2

    @classmethod
    def from_kernel(cls, kernel: Kernel2D, a: float = 1.0, **kw) -> "LearnedFilters":
        """Filters reproducing ConvGAMP with ``kernel``: the omega layer holds the flipped kernel."""
        return cls(W1=kernel.beta[::-1, ::-1].copy(), W2=kernel.beta.copy(), a_learned=a, **kw)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.W2.ravel(), [self.a_learned]])

    def with_vector(self, v: np.ndarray) -> "LearnedFilters":
        n = self.W1.size
        return replace(self, W1=v[:n].reshape(self.W1.shape), W2=v[n:2 * n].reshape(self.W2.shape),
                       a_learned=float(v[2 * n]))

    def to_json(self) -> dict:
        return {
            "d_x": self.d_x,
            "d_y": self.d_y,
            "W1": self.W1.ravel().tolist(),
            "W2": self.W2.ravel().tolist(),
            "a_learned": self.a_learned,
            "epsilon_floor": self.epsilon_floor,
            "t_train": self.t_train,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LearnedFilters":
        shape = (2 * obj["d_x"] + 1, 2 * obj["d_y"] + 1)
        return cls(W1=np.reshape(obj["W1"], shape), W2=np.reshape(obj["W2"], shape),
                   a_learned=float(obj["a_learned"]),
                   epsilon_floor=float(obj.get("epsilon_floor", EPSILON_FLOOR)),
                   t_train=int(obj.get("t_train", 30)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "LearnedFilters":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class EmOptions:
    a: float = 1.0
    b: float = 1e-4
    r: float = 1e-4
    s: float = 1e-4
    T_max: int = 600
    damping: float = 0.0
    epsilon_floor: float = EPSILON_FLOOR
    # None: data-driven start ||Y||^2 / ((snr0 + 1) * count); otherwise a fixed value
    sigma2_init: float | None = None
    snr0: float = 100.0
    learn_sigma2: bool = True
    # stop once every slice's relative change in h falls below tol (0 disables)
    tol: float = 0.0
    literal_second_moment: bool = False
    # multiply the per-slice observation count by this (M counts every entry of the frame)
    denominator_slices: int = 1


class EmResult(NamedTuple):
    h_hat: np.ndarray
    gamma_hat: np.ndarray
    sigma2: np.ndarray
    diagnostics: Diagnostics


def posterior_second_moment(h_hat, gamma_hat, literal: bool = False):
    """E|h|^2 = |h|^2 + gamma; ``literal`` squares the variance instead."""
    h_hat = np.ascontiguousarray(h_hat, dtype=complex)
    gamma_hat = np.ascontiguousarray(np.broadcast_to(np.asarray(gamma_hat, dtype=float), h_hat.shape))
    out = np.empty(h_hat.shape)
    _kernels.second_moment(h_hat, gamma_hat, bool(literal), out)
    return out


def correlate(field: np.ndarray, weights: np.ndarray, mode: str = "convolution") -> np.ndarray:
    """Zero-padded 2-D filtering over the last two axes.

    ``convolution``: out[i, j] = sum w[p, q] field[i - p, j - q]
    ``correlation``: out[i, j] = sum w[p, q] field[i + p, j + q]
    with offsets p, q centred on the middle of ``weights``.
    """
    if mode not in ("convolution", "correlation"):
        raise ValueError(f"unknown mode {mode!r}")
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or weights.shape[0] % 2 == 0 or weights.shape[1] % 2 == 0:
        raise ValueError(f"weights must be 2-D with odd sides, got {weights.shape}")
    return _kernels.correlate(field, weights, -1 if mode == "convolution" else 1)


def update_alpha(omega, a: float, b: float):
    return a / (b + omega)


def update_theta(alpha, weights, epsilon_floor: float = EPSILON_FLOOR):
    """theta = 1 / max(cross-correlation of alpha with ``weights``, floor)."""
    return 1.0 / np.maximum(correlate(alpha, weights, "correlation"), epsilon_floor)


def _sigma2_from_rss(rss, dof, sigma2_prev, r, s, count):
    return np.maximum((rss + sigma2_prev * dof + s) / (count + r), SIGMA2_MIN)


def update_sigma2(Y, X, h_hat, gamma_hat, theta, sigma2_prev, r: float = 1e-4, s: float = 1e-4,
                  count=None):
    """EM noise update; ``count`` defaults to the number of entries in one slice of Y."""
    op = as_operator(X)
    rss = np.sum(np.abs(Y - op.X @ h_hat) ** 2, axis=(-2, -1))
    if count is None:
        count = Y.shape[-2] * Y.shape[-1]
    dof = np.sum(1.0 - gamma_hat / theta, axis=(-2, -1))
    return _sigma2_from_rss(rss, dof, np.asarray(sigma2_prev, dtype=float), r, s, count)


def initial_sigma2(Y, opts: EmOptions):
    count = Y.shape[-2] * Y.shape[-1]
    if opts.sigma2_init is not None:
        return np.full(Y.shape[:-2], float(opts.sigma2_init))
    return np.maximum(np.sum(np.abs(Y) ** 2, axis=(-2, -1)) / ((opts.snr0 + 1) * count), SIGMA2_MIN)


def _em_loop(X, Y, omega_map: Callable, theta_inv_map: Callable, a: float,
             opts: EmOptions) -> EmResult:
    op = as_operator(X)
    Y = np.asarray(Y, dtype=complex)
    if opts.T_max < 1:
        raise ValueError("T_max must be >= 1")
    batch = op.batch_shape
    state: GampState = init_state(op.n_unknowns, Y.shape[-1], op.n_rows, batch)
    theta = np.full(state.gamma_hat.shape, THETA_INIT)
    alpha = 1.0 / theta
    count = Y.shape[-2] * Y.shape[-1] * opts.denominator_slices
    sigma2 = initial_sigma2(Y, opts)
    diag = Diagnostics(damping=opts.damping)
    y_energy = np.sum(np.abs(Y) ** 2, axis=(-2, -1))
    for t in range(1, opts.T_max + 1):
        Xh = op.X @ state.h_hat
        rss = np.sum(np.abs(Y - Xh) ** 2, axis=(-2, -1))
        check_finite(t, rss)
        if t > 1 and opts.learn_sigma2:
            # noise update for the previous iteration, placed here to reuse X @ h
            sigma2 = _sigma2_from_rss(rss, state.dof, sigma2, opts.r, opts.s, count)
        diag.record(np.sqrt(rss), state.gamma_hat, sigma2)
        h_prev = state.h_hat
        output_step(state, op, Y, sigma2, opts.damping, Xh=Xh)
        input_step(state, op, theta, opts.damping)
        m2 = posterior_second_moment(state.h_hat, state.gamma_hat, opts.literal_second_moment)
        alpha = update_alpha(omega_map(m2), a, opts.b)
        theta = 1.0 / np.maximum(theta_inv_map(alpha), opts.epsilon_floor)
        if opts.tol > 0:
            change = np.sum(np.abs(state.h_hat - h_prev) ** 2, axis=(-2, -1))
            norm = np.sum(np.abs(state.h_hat) ** 2, axis=(-2, -1))
            if np.all(change <= opts.tol ** 2 * np.maximum(norm, VAR_MIN)):
                break
    rss = np.sum(np.abs(Y - op.X @ state.h_hat) ** 2, axis=(-2, -1))
    check_finite(diag.iterations, rss, np.sum(state.gamma_hat, axis=(-2, -1)))
    check_growth(diag.iterations, rss, y_energy)
    if opts.learn_sigma2:
        sigma2 = _sigma2_from_rss(rss, state.dof, sigma2, opts.r, opts.s, count)
    diag.hyper = Hyperparams(alpha=alpha, theta=theta, sigma2=sigma2, a=a, b=opts.b, r=opts.r, s=opts.s)
    return EmResult(state.h_hat, state.gamma_hat, sigma2, diag)


def run_em_gamp(X, Y, opts: EmOptions | None = None) -> EmResult:
    """Uncoupled per-entry EM-GAMP: alpha = a / (b + E|h|^2), theta = 1 / alpha."""
    opts = opts or EmOptions()
    return _em_loop(X, Y, lambda m2: m2, lambda alpha: alpha, opts.a, opts)


def run_conv_gamp(X, Y, kernel: Kernel2D, opts: EmOptions | None = None) -> EmResult:
    """ConvGAMP: omega by convolving the second moment with ``kernel``, theta^-1 by
    cross-correlating the precisions with it."""
    opts = opts or EmOptions()
    beta = kernel.beta
    return _em_loop(
        X, Y,
        lambda m2: correlate(m2, beta, "convolution"),
        lambda alpha: correlate(alpha, beta, "correlation"),
        opts.a, opts,
    )


def run_dl_gamp(X, Y, filters: LearnedFilters, opts: EmOptions | None = None) -> EmResult:
    """DL-GAMP: both passes are conv layers (cross-correlation) followed by ReLU."""
    opts = replace(opts or EmOptions(), epsilon_floor=filters.epsilon_floor)
    W1, W2 = filters.W1, filters.W2
    return _em_loop(
        X, Y,
        lambda m2: np.maximum(correlate(m2, W1, "correlation"), 0.0),
        lambda alpha: np.maximum(correlate(alpha, W2, "correlation"), 0.0),
        filters.a_learned, opts,
    )


# --------------------------------------------------------------------------- training


@dataclass
class TrainingSet:
    """Stacked per-slice systems: X (S, N, K), Y (S, N, J), H (S, K, J)."""

    X: np.ndarray
    Y: np.ndarray
    H: np.ndarray

    def __len__(self):
        return 0 if self.X is None else self.X.shape[0]

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.X[idx], self.Y[idx], self.H[idx])


@dataclass
class TrainingSchedule:
    steps: int = 100
    lr: float = 1e-4
    batch_size: int = 16
    t_train: int = 30
    # validation depth; 0 means deployment settings (em.T_max with em.tol)
    t_val: int = 0
    fd_step: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 5
    patience: int = 4
    seed: int = 0
    checkpoint_dir: str | None = None
    em: EmOptions = field(default_factory=EmOptions)


@dataclass
class TrainingCurve:
    step: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_step: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stopped_early: bool = False
    best_step: int = 0


def dl_gamp_loss(filters: LearnedFilters, data: TrainingSet, t_iter: int | None,
                 em: EmOptions | None = None) -> float:
    """Mean per-slice NMSE of DL-GAMP truncated to ``t_iter`` iterations.

    ``t_iter=None`` runs with ``em`` unchanged (its T_max and stopping tolerance).
    A divergent run is repeated with increasing damping; if every level
    fails the loss is +inf.
    """
    opts = em or EmOptions()
    if t_iter is not None:
        opts = replace(opts, T_max=t_iter, tol=0.0)
    for damping in [opts.damping] + [d for d in DAMPING_LADDER if d > opts.damping]:
        try:
            res = run_dl_gamp(data.X, data.Y, filters, replace(opts, damping=damping))
            break
        except GampDivergence:
            continue
    else:
        return float("inf")
    keep = np.sum(np.abs(data.H) ** 2, axis=(-2, -1)) > 0
    return float(np.mean(slice_nmse(data.H[keep], res.h_hat[keep])))


def fd_gradient(loss: Callable[[np.ndarray], float], params: np.ndarray, step: float,
                mask: np.ndarray | None = None) -> np.ndarray:
    """Central finite-difference gradient; parameters outside ``mask`` get zero, and so do
    components where either side of the difference is not finite."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        if mask is not None and not mask[i]:
            continue
        e = np.zeros_like(params)
        e[i] = step
        grad[i] = (loss(params + e) - loss(params - e)) / (2 * step)
    # a divergent side carries no slope information
    grad[~np.isfinite(grad)] = 0.0
    return grad


def _vector_loss(template: LearnedFilters, data: TrainingSet, sched: TrainingSchedule):
    def loss(v):
        v = v.copy()
        v[-1] = max(v[-1], 1e-6)
        return dl_gamp_loss(template.with_vector(v), data, sched.t_train, sched.em)
    return loss


def train_filters(training_set: TrainingSet, init: LearnedFilters | None = None,
                  schedule: TrainingSchedule | None = None,
                  validation_set: TrainingSet | None = None) -> tuple[LearnedFilters, TrainingCurve]:
    """Adam on central finite-difference gradients of the truncated DL-GAMP NMSE.

    Gradients use ``t_train`` unrolled iterations. The validation loss runs at
    ``t_val`` iterations, or at the deployment settings in ``schedule.em`` when
    ``t_val`` is 0, so checkpoints are ranked where the filters will be used.
    Returns the best checkpoint (lowest validation loss when a validation set
    is given, the initial filters included; else the final parameters) and the
    training curve.
    """
    sched = schedule or TrainingSchedule()
    rng = np.random.default_rng(sched.seed)
    if init is None:
        init = LearnedFilters.from_kernel(Kernel2D.delta())
        init = init.with_vector(init.to_vector() + 1e-3 * rng.standard_normal(init.to_vector().size))
    init = replace(init, t_train=sched.t_train)
    curve = TrainingCurve()
    if sched.steps <= 0 or len(training_set) == 0:
        return init, curve

    t_val = sched.t_val or None
    params = init.to_vector()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    best = init
    best_val = np.inf
    stale = 0
    if validation_set is not None and len(validation_set):
        best_val = dl_gamp_loss(init, validation_set, t_val, sched.em)
        curve.val_step.append(0)
        curve.val_loss.append(best_val)

    ckpt_dir = Path(sched.checkpoint_dir) if sched.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for step in range(1, sched.steps + 1):
        idx = rng.choice(len(training_set), size=min(sched.batch_size, len(training_set)), replace=False)
        batch = training_set.subset(np.sort(idx))
        loss_fn = _vector_loss(init, batch, sched)
        grad = fd_gradient(loss_fn, params, sched.fd_step)
        curve.step.append(step)
        curve.train_loss.append(loss_fn(params))

        m = sched.beta1 * m + (1 - sched.beta1) * grad
        v = sched.beta2 * v + (1 - sched.beta2) * grad ** 2
        m_hat = m / (1 - sched.beta1 ** step)
        v_hat = v / (1 - sched.beta2 ** step)
        params = params - sched.lr * m_hat / (np.sqrt(v_hat) + sched.adam_eps)
        params[-1] = max(params[-1], 1e-6)
        current = init.with_vector(params)
        log.info("step %d train loss %.5f", step, curve.train_loss[-1])

        if validation_set is not None and len(validation_set) and step % sched.eval_every == 0:
            val = dl_gamp_loss(current, validation_set, t_val, sched.em)
            curve.val_step.append(step)
            curve.val_loss.append(val)
            log.info("step %d validation loss %.5f", step, val)
            if val < best_val:
                best_val, best, stale = val, current, 0
                curve.best_step = step
                if ckpt_dir:
                    current.save(ckpt_dir / "best.json")
            else:
                stale += 1
                if stale >= sched.patience:
                    curve.stopped_early = True
                    break
        elif validation_set is None or not len(validation_set):
            best = current
            curve.best_step = step
        if ckpt_dir:
            current.save(ckpt_dir / f"step{step:05d}.json")
    return best, curve


def curve_to_json(curve: TrainingCurve) -> dict:
    return asdict(curve)
