"""One entropic proximal step solved as a fixed-point problem over TT iterates.

The cycle maps a terminal potential ``eta`` through four stages: heat
propagation back to the initial time, division into the current density,
heat propagation forward, and the terminal update
``eta_new = (rho_inf / eta_hat)^(1 / (1 + 2 beta))`` — the only stage
that queries the target density.  Both division stages are realized by
cross approximation of the composed index oracles, never densely.
Iteration is plain relaxation (Picard) or Anderson acceleration with a
two-residual window, for which the line search has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cross import CrossConfig, tt_cross
from .grid import Grid, all_quadrature_weights
from .heat import HeatPropagator
from .tt import (TTTensor, tt_axpy, tt_contract_all, tt_eval, tt_inner,
                 tt_marginal, tt_norm, tt_ones, tt_round, tt_scale)

#: hard floor for guarded divisions (spec'd; negatives fall below it too)
DIVISION_FLOOR = 1e-300


class DivisionFloorError(RuntimeError):
    """A denominator lost positivity at a point that carries real mass."""

    def __init__(self, index):
        self.index = tuple(int(i) for i in index)
        super().__init__(
            f"denominator below {DIVISION_FLOOR} at a significant index {self.index}"
        )


@dataclass
class FixedPointConfig:
    tolerance: float = 1e-5
    max_iters: int = 1000
    method: str = "anderson"          # "picard" or "anderson"
    q: float | None = None            # relaxation; defaults 1.0 / 0.85 by method
    window: int = 2                   # Anderson residual window (closed form needs 2)
    trunc_tol: float = 1e-8
    max_rank: int = 10
    cross: CrossConfig | None = None

    def __post_init__(self):
        if self.method not in ("picard", "anderson"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.q is None:
            self.q = 1.0 if self.method == "picard" else 0.85
        if not 0.0 < self.q <= 1.0:
            raise ValueError("relaxation q must be in (0, 1]")
        if self.method == "anderson" and self.window != 2:
            raise ValueError("only the window-2 Anderson variant is implemented")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.cross is None:
            self.cross = CrossConfig(
                max_rank=self.max_rank,
                tolerance=min(1e-6, 0.1 * self.tolerance),
                max_sweeps=6,
            )


@dataclass
class StepState:
    """Converged potentials of one proximal step; everything sampling needs."""

    eta_T: TTTensor
    eta_0: TTTensor
    eta_hat_0: TTTensor
    eta_hat_T: TTTensor
    T: float
    beta: float
    converged: bool
    iters: int
    residual_history: list = field(default_factory=list)


def guarded_ratio(num: np.ndarray, den: np.ndarray, indices: np.ndarray,
                  num_scale: float | None = None) -> np.ndarray:
    """Division with the positivity guard.

    Denominators below the floor (including sign flips from rounding
    noise or a transient over-extrapolated iterate) yield a zero ratio;
    the true fields are nonnegative, so one pass of the cycle restores
    positivity at such points.  Only a systematic breakdown raises: the
    majority of the batch's significant numerator mass (judged against
    ``num_scale``, the density's global magnitude) with dead
    denominators.  Final state quality is separately gated by the mass
    and terminal-identity checks.
    """
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    bad = den < DIVISION_FLOOR
    if np.any(bad):
        scale = num_scale if num_scale else (float(num.max()) if num.size else 0.0)
        significant = num > max(1e-9 * scale, 1e-250)
        sig_mass = num[significant].sum()
        dead_mass = num[bad & significant].sum()
        if sig_mass > 0 and dead_mass > 0.5 * sig_mass:
            row = int(np.nonzero(bad & significant)[0][0])
            raise DivisionFloorError(np.atleast_2d(indices)[row])
    out = num / np.where(bad, 1.0, den)
    out[bad] = 0.0
    return out


def anderson_alpha(r_norm_sq: float, r_old_norm_sq: float, cross: float) -> float:
    """Closed-form minimizer of || a*r + (1-a)*r_old ||^2 over a."""
    diff_sq = r_norm_sq - 2.0 * cross + r_old_norm_sq
    if diff_sq <= 0:
        raise ValueError("residuals are numerically identical")
    return (r_old_norm_sq - cross) / diff_sq


@dataclass
class CycleResult:
    eta_new: TTTensor
    eta_0: TTTensor
    eta_hat_0: TTTensor
    eta_hat_T: TTTensor
    cross_calls: int
    cross_converged: bool


def cycle(eta: TTTensor, rho_prev: TTTensor, rho_inf, grid: Grid, T: float,
          beta: float, cross_cfg: CrossConfig, trunc_tol: float, max_rank: int,
          warm: CycleResult | None = None, rng: np.random.Generator | None = None,
          threads: int = 1, validation: np.ndarray | None = None) -> CycleResult:
    """One pass around the four-stage fixed-point cycle.

    ``rho_inf`` is anything with an ``eval_batch(indices)`` method (the
    cached posterior oracle in production).  ``warm`` carries the
    previous pass, whose tensors seed the cross index sets; a fixed
    ``validation`` set keeps the cross convergence probes cacheable
    across iterations.
    """
    prop = HeatPropagator.build(grid, beta * T)
    eta_0 = prop.apply(eta)

    def initial_oracle(idx):
        return guarded_ratio(tt_eval(rho_prev, idx), tt_eval(eta_0, idx), idx)

    # cold starts seed the pivot sets from the current density so the first
    # sweeps explore index regions that actually carry mass
    eta_hat_0, info1 = tt_cross(
        initial_oracle, grid.shape, cross_cfg,
        initial_guess=rho_prev if warm is None else warm.eta_hat_0,
        rng=rng, threads=threads, validation=validation,
    )
    eta_hat_0 = tt_round(eta_hat_0, trunc_tol, max_rank)
    eta_hat_T = prop.apply(eta_hat_0)

    gamma = 1.0 / (1.0 + 2.0 * beta)

    def terminal_oracle(idx):
        ratio = guarded_ratio(rho_inf.eval_batch(idx), tt_eval(eta_hat_T, idx), idx)
        return ratio**gamma

    eta_new, info2 = tt_cross(
        terminal_oracle, grid.shape, cross_cfg,
        initial_guess=eta_hat_T if warm is None else warm.eta_new,
        rng=rng, threads=threads, validation=validation,
    )
    eta_new = tt_round(eta_new, trunc_tol, max_rank)
    return CycleResult(
        eta_new=eta_new, eta_0=eta_0, eta_hat_0=eta_hat_0, eta_hat_T=eta_hat_T,
        cross_calls=info1.n_calls + info2.n_calls,
        cross_converged=info1.converged and info2.converged,
    )


def solve_step(rho_prev: TTTensor, rho_inf, grid: Grid, T: float, beta: float,
               config: FixedPointConfig, eta_init: TTTensor | None = None,
               rng: np.random.Generator | None = None, telemetry=None,
               threads: int = 1) -> StepState:
    """Iterate the cycle to the fixed point of one proximal step.

    Residuals are relative Frobenius norms computed by TT inner
    products.  ``telemetry``, when given, receives one dict per
    iteration.  Non-convergence within ``max_iters`` returns a state
    flagged ``converged=False``.
    """
    if T <= 0 or beta <= 0:
        raise ValueError("step size T and regularization beta must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    x = eta_init if eta_init is not None else tt_ones(grid.shape)
    anderson = config.method == "anderson"
    q = config.q

    # one validation set per solve so cross probes hit the density cache
    n_val = int(min(
        config.cross.validation_size,
        4 * grid.d * max(grid.shape) * config.cross.max_rank**2,
        np.prod([float(m) for m in grid.shape]),
    ))
    validation = np.stack(
        [rng.integers(0, grid.shape[k], size=n_val) for k in range(grid.d)], axis=1
    ).astype(np.intp)

    history: list[float] = []
    converged = False
    prev = None          # (x, g, r, r_norm_sq) from the previous iteration
    result = None
    last_finite = None
    iters = 0

    for m in range(config.max_iters):
        result = cycle(
            x, rho_prev, rho_inf, grid, T, beta, config.cross,
            config.trunc_tol, config.max_rank, warm=result, rng=rng,
            threads=threads, validation=validation,
        )
        g = result.eta_new
        with np.errstate(over="ignore", invalid="ignore"):
            r = tt_axpy(-1.0, x, g)                 # residual g - x
            r_norm_sq = max(tt_inner(r, r), 0.0)
            x_norm = tt_norm(x)
        residual = np.sqrt(r_norm_sq) / x_norm if x_norm > 0 else np.inf
        history.append(residual)
        iters = m + 1
        if telemetry is not None:
            telemetry({
                "iter": iters, "residual": residual, "ranks": list(g.ranks),
                "unique_calls": getattr(rho_inf, "unique_calls", None),
                "total_calls": getattr(rho_inf, "total_calls", None),
            })
        if not np.isfinite(residual):
            # iterate left the representable range: report the last usable pass
            result = last_finite if last_finite is not None else result
            break
        last_finite = result
        if residual < config.tolerance:
            converged = True
            break

        x_next = None
        # extrapolate unless the residual genuinely grew; reject candidates
        # the extrapolation drove grossly negative (the true iterates are
        # nonnegative) and fall back to the plain relaxed step
        if anderson and prev is not None and r_norm_sq <= 1.5 * prev[3]:
            x_old, g_old, r_old, r_old_sq = prev
            cross_rr = tt_inner(r_old, r)
            diff_sq = r_norm_sq - 2.0 * cross_rr + r_old_sq
            if diff_sq > (1e-14**2) * r_norm_sq and diff_sq > 0:
                alpha = anderson_alpha(r_norm_sq, r_old_sq, cross_rr)
                g_mix = tt_axpy(alpha, g, tt_scale(g_old, 1.0 - alpha))
                x_mix = tt_axpy(alpha, x, tt_scale(x_old, 1.0 - alpha))
                cand = tt_axpy(q, g_mix, tt_scale(x_mix, 1.0 - q))
                probe = tt_eval(cand, validation)
                if probe.min() >= -0.03 * np.max(np.abs(probe)):
                    x_next = cand
        if x_next is None:
            x_next = tt_axpy(q, g, tt_scale(x, 1.0 - q))
        prev = (x, g, r, r_norm_sq)
        x = tt_round(x_next, config.trunc_tol, config.max_rank)

    return StepState(
        eta_T=result.eta_new, eta_0=result.eta_0, eta_hat_0=result.eta_hat_0,
        eta_hat_T=result.eta_hat_T, T=float(T), beta=float(beta),
        converged=converged, iters=iters, residual_history=history,
    )


def certificate_indices(rho_tt: TTTensor, grid: Grid, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Random grid indices drawn from the product of per-axis marginals.

    Used to spot-check pointwise identities where the model carries
    mass; uniform indices in high dimension land almost surely in
    regions of negligible density.
    """
    weights = all_quadrature_weights(grid)
    idx = np.empty((n, grid.d), dtype=np.intp)
    for k in range(grid.d):
        marg = tt_marginal(rho_tt, [k], weights)
        p = np.maximum(marg.cores[0][0, :, 0], 0.0)
        total = p.sum()
        p = np.full(p.size, 1.0 / p.size) if total <= 0 else p / total
        idx[:, k] = rng.choice(p.size, size=n, p=p)
    return idx


def terminal_identity_error(state: StepState, rho_inf, indices: np.ndarray) -> float:
    """Max relative error of ``eta_T^(1+2 beta) * eta_hat_T = rho_inf``."""
    lhs = tt_eval(state.eta_T, indices) ** (1.0 + 2.0 * state.beta)
    lhs = lhs * tt_eval(state.eta_hat_T, indices)
    rhs = rho_inf.eval_batch(indices)
    ref = np.maximum(np.abs(rhs), np.finfo(float).tiny)
    return float(np.max(np.abs(lhs - rhs) / ref))


def step_mass(state: StepState, grid: Grid) -> float:
    """Quadrature mass of the implied next density eta_T * eta_hat_T.

    Cheap surrogate using the rank-product tensor; the driver builds the
    properly rounded product density via cross.
    """
    cores = []
    for a, b in zip(state.eta_T.cores, state.eta_hat_T.cores):
        r1a, n, r2a = a.shape
        r1b, _, r2b = b.shape
        prod = np.einsum("anb,cnd->acnbd", a, b, optimize=True)
        cores.append(prod.reshape(r1a * r1b, n, r2a * r2b))
    dens = TTTensor(cores, copy=False)
    return tt_contract_all(dens, all_quadrature_weights(grid))
