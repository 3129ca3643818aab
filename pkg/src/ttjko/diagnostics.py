"""Sample-quality metrics, posterior interval statistics and the MCMC baseline.

The Sinkhorn divergence here is the debiased entropic transport cost
between uniform empirical measures, solved in the log domain; the
"double OT" statistic compares the *distributions* of divergence values
across repeated samples by exact one-dimensional transport, which
separates genuine model error from the finite-sample noise floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# entropic OT / Sinkhorn divergence


@dataclass
class SinkhornConfig:
    epsilon: float | None = None     # None: 0.01 * median pairwise sq. distance
    max_iters: int = 300
    threshold: float = 1e-5          # sup-norm change of the dual potentials

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class SinkhornResult:
    value: float
    epsilon: float
    converged: bool


def median_sq_distance(x: np.ndarray, y: np.ndarray | None = None,
                       cap: int = 512, seed: int = 0) -> float:
    pool = x if y is None else np.concatenate([x, y], axis=0)
    if pool.shape[0] > cap:
        rng = np.random.default_rng(seed)
        pool = pool[rng.choice(pool.shape[0], size=cap, replace=False)]
    sq = _sq_dists(pool, pool)
    off = sq[~np.eye(sq.shape[0], dtype=bool)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


def default_epsilon(x: np.ndarray, y: np.ndarray) -> float:
    return 0.01 * median_sq_distance(x, y)


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x**2).sum(axis=1)[:, None]
    yy = (y**2).sum(axis=1)[None, :]
    return np.maximum(xx + yy - 2.0 * x @ y.T, 0.0)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def entropic_ot(x: np.ndarray, y: np.ndarray, epsilon: float,
                max_iters: int = 2000, threshold: float = 1e-6):
    """Entropic transport cost between uniform empirical measures.

    Returns the primal objective (quadratic cost plus epsilon times the
    KL of the plan to the product measure) and a convergence flag.
    Log-domain iterations with epsilon annealing, so small epsilon is
    both safe and affordable.
    """
    # canonical argument order: the cost is symmetric, but the alternating
    # dual updates are not at finite convergence, so fix the roles by content
    swap = (y.shape[0], y.tobytes()) < (x.shape[0], x.tobytes())
    if swap:
        x, y = y, x
    n, m = x.shape[0], y.shape[0]
    c = _sq_dists(x, y)
    log_mu = -np.log(n)
    log_nu = -np.log(m)
    f = np.zeros(n)
    g = np.zeros(m)

    def update(eps):
        nonlocal f, g
        f_new = -eps * (_logsumexp((g[None, :] - c) / eps + log_nu, axis=1))
        g_new = -eps * (_logsumexp((f_new[:, None] - c) / eps + log_mu, axis=0))
        delta = max(np.max(np.abs(f_new - f)), np.max(np.abs(g_new - g)))
        f, g = f_new, g_new
        return delta

    # annealed regularization: a couple of updates per level keeps the duals
    # warm all the way down, then polish at the target epsilon
    start = max(float(np.median(c)), epsilon)
    n_levels = max(int(np.ceil(np.log(start / epsilon) / np.log(1.0 / 0.7))), 0)
    used = 0
    for eps in start * 0.7 ** np.arange(n_levels):
        for _ in range(2):
            update(eps)
            used += 1
    converged = False
    while used < max_iters:
        used += 1
        if update(epsilon) < threshold:
            converged = True
            break
    log_pi = (f[:, None] + g[None, :] - c) / epsilon + log_mu + log_nu
    pi = np.exp(log_pi)
    cost = float((pi * c).sum())
    kl = float((pi * (log_pi - log_mu - log_nu)).sum())
    return cost + epsilon * kl, converged


def sinkhorn_divergence(x: np.ndarray, y: np.ndarray,
                        config: SinkhornConfig | None = None) -> SinkhornResult:
    """Debiased entropic OT: S2 = OT(x, y) - (OT(x, x) + OT(y, y)) / 2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("both samples must be nonempty")
    if x.shape[1] != y.shape[1]:
        raise ValueError("samples must share the dimension")
    if config is None:
        config = SinkhornConfig()
    eps = config.epsilon if config.epsilon is not None else default_epsilon(x, y)
    v_xy, c1 = entropic_ot(x, y, eps, config.max_iters, config.threshold)
    v_xx, c2 = entropic_ot(x, x, eps, config.max_iters, config.threshold)
    v_yy, c3 = entropic_ot(y, y, eps, config.max_iters, config.threshold)
    return SinkhornResult(
        value=v_xy - 0.5 * (v_xx + v_yy), epsilon=eps,
        converged=bool(c1 and c2 and c3),
    )


# ---------------------------------------------------------------------------
# sliced Wasserstein


def wasserstein_1d_sq(a: np.ndarray, b: np.ndarray) -> float:
    """Exact squared 2-Wasserstein distance between 1-d empirical measures
    (quantile-function formula, arbitrary sizes)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    qs = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    qs = np.concatenate([[0.0], qs, [1.0]])
    mids = 0.5 * (qs[:-1] + qs[1:])
    ia = np.minimum((mids * n).astype(int), n - 1)
    ib = np.minimum((mids * m).astype(int), m - 1)
    return float(np.sum((qs[1:] - qs[:-1]) * (a[ia] - b[ib]) ** 2))


def sliced_wasserstein(x: np.ndarray, y: np.ndarray, n_projections: int,
                       rng: np.random.Generator) -> float:
    """Sup-estimator over random directions of the projected 1-d W2^2."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    if n_projections < 1:
        raise ValueError("need at least one projection")
    d = x.shape[1]
    if d == 1:
        return wasserstein_1d_sq(x[:, 0], y[:, 0])
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    best = 0.0
    for theta in dirs:
        best = max(best, wasserstein_1d_sq(x @ theta, y @ theta))
    return best


# ---------------------------------------------------------------------------
# double-OT comparison protocol


@dataclass
class PairStats:
    mean: float
    std: float
    values: np.ndarray


@dataclass
class DoubleOTReport:
    epsilon: float
    within_ref: PairStats
    to_ref: dict = field(default_factory=dict)       # label -> PairStats
    double_ot: dict = field(default_factory=dict)    # label -> float

    def to_dict(self) -> dict:
        out = {
            "epsilon": self.epsilon,
            "ref_to_ref": {"mean": self.within_ref.mean, "std": self.within_ref.std},
        }
        for label, stats in self.to_ref.items():
            out[f"ref_to_{label}"] = {"mean": stats.mean, "std": stats.std}
        out["double_ot"] = dict(self.double_ot)
        return out


def double_ot_protocol(groups: dict, config: SinkhornConfig | None = None,
                       ref_label: str = "ref") -> DoubleOTReport:
    """Pairwise Sinkhorn divergences within/between labeled sample groups.

    All pairs share one epsilon (from the pooled scale) so values are
    comparable.  The scalar per method label is the exact 1-d OT
    distance between the ref-ref and ref-method divergence-value
    distributions.
    """
    if ref_label not in groups:
        raise ValueError(f"missing reference label {ref_label!r}")
    for label, samples in groups.items():
        if len(samples) < 2:
            raise ValueError(f"need at least 2 samples per label, {label!r} has {len(samples)}")
    if config is None:
        config = SinkhornConfig()
    eps = config.epsilon
    if eps is None:
        pool = np.concatenate([groups[lab][0] for lab in sorted(groups)], axis=0)
        eps = 0.01 * median_sq_distance(pool)
    shared = SinkhornConfig(epsilon=eps, max_iters=config.max_iters,
                            threshold=config.threshold)

    refs = groups[ref_label]
    self_cost: dict = {}

    def self_term(sample):
        key = id(sample)
        if key not in self_cost:
            self_cost[key] = entropic_ot(sample, sample, eps, shared.max_iters,
                                         shared.threshold)[0]
        return self_cost[key]

    def s2(a, b):
        cross = entropic_ot(a, b, eps, shared.max_iters, shared.threshold)[0]
        return cross - 0.5 * (self_term(a) + self_term(b))

    ref_vals = np.array([
        s2(refs[i], refs[j])
        for i in range(len(refs)) for j in range(i + 1, len(refs))
    ])
    report = DoubleOTReport(
        epsilon=eps,
        within_ref=PairStats(float(ref_vals.mean()), float(ref_vals.std()), ref_vals),
    )
    for label in sorted(groups):
        if label == ref_label:
            continue
        vals = np.array([s2(r, s) for r in refs for s in groups[label]])
        report.to_ref[label] = PairStats(float(vals.mean()), float(vals.std()), vals)
        report.double_ot[label] = wasserstein_1d_sq(ref_vals, vals)
    return report


# ---------------------------------------------------------------------------
# MAP and highest-density interval


def map_and_hdi(density: np.ndarray, nodes: np.ndarray, mass: float = 0.89):
    """MAP node and the shortest contiguous node interval holding ``mass``.

    Interval masses are subinterval trapezoid sums; ties resolve to the
    leftmost interval.  Returns ``(map_value, (lo, hi))``.
    """
    rho = np.asarray(density, dtype=float)
    x = np.asarray(nodes, dtype=float)
    if rho.ndim != 1 or rho.shape != x.shape:
        raise ValueError("density and nodes must be matching 1-d arrays")
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    h = x[1] - x[0]
    total = np.trapezoid(rho, dx=h)
    if total <= 0:
        raise ValueError("density has zero mass")
    target = mass * total
    csum = np.concatenate([[0.0], np.cumsum(rho)])

    def interval_mass(i, j):
        return h * (csum[j + 1] - csum[i] - 0.5 * rho[i] - 0.5 * rho[j])

    n = rho.size
    map_idx = int(np.argmax(rho))
    best = None
    j = 0
    for i in range(n):
        j = max(j, i)
        while j < n - 1 and interval_mass(i, j) < target:
            j += 1
        if interval_mass(i, j) >= target:
            width = x[j] - x[i]
            if best is None or width < best[0] - 1e-15 * max(abs(width), 1.0):
                best = (width, i, j)
        else:
            break
    if best is None:
        best = (x[-1] - x[0], 0, n - 1)
    _, lo, hi = best
    return float(x[map_idx]), (float(x[lo]), float(x[hi]))


# ---------------------------------------------------------------------------
# Metropolis-Hastings baseline


@dataclass
class MHConfig:
    n_chains: int = 400
    n_steps: int = 10000
    proposal_std: float = 0.5
    burn_in: float = 0.3
    thin: int = 1
    init_std: float = 1.0
    auto_tune: bool = False
    acceptance_band: tuple = (0.2, 0.3)

    def __post_init__(self):
        if self.proposal_std <= 0:
            raise ValueError("proposal_std must be positive")
        if self.n_chains < 1:
            raise ValueError("need at least one chain")


@dataclass
class MHResult:
    chains: np.ndarray            # (n_chains, n_kept, d) thinned, post burn-in
    acceptance_rate: float
    tau: float                    # integrated autocorrelation time, unthinned units
    n_calls: int                  # posterior evaluations: n_chains * n_steps
    proposal_std: float
    thin: int = 1

    def states(self, n_states: int, spacing_steps: float) -> list:
        """Last ``n_states`` ensemble snapshots, at least ``spacing_steps``
        unthinned steps apart."""
        kept = self.chains.shape[1]
        stride = max(int(np.ceil(spacing_steps / self.thin)), 1)
        idx = kept - 1 - stride * np.arange(n_states)
        if np.any(idx < 0):
            raise ValueError("chain too short for the requested spacing")
        return [self.chains[:, int(i), :] for i in idx[::-1]]


def integrated_autocorr(traces: np.ndarray, c: float = 5.0) -> float:
    """Self-consistent windowed autocorrelation time of (n_chains, n_steps)."""
    traces = np.atleast_2d(traces)
    n = traces.shape[1]
    centered = traces - traces.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, n=size, axis=1)
    acf = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n].real
    acf = acf.mean(axis=0)
    if acf[0] <= 0:
        return 1.0
    rho = acf / acf[0]
    tau = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(n) < c * tau
    m = int(np.argmin(window)) if not window.all() else n - 1
    return float(max(tau[m], 1.0))


def metropolis_hastings(density, d: int, config: MHConfig,
                        rng: np.random.Generator,
                        log_density=None) -> MHResult:
    """Random-walk MH with isotropic Gaussian proposals, vectorized over chains.

    ``density`` must be finite on the support of the proposals; a
    ``log_density`` override avoids underflow for concentrated targets.
    The reported call count follows the budget convention of one call
    per proposal (n_chains * n_steps).
    """
    if log_density is None:
        def log_density(x):
            with np.errstate(divide="ignore"):
                return np.log(np.asarray(density(x), dtype=float))

    cfg = config
    if cfg.auto_tune:
        cfg = _tune_proposal(density, d, cfg, rng, log_density)

    x = cfg.init_std * rng.standard_normal((cfg.n_chains, d))
    logp = np.asarray(log_density(x), dtype=float)
    if np.all(np.isneginf(logp)):
        raise ValueError("target density is zero at every initial point")
    keep_from = int(cfg.burn_in * cfg.n_steps)
    kept = []
    accepted = 0
    for step in range(cfg.n_steps):
        prop = x + cfg.proposal_std * rng.standard_normal((cfg.n_chains, d))
        logp_prop = np.asarray(log_density(prop), dtype=float)
        logu = np.log(rng.uniform(size=cfg.n_chains))
        accept = logu < (logp_prop - logp)
        x = np.where(accept[:, None], prop, x)
        logp = np.where(accept, logp_prop, logp)
        accepted += int(accept.sum())
        if step >= keep_from and (step - keep_from) % cfg.thin == 0:
            kept.append(x.copy())
    chains = np.stack(kept, axis=1)
    # tau from the thinned trace, rescaled to unthinned step units
    taus = [cfg.thin * integrated_autocorr(chains[:, :, j]) for j in range(d)]
    return MHResult(
        chains=chains,
        acceptance_rate=accepted / (cfg.n_chains * cfg.n_steps),
        tau=float(max(taus)),
        n_calls=cfg.n_chains * cfg.n_steps,
        proposal_std=cfg.proposal_std,
        thin=cfg.thin,
    )


def _tune_proposal(density, d: int, config: MHConfig, rng: np.random.Generator,
                   log_density) -> MHConfig:
    """Bisect the proposal scale until pilot acceptance lands in the band."""
    lo_band, hi_band = config.acceptance_band
    std = config.proposal_std
    lo, hi = None, None
    pilot = MHConfig(
        n_chains=min(config.n_chains, 64), n_steps=200, proposal_std=std,
        burn_in=0.0, init_std=config.init_std,
    )
    for _ in range(24):
        pilot.proposal_std = std
        res = metropolis_hastings(density, d, pilot, rng, log_density=log_density)
        rate = res.acceptance_rate
        if lo_band <= rate <= hi_band:
            break
        if rate > hi_band:      # too timid, enlarge steps
            lo = std
            std = std * 2.0 if hi is None else 0.5 * (std + hi)
        else:
            hi = std
            std = std * 0.5 if lo is None else 0.5 * (std + lo)
    out = MHConfig(**{**config.__dict__, "proposal_std": std, "auto_tune": False})
    return out
