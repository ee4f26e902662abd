"""Scenario simulation of the two-scale system under admissible volatility controls.

A control policy selects a measurable volatility density gamma_t inside the
generator's uncertainty band.  Each policy induces one classical probability
under which the driving noise is Brownian with variance rate gamma_t and the
quadratic-variation channel accrues at gamma_t * dt, so Euler-Maruyama reads

    X_slow += (b_tilde + h_tilde * gamma) dt       + sigma_tilde  * sqrt(gamma dt)       * xi
    X_fast += (b_bar   + h_bar   * gamma) dt / eps + sigma_bar    * sqrt(gamma dt / eps) * xi

with one shared standard normal xi per step (a single driving noise).  Sample
means under any policy are lower bounds on the robust expectation; they never
prove a two-sided statement.

Each path owns a counter-based Philox stream keyed by (seed, path index), so
batches are bitwise reproducible regardless of how work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import coeffx
from .errors import ConfigError, GuardError

_CHUNK = 256


# --------------------------------------------------------------------------
# Policies
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlPolicy:
    """Volatility scenario: constant, piecewise-constant in time, or bang-bang
    on the sign of a state functional."""

    kind: str  # 'constant' | 'schedule' | 'bang_bang'
    value: float = 0.0
    schedule: tuple = ()  # ((t0, v0), (t1, v1), ...) with increasing t
    functional: object = None  # Expr over (x1, y1) for bang-bang

    def __post_init__(self):
        if self.kind not in ("constant", "schedule", "bang_bang"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "schedule":
            ts = [t for t, _ in self.schedule]
            if not self.schedule or ts != sorted(ts):
                raise ConfigError("schedule must be nonempty with increasing times")
        if self.kind == "bang_bang" and self.functional is None:
            raise ConfigError("bang-bang policy needs a functional expression")

    def validate_range(self, lo: float, hi: float):
        vals = []
        if self.kind == "constant":
            vals = [self.value]
        elif self.kind == "schedule":
            vals = [v for _, v in self.schedule]
        for v in vals:
            if not (lo - 1e-12 <= v <= hi + 1e-12):
                raise GuardError(
                    f"policy value {v} outside the uncertainty band [{lo}, {hi}]"
                )

    def state_dependent(self) -> bool:
        return self.kind == "bang_bang"

    def gamma(self, t: float, xs: np.ndarray, xf: np.ndarray, lo: float, hi: float):
        if self.kind == "constant":
            return self.value
        if self.kind == "schedule":
            val = self.schedule[0][1]
            for t0, v in self.schedule:
                if t >= t0 - 1e-15:
                    val = v
            return val
        f = coeffx.eval_expr(self.functional, x=(xs,), y=(xf,))
        return np.where(np.asarray(f) > 0.0, hi, lo)


def constant_policy(value: float) -> ControlPolicy:
    return ControlPolicy("constant", value=float(value))


# --------------------------------------------------------------------------
# Counter-based path streams
# --------------------------------------------------------------------------

class PathStreams:
    """One Philox stream per path, keyed by (seed, path index)."""

    def __init__(self, seed: int, n_paths: int):
        if not (0 <= seed < 2 ** 64):
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        self._gens = [
            np.random.Generator(np.random.Philox(key=[seed, i]))
            for i in range(n_paths)
        ]

    def normals(self, n: int) -> np.ndarray:
        out = np.empty((len(self._gens), n))
        for i, g in enumerate(self._gens):
            out[i] = g.standard_normal(n)
        return out


# --------------------------------------------------------------------------
# Batches
# --------------------------------------------------------------------------

@dataclass
class ScenarioBatch:
    system: coeffx.TwoScaleSystem
    policy: ControlPolicy
    n_paths: int
    dt_sim: float
    horizon: float
    seed: int
    x0: tuple
    times: np.ndarray  # stored times
    slow: np.ndarray  # (n_paths, n_stored)
    fast: np.ndarray  # (n_paths, n_stored)
    rng_streams: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rng_streams is None:
            self.rng_streams = np.arange(self.n_paths, dtype=np.uint64)


@dataclass
class FrozenBatch:
    base: ScenarioBatch
    delta_m: float
    block_steps: int
    rho_m: float
    c_guess: float
    gap_times: np.ndarray
    gap_mean_sq: np.ndarray  # mean over paths of |fast - frozen fast|^2 per time
    gap_sup: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.gap_sup <= self.bound


def khasminskii_delta(eps: float) -> float:
    """Block length eps * (ln(1/eps))^(1/4) for the frozen-coefficient process."""
    if not (0.0 < eps < 1.0):
        raise ConfigError(f"epsilon must lie in (0, 1), got {eps}")
    return eps * math.log(1.0 / eps) ** 0.25


def _stiffness_guard(sys: coeffx.TwoScaleSystem, dt_sim: float):
    limit = sys.epsilon / (10.0 * sys.lip_claimed)
    if dt_sim > limit * (1.0 + 1e-12):
        raise GuardError(
            f"dt_sim={dt_sim:g} violates the stiffness guard eps/(10*L) = {limit:g}"
        )


def _store_indices(nsteps: int, store_every: int) -> np.ndarray:
    idx = list(range(0, nsteps + 1, store_every))
    if idx[-1] != nsteps:
        idx.append(nsteps)
    return np.asarray(idx, dtype=int)


def simulate(sys: coeffx.TwoScaleSystem, policy: ControlPolicy, n_paths: int,
             dt_sim: float, horizon: float, seed: int, x0=(0.0, 0.0),
             store_every: int | None = None) -> ScenarioBatch:
    """Euler-Maruyama for the coupled system under one volatility scenario."""
    if n_paths < 1 or dt_sim <= 0 or horizon <= 0:
        raise ConfigError("need n_paths >= 1, dt_sim > 0, horizon > 0")
    lo, hi = sys.g.scalar_bounds
    policy.validate_range(lo, hi)
    _stiffness_guard(sys, dt_sim)
    nsteps = max(1, int(round(horizon / dt_sim)))
    dt = horizon / nsteps
    store_every = store_every or max(1, nsteps // 200)
    store_idx = _store_indices(nsteps, store_every)
    store_set = {int(k): j for j, k in enumerate(store_idx)}

    xs = np.full(n_paths, float(x0[0]))
    xf = np.full(n_paths, float(x0[1]))
    slow = np.empty((n_paths, len(store_idx)))
    fast = np.empty((n_paths, len(store_idx)))
    slow[:, 0] = xs
    fast[:, 0] = xf

    dt_fast = dt / sys.epsilon
    streams = PathStreams(seed, n_paths)
    ev = coeffx.eval_field
    k = 0
    while k < nsteps:
        n = min(_CHUNK, nsteps - k)
        z = streams.normals(n)
        for j in range(n):
            t = k * dt
            gam = policy.gamma(t, xs, xf, lo, hi)
            xi = z[:, j]
            bt = ev(sys.b_tilde, xs, xf)
            ht = ev(sys.h_tilde, xs, xf)
            st = ev(sys.sigma_tilde, xs, xf)
            bb = ev(sys.b_bar, xs, xf)
            hb = ev(sys.h_bar, xs, xf)
            sb = ev(sys.sigma_bar, xs, xf)
            xs = xs + (bt + ht * gam) * dt + st * np.sqrt(gam * dt) * xi
            xf = xf + (bb + hb * gam) * dt_fast + sb * np.sqrt(gam * dt_fast) * xi
            k += 1
            if k in store_set:
                if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(xf))):
                    bad = int(np.argwhere(~(np.isfinite(xs) & np.isfinite(xf)))[0])
                    raise GuardError(f"non-finite state on path {bad} at step {k}")
                slow[:, store_set[k]] = xs
                fast[:, store_set[k]] = xf

    return ScenarioBatch(system=sys, policy=policy, n_paths=n_paths, dt_sim=dt,
                         horizon=horizon, seed=seed, x0=(float(x0[0]), float(x0[1])),
                         times=store_idx * dt, slow=slow, fast=fast)


# --------------------------------------------------------------------------
# Frozen-fast auxiliary simulation (slow argument held fixed).  Several copies
# per path share one noise stream, which is what couples the contraction test.
# --------------------------------------------------------------------------

def _frozen_core(sys, x_tilde, states0, policy, dt, nsteps, seed, eps, store_idx):
    lo, hi = sys.g.scalar_bounds
    store_set = {int(k): j for j, k in enumerate(store_idx)}
    states = [s.copy() for s in states0]
    n_paths = states[0].shape[0]
    stored = [np.empty((n_paths, len(store_idx))) for _ in states]
    if 0 in store_set:
        for arr, s in zip(stored, states):
            arr[:, store_set[0]] = s
    dt_fast = dt / eps
    xgrid = np.full(n_paths, float(x_tilde))
    streams = PathStreams(seed, n_paths)
    ev = coeffx.eval_field
    k = 0
    while k < nsteps:
        n = min(_CHUNK, nsteps - k)
        z = streams.normals(n)
        for j in range(n):
            t = k * dt
            gam = policy.gamma(t, xgrid, states[0], lo, hi)
            xi = z[:, j]
            for idx in range(len(states)):
                s = states[idx]
                bb = ev(sys.b_bar, xgrid, s)
                hb = ev(sys.h_bar, xgrid, s)
                sb = ev(sys.sigma_bar, xgrid, s)
                states[idx] = s + (bb + hb * gam) * dt_fast + sb * np.sqrt(gam * dt_fast) * xi
            k += 1
            if k in store_set:
                for arr, s in zip(stored, states):
                    arr[:, store_set[k]] = s
    return stored


# --------------------------------------------------------------------------
# Contraction test (coupled fast copies, shared noise)
# --------------------------------------------------------------------------

@dataclass
class ContractionRow:
    t: float
    mean_sq_gap: float
    bound: float
    stderr: float

    @property
    def passed(self) -> bool:
        return self.mean_sq_gap <= self.bound


@dataclass
class ContractionReport:
    rows: list
    eta: float
    gap0_sq: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def contraction_test(sys: coeffx.TwoScaleSystem, policy: ControlPolicy,
                     xbar_a: float, xbar_b: float, t_checks, n_paths: int,
                     seed: int, x_tilde: float = 0.0, dt_sim: float = 1e-3,
                     euler_tol: float = 1e-3) -> ContractionReport:
    """Couple two frozen-fast copies on shared noise and compare the sample
    mean-square gap with the exponential dissipation envelope."""
    if policy.state_dependent():
        raise GuardError("the coupled contraction test needs a state-independent policy")
    policy.validate_range(*sys.g.scalar_bounds)
    t_checks = sorted(float(t) for t in t_checks)
    if not t_checks or t_checks[0] < 0:
        raise ConfigError("t_checks must be nonempty and nonnegative")
    horizon = t_checks[-1] if t_checks[-1] > 0 else dt_sim
    nsteps = max(1, int(round(horizon / dt_sim)))
    dt = horizon / nsteps
    store_idx = np.unique(
        np.clip(np.round(np.asarray(t_checks) / dt).astype(int), 0, nsteps)
    )
    a0 = np.full(n_paths, float(xbar_a))
    b0 = np.full(n_paths, float(xbar_b))
    stored = _frozen_core(sys, x_tilde, [a0, b0], policy, dt, nsteps, seed, 1.0,
                          store_idx)
    gap0_sq = (xbar_a - xbar_b) ** 2
    rows = []
    for j, k in enumerate(store_idx):
        t = k * dt
        gap_sq = (stored[0][:, j] - stored[1][:, j]) ** 2
        mean = float(gap_sq.mean())
        se = float(gap_sq.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
        envelope = math.exp(-2.0 * sys.eta_claimed * t) * gap0_sq
        bound = envelope * (1.0 + euler_tol) + 3.0 * se + 1e-15
        rows.append(ContractionRow(t=t, mean_sq_gap=mean, bound=bound, stderr=se))
    return ContractionReport(rows=rows, eta=sys.eta_claimed, gap0_sq=gap0_sq)


# --------------------------------------------------------------------------
# Block-frozen re-integration and its error gate
# --------------------------------------------------------------------------

def khasminskii_freeze(batch: ScenarioBatch, mc_tol: float = 0.5) -> FrozenBatch:
    """Re-integrate the fast equation on blocks of length delta_m with the slow
    argument frozen at the block start, reusing the batch's noise, and compare
    against the true fast path."""
    sys = batch.system
    eps = sys.epsilon
    delta_m = khasminskii_delta(eps)
    if batch.horizon < delta_m:
        raise ConfigError(
            f"batch horizon {batch.horizon:g} shorter than the block length "
            f"{delta_m:g}"
        )
    dt = batch.dt_sim
    nsteps = int(round(batch.horizon / dt))
    block_steps = max(1, int(round(delta_m / dt)))
    lo, hi = sys.g.scalar_bounds
    policy = batch.policy

    xs = np.full(batch.n_paths, batch.x0[0])
    xf = np.full(batch.n_paths, batch.x0[1])
    xd = xf.copy()
    x_frozen = xs.copy()
    store_idx = _store_indices(nsteps, max(1, nsteps // 200))
    store_set = {int(k): j for j, k in enumerate(store_idx)}
    gaps = np.zeros(len(store_idx))

    dt_fast = dt / eps
    streams = PathStreams(batch.seed, batch.n_paths)
    ev = coeffx.eval_field
    k = 0
    while k < nsteps:
        n = min(_CHUNK, nsteps - k)
        z = streams.normals(n)
        for j in range(n):
            if k % block_steps == 0:
                x_frozen = xs.copy()
                xd = xf.copy()
            t = k * dt
            gam = policy.gamma(t, xs, xf, lo, hi)
            xi = z[:, j]
            bt = ev(sys.b_tilde, xs, xf)
            ht = ev(sys.h_tilde, xs, xf)
            st = ev(sys.sigma_tilde, xs, xf)
            bb = ev(sys.b_bar, xs, xf)
            hb = ev(sys.h_bar, xs, xf)
            sb = ev(sys.sigma_bar, xs, xf)
            bbd = ev(sys.b_bar, x_frozen, xd)
            hbd = ev(sys.h_bar, x_frozen, xd)
            sbd = ev(sys.sigma_bar, x_frozen, xd)
            xs = xs + (bt + ht * gam) * dt + st * np.sqrt(gam * dt) * xi
            xf = xf + (bb + hb * gam) * dt_fast + sb * np.sqrt(gam * dt_fast) * xi
            xd = xd + (bbd + hbd * gam) * dt_fast + sbd * np.sqrt(gam * dt_fast) * xi
            k += 1
            if k in store_set:
                gaps[store_set[k]] = float(np.mean((xf - xd) ** 2))

    c_guess = 4.0 * sys.lip_claimed * max(1.0, sys.growth_claimed)
    rate = c_guess * (delta_m / eps ** 2 + 1.0 / eps)
    rho_m = rate * delta_m ** 2 * math.exp(rate * delta_m)
    bound = (1.0 + batch.x0[0] ** 2) * rho_m * (1.0 + mc_tol)
    return FrozenBatch(base=batch, delta_m=delta_m, block_steps=block_steps,
                       rho_m=rho_m, c_guess=c_guess, gap_times=store_idx * dt,
                       gap_mean_sq=gaps, gap_sup=float(gaps.max()), bound=bound)


# --------------------------------------------------------------------------
# Moment probes and the time-rescaling spot check
# --------------------------------------------------------------------------

@dataclass
class MomentRow:
    eps: float
    policy_kind: str
    sup_slow_sq: float
    sup_fast_sq: float
    holder_quotient: float


@dataclass
class MomentReport:
    rows: list
    uniform_factor: float  # max/min of each statistic across the ladder, worst case
    rescale_gap: float  # worst relative stat gap in the time-rescaling check

    def passed(self, factor: float = 2.0, rescale_tol: float = 0.05) -> bool:
        return self.uniform_factor <= factor and self.rescale_gap <= rescale_tol


def moment_probe(sys: coeffx.TwoScaleSystem, policies, n_paths: int,
                 horizon: float, seed: int, eps_ladder=None,
                 x0=(0.5, 1.0), dt_rule=None) -> MomentReport:
    """Second-moment and Hoelder statistics across policies and the scale
    ladder; the bounding constants are scale-free, so the estimates must stay
    within a uniform band."""
    ladder = [float(e) for e in (eps_ladder or [sys.epsilon])]
    rows = []
    stats = {"slow": [], "fast": [], "holder": []}
    for eps in ladder:
        sys_eps = sys.with_epsilon(eps)
        dt = dt_rule(eps) if dt_rule else eps / (10.0 * sys.lip_claimed) / 2.0
        for policy in policies:
            batch = simulate(sys_eps, policy, n_paths, dt, horizon, seed, x0=x0)
            slow_sq = np.mean(batch.slow ** 2, axis=0)
            fast_sq = np.mean(batch.fast ** 2, axis=0)
            ts = batch.times
            quot = 0.0
            for i in range(len(ts) - 1):
                d = np.mean((batch.slow[:, i + 1:] - batch.slow[:, i:i + 1]) ** 2, axis=0)
                quot = max(quot, float(np.max(d / (ts[i + 1:] - ts[i]))))
            rows.append(MomentRow(eps=eps, policy_kind=policy.kind,
                                  sup_slow_sq=float(slow_sq.max()),
                                  sup_fast_sq=float(fast_sq.max()),
                                  holder_quotient=quot))
            stats["slow"].append(rows[-1].sup_slow_sq)
            stats["fast"].append(rows[-1].sup_fast_sq)
            stats["holder"].append(rows[-1].holder_quotient)

    factor = 1.0
    if len(ladder) > 1:
        for key, vals in stats.items():
            per_eps = {}
            for row, v in zip(rows, vals):
                per_eps.setdefault(row.eps, []).append(v)
            agg = [float(np.mean(v)) for v in per_eps.values()]
            lo = min(agg)
            if lo > 1e-12:
                factor = max(factor, max(agg) / lo)

    rescale_gap = _time_rescale_gap(sys, x0, seed, policies[0] if policies else
                                    constant_policy(sys.g.scalar_bounds[0]),
                                    n_paths=min(n_paths, 4000))
    return MomentReport(rows=rows, uniform_factor=factor, rescale_gap=rescale_gap)


def _time_rescale_gap(sys, x0, seed, policy, n_paths: int, t: float = 0.2) -> float:
    """Frozen fast statistics at time t under scale eps must match the unscaled
    auxiliary process at time t/eps (same noise mapping)."""
    if policy.state_dependent():
        policy = constant_policy(sys.g.scalar_bounds[1])
    eps = sys.epsilon
    dt = eps / (10.0 * sys.lip_claimed) / 2.0
    nsteps = max(1, int(round(t / dt)))
    dt = t / nsteps
    start = np.full(n_paths, float(x0[1]))
    idx = np.asarray([nsteps], dtype=int)
    scaled = _frozen_core(sys, x0[0], [start], policy, dt, nsteps, seed, eps, idx)[0]
    unscaled = _frozen_core(sys, x0[0], [start], policy, dt / eps, nsteps, seed, 1.0,
                            idx)[0]
    m1 = abs(float(scaled.mean()) - float(unscaled.mean()))
    m2 = abs(float((scaled ** 2).mean()) - float((unscaled ** 2).mean()))
    scale = 1.0 + abs(float((unscaled ** 2).mean()))
    return max(m1, m2) / scale


# --------------------------------------------------------------------------
# Lower-bound principle against a PDE solve
# --------------------------------------------------------------------------

@dataclass
class LowerBoundReport:
    sample_mean: float
    stderr: float
    pde_value: float
    grid_tol: float

    @property
    def passed(self) -> bool:
        return self.sample_mean <= self.pde_value + 3.0 * self.stderr + self.grid_tol


def lower_bound_check(batch: ScenarioBatch, sol, grid_tol: float) -> LowerBoundReport:
    """Sample mean of phi(X_slow_T) under one policy must not exceed the robust
    PDE value at the start point (up to noise and grid error)."""
    phi_vals = np.asarray(
        coeffx.eval_expr(batch.system.phi, x=(batch.slow[:, -1],)), dtype=float
    )
    mean = float(phi_vals.mean())
    se = float(phi_vals.std(ddof=1) / np.sqrt(batch.n_paths)) if batch.n_paths > 1 else 0.0
    xs = sol.slow_coords
    yf = sol.fast_coords
    u = sol.values[sol.index_at_time(batch.horizon)]
    i = int(np.clip(np.searchsorted(xs, batch.x0[0]), 1, len(xs) - 1))
    tx = (batch.x0[0] - xs[i - 1]) / (xs[i] - xs[i - 1])
    if yf is None:
        val = (1 - tx) * u[i - 1] + tx * u[i]
    else:
        j = int(np.clip(np.searchsorted(yf, batch.x0[1]), 1, len(yf) - 1))
        ty = (batch.x0[1] - yf[j - 1]) / (yf[j] - yf[j - 1])
        val = ((1 - tx) * (1 - ty) * u[i - 1, j - 1] + tx * (1 - ty) * u[i, j - 1]
               + (1 - tx) * ty * u[i - 1, j] + tx * ty * u[i, j])
    return LowerBoundReport(sample_mean=mean, stderr=se, pde_value=float(val),
                            grid_tol=grid_tol)
