"""Averaged generator construction by long-run limits of the frozen fast flow.

For a frozen slow argument x and a cotangent pair (p, A), the averaged
generator value lambda(x, p, A) is the long-run average of the running
functional p*b_tilde + (p*h_tilde + A*sigma_tilde^2/2) d<B>/dt along the fast
flow.  Two independent numerical routes produce it:

* Cesaro route: march the fast-variable robust-value equation

      dw/dt = G(sigma_bar^2 w_yy + 2 h_bar w_y + 2 q(y)) + b_bar w_y + g(y),
      q = p*h_tilde + (A/2)*sigma_tilde^2,   g = p*b_tilde,

  from w = 0; then w(t, y) is the robust expectation of the running
  functional started at y and lambda is the late-time slope of t -> w(t, y).
  The quadratic-variation integrands enter the generator (the 2q term inside
  G), not the plain source: under a volatility scenario gamma they accrue at
  rate q*gamma, and the sup over gamma folds them into G exactly.

* Discounted route: relax the same equation with killing rate alpha to its
  stationary value v_alpha and extrapolate alpha * v_alpha(0) down the alpha
  ladder.

Agreement of the two routes, independence of the fast start, and boundedness
of w(t, y) - lambda*t are cross-validation gates.  Values are positively
homogeneous in (p, A), so they are tabulated on the unit circle only; the
table also exposes a support-polygon (vertex-control) form that drives the
monotone averaged-equation solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coeffx, fnpde, gcore
from .errors import ConfigError, CoverageError, GateError, NumericalError

RELAX_TOL = 1e-10
TOL_FLOOR = 1e-12


# --------------------------------------------------------------------------
# Frozen fast problem
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FrozenFastProblem:
    system: coeffx.TwoScaleSystem
    x_tilde: float
    p: float
    A: float

    @property
    def g(self) -> gcore.GFunction:
        return self.system.g

    @property
    def eta(self) -> float:
        return self.system.eta_claimed

    def coefficient_arrays(self, y: np.ndarray):
        """(a, hcoef, c, q, src) of the fast-variable equation on grid y."""
        s = self.system
        x = self.x_tilde
        sb = coeffx.eval_field(s.sigma_bar, x, y)
        hb = coeffx.eval_field(s.h_bar, x, y)
        bb = coeffx.eval_field(s.b_bar, x, y)
        st = coeffx.eval_field(s.sigma_tilde, x, y)
        ht = coeffx.eval_field(s.h_tilde, x, y)
        bt = coeffx.eval_field(s.b_tilde, x, y)
        q = self.p * ht + 0.5 * self.A * st * st
        src = self.p * bt
        return sb * sb, hb, bb, q, src

    def audit(self, fast_lo: float, fast_hi: float, trials: int = 2000,
              seed: int = 0) -> coeffx.HypothesisReport:
        box = coeffx.SampleBox(self.x_tilde, self.x_tilde, fast_lo, fast_hi)
        return coeffx.audit_hypotheses(self.system, box, trials, seed)


def frozen_problem(sys: coeffx.TwoScaleSystem, x_tilde: float, p: float,
                   A: float) -> FrozenFastProblem:
    return FrozenFastProblem(sys, float(x_tilde), float(p), float(A))


def default_fast_spec(fp: FrozenFastProblem, horizon: float, nodes: int = 161,
                      starts=()) -> fnpde.GridSpec:
    """Fast-axis grid confined by dissipation: half width 5/sqrt(eta) plus
    the largest requested start."""
    w = fnpde.fast_box_halfwidth(fp.eta, starts)
    return fnpde.GridSpec(slow=fnpde.Axis(-w, w, nodes), fast=None,
                          horizon=horizon, dt=None, boundary_margin=2,
                          n_store=65)


# --------------------------------------------------------------------------
# Cesaro route
# --------------------------------------------------------------------------

@dataclass
class GeneratorSample:
    x_tilde: float
    p: float
    A: float
    lambda_cesaro: float
    lambdas_by_start: dict
    xbar_spread: float
    tolerance_estimate: float
    grid_proxy: float
    horizon_proxy: float
    slope_history: np.ndarray  # columns (t, m(t)/t) for the first start
    m_series: np.ndarray  # columns (t, m(t)) for the first start
    lambda_discounted: float | None = None

    def gate_violations(self) -> list:
        out = []
        tol = self.tolerance_estimate
        if self.xbar_spread > tol + 1e-15:
            out.append(
                f"start-independence gate: spread {self.xbar_spread:.3e} exceeds "
                f"tolerance {tol:.3e} at (x={self.x_tilde:g}, p={self.p:g}, A={self.A:g})"
            )
        if self.lambda_discounted is not None:
            gap = abs(self.lambda_cesaro - self.lambda_discounted)
            if gap > 5.0 * tol + 1e-15:
                out.append(
                    f"cross-method gate: |cesaro - discounted| = {gap:.3e} exceeds "
                    f"5*tol = {5*tol:.3e} at (x={self.x_tilde:g}, p={self.p:g}, "
                    f"A={self.A:g})"
                )
        return out


def _cesaro_once(fp: FrozenFastProblem, spec: fnpde.GridSpec, starts):
    y = spec.slow.coords(spec.pad_nodes)
    a, hcoef, c, q, src = fp.coefficient_arrays(y)
    mk = lambda dt: fnpde._ScalarGKernel1D(fp.g, spec.slow.h, dt, a, hcoef, c, q, src)
    dt_cert = fnpde.CFL_SAFETY / mk(1.0).cfl_denominator()
    dt, nsteps = fnpde._resolve_steps(spec, dt_cert)
    kernel = mk(dt)
    kernel.check_cfl()
    u0 = np.zeros_like(y)
    extra = (nsteps // 4, nsteps // 2)
    slices, steps, times, _, _ = fnpde._march(kernel, u0, dt, nsteps,
                                              spec.n_store, extra_steps=extra)
    w_at = np.vstack([np.interp(starts, y, s) for s in slices])  # (n_stored, n_starts)
    return times, w_at


def cesaro_lambda(fp: FrozenFastProblem, horizon: float, spec: fnpde.GridSpec,
                  xbar_starts) -> GeneratorSample:
    """Long-run slope of the robust running-functional value, per fast start."""
    starts = [float(s) for s in xbar_starts]
    if not starts:
        raise ConfigError("need at least one fast start")
    if horizon < 10.0 / fp.eta - 1e-9:
        raise ConfigError(
            f"horizon {horizon:g} too short: need >= 10/eta = {10.0 / fp.eta:g}"
        )
    spec = fnpde.GridSpec(slow=spec.slow, fast=None, horizon=float(horizon),
                          dt=spec.dt, boundary_margin=spec.boundary_margin,
                          pad_nodes=spec.pad_nodes, n_store=max(spec.n_store, 33))
    lo, hi = spec.slow.lo, spec.slow.hi
    if min(starts) < lo or max(starts) > hi:
        raise ConfigError(f"fast starts {starts} fall outside the axis [{lo}, {hi}]")

    times, w_at = _cesaro_once(fp, spec, starts)

    def slope_between(t_lo_target, t_hi_target, col):
        i = int(np.argmin(np.abs(times - t_lo_target)))
        j = int(np.argmin(np.abs(times - t_hi_target)))
        if j <= i:
            raise NumericalError("degenerate slope window in the Cesaro estimate")
        return (w_at[j, col] - w_at[i, col]) / (times[j] - times[i])

    T = float(times[-1])
    lam_by_start = {s: slope_between(T / 2, T, k) for k, s in enumerate(starts)}
    lams = np.array(list(lam_by_start.values()))
    lam = float(lams.mean())
    spread = float(lams.max() - lams.min())

    # Horizon proxy: shift of the slope estimate between the half and full window.
    lam_half = np.mean([slope_between(T / 4, T / 2, k) for k in range(len(starts))])
    horizon_proxy = 2.0 * abs(lam - float(lam_half))

    # Grid proxy: one coarsening step of the fast axis.  The slope can be
    # grid-exact for collapsing flows, so the value profile at the horizon
    # (scaled by 1/T) is folded in as well; a rounding-noise floor covers
    # float accumulation over the march.
    coarse_nodes = max(41, (spec.slow.nodes - 1) // 2 + 1)
    coarse = fnpde.GridSpec(slow=fnpde.Axis(lo, hi, coarse_nodes), fast=None,
                            horizon=float(horizon), dt=None,
                            boundary_margin=spec.boundary_margin,
                            n_store=spec.n_store)
    tc, wc = _cesaro_once(fp, coarse, starts)
    ic = int(np.argmin(np.abs(tc - T / 2)))
    lam_coarse = float(np.mean((wc[-1] - wc[ic]) / (tc[-1] - tc[ic])))
    profile_proxy = float(np.max(np.abs(w_at[-1] - wc[-1]))) / T
    grid_proxy = max(abs(lam - lam_coarse), profile_proxy)

    noise_floor = 1e-9 * (1.0 + abs(lam))
    tol = max(grid_proxy, horizon_proxy, noise_floor, TOL_FLOOR)
    if spread > 10.0 * tol:
        raise GateError(
            f"fast-start spread {spread:.3e} exceeds 10x tolerance {tol:.3e}: "
            "likely dissipativity failure"
        )

    keep = times > 0
    m0 = w_at[:, 0]
    sample = GeneratorSample(
        x_tilde=fp.x_tilde, p=fp.p, A=fp.A, lambda_cesaro=lam,
        lambdas_by_start=lam_by_start, xbar_spread=spread,
        tolerance_estimate=tol, grid_proxy=grid_proxy,
        horizon_proxy=horizon_proxy,
        slope_history=np.column_stack([times[keep], m0[keep] / times[keep]]),
        m_series=np.column_stack([times, m0]),
    )
    return sample


# --------------------------------------------------------------------------
# Discounted route
# --------------------------------------------------------------------------

def discounted_lambda(fp: FrozenFastProblem, alpha_ladder, spec: fnpde.GridSpec,
                      return_ladder: bool = False):
    """Stationary killed-equation values alpha*v_alpha(0), extrapolated in alpha."""
    alphas = [float(a) for a in alpha_ladder]
    if not alphas or any(a <= 0 for a in alphas):
        raise ConfigError("alpha ladder must contain positive entries")
    if any(not (b < a) for a, b in zip(alphas, alphas[1:])):
        raise ConfigError("alpha ladder must be strictly decreasing")
    y = spec.slow.coords(spec.pad_nodes)
    if not (y.min() <= 0.0 <= y.max()):
        raise ConfigError("fast axis must contain the origin for v_alpha(0)")
    a, hcoef, c, q, src = fp.coefficient_arrays(y)

    values = []
    v = np.zeros_like(y)
    for idx, alpha in enumerate(alphas):
        mk = lambda dt: fnpde._ScalarGKernel1D(fp.g, spec.slow.h, dt, a, hcoef, c,
                                               q, src, kill=alpha)
        dt = fnpde.CFL_SAFETY / mk(1.0).cfl_denominator()
        kernel = mk(dt)
        budget = min(int(np.ceil(80.0 / (alpha * dt))), 20_000_000)
        converged = False
        k = 0
        while k < budget:
            vn = kernel.step(v)
            k += 1
            if k % 16 == 0:
                delta = float(np.max(np.abs(vn - v)))
                if not np.isfinite(delta):
                    raise NumericalError(
                        f"discounted relaxation diverged at alpha={alpha:g}"
                    )
                if delta <= RELAX_TOL * max(1.0, float(np.max(np.abs(vn)))):
                    v = vn
                    converged = True
                    break
            v = vn
        if not converged:
            raise NumericalError(
                f"discounted relaxation did not converge within {budget} steps "
                f"at alpha={alpha:g}"
            )
        values.append(alpha * float(np.interp(0.0, y, v)))
        if idx + 1 < len(alphas):
            # Warm start the next (smaller) alpha: the profile scales ~ 1/alpha.
            v = v * (alpha / alphas[idx + 1])

    if len(values) == 1:
        lam = values[0]
    else:
        f1, f0 = values[-1], values[-2]
        a1, a0 = alphas[-1], alphas[-2]
        lam = f1 - a1 * (f1 - f0) / (a1 - a0)
    if return_ladder:
        return float(lam), list(zip(alphas, values))
    return float(lam)


# --------------------------------------------------------------------------
# Rate-bound residual check
# --------------------------------------------------------------------------

@dataclass
class RateBoundReport:
    fit_slope: float
    max_residual: float
    threshold: float

    @property
    def passed(self) -> bool:
        return abs(self.fit_slope) <= self.threshold


def rate_bound_check(sample: GeneratorSample, threshold: float = 1e-3) -> RateBoundReport:
    """The running value must stay within O(1) of lambda*t: fit a line to
    |m(t) - lambda t| over the second half of the horizon and report its slope."""
    ts = sample.m_series[:, 0]
    if len(ts) < 4:
        raise ConfigError("slope history too short for a rate check")
    ms = sample.m_series[:, 1]
    resid = np.abs(ms - sample.lambda_cesaro * ts)
    half = ts >= 0.5 * ts[-1]
    slope = float(np.polyfit(ts[half], resid[half], 1)[0])
    return RateBoundReport(fit_slope=slope, max_residual=float(resid[half].max()),
                           threshold=threshold)


# --------------------------------------------------------------------------
# Generator table
# --------------------------------------------------------------------------

@dataclass
class TablePropertyReport:
    subadd_worst: float  # most negative slack over inter-node triples
    amono_worst: float  # most negative slack over equal-gradient pairs
    gate: float

    @property
    def ok(self) -> bool:
        return self.subadd_worst >= -self.gate and self.amono_worst >= -self.gate


@dataclass
class GeneratorTable:
    x_grid: np.ndarray  # (nx,) sorted
    thetas: np.ndarray  # (K,) on [0, 2pi)
    values: np.ndarray  # (nx, K) unit-circle generator values
    tols: np.ndarray  # (nx, K)
    spreads: np.ndarray  # (nx, K)
    discounted: np.ndarray  # (nx, K), NaN where not cross-checked
    eta: float
    horizon: float
    x_independent: bool
    samples: list = field(default_factory=list, repr=False)
    vertex_slack: float = 0.0

    @property
    def n_directions(self) -> int:
        return len(self.thetas)

    @property
    def max_tolerance(self) -> float:
        return float(self.tols.max())

    def covers(self, lo: float, hi: float) -> bool:
        if self.x_independent:
            return True
        return (self.x_grid[0] - 1e-12 <= lo) and (hi <= self.x_grid[-1] + 1e-12)

    def _circle_at(self, xs: np.ndarray) -> np.ndarray:
        """Unit-circle values linearly interpolated in the slow coordinate."""
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        if self.x_independent or len(self.x_grid) == 1:
            return np.broadcast_to(self.values[0], (len(xs), self.n_directions)).copy()
        if xs.min() < self.x_grid[0] - 1e-12 or xs.max() > self.x_grid[-1] + 1e-12:
            raise CoverageError(
                f"slow coordinate range [{xs.min():g}, {xs.max():g}] outside the "
                f"tabulated range [{self.x_grid[0]:g}, {self.x_grid[-1]:g}]"
            )
        j = np.clip(np.searchsorted(self.x_grid, xs), 1, len(self.x_grid) - 1)
        x0 = self.x_grid[j - 1]
        x1 = self.x_grid[j]
        t = np.clip((xs - x0) / (x1 - x0), 0.0, 1.0)[:, None]
        return (1.0 - t) * self.values[j - 1] + t * self.values[j]

    def eval(self, x: float, p: float, A: float) -> float:
        """Radius times the angular interpolant: exact positive homogeneity."""
        r = float(np.hypot(p, A))
        if r == 0.0:
            return 0.0
        ang = float(np.arctan2(A, p)) % (2.0 * np.pi)
        g = self._circle_at(np.array([x]))[0]
        th = np.concatenate([self.thetas, [2.0 * np.pi]])
        gg = np.concatenate([g, [g[0]]])
        return r * float(np.interp(ang, th, gg))

    def vertex_controls(self, xs: np.ndarray) -> tuple:
        """Support-polygon vertices (r, s) per slow node.

        The circle values define halfplanes r*cos(th)+s*sin(th) <= g(th); the
        vertices of their intersection reproduce the generator as
        max_v (r_v p + s_v A).  Inconsistent opposite pairs (within tolerance
        noise) are lifted by a uniform slack; s is clamped to >= 0.
        """
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        gvals = self._circle_at(xs)
        if self.x_independent or len(self.x_grid) == 1:
            r, s = self._polygon(gvals[0])
            return (np.broadcast_to(r, (len(xs), len(r))).copy(),
                    np.broadcast_to(s, (len(xs), len(s))).copy())
        polys = [self._polygon(gvals[i]) for i in range(len(xs))]
        width = max(len(r) for r, _ in polys)
        R = np.empty((len(xs), width))
        S = np.empty((len(xs), width))
        for i, (r, s) in enumerate(polys):
            R[i, :len(r)] = r
            S[i, :len(s)] = s
            R[i, len(r):] = r[0]
            S[i, len(s):] = s[0]
        return R, S

    def _polygon(self, g: np.ndarray) -> tuple:
        K = self.n_directions
        cs = np.cos(self.thetas)
        sn = np.sin(self.thetas)
        g = g.copy()
        if K % 2 == 0:
            half = K // 2
            opp = g + np.roll(g, half)
            deficit = float(-opp.min()) / 2.0
            if deficit > 0.0:
                g += deficit + 1e-15
                self.vertex_slack = max(self.vertex_slack, deficit)
        scale = 1.0 + float(np.max(np.abs(g)))
        feas_tol = 1e-9 * scale
        for attempt in range(2):
            det = cs[:, None] * sn[None, :] - sn[:, None] * cs[None, :]
            ok = np.abs(det) > 1e-12
            with np.errstate(divide="ignore", invalid="ignore"):
                r = (g[:, None] * sn[None, :] - sn[:, None] * g[None, :]) / det
                s = (cs[:, None] * g[None, :] - g[:, None] * cs[None, :]) / det
            r = r[ok]
            s = s[ok]
            margin = (np.outer(r, cs) + np.outer(s, sn)) - g[None, :]
            feasible = margin.max(axis=1) <= feas_tol
            if feasible.any():
                rv, sv = r[feasible], np.maximum(s[feasible], 0.0)
                pts = np.unique(np.column_stack([np.round(rv / (1e-12 * scale)),
                                                 np.round(sv / (1e-12 * scale))]),
                                axis=0, return_index=True)[1]
                return rv[np.sort(pts)], sv[np.sort(pts)]
            lift = float(margin.max(axis=1).min()) + 1e-15
            g += lift
            self.vertex_slack = max(self.vertex_slack, lift)
        raise GateError("tabulated generator values admit no support polygon")

    def property_report(self) -> TablePropertyReport:
        """Inter-node subadditivity and equal-gradient A-monotonicity on the
        stored circle values, gated at 3x the worst tolerance estimate."""
        K = self.n_directions
        gate = 3.0 * self.max_tolerance
        dth = 2.0 * np.pi / K
        sub_worst = np.inf
        for m in range(1, K // 4 + 1):
            lhs = 2.0 * np.cos(m * dth) * self.values
            rhs = np.roll(self.values, m, axis=1) + np.roll(self.values, -m, axis=1)
            sub_worst = min(sub_worst, float((rhs - lhs).min()))
        # Pairs (theta, 2pi - theta) share the gradient component and have
        # opposite-signed curvature component: monotonicity orders their values.
        amono_worst = np.inf
        for k in range(1, K // 2):
            slack = self.values[:, k] - self.values[:, K - k]
            amono_worst = min(amono_worst, float(slack.min()))
        return TablePropertyReport(subadd_worst=sub_worst, amono_worst=amono_worst,
                                   gate=gate)


def build_table(sys: coeffx.TwoScaleSystem, x_grid, n_directions: int,
                horizon: float, fast_nodes: int = 161, xbar_starts=(-2.0, 0.0, 2.0),
                alpha_ladder=(0.2, 0.1, 0.05), cross_fraction: float = 0.1,
                seed: int = 0, audit_trials: int = 2000) -> GeneratorTable:
    """Tabulate the averaged generator on the unit circle of (p, A) per slow
    grid point, cross-checking a random subset against the discounted route."""
    if n_directions < 8 or n_directions % 4 != 0:
        raise ConfigError("n_directions must be a multiple of 4 and >= 8")
    x_independent = not any(
        coeffx.uses_variable(getattr(sys, n).expr, "x") for n in coeffx.FIELD_NAMES
    )
    xg = np.array([0.0]) if x_independent else np.sort(np.asarray(list(x_grid), float))
    if len(xg) == 0:
        raise ConfigError("x grid must be nonempty")
    thetas = 2.0 * np.pi * np.arange(n_directions) / n_directions

    rng = np.random.default_rng(seed)
    n_total = len(xg) * n_directions
    n_cross = max(1, int(round(cross_fraction * n_total)))
    cross_ids = set(rng.choice(n_total, size=min(n_cross, n_total), replace=False).tolist())

    values = np.empty((len(xg), n_directions))
    tols = np.empty_like(values)
    spreads = np.empty_like(values)
    discounted = np.full_like(values, np.nan)
    samples = []
    starts = tuple(xbar_starts)

    for i, x in enumerate(xg):
        probe = frozen_problem(sys, x, 1.0, 0.0)
        spec = default_fast_spec(probe, horizon, nodes=fast_nodes, starts=starts)
        probe.audit(spec.slow.lo, spec.slow.hi, trials=audit_trials,
                    seed=seed).require_ok(f"frozen fast problem at x={x:g}")
        for k, th in enumerate(thetas):
            fp = frozen_problem(sys, x, float(np.cos(th)), float(np.sin(th)))
            sample = cesaro_lambda(fp, horizon, spec, starts)
            if i * n_directions + k in cross_ids:
                sample.lambda_discounted = discounted_lambda(fp, alpha_ladder, spec)
                discounted[i, k] = sample.lambda_discounted
            bad = sample.gate_violations()
            if bad:
                raise GateError("; ".join(bad))
            values[i, k] = sample.lambda_cesaro
            tols[i, k] = sample.tolerance_estimate
            spreads[i, k] = sample.xbar_spread
            samples.append(sample)

    return GeneratorTable(x_grid=xg, thetas=thetas, values=values, tols=tols,
                          spreads=spreads, discounted=discounted,
                          eta=sys.eta_claimed, horizon=float(horizon),
                          x_independent=x_independent, samples=samples)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

_MAGIC = b"GAVGTBL1"


def save_table(table: GeneratorTable, path) -> None:
    import struct

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIB", len(table.x_grid), table.n_directions,
                             1 if table.x_independent else 0))
        fh.write(struct.pack("<ddd", table.eta, table.horizon, table.vertex_slack))
        for arr in (table.x_grid, table.thetas, table.values, table.tols,
                    table.spreads, table.discounted):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_table(path) -> GeneratorTable:
    import struct

    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigError(f"not a generator table file: {path}")
        nx, K, indep = struct.unpack("<IIB", fh.read(9))
        eta, horizon, slack = struct.unpack("<ddd", fh.read(24))

        def arr(count):
            return np.frombuffer(fh.read(8 * count), dtype="<f8").copy()

        xg = arr(nx)
        th = arr(K)
        vals = arr(nx * K).reshape(nx, K)
        tols = arr(nx * K).reshape(nx, K)
        spreads = arr(nx * K).reshape(nx, K)
        disc = arr(nx * K).reshape(nx, K)
    return GeneratorTable(x_grid=xg, thetas=th, values=vals, tols=tols,
                          spreads=spreads, discounted=disc, eta=eta,
                          horizon=horizon, x_independent=bool(indep),
                          vertex_slack=slack)


def table_csv_rows(table: GeneratorTable):
    """(x_tilde, theta, p, A, lambda, lambda_discounted, tolerance, spread) rows."""
    for i, x in enumerate(table.x_grid):
        for k, th in enumerate(table.thetas):
            yield (float(x), float(th), float(np.cos(th)), float(np.sin(th)),
                   float(table.values[i, k]), float(table.discounted[i, k]),
                   float(table.tols[i, k]), float(table.spreads[i, k]))
