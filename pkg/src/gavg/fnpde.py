"""Monotone explicit finite-difference solvers for fully nonlinear parabolic PDEs.

Three forward-in-time problems share one marching core:

* the coupled slow/fast equation
      du/dt = G(a11 u_xx + 2 a12 u_xy + a22 u_yy + 2 ht u_x + 2 (hb/eps) u_y)
              + bt u_x + (bb/eps) u_y,            a = sigma_eps sigma_eps^T,
  on a 2-D slow/fast grid with a 7-point stencil: axial second differences,
  one diagonal pair chosen by the sign of a12, and upwinded first-order terms;

* the scalar-generator 1-D form
      du/dt = G(a u_xx + 2 h u_x + 2 q) + c u_x + src - kill*u,
  which covers the constant-coefficient heat equation under volatility
  uncertainty and the frozen-fast solves behind the averaged generator;

* the vertex-control 1-D form
      du/dt = max_v ( r_v u_x + s_v u_xx ),   s_v >= 0,
  driving the averaged equation: the tabulated sublinear generator is
  represented as a support function over a finite control polygon, each
  vertex discretized with upwind gradient and central second difference.

Monotonicity is certified at assembly: every off-center stencil weight must
be nonnegative (the cross term is covered by adding artificial viscosity to
both axial terms, never less than the per-node dominance deficit), and the
time step must satisfy the explicit CFL bound with safety factor 0.9.

The computational box truncates the whole space.  The declared grid may be
extended by `pad_nodes` internal padding per side; the boundary uses
copy-out ghost nodes (zero normal derivative).  A boundary-influence mask
grows one node per step from the outer boundary, capped at
pad_nodes + boundary_margin; reported norms use only the trusted interior.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import coeffx, gcore
from .errors import (CflError, ConfigError, CoverageError, MonotonicityError,
                     NumericalError)

CFL_SAFETY = 0.9
_FINITE_CHECK_EVERY = 256


# --------------------------------------------------------------------------
# Grid description
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    nodes: int

    def __post_init__(self):
        if self.nodes < 3:
            raise ConfigError(f"axis needs at least 3 nodes, got {self.nodes}")
        if not self.hi > self.lo:
            raise ConfigError(f"axis bounds inverted: [{self.lo}, {self.hi}]")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.nodes - 1)

    def coords(self, pad: int = 0) -> np.ndarray:
        return self.lo + self.h * (np.arange(self.nodes + 2 * pad) - pad)


@dataclass(frozen=True)
class GridSpec:
    slow: Axis
    fast: Axis | None
    horizon: float
    dt: float | None = None  # None: use the certified step
    boundary_margin: int = 8
    pad_nodes: int = 0
    n_store: int = 33

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.boundary_margin < 0 or self.pad_nodes < 0:
            raise ConfigError("boundary_margin and pad_nodes must be >= 0")
        if self.n_store < 2:
            raise ConfigError("n_store must be >= 2")
        for ax in (self.slow, self.fast):
            if ax is not None and ax.nodes - 2 * self.boundary_margin < 1:
                raise ConfigError(
                    f"boundary margin {self.boundary_margin} leaves no interior "
                    f"on a {ax.nodes}-node axis"
                )


# --------------------------------------------------------------------------
# Solution container
# --------------------------------------------------------------------------

@dataclass
class GridSolution:
    spec: GridSpec
    kind: str  # 'two_scale' | 'g_heat' | 'averaged'
    epsilon: float | None
    dt: float
    times: np.ndarray  # stored times
    steps: np.ndarray  # stored step indices
    slices: np.ndarray  # stored values on the internal (padded) grid
    diagnostics: dict
    _advance: object = None  # advance(u_internal, nsteps) for semigroup re-runs

    @property
    def n_stored(self) -> int:
        return len(self.steps)

    def _declared(self, arr: np.ndarray) -> np.ndarray:
        p = self.spec.pad_nodes
        if p == 0:
            return arr
        if arr.ndim == 2 and self.spec.fast is not None:
            return arr[p:-p, p:-p]
        return arr[p:-p]

    @property
    def values(self) -> np.ndarray:
        """Stored slices restricted to the declared grid."""
        p = self.spec.pad_nodes
        if p == 0:
            return self.slices
        if self.spec.fast is not None:
            return self.slices[:, p:-p, p:-p]
        return self.slices[:, p:-p]

    @property
    def slow_coords(self) -> np.ndarray:
        return self.spec.slow.coords()

    @property
    def fast_coords(self) -> np.ndarray | None:
        return None if self.spec.fast is None else self.spec.fast.coords()

    def trusted_margin(self, i: int) -> int:
        """Nodes to strip from each declared edge at stored index i.

        The influence mask grows one node per step from the outer (padded)
        boundary and is capped at pad_nodes + boundary_margin; padding
        absorbs the first pad_nodes of growth.
        """
        width = min(int(self.steps[i]), self.spec.pad_nodes + self.spec.boundary_margin)
        return max(0, width - self.spec.pad_nodes)

    def interior_mask(self, i: int) -> np.ndarray:
        m = self.trusted_margin(i)
        ns = self.spec.slow.nodes
        mask_s = np.zeros(ns, dtype=bool)
        mask_s[m:ns - m] = True
        if self.spec.fast is None:
            return mask_s
        nf = self.spec.fast.nodes
        mask_f = np.zeros(nf, dtype=bool)
        mask_f[m:nf - m] = True
        return np.outer(mask_s, mask_f)

    def index_at_time(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def slice_at(self, t: float) -> np.ndarray:
        return self.values[self.index_at_time(t)]


def _store_steps(nsteps: int, n_store: int) -> list[int]:
    stride = max(1, int(np.ceil(nsteps / max(1, n_store - 1))))
    steps = list(range(0, nsteps + 1, stride))
    if steps[-1] != nsteps:
        steps.append(nsteps)
    return steps


def _resolve_steps(spec: GridSpec, dt_cert: float) -> tuple[float, int]:
    """Pick the actual dt: the user's if certified, else the certificate,
    rescaled so an integer number of steps lands exactly on the horizon."""
    if spec.dt is not None:
        if spec.dt > dt_cert * (1.0 + 1e-12):
            raise CflError(
                f"dt={spec.dt:g} violates the CFL certificate (max {dt_cert:g})"
            )
        ratio = spec.horizon / spec.dt
        if abs(ratio - round(ratio)) < 1e-6:
            # Keep a commensurate user dt bit-exact so composed runs with the
            # same dt replay identical float operations.
            return spec.dt, max(1, int(round(ratio)))
        base = spec.dt
    else:
        base = dt_cert
    nsteps = max(1, int(np.ceil(spec.horizon / base - 1e-12)))
    return spec.horizon / nsteps, nsteps


def _march(kernel, u0: np.ndarray, dt: float, nsteps: int, n_store: int,
           extra_steps=()):
    store = sorted(set(_store_steps(nsteps, n_store))
                   | {int(s) for s in extra_steps if 0 <= s <= nsteps})
    store_set = set(store)
    stored = [u0.copy()]
    steps = [0]
    u = u0.copy()
    max_update = 0.0
    t0 = time.perf_counter()
    for k in range(1, nsteps + 1):
        un = kernel.step(u)
        if k == nsteps:
            max_update = float(np.max(np.abs(un - u)))
        u = un
        if k in store_set:
            if not np.all(np.isfinite(u)):
                bad = np.argwhere(~np.isfinite(u))[0]
                raise NumericalError(
                    f"non-finite value at step {k}, node index {tuple(bad)}"
                )
            stored.append(u.copy())
            steps.append(k)
        elif k % _FINITE_CHECK_EVERY == 0 and not np.all(np.isfinite(u)):
            bad = np.argwhere(~np.isfinite(u))[0]
            raise NumericalError(f"non-finite value at step {k}, node index {tuple(bad)}")
    wall = time.perf_counter() - t0
    steps_arr = np.asarray(steps, dtype=int)
    return (np.asarray(stored), steps_arr, steps_arr * dt, max_update, wall)


# --------------------------------------------------------------------------
# 1-D scalar-generator kernel
# --------------------------------------------------------------------------

class _ScalarGKernel1D:
    """du/dt = G(a u_xx + 2 h u_x + 2 q) + c u_x + src - kill*u."""

    def __init__(self, g: gcore.GFunction, h_space: float, dt: float,
                 a, hcoef, c, q, src, kill: float = 0.0):
        n = None
        for arr in (a, hcoef, c, q, src):
            n = np.broadcast_shapes(np.shape(arr), () if n is None else n)
        self.a = np.asarray(np.broadcast_to(a, n), dtype=float)
        self.hcoef = np.asarray(np.broadcast_to(hcoef, n), dtype=float)
        self.c = np.asarray(np.broadcast_to(c, n), dtype=float)
        self.q2 = 2.0 * np.asarray(np.broadcast_to(q, n), dtype=float)
        self.src = np.asarray(np.broadcast_to(src, n), dtype=float)
        self.kill = float(kill)
        self.g = g
        self.h = float(h_space)
        self.dt = float(dt)
        if np.any(self.a < 0):
            raise MonotonicityError("negative diffusion coefficient")
        self._h_pos = self.hcoef >= 0
        self._c_pos = self.c >= 0

    def cfl_denominator(self) -> float:
        cap_half = 0.5 * self.g.nondegeneracy_cap
        center = 2.0 * self.a / self.h ** 2 + 2.0 * np.abs(self.hcoef) / self.h
        return float(np.max(cap_half * center + np.abs(self.c) / self.h) + self.kill)

    def check_cfl(self):
        denom = self.cfl_denominator()
        if self.dt * denom > CFL_SAFETY * (1.0 + 1e-12):
            raise CflError(
                f"dt={self.dt:g} fails the 1-D certificate; max allowed "
                f"{CFL_SAFETY / denom:g}"
            )

    def step(self, u: np.ndarray) -> np.ndarray:
        h = self.h
        ue = np.pad(u, 1, mode="edge")
        xp, xm = ue[2:], ue[:-2]
        dxx = (xp - 2.0 * u + xm) / h ** 2
        dxf = (xp - u) / h
        dxb = (u - xm) / h
        m = self.a * dxx + 2.0 * self.hcoef * np.where(self._h_pos, dxf, dxb) + self.q2
        out = u + self.dt * (
            gcore.scalarize_array(self.g, m)
            + self.c * np.where(self._c_pos, dxf, dxb)
            + self.src
        )
        if self.kill:
            out -= self.dt * self.kill * u
        return out

    def advance(self, u: np.ndarray, nsteps: int) -> np.ndarray:
        for _ in range(nsteps):
            u = self.step(u)
        return u


# --------------------------------------------------------------------------
# 1-D vertex-control kernel (averaged equation)
# --------------------------------------------------------------------------

class _VertexKernel1D:
    """du/dt = max over vertices (r, s) of r u_x(upwind) + s u_xx."""

    def __init__(self, h_space: float, dt: float, r: np.ndarray, s: np.ndarray):
        self.r = np.asarray(r, dtype=float)  # (nodes, n_vertices)
        self.s = np.asarray(s, dtype=float)
        if self.r.shape != self.s.shape or self.r.ndim != 2:
            raise ConfigError("vertex arrays must share shape (nodes, n_vertices)")
        if np.any(self.s < -1e-12):
            raise MonotonicityError("vertex second-order weight is negative")
        self.s = np.maximum(self.s, 0.0)
        self.h = float(h_space)
        self.dt = float(dt)
        self._r_pos = self.r >= 0

    def cfl_denominator(self) -> float:
        return float(np.max(2.0 * self.s / self.h ** 2 + np.abs(self.r) / self.h))

    def check_cfl(self):
        denom = self.cfl_denominator()
        if self.dt * denom > CFL_SAFETY * (1.0 + 1e-12):
            raise CflError(
                f"dt={self.dt:g} fails the vertex-scheme certificate; max allowed "
                f"{CFL_SAFETY / denom:g}"
            )

    def step(self, u: np.ndarray) -> np.ndarray:
        h = self.h
        ue = np.pad(u, 1, mode="edge")
        xp, xm = ue[2:], ue[:-2]
        dxx = ((xp - 2.0 * u + xm) / h ** 2)[:, None]
        dxf = ((xp - u) / h)[:, None]
        dxb = ((u - xm) / h)[:, None]
        cand = self.r * np.where(self._r_pos, dxf, dxb) + self.s * dxx
        return u + self.dt * cand.max(axis=1)

    def advance(self, u: np.ndarray, nsteps: int) -> np.ndarray:
        for _ in range(nsteps):
            u = self.step(u)
        return u


# --------------------------------------------------------------------------
# 2-D two-scale kernel
# --------------------------------------------------------------------------

class _TwoScaleKernel2D:
    def __init__(self, sys: coeffx.TwoScaleSystem, xs: np.ndarray, yf: np.ndarray,
                 hs: float, hf: float, dt: float):
        eps = sys.epsilon
        X = xs[:, None]
        Y = yf[None, :]
        shape = (len(xs), len(yf))
        ev = lambda f: np.broadcast_to(coeffx.eval_field(f, X, Y), shape).astype(float)
        self.bt = ev(sys.b_tilde)
        self.bb = ev(sys.b_bar) / eps
        self.ht = ev(sys.h_tilde)
        self.hb = ev(sys.h_bar) / eps
        st = ev(sys.sigma_tilde)
        sb = ev(sys.sigma_bar) / np.sqrt(eps)
        self.a11 = st * st
        self.a22 = sb * sb
        self.a12 = st * sb
        abs12 = np.abs(self.a12)
        # Artificial viscosity: the spec'd h-scaled base, raised where needed to
        # the exact diagonal-dominance deficit of the rank-one cross term.
        nu_base = 0.5 * np.sqrt(abs12) * np.sqrt(hs * hf)
        nu_req = np.maximum(abs12 * (hs / hf) - self.a11,
                            abs12 * (hf / hs) - self.a22)
        self.nu = np.maximum(nu_base, np.maximum(nu_req, 0.0))
        self.g = sys.g
        self.hs, self.hf, self.dt = float(hs), float(hf), float(dt)
        self._a12_pos = self.a12 >= 0
        self._ht_pos = self.ht >= 0
        self._hb_pos = self.hb >= 0
        self._bt_pos = self.bt >= 0
        self._bb_pos = self.bb >= 0

    def certify(self) -> dict:
        """Count off-center weight violations (must be zero) and return margins."""
        w1 = (self.a11 + self.nu) / self.hs ** 2 - np.abs(self.a12) / (self.hs * self.hf)
        w2 = (self.a22 + self.nu) / self.hf ** 2 - np.abs(self.a12) / (self.hs * self.hf)
        bad = int(np.sum(w1 < -1e-12) + np.sum(w2 < -1e-12))
        if bad:
            raise MonotonicityError(f"{bad} node(s) with negative off-center weights")
        return {
            "violations": 0,
            "min_axial_weight": float(min(w1.min(), w2.min())),
            "nu_max": float(self.nu.max()),
        }

    def cfl_denominator(self) -> float:
        cap_half = 0.5 * self.g.nondegeneracy_cap
        center = (2.0 * (self.a11 + self.nu) / self.hs ** 2
                  + 2.0 * (self.a22 + self.nu) / self.hf ** 2
                  + 2.0 * np.abs(self.a12) / (self.hs * self.hf)
                  + 2.0 * np.abs(self.ht) / self.hs
                  + 2.0 * np.abs(self.hb) / self.hf)
        trans = np.abs(self.bt) / self.hs + np.abs(self.bb) / self.hf
        return float(np.max(cap_half * center + trans))

    def check_cfl(self):
        denom = self.cfl_denominator()
        if self.dt * denom > CFL_SAFETY * (1.0 + 1e-12):
            raise CflError(
                f"dt={self.dt:g} fails the two-scale certificate; max allowed "
                f"{CFL_SAFETY / denom:g}"
            )

    def step(self, u: np.ndarray) -> np.ndarray:
        hs, hf = self.hs, self.hf
        ue = np.pad(u, 1, mode="edge")
        xp = ue[2:, 1:-1]
        xm = ue[:-2, 1:-1]
        yp = ue[1:-1, 2:]
        ym = ue[1:-1, :-2]
        dxx = (xp - 2.0 * u + xm) / hs ** 2
        dyy = (yp - 2.0 * u + ym) / hf ** 2
        axial = xp + xm + yp + ym
        dxy_pos = (2.0 * u + ue[2:, 2:] + ue[:-2, :-2] - axial) / (2.0 * hs * hf)
        dxy_neg = (axial - 2.0 * u - ue[2:, :-2] - ue[:-2, 2:]) / (2.0 * hs * hf)
        dxy = np.where(self._a12_pos, dxy_pos, dxy_neg)
        dxf = (xp - u) / hs
        dxb = (u - xm) / hs
        dyf = (yp - u) / hf
        dyb = (u - ym) / hf
        m = ((self.a11 + self.nu) * dxx + (self.a22 + self.nu) * dyy
             + 2.0 * self.a12 * dxy
             + 2.0 * self.ht * np.where(self._ht_pos, dxf, dxb)
             + 2.0 * self.hb * np.where(self._hb_pos, dyf, dyb))
        trans = (self.bt * np.where(self._bt_pos, dxf, dxb)
                 + self.bb * np.where(self._bb_pos, dyf, dyb))
        return u + self.dt * (gcore.scalarize_array(self.g, m) + trans)

    def advance(self, u: np.ndarray, nsteps: int) -> np.ndarray:
        for _ in range(nsteps):
            u = self.step(u)
        return u


# --------------------------------------------------------------------------
# Public solvers
# --------------------------------------------------------------------------

def _initial_slice(init, phi, xs: np.ndarray, yf: np.ndarray | None) -> np.ndarray:
    if init is not None:
        arr = np.asarray(init, dtype=float)
        want = (len(xs),) if yf is None else (len(xs), len(yf))
        if arr.shape != want:
            raise ConfigError(
                f"initial slice shape {arr.shape} does not match internal grid {want}"
            )
        return arr.copy()
    vals = np.asarray(coeffx.eval_expr(phi, x=(xs,)), dtype=float)
    vals = np.broadcast_to(vals, xs.shape).astype(float)
    if not np.all(np.isfinite(vals)):
        raise NumericalError("initial datum is non-finite on the grid")
    if yf is None:
        return vals.copy()
    return np.repeat(vals[:, None], len(yf), axis=1)


def solve_two_scale(sys: coeffx.TwoScaleSystem, spec: GridSpec,
                    init=None) -> GridSolution:
    """March the coupled slow/fast equation; initial datum depends on the slow
    variable only (or pass a full internal-grid slice to continue a run)."""
    if spec.fast is None:
        raise ConfigError("two-scale solves need a fast axis")
    xs = spec.slow.coords(spec.pad_nodes)
    yf = spec.fast.coords(spec.pad_nodes)
    probe = _TwoScaleKernel2D(sys, xs, yf, spec.slow.h, spec.fast.h, dt=1.0)
    cert = probe.certify()
    dt_cert = CFL_SAFETY / probe.cfl_denominator()
    dt, nsteps = _resolve_steps(spec, dt_cert)
    kernel = _TwoScaleKernel2D(sys, xs, yf, spec.slow.h, spec.fast.h, dt)
    kernel.check_cfl()
    u0 = _initial_slice(init, sys.phi, xs, yf)
    slices, steps, times, max_update, wall = _march(kernel, u0, dt, nsteps, spec.n_store)
    diag = dict(cert, max_update=max_update, wall_s=wall, dt=dt, steps=nsteps,
                cfl_ratio=dt * kernel.cfl_denominator())
    return GridSolution(spec=spec, kind="two_scale", epsilon=sys.epsilon, dt=dt,
                        times=times, steps=steps, slices=slices, diagnostics=diag,
                        _advance=kernel.advance)


def solve_gheat_1d(g: gcore.GFunction, drift: float, vol: float, phi,
                   spec: GridSpec, init=None) -> GridSolution:
    """du/dt = G(vol^2 u_xx) + drift u_x on the slow axis."""
    if g.dim != 1:
        raise ConfigError("heat solves need a dim-1 generator")
    xs = spec.slow.coords(spec.pad_nodes)
    mk = lambda dt: _ScalarGKernel1D(g, spec.slow.h, dt, a=vol * vol, hcoef=0.0,
                                     c=drift, q=0.0, src=0.0)
    dt_cert = CFL_SAFETY / mk(1.0).cfl_denominator()
    dt, nsteps = _resolve_steps(spec, dt_cert)
    kernel = mk(dt)
    kernel.check_cfl()
    phi_expr = coeffx.parse_expr(phi, 1, 0) if isinstance(phi, str) else phi
    u0 = _initial_slice(init, phi_expr, xs, None)
    slices, steps, times, max_update, wall = _march(kernel, u0, dt, nsteps, spec.n_store)
    diag = dict(max_update=max_update, wall_s=wall, dt=dt, steps=nsteps,
                cfl_ratio=dt * kernel.cfl_denominator())
    return GridSolution(spec=spec, kind="g_heat", epsilon=None, dt=dt, times=times,
                        steps=steps, slices=slices, diagnostics=diag,
                        _advance=kernel.advance)


def solve_averaged(table, phi, spec: GridSpec, init=None) -> GridSolution:
    """March the averaged equation driven by a tabulated sublinear generator.

    `table` must provide vertex_controls(x_nodes) -> (r, s) arrays and
    covers(lo, hi); extrapolation outside the tabulated slow range is refused.
    """
    xs = spec.slow.coords(spec.pad_nodes)
    if not table.covers(float(xs.min()), float(xs.max())):
        raise CoverageError(
            f"generator table does not cover slow range [{xs.min():g}, {xs.max():g}]"
        )
    r, s = table.vertex_controls(xs)
    mk = lambda dt: _VertexKernel1D(spec.slow.h, dt, r, s)
    dt_cert = CFL_SAFETY / mk(1.0).cfl_denominator()
    dt, nsteps = _resolve_steps(spec, dt_cert)
    kernel = mk(dt)
    kernel.check_cfl()
    phi_expr = coeffx.parse_expr(phi, 1, 0) if isinstance(phi, str) else phi
    u0 = _initial_slice(init, phi_expr, xs, None)
    slices, steps, times, max_update, wall = _march(kernel, u0, dt, nsteps, spec.n_store)
    diag = dict(max_update=max_update, wall_s=wall, dt=dt, steps=nsteps,
                cfl_ratio=dt * kernel.cfl_denominator(),
                n_vertices=r.shape[1])
    return GridSolution(spec=spec, kind="averaged", epsilon=None, dt=dt, times=times,
                        steps=steps, slices=slices, diagnostics=diag,
                        _advance=kernel.advance)


def dpp_check(sol: GridSolution, delta_steps: int) -> float:
    """Semigroup re-run: restart the scheme from the stored slice delta_steps
    before the final one and report the max abs discrepancy at the end."""
    if delta_steps < 0:
        raise ConfigError("delta_steps must be >= 0")
    if delta_steps == 0:
        return 0.0
    if sol._advance is None:
        raise ConfigError("solution does not carry a restartable kernel")
    k2 = int(sol.steps[-1])
    k1 = k2 - delta_steps
    hits = np.nonzero(sol.steps == k1)[0]
    if len(hits) == 0:
        avail = [int(k2 - s) for s in sol.steps[:-1]]
        raise ConfigError(
            f"no stored slice {delta_steps} steps before the end; available "
            f"deltas: {avail}"
        )
    u = sol.slices[hits[0]].copy()
    u = sol._advance(u, delta_steps)
    return float(np.max(np.abs(u - sol.slices[-1])))


def certified_dt_two_scale(sys: coeffx.TwoScaleSystem, spec: GridSpec) -> float:
    xs = spec.slow.coords(spec.pad_nodes)
    yf = spec.fast.coords(spec.pad_nodes)
    probe = _TwoScaleKernel2D(sys, xs, yf, spec.slow.h, spec.fast.h, dt=1.0)
    return CFL_SAFETY / probe.cfl_denominator()


def fast_box_halfwidth(eta: float, starts=()) -> float:
    """Dissipation-scaled fast-axis half width: 5/sqrt(eta) plus start offsets."""
    pad = max((abs(float(s)) for s in starts), default=0.0)
    return 5.0 / np.sqrt(eta) + pad
