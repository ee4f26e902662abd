"""Monotone sublinear generators over symmetric matrices.

A generator is realized as G(A) = (1/2) * sup_{gamma in S} tr(gamma A) for an
uncertainty set S of nonnegative symmetric matrices.  This representation is
monotone, subadditive and positively homogeneous by construction, and for
A >= B it satisfies the two-sided bound

    (1/2) * floor * tr(A - B) <= G(A) - G(B) <= (1/2) * cap * tr(A - B),

where floor/cap are the extreme eigenvalues over the set.  The scalar case
(d = 1, S = [lo, hi]) has the closed form G(a) = (hi * a+ - lo * a-) / 2 and
is the fast path used by the PDE kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatchError

PSD_CLAMP_TOL = 1e-12


def _as_sym(a, dim: int | None = None) -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {m.shape}")
    if dim is not None and m.shape[0] != dim:
        raise DimensionMismatchError(dim, m.shape[0])
    if not np.allclose(m, m.T, rtol=0.0, atol=0.0):
        raise ConfigError("matrix is not exactly symmetric")
    return m


@dataclass(frozen=True)
class Interval1D:
    """Scalar volatility band [sigma_lo_sq, sigma_hi_sq], both positive."""

    sigma_lo_sq: float
    sigma_hi_sq: float

    def __post_init__(self):
        if not (0.0 < self.sigma_lo_sq <= self.sigma_hi_sq):
            raise ConfigError(
                "interval bounds must satisfy 0 < sigma_lo_sq <= sigma_hi_sq, "
                f"got [{self.sigma_lo_sq}, {self.sigma_hi_sq}]"
            )


@dataclass(frozen=True)
class FiniteSet:
    """Finite family of positive-definite symmetric matrices of one dimension.

    Eigenvalues in [-PSD_CLAMP_TOL, 0) are clamped to zero at construction;
    anything more negative, or a singular member after clamping, is rejected
    (a singular member would break the lower sandwich bound).
    """

    matrices: tuple = field()

    def __post_init__(self):
        if len(self.matrices) == 0:
            raise ConfigError("finite uncertainty set must be nonempty")
        dim = None
        cleaned = []
        for k, m in enumerate(self.matrices):
            m = _as_sym(m, dim)
            dim = m.shape[0]
            w, v = np.linalg.eigh(m)
            if w.min() < -PSD_CLAMP_TOL:
                raise ConfigError(
                    f"matrix {k} in uncertainty set is not PSD "
                    f"(min eigenvalue {w.min():.3e})"
                )
            if np.any(w < 0.0):
                m = (v * np.maximum(w, 0.0)) @ v.T
                m = 0.5 * (m + m.T)
            if np.linalg.eigh(m)[0].min() <= 0.0:
                raise ConfigError(
                    f"matrix {k} in uncertainty set is singular after clamping; "
                    "every member must be strictly positive definite"
                )
            m.setflags(write=False)
            cleaned.append(m)
        object.__setattr__(self, "matrices", tuple(cleaned))

    @property
    def dim(self) -> int:
        return self.matrices[0].shape[0]


@dataclass(frozen=True)
class GFunction:
    """Sublinear generator with its effective non-degeneracy bounds."""

    dim: int
    uset: Interval1D | FiniteSet
    nondegeneracy_floor: float
    nondegeneracy_cap: float

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if not (0.0 < self.nondegeneracy_floor <= self.nondegeneracy_cap):
            raise ConfigError(
                "non-degeneracy bounds must satisfy 0 < floor <= cap, got "
                f"floor={self.nondegeneracy_floor}, cap={self.nondegeneracy_cap}"
            )

    @property
    def scalar_bounds(self) -> tuple[float, float]:
        """(lo, hi) multipliers for the d=1 closed form."""
        if self.dim != 1:
            raise DimensionMismatchError(1, self.dim, "scalar bounds")
        if isinstance(self.uset, Interval1D):
            return self.uset.sigma_lo_sq, self.uset.sigma_hi_sq
        vals = [float(m[0, 0]) for m in self.uset.matrices]
        return min(vals), max(vals)


def g_from_interval(sigma_lo_sq: float, sigma_hi_sq: float) -> GFunction:
    band = Interval1D(float(sigma_lo_sq), float(sigma_hi_sq))
    return GFunction(1, band, band.sigma_lo_sq, band.sigma_hi_sq)


def g_from_matrices(matrices) -> GFunction:
    uset = FiniteSet(tuple(matrices))
    eigs = [np.linalg.eigvalsh(m) for m in uset.matrices]
    floor = min(float(w.min()) for w in eigs)
    cap = max(float(w.max()) for w in eigs)
    return GFunction(uset.dim, uset, floor, cap)


def eval_g(g: GFunction, a) -> float:
    """G(A) = (1/2) max over the uncertainty set of tr(gamma A)."""
    m = _as_sym(a, None)
    if m.shape[0] != g.dim:
        raise DimensionMismatchError(g.dim, m.shape[0])
    if isinstance(g.uset, Interval1D):
        x = float(m[0, 0])
        return 0.5 * (g.uset.sigma_hi_sq * max(x, 0.0) + g.uset.sigma_lo_sq * min(x, 0.0))
    return 0.5 * max(float(np.trace(gamma @ m)) for gamma in g.uset.matrices)


def scalarize(g: GFunction, m: float) -> float:
    """G applied to the 1x1 matrix [m]; requires dim 1."""
    lo, hi = g.scalar_bounds
    m = float(m)
    return 0.5 * (hi * max(m, 0.0) + lo * min(m, 0.0))


def scalarize_array(g: GFunction, m: np.ndarray) -> np.ndarray:
    """Vectorized scalarize; the hot path of the explicit PDE kernels."""
    lo, hi = g.scalar_bounds
    return 0.5 * (hi * np.maximum(m, 0.0) + lo * np.minimum(m, 0.0))


@dataclass
class AxiomViolation:
    axiom: str
    magnitude: float
    witness: dict


@dataclass
class AxiomReport:
    trials: int
    seed: int
    tol: float
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        status = "ok" if self.ok else f"{len(self.violations)} violation(s)"
        return f"axiom check: {self.trials} trials, tol {self.tol:g}: {status}"


def _rand_sym(rng: np.random.Generator, dim: int) -> np.ndarray:
    m = rng.standard_normal((dim, dim))
    return 0.5 * (m + m.T)


def _rand_psd(rng: np.random.Generator, dim: int) -> np.ndarray:
    m = rng.standard_normal((dim, dim))
    return m @ m.T


def check_axioms(g: GFunction, trials: int, seed: int, tol: float = 1e-12) -> AxiomReport:
    """Sample-based check of monotonicity, subadditivity, positive homogeneity
    and the non-degeneracy sandwich.  Violations are report content, not errors."""
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    violations: list[AxiomViolation] = []

    def record(axiom, magnitude, **witness):
        violations.append(AxiomViolation(axiom, float(magnitude), witness))

    for k in range(trials):
        b = _rand_sym(rng, g.dim)
        p = _rand_psd(rng, g.dim)
        a = b + p
        ga, gb = eval_g(g, a), eval_g(g, b)
        diff = ga - gb
        trp = float(np.trace(p))
        lo_bound = 0.5 * g.nondegeneracy_floor * trp
        hi_bound = 0.5 * g.nondegeneracy_cap * trp
        if diff < -tol:
            record("monotonicity", -diff, trial=k, a=a, b=b)
        if diff < lo_bound - tol or diff > hi_bound + tol:
            record("sandwich", max(lo_bound - diff, diff - hi_bound), trial=k, a=a, b=b)

        c = _rand_sym(rng, g.dim)
        if eval_g(g, b + c) > gb + eval_g(g, c) + tol:
            record("subadditivity", eval_g(g, b + c) - gb - eval_g(g, c), trial=k, a=b, b=c)

        lam = float(rng.choice([0.0, 0.5, 1.0, 2.0, 10.0]))
        lhs, rhs = eval_g(g, lam * b), lam * gb
        scale = max(1.0, abs(rhs))
        if abs(lhs - rhs) > tol * scale:
            record("homogeneity", abs(lhs - rhs), trial=k, lam=lam, a=b)

    if eval_g(g, np.zeros((g.dim, g.dim))) != 0.0:
        record("zero", abs(eval_g(g, np.zeros((g.dim, g.dim)))))
    return AxiomReport(trials=trials, seed=seed, tol=tol, violations=violations)
