"""Experiment configuration: TOML schema, validation, and object assembly.

A config file has sections [system], [g], [grid], [ladder], and [experiment]
(plus [generator] for table builds); coefficient expressions are quoted
strings.  Everything is validated before any compute starts, so a malformed
config never produces partial outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import coeffx, fnpde, gcore, scenario
from .errors import ConfigError

EXPERIMENT_KINDS = ("converge", "gheat_oracle", "max_oracle", "findim",
                    "contraction", "khasminskii", "moments", "generator",
                    "simulate", "check")


def _need(section: dict, key: str, types, where: str):
    if key not in section:
        raise ConfigError(f"missing [{where}] key {key!r}")
    val = section[key]
    if not isinstance(val, types):
        raise ConfigError(
            f"[{where}] {key} has type {type(val).__name__}, expected "
            f"{types if isinstance(types, type) else '/'.join(t.__name__ for t in types)}"
        )
    return val


def _opt(section: dict, key: str, types, default, where: str):
    if key not in section:
        return default
    return _need(section, key, types, where)


_NUM = (int, float)


@dataclass
class ExperimentConfig:
    raw: dict
    config_hash: str
    kind: str
    seed: int
    system_exprs: dict
    epsilon: float
    phi_src: str
    eta: float
    lip: float
    growth: float
    g_kind: str
    g_params: dict
    grid: dict
    ladder: list
    generator: dict
    experiment: dict
    threads: int = 1

    # ---- assembly -------------------------------------------------------

    def gfunction(self) -> gcore.GFunction:
        if self.g_kind == "interval":
            return gcore.g_from_interval(self.g_params["sigma_lo_sq"],
                                         self.g_params["sigma_hi_sq"])
        return gcore.g_from_matrices(self.g_params["matrices"])

    def system(self) -> coeffx.TwoScaleSystem:
        return coeffx.make_system(self.gfunction(), self.system_exprs,
                                  self.epsilon, self.phi_src, self.eta,
                                  self.lip, self.growth)

    def slow_axis(self) -> fnpde.Axis:
        gr = self.grid
        return fnpde.Axis(gr["slow_lo"], gr["slow_hi"], gr["slow_nodes"])

    def fast_axis(self) -> fnpde.Axis | None:
        gr = self.grid
        if gr.get("fast_nodes") is None:
            return None
        return fnpde.Axis(gr["fast_lo"], gr["fast_hi"], gr["fast_nodes"])

    def grid_spec(self, with_fast: bool = True) -> fnpde.GridSpec:
        gr = self.grid
        return fnpde.GridSpec(
            slow=self.slow_axis(),
            fast=self.fast_axis() if with_fast else None,
            horizon=gr["horizon"],
            dt=gr.get("dt"),
            boundary_margin=gr["boundary_margin"],
            pad_nodes=gr["pad_nodes"],
            n_store=gr["n_store"],
        )

    def policy(self) -> scenario.ControlPolicy:
        src = self.experiment.get("policy", "")
        if not src:
            lo, hi = self.gfunction().scalar_bounds
            return scenario.constant_policy(hi)
        return parse_policy(src)

    def sample_box(self) -> coeffx.SampleBox:
        gr = self.grid
        return coeffx.SampleBox(gr["slow_lo"], gr["slow_hi"],
                                gr.get("fast_lo", -1.0), gr.get("fast_hi", 1.0))


def parse_policy(src: str) -> scenario.ControlPolicy:
    """'constant:2.0' | 'schedule:0:1.0,0.25:4.0' | 'bangbang:<expr>'."""
    kind, _, rest = src.partition(":")
    kind = kind.strip().lower()
    if kind == "constant":
        try:
            return scenario.constant_policy(float(rest))
        except ValueError:
            raise ConfigError(f"bad constant policy value {rest!r}") from None
    if kind == "schedule":
        entries = []
        for part in rest.split(","):
            t, _, v = part.partition(":")
            try:
                entries.append((float(t), float(v)))
            except ValueError:
                raise ConfigError(f"bad schedule entry {part!r}") from None
        return scenario.ControlPolicy("schedule", schedule=tuple(entries))
    if kind in ("bangbang", "bang_bang"):
        expr = coeffx.parse_expr(rest, 1, 1)
        return scenario.ControlPolicy("bang_bang", functional=expr)
    raise ConfigError(f"unknown policy kind {kind!r}")


def load_config(path, seed_override: int | None = None,
                threads: int = 1) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = tomllib.loads(blob.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    sytab = raw.get("system")
    if not isinstance(sytab, dict):
        raise ConfigError("missing [system] section")
    exprs = {}
    for name in coeffx.FIELD_NAMES:
        exprs[name] = _need(sytab, name, str, "system")
        coeffx.parse_expr(exprs[name], 1, 1)  # validate now
    phi_src = _need(sytab, "phi", str, "system")
    coeffx.parse_expr(phi_src, 1, 0)
    epsilon = float(_need(sytab, "epsilon", _NUM, "system"))
    if not (0.0 < epsilon < 1.0):
        raise ConfigError(f"[system] epsilon must lie in (0, 1), got {epsilon}")
    eta = float(_need(sytab, "eta", _NUM, "system"))
    lip = float(_need(sytab, "lip", _NUM, "system"))
    growth = float(_need(sytab, "growth", _NUM, "system"))
    if min(eta, lip, growth) <= 0:
        raise ConfigError("[system] eta, lip, growth must be positive")

    gtab = raw.get("g")
    if not isinstance(gtab, dict):
        raise ConfigError("missing [g] section")
    g_kind = _opt(gtab, "kind", str, "interval", "g")
    if g_kind == "interval":
        lo = float(_need(gtab, "sigma_lo_sq", _NUM, "g"))
        hi = float(_need(gtab, "sigma_hi_sq", _NUM, "g"))
        if not (0.0 < lo <= hi):
            raise ConfigError("[g] needs 0 < sigma_lo_sq <= sigma_hi_sq")
        g_params = {"sigma_lo_sq": lo, "sigma_hi_sq": hi}
    elif g_kind == "finite":
        mats = _need(gtab, "matrices", list, "g")
        g_params = {"matrices": [np.asarray(m, dtype=float) for m in mats]}
    else:
        raise ConfigError(f"[g] kind must be 'interval' or 'finite', got {g_kind!r}")

    grtab = raw.get("grid")
    if not isinstance(grtab, dict):
        raise ConfigError("missing [grid] section")
    grid = {
        "slow_lo": float(_need(grtab, "slow_lo", _NUM, "grid")),
        "slow_hi": float(_need(grtab, "slow_hi", _NUM, "grid")),
        "slow_nodes": int(_need(grtab, "slow_nodes", int, "grid")),
        "horizon": float(_need(grtab, "horizon", _NUM, "grid")),
        "boundary_margin": int(_opt(grtab, "boundary_margin", int, 8, "grid")),
        "pad_nodes": int(_opt(grtab, "pad_nodes", int, 0, "grid")),
        "n_store": int(_opt(grtab, "n_store", int, 33, "grid")),
    }
    dt = _opt(grtab, "dt", _NUM, 0.0, "grid")
    grid["dt"] = float(dt) if dt else None
    if "fast_nodes" in grtab:
        grid["fast_lo"] = float(_need(grtab, "fast_lo", _NUM, "grid"))
        grid["fast_hi"] = float(_need(grtab, "fast_hi", _NUM, "grid"))
        grid["fast_nodes"] = int(_need(grtab, "fast_nodes", int, "grid"))

    ladtab = raw.get("ladder", {})
    ladder = [float(e) for e in _opt(ladtab, "epsilons", list, [], "ladder")]
    if ladder:
        if any(not (0.0 < e < 1.0) for e in ladder):
            raise ConfigError("[ladder] entries must lie in (0, 1)")
        if any(not (b < a) for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("[ladder] epsilons must be strictly decreasing")

    gentab = raw.get("generator", {})
    generator = {
        "x_grid": [float(x) for x in _opt(gentab, "x_grid", list, [0.0], "generator")],
        "directions": int(_opt(gentab, "directions", int, 32, "generator")),
        "horizon": float(_opt(gentab, "horizon", _NUM, 20.0, "generator")),
        "fast_nodes": int(_opt(gentab, "fast_nodes", int, 161, "generator")),
        "alpha_ladder": [float(a) for a in
                         _opt(gentab, "alpha_ladder", list, [0.2, 0.1, 0.05], "generator")],
        "cross_fraction": float(_opt(gentab, "cross_fraction", _NUM, 0.1, "generator")),
        "xbar_starts": [float(s) for s in
                        _opt(gentab, "xbar_starts", list, [-2.0, 0.0, 2.0], "generator")],
    }

    extab = raw.get("experiment")
    if not isinstance(extab, dict):
        raise ConfigError("missing [experiment] section")
    kind = _need(extab, "kind", str, "experiment")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(
            f"[experiment] kind {kind!r} not one of {', '.join(EXPERIMENT_KINDS)}"
        )
    seed = int(_opt(extab, "seed", int, 0, "experiment"))
    if not (0 <= seed < 2 ** 64):
        raise ConfigError("[experiment] seed must fit in an unsigned 64-bit integer")
    experiment = dict(extab)
    experiment.setdefault("window_x", 1.0)
    experiment.setdefault("window_t_frac", 0.2)
    experiment.setdefault("slices", [-1.0, 0.0, 1.0])
    experiment.setdefault("audit_trials", 4000)
    experiment["slices"] = [float(s) for s in experiment["slices"]]

    if kind in ("converge", "findim", "khasminskii", "moments") and not ladder:
        raise ConfigError(f"[ladder] epsilons required for the {kind} experiment")
    if kind in ("converge", "findim", "khasminskii", "simulate", "max_oracle") \
            and "fast_nodes" not in grid:
        raise ConfigError(f"[grid] fast axis required for the {kind} experiment")
    if kind == "findim":
        t1 = float(_need(extab, "t1", _NUM, "experiment"))
        t2 = float(_need(extab, "t2", _NUM, "experiment"))
        if not (0.0 < t1 < t2 <= grid["horizon"] + 1e-12):
            raise ConfigError("[experiment] needs 0 < t1 < t2 <= grid horizon")

    if seed_override is not None:
        if not (0 <= seed_override < 2 ** 64):
            raise ConfigError("--seed must fit in an unsigned 64-bit integer")
        seed = seed_override
    if threads < 1:
        raise ConfigError("--threads must be >= 1")

    return ExperimentConfig(
        raw=raw, config_hash=hashlib.sha256(blob).hexdigest(), kind=kind,
        seed=seed, system_exprs=exprs, epsilon=epsilon, phi_src=phi_src,
        eta=eta, lip=lip, growth=growth, g_kind=g_kind, g_params=g_params,
        grid=grid, ladder=ladder, generator=generator, experiment=experiment,
        threads=threads,
    )
