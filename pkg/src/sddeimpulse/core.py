"""Problem definitions, control algebra, payoff evaluation and assumption checks.

State and impulses are scalar: the delayed-feedback application and both tiny
validation instances are one-dimensional, and every downstream module (lattice,
bellman) assumes a scalar current value with scalar lags.

All coefficient callables must accept numpy arrays elementwise (the built-in
registry functions do).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TIME_TOL = 1e-9


class ValidationError(ValueError):
    """Raised when a spec, control or config violates a structural invariant."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImpulseSet:
    """Closed interval of admissible scalar impulse magnitudes."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValidationError("impulse set bounds must be finite")
        if self.lower > self.upper:
            raise ValidationError("impulse set is empty")

    def contains(self, u, tol=TIME_TOL):
        return self.lower - tol <= u <= self.upper + tol

    def grid(self, n_points):
        """Uniform discretization, endpoints included."""
        if n_points < 1:
            raise ValidationError("impulse grid needs at least one point")
        if n_points == 1:
            return np.array([0.5 * (self.lower + self.upper)])
        return np.linspace(self.lower, self.upper, n_points)


@dataclass(frozen=True)
class ProblemSpec:
    """One impulse-control problem: dynamics, intervention map, rewards, costs.

    Sign convention: the engine always MAXIMIZES
        E[ sum f(t_k, X_k) dt + g(X_T) - sum ell(X_pre, u, t) ].
    Cost-minimization problems are encoded by negating f and g.
    """

    horizon: float
    delay: float
    drift: Callable  # (t, x, x_delayed) -> dx/dt contribution
    diffusion: Callable  # (t, x, x_delayed) -> noise coefficient
    intervention: Callable  # Gamma(x, u) -> post-impulse value
    running_reward: Callable  # f(t, x)
    impulse_cost: Callable  # ell(x, u, t)
    terminal_reward: Callable  # g(x)
    impulse_set: ImpulseSet
    initial_segment: Callable  # alpha(t) on [-delay, 0]
    min_impulse_cost: float = 0.05  # strict lower bound required of ell
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")
        if self.delay < 0:
            raise ValidationError("delay must be nonnegative")
        if not self.min_impulse_cost > 0:
            raise ValidationError("min_impulse_cost must be positive")


@dataclass(frozen=True)
class ImpulseControl:
    """Finite ordered sequence of (time, impulse) pairs with nondecreasing times.

    Events scheduled exactly at the horizon are inert: they are never applied
    and never charged (a time-T pair marks an unused intervention slot).
    """

    events: tuple = ()

    def __post_init__(self):
        evs = tuple((float(t), float(u)) for t, u in self.events)
        object.__setattr__(self, "events", evs)
        times = [t for t, _ in evs]
        if any(b < a - TIME_TOL for a, b in zip(times, times[1:])):
            raise ValidationError("impulse times must be nondecreasing")

    def __len__(self):
        return len(self.events)

    def times(self):
        return np.array([t for t, _ in self.events])

    def validate_against(self, spec: ProblemSpec):
        for t, u in self.events:
            if t < -TIME_TOL or t > spec.horizon + TIME_TOL:
                raise ValidationError(f"impulse time {t} outside [0, {spec.horizon}]")
            if not spec.impulse_set.contains(u):
                raise ValidationError(f"impulse {u} outside admissible set")


@dataclass(frozen=True)
class ImpulseEvent:
    """One applied impulse: grid index and pre/post state values."""

    index: int
    pre: float
    impulse: float
    post: float


@dataclass(frozen=True)
class Trajectory:
    """Time-gridded controlled path, including the initial-segment history.

    `times` runs from -delay to the horizon; `offset` is the index of t = 0.
    `values[offset + k]` is the post-impulse state at grid time t_k.
    """

    times: np.ndarray
    values: np.ndarray
    events: tuple
    offset: int = 0

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise ValidationError("times and values length mismatch")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def value_at_step(self, k):
        """State at grid time t_k = k*dt, k counted from zero."""
        return float(self.values[self.offset + k])


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def compose_controls(first: ImpulseControl, second: ImpulseControl,
                     horizon: float, impulse_set: ImpulseSet | None = None) -> ImpulseControl:
    """Concatenate two controls: keep `first` strictly before the horizon, then
    append `second` with each time floored by the last kept time of `first`."""
    if impulse_set is not None:
        for ctrl in (first, second):
            for _, u in ctrl.events:
                if not impulse_set.contains(u):
                    raise ValidationError(f"impulse {u} outside admissible set")
    kept = [(t, u) for t, u in first.events if t < horizon - TIME_TOL]
    floor = kept[-1][0] if kept else 0.0
    tail = [(max(t, floor), u) for t, u in second.events]
    return ImpulseControl(tuple(kept) + tuple(tail))


def total_payoff(spec: ProblemSpec, traj: Trajectory, control: ImpulseControl) -> float:
    """Realized payoff of one controlled path: left-endpoint quadrature of the
    running reward, terminal reward, minus impulse costs at pre-impulse values.

    The trajectory's recorded impulse events must match `control` (inert
    time-T events excluded); a mismatch is an error, not a silent zero.
    """
    dt = traj.dt
    n_steps = len(traj.times) - 1 - traj.offset
    active = [(t, u) for t, u in control.events if t < spec.horizon - TIME_TOL]
    if len(active) != len(traj.events):
        raise ValidationError(
            f"control has {len(active)} active events, trajectory recorded {len(traj.events)}")
    for (t, u), ev in zip(active, traj.events):
        k = int(round(t / dt))
        if abs(t - k * dt) > TIME_TOL or k != ev.index:
            raise ValidationError(f"control event at t={t} does not match trajectory index {ev.index}")
        if abs(u - ev.impulse) > TIME_TOL:
            raise ValidationError(f"impulse mismatch at t={t}: {u} vs {ev.impulse}")

    ks = np.arange(n_steps)
    xs = traj.values[traj.offset:traj.offset + n_steps]
    running = float(np.sum(spec.running_reward(ks * dt, xs)) * dt)
    terminal = float(spec.terminal_reward(traj.values[-1]))
    cost = sum(float(spec.impulse_cost(ev.pre, ev.impulse, ev.index * dt))
               for ev in traj.events)
    return running + terminal - cost


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    estimate: float
    witness: tuple
    detail: str = ""


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def check_assumptions(spec: ProblemSpec, sample_budget: int, rng_seed: int,
                      growth_bound: float = 10.0, state_range: float = 5.0) -> AssumptionReport:
    """Monte Carlo probe of the regularity assumptions on (a, b, f, ell, Gamma).

    Estimates Lipschitz ratios over random point pairs and checks the jump
    growth bound |Gamma(x,u)| <= max(growth_bound, |x|), the jump contraction
    |Gamma(x,u)-Gamma(y,v)| <= |(x,u)-(y,v)| and the strict cost floor
    ell >= min_impulse_cost.  Report-only: failures are entries, not errors.
    """
    if sample_budget < 1:
        raise ValidationError("sample_budget must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = int(sample_budget)
    t = rng.uniform(0, spec.horizon, n)
    x, y, x2, y2 = (rng.uniform(-state_range, state_range, n) for _ in range(4))
    lo, hi = spec.impulse_set.lower, spec.impulse_set.upper
    u, v = rng.uniform(lo, hi, n), rng.uniform(lo, hi, n)
    t2 = rng.uniform(0, spec.horizon, n)

    def lip_ratio(num, den):
        den = np.maximum(den, 1e-12)
        return num / den

    checks = []

    def ratio_check(name, num, den, args):
        r = lip_ratio(np.abs(num), den)
        i = int(np.argmax(r))
        checks.append(CheckResult(name, bool(np.all(np.isfinite(r))), float(r[i]),
                                  tuple(float(a[i]) for a in args),
                                  "estimated Lipschitz ratio (max over samples)"))

    pair_dist = np.abs(x - x2) + np.abs(y - y2)
    ratio_check("drift_lipschitz",
                spec.drift(t, x, y) - spec.drift(t, x2, y2), pair_dist, (t, x, y, x2, y2))
    ratio_check("diffusion_lipschitz",
                spec.diffusion(t, x, y) - spec.diffusion(t, x2, y2), pair_dist, (t, x, y, x2, y2))
    ratio_check("running_reward_lipschitz",
                spec.running_reward(t, x) - spec.running_reward(t, x2),
                np.abs(x - x2), (t, x, x2))
    ell_dist = np.sqrt((x - x2) ** 2 + (u - v) ** 2 + (t - t2) ** 2)
    ratio_check("impulse_cost_lipschitz",
                spec.impulse_cost(x, u, t) - spec.impulse_cost(x2, v, t2),
                ell_dist, (x, u, t, x2, v, t2))

    gx = spec.intervention(x, u)
    excess = np.abs(gx) - np.maximum(growth_bound, np.abs(x))
    i = int(np.argmax(excess))
    checks.append(CheckResult("intervention_growth", bool(excess[i] <= 1e-12),
                              float(excess[i]), (float(x[i]), float(u[i])),
                              f"|Gamma(x,u)| - max({growth_bound}, |x|), max over samples"))

    gy = spec.intervention(y, v)
    contraction = np.abs(gx - gy) - np.sqrt((x - y) ** 2 + (u - v) ** 2)
    i = int(np.argmax(contraction))
    checks.append(CheckResult("intervention_lipschitz", bool(contraction[i] <= 1e-12),
                              float(contraction[i]),
                              (float(x[i]), float(u[i]), float(y[i]), float(v[i])),
                              "|Gamma(x,u)-Gamma(y,v)| - |(x,u)-(y,v)|, max over samples"))

    ell = spec.impulse_cost(x, u, t)
    i = int(np.argmin(ell))
    checks.append(CheckResult("impulse_cost_positive", bool(ell[i] > spec.min_impulse_cost),
                              float(ell[i]), (float(x[i]), float(u[i]), float(t[i])),
                              f"min sampled cost, required > {spec.min_impulse_cost}"))

    return AssumptionReport(tuple(checks))


# ---------------------------------------------------------------------------
# Coefficient registry (JSON-loadable problem specs)
# ---------------------------------------------------------------------------

def _take(cfg, name, *, required=(), optional=()):
    unknown = set(cfg) - {"name"} - set(required) - set(o for o, _ in optional)
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)} in {name} config")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ValidationError(f"missing keys {missing} in {name} config")
    out = {k: float(cfg[k]) for k in required}
    out.update({k: float(cfg.get(k, d)) for k, d in optional})
    return out


def _build_drift(cfg):
    name = cfg.get("name")
    if name == "zero":
        _take(cfg, "drift")
        return lambda t, x, y: np.zeros_like(np.asarray(x, dtype=float))
    if name == "linear_delay_feedback":
        p = _take(cfg, "drift", required=("a", "k_p"))
        a, kp = p["a"], p["k_p"]
        return lambda t, x, y: a * x - kp * y
    if name == "custom_affine":
        p = _take(cfg, "drift", optional=(("c0", 0.0), ("c_x", 0.0), ("c_y", 0.0)))
        return lambda t, x, y: p["c0"] + p["c_x"] * x + p["c_y"] * y
    raise ValidationError(f"unknown drift registry name: {name!r}")


def _build_diffusion(cfg):
    name = cfg.get("name")
    if name == "constant":
        p = _take(cfg, "diffusion", required=("value",))
        val = p["value"]
        return lambda t, x, y: np.full_like(np.asarray(x, dtype=float), val)
    if name == "zero":
        _take(cfg, "diffusion")
        return lambda t, x, y: np.zeros_like(np.asarray(x, dtype=float))
    raise ValidationError(f"unknown diffusion registry name: {name!r}")


def _build_intervention(cfg):
    name = cfg.get("name")
    if name == "additive":
        _take(cfg, "intervention")
        return lambda x, u: x + u
    if name == "additive_clamped":
        p = _take(cfg, "intervention", required=("limit",))
        lim = p["limit"]
        return lambda x, u: np.clip(x + u, -lim, lim)
    raise ValidationError(f"unknown intervention registry name: {name!r}")


def _build_running_reward(cfg):
    name = cfg.get("name")
    if name == "neg_square":
        _take(cfg, "running_reward")
        return lambda t, x: -(x * x)
    if name == "zero":
        _take(cfg, "running_reward")
        return lambda t, x: np.zeros_like(np.asarray(x, dtype=float))
    raise ValidationError(f"unknown running_reward registry name: {name!r}")


def _build_terminal_reward(cfg):
    name = cfg.get("name")
    if name == "neg_square":
        _take(cfg, "terminal_reward")
        return lambda x: -(x * x)
    if name == "zero":
        _take(cfg, "terminal_reward")
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    raise ValidationError(f"unknown terminal_reward registry name: {name!r}")


def _build_impulse_cost(cfg):
    name = cfg.get("name")
    if name == "quadratic":
        p = _take(cfg, "impulse_cost", optional=(("scale", 0.1),))
        s = p["scale"]
        return lambda x, u, t: s * (1.0 + u * u)
    if name == "constant":
        p = _take(cfg, "impulse_cost", required=("value",))
        val = p["value"]
        return lambda x, u, t: np.full_like(np.asarray(np.broadcast_arrays(x, u)[0], dtype=float), val)
    raise ValidationError(f"unknown impulse_cost registry name: {name!r}")


def _build_initial_segment(cfg):
    name = cfg.get("name")
    if name == "constant":
        p = _take(cfg, "initial_segment", optional=(("value", 0.0),))
        val = p["value"]
        return lambda t: np.full_like(np.asarray(t, dtype=float), val)
    raise ValidationError(f"unknown initial_segment registry name: {name!r}")


_PROBLEM_KEYS = {"drift", "diffusion", "intervention", "running_reward",
                 "terminal_reward", "impulse_cost", "initial_segment",
                 "impulse_set", "horizon", "delay", "min_impulse_cost"}


def build_problem_spec(problem_cfg: dict) -> ProblemSpec:
    """Build a ProblemSpec from a JSON-style dict of registry selections.

    Unknown keys anywhere in the document are errors.
    """
    unknown = set(problem_cfg) - _PROBLEM_KEYS
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)} in problem config")
    for key in sorted(_PROBLEM_KEYS - {"min_impulse_cost"}):
        if key not in problem_cfg:
            raise ValidationError(f"missing key {key!r} in problem config")
    lo, hi = problem_cfg["impulse_set"]
    return ProblemSpec(
        horizon=float(problem_cfg["horizon"]),
        delay=float(problem_cfg["delay"]),
        drift=_build_drift(problem_cfg["drift"]),
        diffusion=_build_diffusion(problem_cfg["diffusion"]),
        intervention=_build_intervention(problem_cfg["intervention"]),
        running_reward=_build_running_reward(problem_cfg["running_reward"]),
        terminal_reward=_build_terminal_reward(problem_cfg["terminal_reward"]),
        impulse_cost=_build_impulse_cost(problem_cfg["impulse_cost"]),
        impulse_set=ImpulseSet(float(lo), float(hi)),
        initial_segment=_build_initial_segment(problem_cfg["initial_segment"]),
        min_impulse_cost=float(problem_cfg.get("min_impulse_cost", 0.05)),
        meta={"problem": problem_cfg},
    )
