"""Euler-Maruyama simulation of impulsively controlled delay SDE paths.

Noise comes from counter-based Philox streams keyed by (seed, path index), so
results are reproducible no matter how paths are scheduled.  Batch routines
vectorize the time loop across paths; reductions run in path-index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (TIME_TOL, ImpulseControl, ImpulseEvent, ProblemSpec,
                   Trajectory, ValidationError)

OVERFLOW_LIMIT = 1e9


class SimulationError(RuntimeError):
    """Non-finite or exploding state during path simulation."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt for k = -delay_steps ... n_steps."""

    dt: float
    n_steps: int
    delay_steps: int

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1 or self.delay_steps < 0:
            raise ValidationError("invalid time grid")

    @classmethod
    def for_spec(cls, spec: ProblemSpec, dt: float) -> "TimeGrid":
        n = round(spec.horizon / dt)
        if abs(n * dt - spec.horizon) > TIME_TOL:
            raise ValidationError(f"dt={dt} does not divide horizon {spec.horizon}")
        d = round(spec.delay / dt)
        if abs(d * dt - spec.delay) > TIME_TOL:
            raise ValidationError(f"dt={dt} does not divide delay {spec.delay}")
        return cls(dt=dt, n_steps=int(n), delay_steps=int(d))

    @property
    def horizon(self):
        return self.n_steps * self.dt

    def times(self, include_history=False):
        start = -self.delay_steps if include_history else 0
        return np.arange(start, self.n_steps + 1) * self.dt

    def index_of(self, t):
        k = int(round(t / self.dt))
        if abs(t - k * self.dt) > TIME_TOL or k < 0 or k > self.n_steps:
            raise ValidationError(f"time {t} is not on the grid")
        return k


@dataclass(frozen=True)
class NoiseDraw:
    """Gaussian increments N(0, dt), one per grid step, from a keyed stream."""

    increments: np.ndarray
    seed: int
    path_index: int
    dt: float

    def __post_init__(self):
        if self.increments.ndim != 1:
            raise ValidationError("increments must be one row per grid step")


def draw_noise(seed: int, path_index: int, grid: TimeGrid) -> NoiseDraw:
    """Increments for one path; reproducible from (seed, path_index, shape)."""
    gen = np.random.Generator(np.random.Philox(key=[seed, path_index]))
    inc = gen.normal(0.0, math.sqrt(grid.dt), grid.n_steps)
    return NoiseDraw(increments=inc, seed=seed, path_index=path_index, dt=grid.dt)


def draw_noise_matrix(seed: int, n_paths: int, grid: TimeGrid) -> np.ndarray:
    """(n_paths, n_steps) increments; row i is path i's stream."""
    out = np.empty((n_paths, grid.n_steps))
    for i in range(n_paths):
        out[i] = draw_noise(seed, i, grid).increments
    return out


def _events_by_index(control: ImpulseControl, spec: ProblemSpec, grid: TimeGrid):
    """Active (index, impulse) pairs; time-horizon events are inert."""
    control.validate_against(spec)
    out = []
    for t, u in control.events:
        if t >= grid.horizon - TIME_TOL:
            continue
        out.append((grid.index_of(t), u))
    return out


def simulate_controlled(spec: ProblemSpec, control: ImpulseControl,
                        noise: NoiseDraw, grid: TimeGrid) -> Trajectory:
    """One Euler path under a fixed control.

    At each grid time the scheduled impulse is applied first (the reset acts on
    the left limit), then the Euler step; the recorded value at t_k is the
    post-impulse state.  Delayed reads below t = 0 come from the initial
    segment samples.
    """
    if len(noise.increments) != grid.n_steps or abs(noise.dt - grid.dt) > TIME_TOL:
        raise ValidationError("noise shape does not match grid")
    events = _events_by_index(control, spec, grid)

    off = grid.delay_steps
    total = off + grid.n_steps + 1
    values = np.empty(total)
    hist_t = np.arange(-off, 1) * grid.dt
    values[:off + 1] = spec.initial_segment(hist_t)
    if not np.all(np.isfinite(values[:off + 1])):
        raise ValidationError("initial segment samples must be finite")

    recorded = []
    x = values[off]
    for k in range(grid.n_steps + 1):
        for idx, u in events:
            if idx == k:
                pre = x
                x = float(spec.intervention(pre, u))
                recorded.append(ImpulseEvent(index=k, pre=pre, impulse=u, post=x))
        values[off + k] = x
        if not math.isfinite(x) or abs(x) > OVERFLOW_LIMIT:
            raise SimulationError(f"state overflow at step {k}", step=k,
                                  path=noise.path_index)
        if k == grid.n_steps:
            break
        t = k * grid.dt
        x_del = values[off + k - grid.delay_steps]
        x = x + float(spec.drift(t, x, x_del)) * grid.dt \
            + float(spec.diffusion(t, x, x_del)) * noise.increments[k]

    return Trajectory(times=grid.times(include_history=True), values=values,
                      events=tuple(recorded), offset=off)


# ---------------------------------------------------------------------------
# Vectorized batch engine
# ---------------------------------------------------------------------------

def _simulate_batch(spec: ProblemSpec, grid: TimeGrid, noise: np.ndarray,
                    control: ImpulseControl | None = None, policy=None,
                    return_paths: bool = False):
    """Simulate all rows of `noise` at once under a fixed control or a policy.

    A policy is queried once per grid time (at most one impulse per step) via
    `decide_batch(time_index, states)` on the lifted state, rows = paths.
    Returns (payoffs, impulse_counts[, paths]); paths exclude the history part.
    """
    n_paths, n_steps = noise.shape
    if n_steps != grid.n_steps:
        raise ValidationError("noise shape does not match grid")
    events = _events_by_index(control, spec, grid) if control is not None else []

    m = grid.delay_steps + 1
    hist_t = np.arange(-grid.delay_steps, 1) * grid.dt
    hist = np.asarray(spec.initial_segment(hist_t), dtype=float)
    # states[:, 0] is the current value, states[:, j] the value j steps back
    states = np.tile(hist[::-1], (n_paths, 1))

    running = np.zeros(n_paths)
    cost = np.zeros(n_paths)
    counts = np.zeros(n_paths, dtype=int)
    paths = np.empty((n_paths, grid.n_steps + 1)) if return_paths else None

    for k in range(grid.n_steps + 1):
        t = k * grid.dt
        if k < grid.n_steps:
            for idx, u in events:
                if idx == k:
                    pre = states[:, 0].copy()
                    states[:, 0] = spec.intervention(pre, u)
                    cost += spec.impulse_cost(pre, u, t)
                    counts += 1
            if policy is not None:
                mask, us = policy.decide_batch(k, states)
                if np.any(mask):
                    pre = states[mask, 0].copy()
                    states[mask, 0] = spec.intervention(pre, us[mask])
                    cost[mask] += spec.impulse_cost(pre, us[mask], t)
                    counts[mask] += 1
        x = states[:, 0]
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > OVERFLOW_LIMIT):
            bad = int(np.argmax(~np.isfinite(x) | (np.abs(x) > OVERFLOW_LIMIT)))
            raise SimulationError(f"state overflow at step {k} (path {bad})",
                                  step=k, path=bad)
        if return_paths:
            paths[:, k] = x
        if k == grid.n_steps:
            break
        running += spec.running_reward(t, x) * grid.dt
        x_del = states[:, m - 1]
        new = x + spec.drift(t, x, x_del) * grid.dt \
            + spec.diffusion(t, x, x_del) * noise[:, k]
        states[:, 1:] = states[:, :-1]
        states[:, 0] = new

    payoffs = running + spec.terminal_reward(states[:, 0]) - cost
    if return_paths:
        return payoffs, counts, paths
    return payoffs, counts


def estimate_J(spec: ProblemSpec, policy_or_control, n_paths: int, seed: int,
               grid: TimeGrid):
    """Monte Carlo mean and standard error of the total payoff.

    `policy_or_control` is either a fixed ImpulseControl (same events on every
    path) or a policy object with decide_batch.  Deterministic for a fixed
    seed: path i always consumes the (seed, i) noise stream.
    """
    if n_paths < 2:
        raise ValidationError("n_paths must be >= 2")
    noise = draw_noise_matrix(seed, n_paths, grid)
    if isinstance(policy_or_control, ImpulseControl):
        payoffs, _ = _simulate_batch(spec, grid, noise, control=policy_or_control)
    else:
        payoffs, _ = _simulate_batch(spec, grid, noise, policy=policy_or_control)
    mean = float(np.mean(payoffs))
    stderr = float(np.std(payoffs, ddof=1) / math.sqrt(n_paths))
    return mean, stderr


def _single(pair):
    return ImpulseControl((pair,))


def coupled_sup_diffs(spec: ProblemSpec, prefix: ImpulseControl, pair_a, pair_b,
                      suffix: ImpulseControl, n_paths: int, seed: int,
                      grid: TimeGrid) -> np.ndarray:
    """Per-path sup_{s >= t_hat} |X^a_s - X^b_s| under common noise, where the
    two controls are prefix o pair o suffix and t_hat is the later pair time."""
    T = grid.horizon
    ca = compose3(prefix, pair_a, suffix, T)
    cb = compose3(prefix, pair_b, suffix, T)
    noise = draw_noise_matrix(seed, n_paths, grid)
    _, _, pa = _simulate_batch(spec, grid, noise, control=ca, return_paths=True)
    _, _, pb = _simulate_batch(spec, grid, noise, control=cb, return_paths=True)
    k_hat = grid.index_of(max(pair_a[0], pair_b[0]))
    return np.max(np.abs(pa[:, k_hat:] - pb[:, k_hat:]), axis=1)


def compose3(prefix, pair, suffix, horizon):
    from .core import compose_controls
    return compose_controls(compose_controls(prefix, _single(pair), horizon),
                            suffix, horizon)


def flow_stability_probe(spec: ProblemSpec, prefix: ImpulseControl, pair_a,
                         pair_b, suffix: ImpulseControl, n_paths: int,
                         seed: int, grid: TimeGrid) -> float:
    """Monte Carlo estimate of E[sup_{s>=t_hat} |difference|^(4+2m)] for the
    two coupled controlled paths, m = 1 (scalar impulses)."""
    sups = coupled_sup_diffs(spec, prefix, pair_a, pair_b, suffix,
                             n_paths, seed, grid)
    return float(np.mean(sups ** 6))


def export_trajectories_csv(path, spec: ProblemSpec, policy_or_control,
                            n_paths: int, seed: int, grid: TimeGrid):
    """Write controlled sample paths as CSV rows
    path_id,time,value,impulse_flag,impulse_value."""
    lines = ["path_id,time,value,impulse_flag,impulse_value"]
    for i in range(n_paths):
        if isinstance(policy_or_control, ImpulseControl):
            traj = simulate_controlled(spec, policy_or_control,
                                       draw_noise(seed, i, grid), grid)
            values = traj.values[traj.offset:]
            events = {ev.index: ev for ev in traj.events}
        else:
            noise = draw_noise(seed, i, grid).increments[None, :]
            _, _, p, evs = _simulate_batch_with_events(spec, grid, noise,
                                                       policy_or_control)
            values = p[0]
            events = {ev.index: ev for ev in evs[0]}
        for k in range(grid.n_steps + 1):
            ev = events.get(k)
            flag = 1 if ev is not None else 0
            uval = f"{ev.impulse:.17g}" if ev is not None else ""
            lines.append(f"{i},{k * grid.dt:.17g},{values[k]:.17g},{flag},{uval}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _simulate_batch_with_events(spec, grid, noise, policy):
    """Like _simulate_batch under a policy, but records per-path impulse events."""
    n_paths = noise.shape[0]
    m = grid.delay_steps + 1
    hist_t = np.arange(-grid.delay_steps, 1) * grid.dt
    hist = np.asarray(spec.initial_segment(hist_t), dtype=float)
    states = np.tile(hist[::-1], (n_paths, 1))
    running = np.zeros(n_paths)
    cost = np.zeros(n_paths)
    paths = np.empty((n_paths, grid.n_steps + 1))
    events = [[] for _ in range(n_paths)]

    for k in range(grid.n_steps + 1):
        t = k * grid.dt
        if k < grid.n_steps:
            mask, us = policy.decide_batch(k, states)
            if np.any(mask):
                pre = states[mask, 0].copy()
                post = spec.intervention(pre, us[mask])
                states[mask, 0] = post
                cost[mask] += spec.impulse_cost(pre, us[mask], t)
                for j, (pi, ui, qi) in zip(np.nonzero(mask)[0], zip(pre, us[mask], post)):
                    events[j].append(ImpulseEvent(index=k, pre=float(pi),
                                                  impulse=float(ui), post=float(qi)))
        paths[:, k] = states[:, 0]
        if k == grid.n_steps:
            break
        x = states[:, 0]
        running += spec.running_reward(t, x) * grid.dt
        x_del = states[:, m - 1]
        new = x + spec.drift(t, x, x_del) * grid.dt \
            + spec.diffusion(t, x, x_del) * noise[:, k]
        states[:, 1:] = states[:, :-1]
        states[:, 0] = new

    payoffs = running + spec.terminal_reward(states[:, 0]) - cost
    return payoffs, cost, paths, [tuple(e) for e in events]
