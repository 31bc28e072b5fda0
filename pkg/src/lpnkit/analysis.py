"""Smoothness metrics, gain-schedule export/reduction/playback and push probes."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError
from .numerics import Rng, rdft_energy, svd, truncate_rank
from .policy import Policy, lpn_gains
from .sim import Env, ReferenceFrame

log = logging.getLogger(__name__)

SCHEDULE_HEADER = "n,m,steps,gain_hz,action_hz"


@dataclass
class ActionTrace:
    episodes: list[np.ndarray]  # each (T_e, m)
    rate_hz: float = 30.0

    @classmethod
    def from_matrix(cls, actions, boundaries: Sequence[int] = (), rate_hz: float = 30.0) -> "ActionTrace":
        """Split a stacked (T, m) action matrix at the given episode start rows."""
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim == 1:
            actions = actions[:, None]
        cuts = sorted(set(int(b) for b in boundaries if 0 < b < len(actions)))
        return cls([np.asarray(p) for p in np.split(actions, cuts)], rate_hz)


# metrics ---------------------------------------------------------------------

def action_smoothness(trace: ActionTrace) -> float:
    """Mean over episodes of ``sum_{t=1}^{T+1} ||a_t - a_{t-1}||^2 / T`` for
    an episode holding ``T + 2`` actions."""
    values = []
    for ep in trace.episodes:
        ep = np.asarray(ep, dtype=np.float64).reshape(len(ep), -1)
        if len(ep) < 3:
            log.warning("action_smoothness: skipping episode with %d action(s)", len(ep))
            continue
        diff = np.diff(ep, axis=0)
        values.append(float(np.sum(diff * diff)) / (len(ep) - 2))
    return float(np.mean(values)) if values else 0.0


def high_freq_ratio(trace: ActionTrace, cutoff_hz: float = 10.0) -> float:
    """Share of non-DC spectral energy strictly above ``cutoff_hz``, averaged over
    action dimensions and episodes."""
    values = []
    for ep in trace.episodes:
        ep = np.asarray(ep, dtype=np.float64).reshape(len(ep), -1)
        if len(ep) < 32:
            log.warning("high_freq_ratio: skipping episode with %d samples (< 32)", len(ep))
            continue
        for d in range(ep.shape[1]):
            spec = rdft_energy(ep[:, d], trace.rate_hz)
            total = float(spec.energy[1:].sum())
            if total <= 0.0:
                values.append(0.0)
                continue
            hi = float(spec.energy[spec.freqs > cutoff_hz].sum())
            values.append(hi / total)
    return float(np.mean(values)) if values else 0.0


def motion_jerk(sim_trace, rate_hz: float | None = None) -> float:
    """Mean |jerk| / peak |velocity| per joint, averaged over joints and episodes.

    ``sim_trace`` is a dict with ``qd`` (N, J) and ``rate_hz``, or a list of
    them (one per episode). Acceleration and jerk use backward differences.
    """
    traces = sim_trace if isinstance(sim_trace, (list, tuple)) else [sim_trace]
    values = []
    for tr in traces:
        qd = np.asarray(tr["qd"], dtype=np.float64)
        if qd.ndim == 1:
            qd = qd[:, None]
        rate = rate_hz or tr.get("rate_hz", 120.0)
        if len(qd) < 4:
            log.warning("motion_jerk: skipping trace with %d samples (< 4)", len(qd))
            continue
        acc = np.diff(qd, axis=0) * rate
        jerk = np.diff(acc, axis=0) * rate
        for j in range(qd.shape[1]):
            peak = float(np.max(np.abs(qd[:, j])))
            if peak <= 1e-12:
                log.warning("motion_jerk: joint %d has zero peak speed; excluded", j)
                continue
            values.append(float(np.mean(np.abs(jerk[:, j]))) / peak)
    return float(np.mean(values)) if values else 0.0


# gain schedules ----------------------------------------------------------------

@dataclass
class GainSchedule:
    k_mat: np.ndarray  # (steps, m, n), already held at the gain rate
    k_ff: np.ndarray  # (steps, m)
    ref_action: np.ndarray  # (steps, m)
    gain_hz: int = 30
    action_hz: int = 30

    def __post_init__(self):
        if self.gain_hz <= 0 or self.action_hz % self.gain_hz:
            raise ConfigError(f"gain rate {self.gain_hz} Hz must divide action rate {self.action_hz} Hz")
        s = len(self.k_mat)
        if self.k_ff.shape != (s, self.m) or self.ref_action.shape != (s, self.m):
            raise ConfigError("gain schedule arrays have inconsistent shapes")

    @property
    def steps(self) -> int:
        return len(self.k_mat)

    @property
    def m(self) -> int:
        return self.k_mat.shape[1]

    @property
    def n(self) -> int:
        return self.k_mat.shape[2]

    @property
    def hold(self) -> int:
        return self.action_hz // self.gain_hz

    def action(self, idx: int, s: np.ndarray) -> np.ndarray:
        i = idx % self.steps
        return self.k_mat[i] @ s + self.k_ff[i] + self.ref_action[i]


def export_schedule(policy: Policy, env: Env, gain_hz: int = 30, action_hz: int | None = None) -> GainSchedule:
    """Tabulate LPN gains over one reference cycle, zero-order held at ``gain_hz``."""
    if policy.kind != "lpn":
        raise ConfigError("gain export requires an LPN checkpoint")
    spec = env.spec
    action_hz = spec.control_hz if action_hz is None else action_hz
    if action_hz != spec.control_hz:
        raise ConfigError(f"action rate must equal the environment control rate ({spec.control_hz} Hz)")
    if gain_hz <= 0 or action_hz % gain_hz:
        raise ConfigError(f"gain rate {gain_hz} Hz must divide action rate {action_hz} Hz")
    if (policy.n, policy.m) != (spec.n, spec.m):
        raise ConfigError("checkpoint dimensions do not match the environment")
    hold = action_hz // gain_hz
    steps = spec.cycle_steps
    if steps % hold:
        raise ConfigError(f"cycle of {steps} steps is not a multiple of the hold length {hold}")
    k_mat = np.zeros((steps, spec.m, spec.n))
    k_ff = np.zeros((steps, spec.m))
    aref = np.zeros((steps, spec.m))
    for i in range(steps):
        ref = env.reference_at(i / action_hz)
        aref[i] = ref.action
        if i % hold == 0:
            g = lpn_gains(policy, ref)
        k_mat[i], k_ff[i] = g.k_mat, g.k_ff
    return GainSchedule(k_mat, k_ff, aref, gain_hz, action_hz)


def reduce_gains(schedule: GainSchedule, k: int) -> GainSchedule:
    """Replace every feedback matrix by its best rank-``k`` approximation."""
    r = min(schedule.m, schedule.n)
    if not 1 <= k <= r:
        raise ConfigError(f"rank k must be in [1, {r}], got {k}")
    reduced = np.stack([truncate_rank(svd(km), k) for km in schedule.k_mat])
    return GainSchedule(reduced, schedule.k_ff.copy(), schedule.ref_action.copy(),
                        schedule.gain_hz, schedule.action_hz)


def write_schedule(schedule: GainSchedule, path):
    lines = [SCHEDULE_HEADER,
             f"{schedule.n},{schedule.m},{schedule.steps},{schedule.gain_hz},{schedule.action_hz}"]
    for i in range(schedule.steps):
        vals = np.concatenate([schedule.k_mat[i].reshape(-1), schedule.k_ff[i], schedule.ref_action[i]])
        lines.append(",".join([str(i)] + [repr(float(v)) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_schedule(path) -> GainSchedule:
    rows = Path(path).read_text().strip().splitlines()
    if len(rows) < 3 or rows[0].strip() != SCHEDULE_HEADER:
        raise CheckpointError(f"not a gain schedule file (expected header {SCHEDULE_HEADER!r})", "header")
    try:
        n, m, steps, gain_hz, action_hz = (int(v) for v in rows[1].split(","))
    except ValueError:
        raise CheckpointError("malformed schedule header values", "header") from None
    body = rows[2:]
    if len(body) != steps:
        raise CheckpointError(f"expected {steps} step rows, found {len(body)}", "steps")
    width = 1 + m * n + 2 * m
    data = np.zeros((steps, width - 1))
    for i, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != width or int(parts[0]) != i:
            raise CheckpointError(f"row {i} malformed", f"step {i}")
        data[i] = [float(v) for v in parts[1:]]
    mn = m * n
    return GainSchedule(data[:, :mn].reshape(steps, m, n), data[:, mn:mn + m].copy(),
                        data[:, mn + m:].copy(), gain_hz, action_hz)


# rollouts ----------------------------------------------------------------------

class EvalResult(NamedTuple):
    reward: float  # mean over episodes of (sum of imitation reward) / horizon
    episode_rewards: list[float]
    actions: ActionTrace
    sim_traces: list[dict]
    failures: int

    @property
    def failure_rate(self) -> float:
        return self.failures / max(1, len(self.episode_rewards))


Controller = Callable[[np.ndarray, ReferenceFrame, int], np.ndarray]


def policy_controller(policy: Policy) -> Controller:
    return lambda s, ref, idx: policy.mean_action(s, ref)


def schedule_controller(schedule: GainSchedule) -> Controller:
    return lambda s, ref, idx: schedule.action(idx, s)


def _check_dims(controller_dims, env: Env):
    if controller_dims != (env.spec.n, env.spec.m):
        raise ConfigError(
            f"controller expects (n, m) = {controller_dims}, environment has "
            f"({env.spec.n}, {env.spec.m})")


def run_episodes(controller: Controller, env: Env, episodes: int, seed: int = 0,
                 cycles: int = 5, push: float = 0.0) -> EvalResult:
    """Deterministic evaluation from grid-aligned random start phases.

    Each episode lasts ``cycles`` reference cycles unless it terminates early;
    early termination counts as a failure and forfeits the remaining reward.
    With ``push`` != 0 a single perturbation is applied at a random step.
    """
    spec = env.spec
    steps = spec.cycle_steps
    horizon = min(cycles * steps, spec.max_len)
    starts = Rng(seed).spawn(0)
    push_rng = Rng(seed).spawn(1)
    rewards, traces, sims, failures = [], [], [], 0
    for _ in range(episodes):
        i0 = starts.integers(steps)
        push_at = push_rng.integers(horizon)
        env.enable_trace()
        env.reset_at(i0 / spec.control_hz)
        total, acts = 0.0, []
        for t in range(horizon):
            if push and t == push_at:
                env.apply_push(push)
            a = controller(env.observe(), env.ref, i0 + t)
            acts.append(np.asarray(a, dtype=np.float64))
            res = env.step(a)
            total += res.reward
            if res.terminated:
                failures += 1
                break
            if res.truncated:
                break
        rewards.append(total / horizon)
        traces.append(np.array(acts))
        sims.append(env.sim_trace())
    return EvalResult(float(np.mean(rewards)), rewards, ActionTrace(traces, spec.control_hz), sims, failures)


def evaluate_policy(policy: Policy, env: Env, episodes: int = 3, seed: int = 0, cycles: int = 5) -> EvalResult:
    _check_dims((policy.n, policy.m), env)
    return run_episodes(policy_controller(policy), env, episodes, seed, cycles)


def playback(schedule: GainSchedule, env: Env, episodes: int = 3, seed: int = 0, cycles: int = 5) -> EvalResult:
    """Run a precomputed gain schedule; no network is evaluated in the loop."""
    _check_dims((schedule.n, schedule.m), env)
    if schedule.steps != env.spec.cycle_steps:
        raise ConfigError(f"schedule has {schedule.steps} steps, reference cycle has {env.spec.cycle_steps}")
    if schedule.action_hz != env.spec.control_hz:
        raise ConfigError("schedule action rate differs from the environment control rate")
    return run_episodes(schedule_controller(schedule), env, episodes, seed, cycles)


class PerturbStats(NamedTuple):
    push: float
    mean_reward: float
    failure_rate: float


def perturb_eval(controller: Policy | GainSchedule, env: Env, push_force: float,
                 episodes: int = 50, seed: int = 0, cycles: int = 5) -> PerturbStats:
    """Apply one root impulse (floating base) or joint torque spike (fixed base)
    at a random step of every episode."""
    if isinstance(controller, GainSchedule):
        fn = schedule_controller(controller)
        _check_dims((controller.n, controller.m), env)
    else:
        fn = policy_controller(controller)
        _check_dims((controller.n, controller.m), env)
    res = run_episodes(fn, env, episodes, seed, cycles, push=push_force)
    return PerturbStats(float(push_force), res.reward, res.failure_rate)


def smoothness_metrics(result: EvalResult) -> dict[str, float]:
    return {
        "reward": result.reward,
        "action_smoothness": action_smoothness(result.actions),
        "high_freq_ratio": high_freq_ratio(result.actions),
        "motion_jerk": motion_jerk(result.sim_traces),
    }


def format_metrics_csv(metrics: dict[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in metrics.items():
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


def summarize(metrics: dict[str, float]) -> str:
    width = max(len(k) for k in metrics)
    return "\n".join(f"{k:<{width}}  {v:.6g}" for k, v in metrics.items())
