"""PPO with smoothness regularisers.

Regulariser kinds:

``none``
    plain clipped-surrogate PPO.
``jac_pen``
    ``w_jac * mean ||d mean / d s||_F^2``. For the LPN this is ``||K||_F^2``
    and its gradient is folded into the same backward pass as the PPO loss;
    the FF head needs the analytic second-order pass from :mod:`lpnkit.mlp`.
``lipschitz``
    ``w_jac * mean ||J^T (a - mean)||^2`` along the sampled exploration
    direction (held constant).
``action_change_reward``
    no loss term; ``-w_action * ||a_t - a_{t-1}||^2`` is added to the
    environment reward during collection.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import mlp
from .errors import ConfigError, NumericalError, SimulationDiverged
from .mlp import NetParams, ParamGrads
from .numerics import Rng
from .policy import Policy, log_prob, save_checkpoint
from .sim import ENV_NAMES, Env, make_env

REGULARIZERS = ("none", "jac_pen", "lipschitz", "action_change_reward")
STATS_HEADER = ("iter", "reward_imitation", "ep_len", "loss_ppo", "loss_reg", "grad_norm", "wall_ms")


@dataclass
class TrainConfig:
    env: str = "pendulum-track"
    policy: str = "lpn"
    regularizer: str = "jac_pen"
    num_envs: int = 8
    samples_per_iter: int = 512
    max_iters: int = 500
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatch: int = 128
    lr: float = 3e-4
    value_weight: float = 0.5
    w_jac: float = 10.0
    w_action: float = 0.1
    hidden: int = 64
    sigma: float = 0.1
    seed: int = 0
    early_stop_patience: int = 0
    log_wall_time: bool = False

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        base = dict(num_envs=50, samples_per_iter=2500, max_iters=5000, minibatch=250)
        base.update(kw)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.env not in ENV_NAMES:
            raise ConfigError(f"env: unknown environment {self.env!r}")
        if self.policy not in ("ff", "lpn"):
            raise ConfigError(f"policy: must be 'ff' or 'lpn', got {self.policy!r}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer: must be one of {', '.join(REGULARIZERS)}")
        for name in ("num_envs", "samples_per_iter", "max_iters", "epochs", "minibatch", "hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.samples_per_iter % self.minibatch:
            raise ConfigError("samples_per_iter: must be divisible by minibatch")
        if self.samples_per_iter % self.num_envs:
            raise ConfigError("samples_per_iter: must be divisible by num_envs")
        for name in ("w_jac", "w_action", "value_weight", "clip", "lr", "sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        if not 0 <= self.gamma < 1 or not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gamma/gae_lambda: out of range")
        if self.sigma <= 0:
            raise ConfigError("sigma: must be positive")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience: must be >= 0")
        return self

    @property
    def value_scale(self) -> float:
        # critic predicts returns in units of the undiscounted horizon
        return 1.0 / (1.0 - self.gamma)


class ValueNet(NamedTuple):
    net: NetParams
    scale: float

    def predict(self, obs, ref_enc) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(ref_enc)], axis=1)
        y, _ = mlp.forward(self.net, x)
        return self.scale * y[:, 0]


@dataclass
class Rollout:
    obs: np.ndarray
    ref_enc: np.ndarray
    ref_action: np.ndarray
    mean: np.ndarray
    action: np.ndarray
    logp: np.ndarray
    reward: np.ndarray  # total reward seen by PPO
    reward_imitation: np.ndarray
    value: np.ndarray
    next_value: np.ndarray  # V(s_{t+1}) where the chain is cut without termination
    terminated: np.ndarray
    truncated: np.ndarray
    cut: np.ndarray  # terminated, truncated or end of this env's segment
    env_id: np.ndarray
    gains: np.ndarray | None = None  # LPN: flattened [K, k] used for the step
    completed_lengths: list = field(default_factory=list)
    diverged: int = 0

    def __len__(self):
        return len(self.reward)


class Batch(NamedTuple):
    obs: np.ndarray
    ref_enc: np.ndarray
    ref_action: np.ndarray
    action: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


# collection -----------------------------------------------------------------

class Collector:
    """Steps ``num_envs`` environments in lockstep; episodes persist across
    iterations. Each env draws from its own stream ``(seed, env_id)``."""

    def __init__(self, envs: list[Env], cfg: TrainConfig, rng: Rng):
        self.envs = envs
        self.cfg = cfg
        self.rngs = [rng.spawn(i) for i in range(len(envs))]
        self.prev_action: list[np.ndarray | None] = [None] * len(envs)
        self.ep_len = [0] * len(envs)
        for env, r in zip(envs, self.rngs):
            env.reset_rsi(r)

    def _reset(self, i: int):
        self.envs[i].reset_rsi(self.rngs[i])
        self.prev_action[i] = None
        self.ep_len[i] = 0

    def collect(self, policy: Policy, value: ValueNet) -> Rollout:
        cfg = self.cfg
        E = len(self.envs)
        T = cfg.samples_per_iter // E
        n, m, nr = policy.n, policy.m, policy.n_ref
        obs = np.zeros((E, T, n))
        enc = np.zeros((E, T, nr))
        aref = np.zeros((E, T, m))
        mean = np.zeros((E, T, m))
        act = np.zeros((E, T, m))
        logp = np.zeros((E, T))
        rew = np.zeros((E, T))
        rew_im = np.zeros((E, T))
        val = np.zeros((E, T))
        nval = np.zeros((E, T))
        term = np.zeros((E, T), dtype=bool)
        trunc = np.zeros((E, T), dtype=bool)
        cut = np.zeros((E, T), dtype=bool)
        gains = np.zeros((E, T, m * n + m)) if policy.kind == "lpn" else None
        lengths, diverged = [], 0
        sigma = policy.head.sigma
        penalise = cfg.regularizer == "action_change_reward"

        for t in range(T):
            for i, env in enumerate(self.envs):
                obs[i, t] = env.observe()
                enc[i, t] = env.ref.encode()
                aref[i, t] = env.ref.action
            cache = policy.forward(obs[:, t], enc[:, t], aref[:, t])
            mean[:, t] = cache.mean
            val[:, t] = value.predict(obs[:, t], enc[:, t])
            if gains is not None:
                gains[:, t] = np.concatenate(
                    [cache.k_mat.reshape(E, -1), cache.k_ff], axis=1)
            for i, env in enumerate(self.envs):
                a = cache.mean[i] + sigma * self.rngs[i].normal(m)
                act[i, t] = a
                logp[i, t] = log_prob(a, cache.mean[i], sigma)
                self.ep_len[i] += 1
                try:
                    res = env.step(a)
                except SimulationDiverged:
                    diverged += 1
                    term[i, t] = cut[i, t] = True
                    self._reset(i)
                    continue
                r = res.reward
                rew_im[i, t] = r
                if penalise and self.prev_action[i] is not None:
                    da = a - self.prev_action[i]
                    r -= cfg.w_action * float(da @ da)
                self.prev_action[i] = a
                rew[i, t] = r
                if res.terminated or res.truncated:
                    term[i, t] = res.terminated
                    trunc[i, t] = res.truncated
                    cut[i, t] = True
                    if res.truncated:
                        nval[i, t] = value.predict(env.observe(), env.ref.encode())[0]
                    lengths.append(self.ep_len[i])
                    self._reset(i)
        # bootstrap the open ends of every segment
        open_end = ~cut[:, -1]
        if np.any(open_end):
            idx = np.flatnonzero(open_end)
            o = np.stack([self.envs[i].observe() for i in idx])
            e = np.stack([self.envs[i].ref.encode() for i in idx])
            nval[idx, -1] = value.predict(o, e)
            cut[idx, -1] = True

        def flat(x):
            return None if x is None else x.reshape(E * T, *x.shape[2:])

        return Rollout(
            obs=flat(obs), ref_enc=flat(enc), ref_action=flat(aref), mean=flat(mean),
            action=flat(act), logp=flat(logp), reward=flat(rew), reward_imitation=flat(rew_im),
            value=flat(val), next_value=flat(nval), terminated=flat(term), truncated=flat(trunc),
            cut=flat(cut), env_id=np.repeat(np.arange(E), T), gains=flat(gains),
            completed_lengths=lengths, diverged=diverged,
        )


def collect(envs: list[Env], policy: Policy, value: ValueNet, cfg: TrainConfig, rng: Rng) -> Rollout:
    """One-shot collection from freshly reset environments."""
    return Collector(envs, cfg, rng).collect(policy, value)


# advantages -------------------------------------------------------------------

def gae_arrays(rewards, values, next_values, terminated, cut, gamma: float, lam: float):
    """Raw GAE advantages and returns for a flat, time-ordered sequence.

    ``cut[t]`` ends the recursion at ``t``; the bootstrap there is 0 when
    ``terminated[t]`` and ``next_values[t]`` otherwise.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    terminated = np.asarray(terminated, dtype=bool)
    cut = np.asarray(cut, dtype=bool)
    T = len(rewards)
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        if cut[t] or t == T - 1:
            nv = 0.0 if terminated[t] else next_values[t]
            running = 0.0
        else:
            nv = values[t + 1]
        delta = rewards[t] + gamma * nv - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def gae(rollout: Rollout, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Batch-normalised advantages and un-normalised returns."""
    adv, ret = gae_arrays(rollout.reward, rollout.value, rollout.next_value,
                          rollout.terminated, rollout.cut, gamma, lam)
    return normalize_advantages(adv), ret


# losses -----------------------------------------------------------------------

class LossInfo(NamedTuple):
    loss_ppo: float
    loss_reg: float
    ratio: np.ndarray


def _ppo_terms(policy: Policy, value: ValueNet, batch: Batch, eps: float, value_weight: float):
    cache = policy.forward(batch.obs, batch.ref_enc, batch.ref_action)
    sigma = policy.head.sigma
    B = len(batch.advantages)
    logp = log_prob(batch.action, cache.mean, sigma)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(logp - batch.logp_old)
    if not np.all(np.isfinite(ratio)):
        bad = int(np.sum(~np.isfinite(ratio)))
        raise NumericalError(f"{bad} non-finite importance ratios in a batch of {B}")
    adv = batch.advantages
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    loss_pi = -float(np.mean(np.minimum(surr1, surr2)))
    active = surr1 <= surr2
    d_logp = np.where(active, -ratio * adv / B, 0.0)
    d_mean = d_logp[:, None] * (batch.action - cache.mean) / sigma**2
    dy = policy.output_cotangent(cache, d_mean)

    x = np.concatenate([batch.obs, batch.ref_enc], axis=1)
    vy, vtrace = mlp.forward(value.net, x)
    vpred = value.scale * vy[:, 0]
    err = vpred - batch.returns
    loss_v = float(np.mean(err**2))
    dv = (value_weight * 2.0 * value.scale / B) * err[:, None]
    v_grads = mlp.backward_params(value.net, vtrace, dv)
    return cache, dy, loss_pi + value_weight * loss_v, ratio, v_grads


def _reg_terms(kind: str, policy: Policy, batch: Batch, cache):
    """Return ``(penalty, extra output cotangent or None, extra grads or None)``."""
    B = len(batch.obs)
    if kind in ("none", "action_change_reward"):
        return 0.0, None, None
    if policy.kind == "lpn":
        k = cache.k_mat
        extra = np.zeros((B, policy.net.d_out))
        mn = policy.m * policy.n
        if kind == "jac_pen":
            pen = float(np.sum(k * k)) / B
            extra[:, :mn] = (2.0 / B) * k.reshape(B, mn)
        else:
            d = batch.action - cache.mean
            v = np.einsum("bij,bi->bj", k, d)
            pen = float(np.sum(v * v)) / B
            extra[:, :mn] = ((2.0 / B) * d[:, :, None] * v[:, None, :]).reshape(B, mn)
        return pen, extra, None
    cols = policy.state_cols
    if kind == "jac_pen":
        pen, grads = mlp.jacobian_penalty_grads(policy.net, cache.trace, cols=cols)
    else:
        d = batch.action - cache.mean
        pen, grads = mlp.directional_penalty_grads(policy.net, cache.trace, d, cols=cols)
    return pen, None, grads


def ppo_loss(policy: Policy, value: ValueNet, batch: Batch, eps: float, value_weight: float = 0.5):
    """Clipped surrogate plus weighted value loss; returns ``(loss, policy_grads, value_grads, ratio)``."""
    cache, dy, loss, ratio, v_grads = _ppo_terms(policy, value, batch, eps, value_weight)
    return loss, mlp.backward_params(policy.net, cache.trace, dy), v_grads, ratio


def regularizer_loss(kind: str, policy: Policy, batch: Batch) -> tuple[float, ParamGrads]:
    if kind not in REGULARIZERS:
        raise ConfigError(f"unknown regularizer {kind!r}")
    cache = policy.forward(batch.obs, batch.ref_enc, batch.ref_action)
    pen, extra, grads = _reg_terms(kind, policy, batch, cache)
    if extra is not None:
        grads = mlp.backward_params(policy.net, cache.trace, extra)
    if grads is None:
        grads = ParamGrads.zeros_like(policy.net)
    return pen, grads


def total_loss_grads(cfg: TrainConfig, policy: Policy, value: ValueNet, batch: Batch):
    """``L_PPO + w * L_reg`` with a single policy backward pass where possible."""
    cache, dy, loss_ppo, ratio, v_grads = _ppo_terms(policy, value, batch, cfg.clip, cfg.value_weight)
    pen, extra, reg_grads = _reg_terms(cfg.regularizer, policy, batch, cache)
    w = cfg.w_jac
    if extra is not None:
        dy = dy + w * extra
    p_grads = mlp.backward_params(policy.net, cache.trace, dy)
    if reg_grads is not None:
        p_grads = p_grads + reg_grads.scale(w)
    return loss_ppo + w * pen, p_grads, v_grads, LossInfo(loss_ppo, pen, ratio)


# optimisation -------------------------------------------------------------------

class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class IterStats:
    iter: int
    reward_imitation: float
    ep_len: float
    loss_ppo: float
    loss_reg: float
    grad_norm: float
    wall_ms: float
    diverged: int = 0
    first_ratio_dev: float = 0.0


@dataclass
class TrainResult:
    policy: Policy
    value: ValueNet
    stats: list[IterStats]
    config: TrainConfig


def make_policy(cfg: TrainConfig, env: Env, rng: Rng) -> tuple[Policy, ValueNet]:
    spec = env.spec
    policy = Policy.create(cfg.policy, spec.n, spec.m, spec.n_ref, cfg.hidden, rng.spawn(0), cfg.sigma)
    vnet = NetParams.init(spec.n + spec.n_ref, cfg.hidden, 1, rng.spawn(1), out_scale=0.01)
    return policy, ValueNet(vnet, cfg.value_scale)


def train(cfg: TrainConfig, on_iter=None, checkpoint_path=None) -> TrainResult:
    """Run PPO. ``on_iter(stats, policy)`` is called after every iteration.

    If a gradient turns non-finite the last good parameters are written to
    ``checkpoint_path`` (when given) and :class:`NumericalError` is raised.
    """
    cfg.validate()
    root = Rng(cfg.seed)
    envs = [make_env(cfg.env, seed=cfg.seed) for _ in range(cfg.num_envs)]
    policy, value = make_policy(cfg, envs[0], root.spawn(100))
    collector = Collector(envs, cfg, root.spawn(200))
    shuffle_rng = root.spawn(300)
    n_pol = policy.net.size
    opt = Adam(n_pol + value.net.size, cfg.lr)
    params = np.concatenate([policy.net.to_vector(), value.net.to_vector()])
    stats: list[IterStats] = []
    best, since_best = -np.inf, 0

    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        ro = collector.collect(policy, value)
        adv, ret = gae(ro, cfg.gamma, cfg.gae_lambda)
        N = len(ro)
        losses, regs, norms = [], [], []
        first_dev = 0.0
        for epoch in range(cfg.epochs):
            perm = np.argsort(shuffle_rng.uniform(N), kind="stable")
            for mb, start in enumerate(range(0, N, cfg.minibatch)):
                idx = perm[start:start + cfg.minibatch]
                batch = Batch(ro.obs[idx], ro.ref_enc[idx], ro.ref_action[idx], ro.action[idx],
                              ro.logp[idx], adv[idx], ret[idx])
                _, pg, vg, info = total_loss_grads(cfg, policy, value, batch)
                if epoch == 0 and mb == 0:
                    first_dev = float(np.max(np.abs(info.ratio - 1.0)))
                grad = np.concatenate([pg.to_vector(), vg.to_vector()])
                if not np.all(np.isfinite(grad)):
                    if checkpoint_path is not None:
                        save_checkpoint(policy, checkpoint_path, value.net)
                    raise NumericalError(f"non-finite gradient at iteration {it}")
                params = opt.step(params, grad)
                policy = policy.with_net(policy.net.with_vector(params[:n_pol]))
                value = ValueNet(value.net.with_vector(params[n_pol:]), value.scale)
                losses.append(info.loss_ppo)
                regs.append(info.loss_reg)
                norms.append(float(np.linalg.norm(grad)))
        wall = (time.perf_counter() - t0) * 1000.0
        if ro.completed_lengths:
            ep_len = float(np.mean(ro.completed_lengths))
        else:
            ep_len = float(np.mean(collector.ep_len))
        st = IterStats(it, float(np.mean(ro.reward_imitation)), ep_len, float(np.mean(losses)),
                       float(np.mean(regs)), float(np.mean(norms)), wall, ro.diverged, first_dev)
        stats.append(st)
        if on_iter is not None:
            on_iter(st, policy)
        if cfg.early_stop_patience:
            if st.reward_imitation > best + 1e-3:
                best, since_best = st.reward_imitation, 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    break
    return TrainResult(policy, value, stats, cfg)


def format_stats_csv(stats: list[IterStats], with_wall_time: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_HEADER)
    for s in stats:
        w.writerow([s.iter, repr(s.reward_imitation), repr(s.ep_len), repr(s.loss_ppo),
                    repr(s.loss_reg), repr(s.grad_norm),
                    f"{s.wall_ms:.3f}" if with_wall_time else "0"])
    return buf.getvalue()


def write_outputs(result: TrainResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    stats = out / "stats.csv"
    save_checkpoint(result.policy, ckpt, result.value.net,
                    extra={"env": result.config.env, "regularizer": result.config.regularizer,
                           "seed": result.config.seed})
    stats.write_text(format_stats_csv(result.stats, result.config.log_wall_time))
    return {"checkpoint": ckpt, "stats": stats}


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}
