"""PPO with GAE and the L2C2 smoothness regularizer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .env import EpisodeStatus, PushEnv


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lambda_gae: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    learning_rate: float = 3e-4
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    lambda_pi: float = 1.0
    lambda_v: float = 1.0
    max_grad_norm: float = 1.0
    n_envs: int = 64
    rollout_len: int = 100
    total_iterations: int = 500
    seed: int = 0
    smoothness_metric: str = "l2"  # squared Euclidean, or "l1"
    # Standardize network inputs with running statistics of the critic observations.
    normalize_obs: bool = True

    def validate(self) -> None:
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not (0.0 < self.lambda_gae <= 1.0):
            raise ValueError(f"lambda_gae must lie in (0, 1], got {self.lambda_gae}")
        if not self.clip_eps > 0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.lambda_pi < 0 or self.lambda_v < 0:
            raise ValueError("lambda_pi and lambda_v must be non-negative")
        for k in ("epochs", "minibatches", "n_envs", "rollout_len"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if self.smoothness_metric not in ("l2", "l1"):
            raise ValueError(f"smoothness_metric must be 'l2' or 'l1', got {self.smoothness_metric!r}")


@dataclass
class TrainStats:
    iteration: int = 0
    mean_return: float = math.nan  # over episodes finished this iteration
    mean_length: float = math.nan
    success_rate: float = math.nan
    surrogate_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    smoothness_loss: float = 0.0
    clip_fraction: float = 0.0
    level: int = 0
    episodes: int = 0
    mean_reward: float = 0.0  # per tick over the rollout
    diverged: int = 0
    aborted: bool = False


# ---------------------------------------------------------------- GAE

def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """GAE along axis 0. ``dones[t]`` cuts the bootstrap from step t to t+1."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if r.shape != v.shape or r.shape != d.shape:
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    boot = np.asarray(bootstrap_value, dtype=np.float64)
    if boot.shape != r.shape[1:]:
        raise ValueError(f"bootstrap_value shape {boot.shape} != {r.shape[1:]}")
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    next_v = boot
    for t in range(r.shape[0] - 1, -1, -1):
        keep = 1.0 - d[t]
        delta = r[t] + gamma * next_v * keep - v[t]
        last = delta + gamma * lam * keep * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


# ---------------------------------------------------------------- L2C2

def _distance(diff, metric: str):
    if metric == "l1":
        return np.sum(np.abs(diff), axis=-1)
    return np.sum(diff * diff, axis=-1)


def _distance_grad(diff, metric: str):
    if metric == "l1":
        return np.sign(diff)
    return 2.0 * diff


def l2c2_loss(pi: nn.GaussianPolicy, value_net: Optional[nn.ValueNet], obs_t, obs_t1, u=None,
              rng: Optional[np.random.Generator] = None, lambda_pi: float = 1.0, lambda_v: float = 1.0,
              dones=None, metric: str = "l2") -> float:
    """Mean smoothness loss over a batch of consecutive-state pairs.

    ``obs`` rows are critic observations; the policy reads their leading
    actor-observation slice. With ``dones`` given, no pair may cross a reset.
    """
    if dones is not None:
        assert not np.any(dones), "L2C2 pair straddles an episode boundary"
    obs_t = np.atleast_2d(np.asarray(obs_t, dtype=np.float64))
    obs_t1 = np.atleast_2d(np.asarray(obs_t1, dtype=np.float64))
    if u is None:
        u = rng.uniform(size=obs_t.shape[0])
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), obs_t.shape[:1])[:, None]
    mid = obs_t + u * (obs_t1 - obs_t)
    k = pi.mean_net.layer_dims[0]
    total = np.zeros(obs_t.shape[0])
    if lambda_pi > 0:
        d = pi.mean(mid[:, :k]) - pi.mean(obs_t[:, :k])
        total += lambda_pi * _distance(d, metric)
    if lambda_v > 0 and value_net is not None:
        d = (value_net(mid) - value_net(obs_t))[:, None]
        total += lambda_v * _distance(d, metric)
    return float(np.mean(total))


# ---------------------------------------------------------------- rollout storage

@dataclass
class RolloutBuffer:
    actor_obs: np.ndarray  # (T, N, 81)
    critic_obs: np.ndarray  # (T, N, 101)
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    next_critic_obs: np.ndarray  # successor within the same episode (garbage where done)
    bootstrap_value: np.ndarray  # (N,)
    timeouts: np.ndarray
    finished_returns: list = field(default_factory=list)
    finished_lengths: list = field(default_factory=list)
    finished_outcomes: list = field(default_factory=list)
    diverged: int = 0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @property
    def pair_valid(self) -> np.ndarray:
        return ~self.dones

    @property
    def shape(self) -> tuple:
        return self.rewards.shape


def collect_rollout(env: PushEnv, pi: nn.GaussianPolicy, value_net: nn.ValueNet, horizon: int,
                    rng: np.random.Generator, gamma: float = 0.99, deterministic: bool = False) -> RolloutBuffer:
    """Step every environment ``horizon`` ticks with the current policy.

    Time-limit truncations are bootstrapped by folding gamma * V(terminal
    state) into the reward of the final tick.
    """
    if getattr(env, "last_obs", None) is None:
        env.last_obs = env.reset()
    actor, critic = env.last_obs
    n, na = env.n, pi.log_std.size
    T = horizon
    buf = RolloutBuffer(
        actor_obs=np.zeros((T, n, actor.shape[1])), critic_obs=np.zeros((T, n, critic.shape[1])),
        actions=np.zeros((T, n, na)), log_probs=np.zeros((T, n)), rewards=np.zeros((T, n)),
        dones=np.zeros((T, n), bool), values=np.zeros((T, n)),
        next_critic_obs=np.zeros((T, n, critic.shape[1])), bootstrap_value=np.zeros(n),
        timeouts=np.zeros((T, n), bool),
    )
    for t in range(T):
        mean = pi.mean(actor)
        if deterministic:
            action = mean
        else:
            action = mean + pi.std * rng.standard_normal(mean.shape)
        logp = nn.gaussian_log_prob(mean, pi.log_std, action)
        value = value_net(critic)
        buf.actor_obs[t], buf.critic_obs[t] = actor, critic
        buf.actions[t], buf.log_probs[t], buf.values[t] = action, logp, value
        actor, critic, reward, done, info = env.step(action)
        reward = np.array(reward, dtype=np.float64)
        if info.timeout.any():
            idx = np.flatnonzero(info.timeout)
            reward[idx] += gamma * value_net(info.terminal_critic_obs[idx])
        buf.rewards[t], buf.dones[t], buf.timeouts[t] = reward, done, info.timeout
        buf.next_critic_obs[t] = critic
        buf.finished_returns += info.finished_returns
        buf.finished_lengths += info.finished_lengths
        buf.finished_outcomes += info.finished_outcomes
        buf.diverged += info.diverged
    buf.bootstrap_value = value_net(critic)
    env.last_obs = (actor, critic)
    # successor observations only pair up where no reset happened
    assert np.all(buf.next_critic_obs[:-1][~buf.dones[:-1]] == buf.critic_obs[1:][~buf.dones[:-1]])
    return buf


# ---------------------------------------------------------------- update

def clipped_surrogate(ratio, adv, clip_eps: float):
    """Return (-mean(min(rA, clip(r)A)), d loss / d log_prob per sample)."""
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    loss = -np.mean(np.minimum(ratio * adv, clipped * adv))
    # the clipped branch is constant in the parameters
    active = ratio * adv <= clipped * adv
    return loss, -(active * adv * ratio) / ratio.size

def _split_grads(grads: list, n_pi: int) -> tuple[list, list]:
    return grads[:n_pi], grads[n_pi:]


def ppo_update(pi: nn.GaussianPolicy, value_net: nn.ValueNet, buf: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator, opt: nn.Adam) -> TrainStats:
    """Clipped-surrogate update over shuffled minibatches; rolls back on non-finite losses."""
    if buf.advantages is None:
        buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap_value,
                                                  cfg.gamma, cfg.lambda_gae)
    k = pi.mean_net.layer_dims[0]
    obs = buf.critic_obs.reshape(-1, buf.critic_obs.shape[-1])
    nxt = buf.next_critic_obs.reshape(obs.shape)
    valid = buf.pair_valid.reshape(-1)
    act = buf.actions.reshape(-1, buf.actions.shape[-1])
    old_logp = buf.log_probs.reshape(-1)
    adv = buf.advantages.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ret = buf.returns.reshape(-1)
    total = obs.shape[0]

    snapshot = ([p.copy() for p in pi.params()], [p.copy() for p in value_net.params()], opt.state())
    n_pi = len(pi.params())
    sums = dict(surrogate=0.0, value=0.0, entropy=0.0, smooth=0.0, clipped=0.0)
    count = 0
    aborted = False
    for _ in range(cfg.epochs):
        order = rng.permutation(total)
        for mb in np.array_split(order, cfg.minibatches):
            b = mb.size
            o, a = obs[mb], act[mb]
            A = adv[mb]
            # policy surrogate + entropy
            mean, pcache = nn.mlp_forward(pi.mean_net, o[:, :k])
            logp = nn.gaussian_log_prob(mean, pi.log_std, a)
            ratio = np.exp(logp - old_logp[mb])
            surr, dlogp = clipped_surrogate(ratio, A, cfg.clip_eps)
            entropy = nn.gaussian_entropy(pi.log_std)
            ls = np.clip(pi.log_std, nn.LOG_STD_MIN, nn.LOG_STD_MAX)
            inv_var = np.exp(-2.0 * ls)
            diff = a - mean
            dmean = dlogp[:, None] * diff * inv_var
            dls = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - cfg.entropy_coef
            # value loss
            v, vcache = nn.mlp_forward(value_net.net, o)
            v = v[:, 0]
            vloss = np.mean((v - ret[mb]) ** 2)
            dv = cfg.value_coef * 2.0 * (v - ret[mb]) / b
            g_pi, _ = nn.mlp_backward(pi.mean_net, pcache, dmean)
            g_v, _ = nn.mlp_backward(value_net.net, vcache, dv[:, None])
            # smoothness on in-episode pairs; obs_t branch is a fixed target
            smooth = 0.0
            pv = valid[mb]
            if (cfg.lambda_pi > 0 or cfg.lambda_v > 0) and pv.any():
                u = rng.uniform(size=b)[:, None]
                mid = o + u * (nxt[mb] - o)
                w = pv / b
                if cfg.lambda_pi > 0:
                    m2, c2 = nn.mlp_forward(pi.mean_net, mid[:, :k])
                    d = m2 - mean
                    smooth += cfg.lambda_pi * float(np.sum(w * _distance(d, cfg.smoothness_metric)))
                    gd, _ = nn.mlp_backward(pi.mean_net, c2, cfg.lambda_pi * w[:, None] * _distance_grad(d, cfg.smoothness_metric))
                    g_pi = [x + y for x, y in zip(g_pi, gd)]
                if cfg.lambda_v > 0:
                    v2, c3 = nn.mlp_forward(value_net.net, mid)
                    d = v2 - v[:, None]
                    smooth += cfg.lambda_v * float(np.sum(w * _distance(d, cfg.smoothness_metric)))
                    gd, _ = nn.mlp_backward(value_net.net, c3, cfg.lambda_v * w[:, None] * _distance_grad(d, cfg.smoothness_metric))
                    g_v = [x + y for x, y in zip(g_v, gd)]
            loss = surr + cfg.value_coef * vloss - cfg.entropy_coef * entropy + smooth
            grads = g_pi + [dls] + g_v
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                aborted = True
                break
            grads, _ = nn.clip_by_global_norm(grads, cfg.max_grad_norm)
            new = opt.step(pi.params() + value_net.params(), grads)
            pi.set_params(new[:n_pi])
            value_net.set_params(new[n_pi:])
            sums["surrogate"] += surr
            sums["value"] += vloss
            sums["entropy"] += entropy
            sums["smooth"] += smooth
            sums["clipped"] += float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))
            count += 1
        if aborted:
            break
    if aborted or not all(np.all(np.isfinite(p)) for p in pi.params() + value_net.params()):
        pi.set_params(snapshot[0])
        value_net.set_params(snapshot[1])
        opt.load(snapshot[2])
        aborted = True

    stats = TrainStats(aborted=aborted, diverged=buf.diverged, episodes=len(buf.finished_returns),
                       mean_reward=float(np.mean(buf.rewards)))
    if count:
        stats.surrogate_loss = float(sums["surrogate"]) / count
        stats.value_loss = float(sums["value"]) / count
        stats.entropy = sums["entropy"] / count
        stats.smoothness_loss = sums["smooth"] / count
        stats.clip_fraction = sums["clipped"] / count
    if buf.finished_returns:
        stats.mean_return = float(np.mean(buf.finished_returns))
        stats.mean_length = float(np.mean(buf.finished_lengths))
        stats.success_rate = float(np.mean([o == EpisodeStatus.SUCCESS for o in buf.finished_outcomes]))
    return stats


# ---------------------------------------------------------------- driver

@dataclass
class ObsNormalizer:
    """Running mean and variance (parallel merge), frozen between updates."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    min_std: float = 1e-2

    @classmethod
    def create(cls, dim: int) -> "ObsNormalizer":
        return cls(np.zeros(dim), np.ones(dim), 0.0)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.size)
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(axis=0), x.var(axis=0)
        tot = self.count + n
        delta = bm - self.mean
        m2 = self.var * self.count + bv * n + delta * delta * self.count * n / tot
        self.mean = self.mean + delta * n / tot
        self.var = m2 / tot
        self.count = tot

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.var), self.min_std)

    def apply(self, pi: nn.GaussianPolicy, value_net: nn.ValueNet) -> None:
        k = pi.mean_net.layer_dims[0]
        pi.mean_net.in_shift, pi.mean_net.in_scale = self.mean[:k].copy(), self.scale[:k].copy()
        value_net.net.in_shift, value_net.net.in_scale = self.mean.copy(), self.scale.copy()


class Trainer:
    """Owns the environments, networks, optimizer and RNG for one run."""

    def __init__(self, env: PushEnv, pi: nn.GaussianPolicy, value_net: nn.ValueNet, cfg: PpoConfig):
        cfg.validate()
        self.env, self.pi, self.value_net, self.cfg = env, pi, value_net, cfg
        self.opt = nn.Adam(lr=cfg.learning_rate)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.iteration = 0
        self.obs_norm = ObsNormalizer.create(value_net.net.layer_dims[0]) if cfg.normalize_obs else None

    def step(self) -> TrainStats:
        buf = collect_rollout(self.env, self.pi, self.value_net, self.cfg.rollout_len, self.rng, self.cfg.gamma)
        stats = ppo_update(self.pi, self.value_net, buf, self.cfg, self.rng, self.opt)
        if self.obs_norm is not None:
            # after the update, so each batch is scored with the statistics it was collected under
            self.obs_norm.update(buf.critic_obs)
            self.obs_norm.apply(self.pi, self.value_net)
        self.iteration += 1
        stats.iteration = self.iteration
        stats.level = self.env._level()
        return stats

    def get_state(self) -> dict:
        return {
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "adam": self.opt.state(),
            "env": self.env.get_state(),
            "last_obs": None if getattr(self.env, "last_obs", None) is None else list(self.env.last_obs),
            "obs_norm": None if self.obs_norm is None else {
                "mean": self.obs_norm.mean, "var": self.obs_norm.var, "count": self.obs_norm.count},
        }

    def set_state(self, st: dict) -> None:
        self.iteration = int(st["iteration"])
        self.rng.bit_generator.state = st["rng"]
        self.opt.load(st["adam"])
        self.env.set_state(st["env"])
        self.env.last_obs = None if st["last_obs"] is None else tuple(np.asarray(x) for x in st["last_obs"])
        norm = st.get("obs_norm")
        if self.obs_norm is not None and norm is not None:
            self.obs_norm = ObsNormalizer(np.array(norm["mean"], dtype=np.float64),
                                          np.array(norm["var"], dtype=np.float64), float(norm["count"]))
            if self.obs_norm.count > 0:
                self.obs_norm.apply(self.pi, self.value_net)


def stats_row(s: TrainStats) -> dict:
    return asdict(s)
