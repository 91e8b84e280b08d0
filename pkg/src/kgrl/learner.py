"""Off-policy maximum-entropy actor-critic with the categorical-entropy bonus.

The actor minimizes ``E[alpha log pi(a|s) - min Q(s, a) - beta_t H(w(s))]``;
the twin critics regress to ``r + gamma (1 - done) (min Q'(s', a') - alpha log pi(a'|s'))``.
Everything random is drawn from named generators derived from one run seed.
"""
import csv
from dataclasses import dataclass, field, asdict
import math
import os
import zlib

import numpy as np

from .approximators import Adam, Mlp, MlpSpec, NumericError, init_params
from .envs import KinematicEnv, WorldState
from .policy import BetaSchedule, GaussianActor, KianPolicy, beta_at

ALPHA_CHOICES = (1e-1, 1e-2, 1e-3, 1e-5)


def stream(seed, name, *extra):
    """Independent generator for ``name`` (and optional integers) under ``seed``."""
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def streams_for(seed):
    return lambda name: stream(seed, name)


# --- replay ---------------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling over the filled part."""

    def __init__(self, capacity, obs_dim, action_dim):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, action_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.dones = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def add(self, obs, action, reward, next_obs, done):
        if not math.isfinite(reward):
            raise NumericError("reward must be finite")
        i = self.cursor
        self.obs[i], self.actions[i], self.rewards[i] = obs, action, reward
        self.next_obs[i], self.dones[i] = next_obs, float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size, rng):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size, rng):
        idx = self.sample_indices(batch_size, rng)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])

    def arrays(self):
        return {"obs": self.obs, "actions": self.actions, "rewards": self.rewards,
                "next_obs": self.next_obs, "dones": self.dones}

    def load(self, arrays, cursor, size):
        for name, arr in arrays.items():
            dest = getattr(self, name)
            dest[...] = 0.0
            dest[:len(arr)] = arr
        self.cursor, self.size = int(cursor), int(size)


# --- critics --------------------------------------------------------------------------


class CriticPair:
    """Twin Q-networks on ``[obs, action]`` with Polyak-averaged targets."""

    def __init__(self, spec, params, gamma=0.98, tau=0.005, lr=3e-4):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        self.spec = spec
        self.mlp = Mlp(spec)
        self.params = params  # q1, q2, t1, t2
        self.gamma, self.tau = gamma, tau
        self.optim = {k: Adam(spec.n_params, lr) for k in ("q1", "q2")}

    @classmethod
    def create(cls, obs_dim, action_dim, hidden, streams, gamma=0.98, tau=0.005, lr=3e-4, activation="relu"):
        spec = MlpSpec(obs_dim + action_dim, tuple(hidden), 1, activation)
        q1 = init_params(spec, streams("init.critic1"))
        q2 = init_params(spec, streams("init.critic2"))
        params = {"q1": q1, "q2": q2, "t1": q1.copy(), "t2": q2.copy()}
        return cls(spec, params, gamma, tau, lr)

    def q(self, name, obs, action, params=None):
        p = self.params[name] if params is None else params
        return self.mlp.forward(p, np.concatenate([obs, action], axis=1))[:, 0]

    def min_q_and_grad(self, obs, action):
        """``min(Q1, Q2)(s, a)`` and its gradient with respect to ``a``."""
        x = np.concatenate([obs, action], axis=1)
        o1, c1 = self.mlp.forward_train(self.params["q1"], x)
        o2, c2 = self.mlp.forward_train(self.params["q2"], x)
        pick1 = (o1[:, 0] <= o2[:, 0])[:, None].astype(np.float64)
        _, g1 = self.mlp.backward(self.params["q1"], c1, pick1)
        _, g2 = self.mlp.backward(self.params["q2"], c2, 1.0 - pick1)
        qmin = np.minimum(o1[:, 0], o2[:, 0])
        d_obs = obs.shape[1]
        return qmin, (g1 + g2)[:, d_obs:]


@dataclass
class EntropyCoefficients:
    """Action-entropy weight ``alpha`` (fixed or auto-tuned) and the beta schedule."""

    alpha: float = 1e-2
    auto: bool = False
    target_entropy: float = None
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    lr: float = 3e-4
    log_alpha: float = None
    optim: Adam = None

    def __post_init__(self):
        if self.auto:
            if self.log_alpha is None:
                self.log_alpha = math.log(self.alpha)
            if self.optim is None:
                self.optim = Adam(1, self.lr)
        elif self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @property
    def value(self):
        return math.exp(self.log_alpha) if self.auto else self.alpha


def critic_targets(batch, policy, critics, alpha, rng):
    next_a, next_logp = policy.sample(batch.next_obs, rng)
    qt = np.minimum(critics.q("t1", batch.next_obs, next_a), critics.q("t2", batch.next_obs, next_a))
    y = batch.rewards + critics.gamma * (1.0 - batch.dones) * (qt - alpha * next_logp)
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise NumericError(f"non-finite critic target at batch index {int(bad[0])}")
    return y


def critic_loss_and_grads(batch, critics, y, params=None):
    """Mean of the two critics' squared errors to ``y`` and per-critic gradients."""
    x = np.concatenate([batch.obs, batch.actions], axis=1)
    B = x.shape[0]
    losses, grads = [], {}
    for name in ("q1", "q2"):
        p = critics.params[name] if params is None else params[name]
        out, cache = critics.mlp.forward_train(p, x)
        err = out[:, 0] - y
        losses.append(float(np.mean(err * err)))
        grads[name], _ = critics.mlp.backward(p, cache, (2.0 / B) * err[:, None], need_input=False)
    return 0.5 * (losses[0] + losses[1]), grads


def critic_update(batch, policy, critics, coeffs, rng):
    y = critic_targets(batch, policy, critics, coeffs.value, rng)
    loss, grads = critic_loss_and_grads(batch, critics, y)
    for name, g in grads.items():
        critics.optim[name].step(critics.params[name], g)
    return loss


def actor_update(batch, policy, critics, coeffs, t, rng, optimizers):
    """One gradient step on the actor objective; returns the loss record."""
    beta = beta_at(coeffs.beta, t) if policy.n > 0 else 0.0
    noise = policy.draw_noise(len(batch), rng)
    res = policy.actor_loss(batch.obs, noise, critics.min_q_and_grad, coeffs.value, beta)
    for name, g in res.grads.items():
        optimizers[name].step(policy.params[name], g)
    return res


def alpha_grad(log_pi, coeffs):
    """Gradient of ``-log_alpha * mean(log_pi + target_entropy)`` in ``log_alpha``."""
    return -float(np.mean(log_pi + coeffs.target_entropy))


def alpha_update(log_pi, coeffs):
    if not coeffs.auto:
        return coeffs.alpha
    la = np.array([coeffs.log_alpha])
    coeffs.optim.step(la, np.array([alpha_grad(log_pi, coeffs)]))
    coeffs.log_alpha = float(la[0])
    return coeffs.value


def target_sync(critics, tau=None):
    tau = critics.tau if tau is None else tau
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for online, target in (("q1", "t1"), ("q2", "t2")):
        if tau == 1.0:
            critics.params[target][...] = critics.params[online]
        else:
            critics.params[target] += tau * (critics.params[online] - critics.params[target])


# --- training loop --------------------------------------------------------------------


@dataclass
class LearnerConfig:
    total_steps: int = 30_000
    gamma: float = 0.98
    tau: float = 0.005
    batch_size: int = 256
    buffer_size: int = 100_000
    warmup_steps: int = 1000
    updates_per_step: int = 1
    eval_interval: int = 2000
    eval_episodes: int = 20
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    alpha: float = 1e-2
    alpha_auto: bool = False
    beta_d_e: float = 1e-4
    beta_c_e: float = 2e-4
    beta_enabled: bool = True
    algorithm: str = "kian"  # "kian" (mixture) or "sac" (plain actor baseline)
    actor_hidden: tuple = (512, 512, 512)
    query_hidden: tuple = (64, 64, 64)
    critic_hidden: tuple = (512, 512, 512)
    activation: str = "relu"
    d_k: int = 4
    temperature: float = 1.0
    stop_success: float = None
    checkpoint_interval: int = 0

    def beta_schedule(self):
        return BetaSchedule(self.beta_d_e, self.beta_c_e, self.beta_enabled)

    def coefficients(self, action_dim):
        return EntropyCoefficients(self.alpha, self.alpha_auto, -float(action_dim), self.beta_schedule(), self.alpha_lr)

    def to_dict(self):
        d = asdict(self)
        for k in ("actor_hidden", "query_hidden", "critic_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("actor_hidden", "query_hidden", "critic_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def build_policy(config, layout, knowledge, streams):
    if config.algorithm == "sac":
        return GaussianActor.create(layout, streams, config.actor_hidden, config.activation)
    if config.algorithm == "kian":
        return KianPolicy.create(layout, knowledge, streams, config.actor_hidden, config.query_hidden,
                                 config.activation, config.temperature, config.d_k)
    raise ValueError(f"unknown algorithm {config.algorithm!r}")


def metric_columns(n):
    return ["step", "episode_return", "success_rate", "actor_loss", "critic_loss", "alpha", "beta",
            "mean_Hw", "w_in"] + [f"w_g{j}" for j in range(1, n + 1)]


class MetricsWriter:
    """Append-only CSV; every row is written and flushed as one line."""

    def __init__(self, path, columns):
        self.path, self.columns = path, columns
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a", newline="")
        if fresh:
            self._write(columns)

    def _write(self, values):
        self._fh.write(",".join(values) + "\n")
        self._fh.flush()

    def write(self, row):
        self._write([_fmt(row[c]) for c in self.columns])

    def close(self):
        self._fh.close()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def evaluate(policy, spec, episodes, rng):
    """Greedy rollouts: argmax knowledge selection, component-mean actions."""
    if episodes <= 0:
        raise ValueError("need at least one evaluation episode")
    env = KinematicEnv(spec, rng=rng)
    successes, returns = [], []
    for _ in range(episodes):
        obs, done, ret, res = env.reset(), False, 0.0, None
        while not done:
            obs, res = env.step(policy.greedy_action(obs))
            ret += res.reward
            done = res.done
        successes.append(bool(res.info["success"]))
        returns.append(ret)
    return float(np.mean(successes)), float(np.mean(returns)), successes, returns


class Trainer:
    """Single-writer training loop whose complete state can be saved and resumed."""

    def __init__(self, spec, config, seed, knowledge=None, policy=None, critics=None, metrics_path=None,
                 trajectory_path=None):
        self.spec, self.config, self.seed = spec, config, int(seed)
        streams = streams_for(seed)
        self.policy = policy if policy is not None else build_policy(config, spec.layout, knowledge, streams)
        self.critics = critics if critics is not None else CriticPair.create(
            spec.obs_dim, spec.action_dim, config.critic_hidden, streams, config.gamma, config.tau,
            config.critic_lr, config.activation)
        self.coeffs = config.coefficients(spec.action_dim)
        self.optim = {k: Adam(v.size, config.actor_lr) for k, v in self.policy.param_groups().items()}
        self.buffer = ReplayBuffer(config.buffer_size, spec.obs_dim, spec.action_dim)
        self.rng_env = streams("env")
        self.rng_act = streams("policy")
        self.rng_learn = streams("learner")
        self.env = KinematicEnv(spec, rng=self.rng_env, trajectory_path=trajectory_path)
        self.obs = self.env.reset()
        self.ep_return = 0.0
        self.step_count = 0
        self.n_updates = 0
        self.best_success = 0.0
        self.steps_to_threshold = None
        self._reset_interval()
        self.rows = []
        self.columns = metric_columns(self.policy.n)
        self.metrics = MetricsWriter(metrics_path, self.columns) if metrics_path else None

    def _reset_interval(self):
        n = self.policy.n
        self.acc = {"actor": 0.0, "critic": 0.0, "count": 0, "Hw": 0.0, "w": np.zeros(n + 1)}

    @property
    def beta(self):
        return beta_at(self.coeffs.beta, self.step_count) if self.policy.n > 0 else 0.0

    def gradient_step(self):
        batch = self.buffer.sample(self.config.batch_size, self.rng_learn)
        c_loss = critic_update(batch, self.policy, self.critics, self.coeffs, self.rng_learn)
        res = actor_update(batch, self.policy, self.critics, self.coeffs, self.step_count, self.rng_learn, self.optim)
        alpha_update(res.log_prob, self.coeffs)
        target_sync(self.critics)
        self.n_updates += 1
        a = self.acc
        a["actor"] += res.loss
        a["critic"] += c_loss
        a["count"] += 1
        a["Hw"] += float(np.mean(res.entropy_w))
        a["w"] += np.mean(res.weights, axis=0)

    def env_step(self):
        cfg = self.config
        if self.step_count < cfg.warmup_steps:
            action = self.rng_act.uniform(-1.0, 1.0, self.spec.action_dim)
        else:
            action, _ = self.policy.act(self.obs, self.rng_act)
        next_obs, res = self.env.step(action)
        self.buffer.add(self.obs, action, res.reward, next_obs, res.info["success"])
        self.ep_return += res.reward
        self.obs = next_obs
        if res.done:
            self.obs = self.env.reset()
            self.ep_return = 0.0
        self.step_count += 1

    def evaluate_now(self):
        rng = stream(self.seed, "eval", self.step_count)
        return evaluate(self.policy, self.spec, self.config.eval_episodes, rng)

    def log_interval(self):
        success, ret, _, _ = self.evaluate_now()
        a, cnt = self.acc, max(self.acc["count"], 1)
        nan = float("nan")
        w = a["w"] / cnt if a["count"] else np.full(self.policy.n + 1, nan)
        row = {
            "step": self.step_count, "episode_return": ret, "success_rate": success,
            "actor_loss": a["actor"] / cnt if a["count"] else nan,
            "critic_loss": a["critic"] / cnt if a["count"] else nan,
            "alpha": self.coeffs.value, "beta": self.beta,
            "mean_Hw": a["Hw"] / cnt if a["count"] else nan, "w_in": w[0],
        }
        for j in range(1, self.policy.n + 1):
            row[f"w_g{j}"] = w[j]
        self.rows.append(row)
        if self.metrics:
            self.metrics.write(row)
        self.best_success = max(self.best_success, success)
        thr = self.config.stop_success
        if thr is not None and self.steps_to_threshold is None and success >= thr:
            self.steps_to_threshold = self.step_count
        self._reset_interval()
        return row

    def run(self, n_steps=None, on_checkpoint=None):
        """Advance ``n_steps`` environment steps (default: up to ``total_steps``)."""
        cfg = self.config
        target = cfg.total_steps if n_steps is None else self.step_count + n_steps
        while self.step_count < target:
            self.env_step()
            if self.step_count >= cfg.warmup_steps and self.buffer.size >= cfg.batch_size:
                for _ in range(cfg.updates_per_step):
                    self.gradient_step()
            if cfg.eval_interval and self.step_count % cfg.eval_interval == 0:
                self.log_interval()
                if cfg.stop_success is not None and self.steps_to_threshold is not None:
                    break
            if on_checkpoint and cfg.checkpoint_interval and self.step_count % cfg.checkpoint_interval == 0:
                on_checkpoint(self)
        return self.rows

    def close(self):
        self.env.close()
        if self.metrics:
            self.metrics.close()

    # persistence

    def state(self):
        """``(meta, arrays)`` capturing everything needed to resume bit-exactly."""
        arrays, meta = {}, {}
        for name, arr in self.policy.params.items():
            arrays[f"policy.{name}"] = arr
        for name, arr in self.critics.params.items():
            arrays[f"critic.{name}"] = arr
        opt_meta = {}
        for prefix, optims in (("opt.actor", self.optim), ("opt.critic", self.critics.optim)):
            for name, opt in optims.items():
                arrays[f"{prefix}.{name}.m"] = opt.m
                arrays[f"{prefix}.{name}.v"] = opt.v
                opt_meta[f"{prefix}.{name}"] = opt.t
        if self.coeffs.auto:
            arrays["opt.alpha.m"], arrays["opt.alpha.v"] = self.coeffs.optim.m, self.coeffs.optim.v
            opt_meta["opt.alpha"] = self.coeffs.optim.t
            arrays["entropy.log_alpha"] = np.array([self.coeffs.log_alpha])
        for name, arr in self.buffer.arrays().items():
            arrays[f"buffer.{name}"] = arr[:self.buffer.size]
        arrays["env.state"] = self.env.state.to_vector()
        arrays["env.obs"] = self.obs
        arrays["interval.w"] = self.acc["w"]
        meta["optimizer_steps"] = opt_meta
        meta["buffer"] = {"cursor": self.buffer.cursor, "size": self.buffer.size, "capacity": self.buffer.capacity}
        meta["rng"] = {
            "env": self.rng_env.bit_generator.state,
            "policy": self.rng_act.bit_generator.state,
            "learner": self.rng_learn.bit_generator.state,
        }
        meta["progress"] = {
            "step": self.step_count, "updates": self.n_updates, "ep_return": self.ep_return,
            "best_success": self.best_success, "steps_to_threshold": self.steps_to_threshold,
            "interval": {k: self.acc[k] for k in ("actor", "critic", "count", "Hw")},
        }
        meta["seed"] = self.seed
        return meta, arrays

    def load_state(self, meta, arrays):
        for name in self.policy.params:
            self.policy.params[name][...] = arrays[f"policy.{name}"].reshape(self.policy.params[name].shape)
        for name in self.critics.params:
            self.critics.params[name][...] = arrays[f"critic.{name}"]
        opt_meta = meta["optimizer_steps"]
        for prefix, optims in (("opt.actor", self.optim), ("opt.critic", self.critics.optim)):
            for name, opt in optims.items():
                key = f"{prefix}.{name}"
                opt.load({"m": arrays[key + ".m"], "v": arrays[key + ".v"], "t": opt_meta[key]})
        if self.coeffs.auto:
            self.coeffs.optim.load({"m": arrays["opt.alpha.m"], "v": arrays["opt.alpha.v"], "t": opt_meta["opt.alpha"]})
            self.coeffs.log_alpha = float(arrays["entropy.log_alpha"][0])
        buf = meta["buffer"]
        if int(buf["capacity"]) != self.buffer.capacity:
            raise ValueError("replay capacity differs from the saved run")
        rows = int(buf["size"])
        self.buffer.load({k: arrays[f"buffer.{k}"].reshape((rows,) + getattr(self.buffer, k).shape[1:])
                          for k in ("obs", "actions", "rewards", "next_obs", "dones")}, buf["cursor"], rows)
        self.env.state = WorldState.from_vector(arrays["env.state"], self.spec.arms)
        self.obs = np.array(arrays["env.obs"], dtype=np.float64)
        self.rng_env.bit_generator.state = meta["rng"]["env"]
        self.rng_act.bit_generator.state = meta["rng"]["policy"]
        self.rng_learn.bit_generator.state = meta["rng"]["learner"]
        prog = meta["progress"]
        self.step_count, self.n_updates = int(prog["step"]), int(prog["updates"])
        self.ep_return, self.best_success = float(prog["ep_return"]), float(prog["best_success"])
        self.steps_to_threshold = prog["steps_to_threshold"]
        self.acc = dict(prog["interval"])
        self.acc["w"] = np.array(arrays["interval.w"], dtype=np.float64)


def train(spec, config, seed, knowledge=None, metrics_path=None, policy=None):
    """Run a full training job; returns the finished :class:`Trainer`."""
    trainer = Trainer(spec, config, seed, knowledge=knowledge, policy=policy, metrics_path=metrics_path)
    try:
        trainer.run()
    finally:
        trainer.close()
    return trainer
