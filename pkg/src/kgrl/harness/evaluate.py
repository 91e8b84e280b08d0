"""Greedy evaluation of checkpointed policies, with per-episode CSV output."""
import csv

import numpy as np

from ..approximators import MlpSpec
from ..envs import KinematicEnv
from ..learner import stream
from ..policy import KianPolicy


class EvalError(ValueError):
    pass


def check_compatible(policy, spec):
    layout = policy.layout
    if layout.obs_dim != spec.obs_dim or layout.action_dim != spec.action_dim:
        raise EvalError(f"policy maps {layout.obs_dim}->{layout.action_dim} but task {spec.task_id} "
                        f"needs {spec.obs_dim}->{spec.action_dim}")
    if layout != spec.layout:
        raise EvalError(f"observation layout of task {spec.task_id} differs from the policy's")


def run_episodes(policy, spec, episodes, seed):
    """Per-episode ``(success, return, steps)`` under greedy actions."""
    if episodes <= 0:
        raise EvalError("episodes must be positive")
    check_compatible(policy, spec)
    env = KinematicEnv(spec, rng=stream(seed, "eval"))
    results = []
    for _ in range(episodes):
        obs, ret, steps, res = env.reset(), 0.0, 0, None
        while res is None or not res.done:
            obs, res = env.step(policy.greedy_action(obs))
            ret += res.reward
            steps += 1
        results.append((bool(res.info["success"]), ret, steps))
    return results


def write_episodes(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "success", "return", "steps"])
        for i, (ok, ret, steps) in enumerate(results):
            w.writerow([i, int(ok), repr(float(ret)), steps])


def summarize(results):
    return float(np.mean([r[0] for r in results])), float(np.mean([r[1] for r in results]))


def knowledge_only_policy(spec, kset, policy_id, hidden=(8,)):
    """Mixture policy whose weights always select ``policy_id``.

    The query emits a constant vector aligned with the chosen key, so greedy
    evaluation runs the scripted controller unchanged.
    """
    if policy_id not in kset.ids:
        raise EvalError(f"unknown knowledge id {policy_id!r}")
    d_k = 4
    query_spec = MlpSpec(spec.obs_dim, tuple(hidden), d_k)
    inner_spec = MlpSpec(spec.obs_dim, tuple(hidden), 2 * spec.action_dim)
    query = np.zeros(query_spec.n_params)
    w0, b0, end = query_spec.offsets()[-1]
    query[b0:end] = 1.0
    keys = np.zeros((kset.n + 1, d_k))
    keys[kset.index(policy_id) + 1] = 1.0
    params = {"query": query, "keys": keys, "inner": np.zeros(inner_spec.n_params)}
    return KianPolicy(spec.layout, kset.with_keys(keys[1:]), inner_spec, query_spec, params)
