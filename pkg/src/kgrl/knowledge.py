"""External knowledge: scripted surgical-analog controllers and the expandable set.

Scripted laws are proportional controllers in normalized action units,
``clip(k_p * (target - ee), -bound, bound)`` per position block. A law never
fails on a task that lacks the fields it uses: it emits zeros instead, so one
unified knowledge set can be attached to every task.

For mixture densities each policy is wrapped as a diagonal Gaussian in the
pre-squash space of the tanh action map. A scripted mean ``m`` becomes the
location ``atanh(clip(m, -MEAN_CLIP, MEAN_CLIP))`` with fixed scale
``SIGMA_KNOW``, so ``tanh`` of the location reproduces the law's action.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .approximators import GaussianHeadOutput, MlpSpec, mlp_forward

SIGMA_KNOW = 0.05
K_P = 5.0
ACTION_BOUND = 1.0
MEAN_CLIP = 0.99
D_K = 4

SCRIPTED_KINDS = ("ScriptedApproach", "ScriptedTransport", "ScriptedHandover")
LEARNED_KIND = "LearnedInnerActor"


class RegistrationError(ValueError):
    pass


def _p_law(target, ee, k_p, bound):
    return np.clip(k_p * (target - ee), -bound, bound)


def _zeros(obs, layout):
    obs = np.asarray(obs, dtype=np.float64)
    return obs, np.zeros(obs.shape[:-1] + (layout.action_dim,))


def _std(mean):
    return np.full_like(mean, SIGMA_KNOW)


def _held(obs, layout):
    """Per-arm grasp flags, shape (..., arms); all False when the task has none."""
    if not layout.grasp:
        return np.zeros(obs.shape[:-1] + (max(layout.arms, 1),), dtype=bool)
    return np.stack([obs[..., g] > 0.5 for g in layout.grasp], axis=-1)


def approach_policy(obs, layout, k_p=K_P, bound=ACTION_BOUND):
    """Move the first arm toward the object while it is free, then carry it to the goal."""
    obs, mean = _zeros(obs, layout)
    if not layout.arm_actions or not layout.ee or (layout.goal is None and layout.object is None):
        return mean, _std(mean)
    ee = layout.take(obs, layout.ee[0])
    if layout.object is not None:
        obj = layout.take(obs, layout.object)
        free = ~_held(obs, layout).any(axis=-1, keepdims=True)
        goal = layout.take(obs, layout.goal) if layout.goal is not None else obj
        # once held, steer so the object (not the gripper) lands on the goal
        target = np.where(free, obj, ee + goal - obj)
    else:
        target = layout.take(obs, layout.goal)
    lo, hi = layout.arm_actions[0]
    mean[..., lo:hi] = _p_law(target, ee, k_p, bound)
    return mean, _std(mean)


def transport_policy(obs, layout, k_p=K_P, bound=ACTION_BOUND):
    """Carry the object toward the goal with whichever arm holds it; zero when nothing is held."""
    obs, mean = _zeros(obs, layout)
    if not layout.grasp or layout.goal is None or not layout.arm_actions:
        return mean, _std(mean)
    held = _held(obs, layout)
    shift = layout.take(obs, layout.goal) - layout.take(obs, layout.object)
    for arm, (lo, hi) in enumerate(layout.arm_actions):
        mean[..., lo:hi] = held[..., arm:arm + 1] * _p_law(shift, 0.0, k_p, bound)
    return mean, _std(mean)


def handover_policy(obs, layout, k_p=K_P, bound=ACTION_BOUND):
    """Bring two arms together; the arm not holding the object heads for the object.

    Single-arm tasks get an all-zero mean.
    """
    obs, mean = _zeros(obs, layout)
    if layout.arms != 2 or len(layout.arm_actions) != 2:
        return mean, _std(mean)
    ee = [layout.take(obs, r) for r in layout.ee]
    mid = 0.5 * (ee[0] + ee[1])
    held = _held(obs, layout)
    obj = layout.take(obs, layout.object) if layout.object is not None else mid
    for arm, (lo, hi) in enumerate(layout.arm_actions):
        other_holds = held[..., 1 - arm:2 - arm]
        target = np.where(other_holds, obj, mid)
        mean[..., lo:hi] = _p_law(target, ee[arm], k_p, bound)
    return mean, _std(mean)


_SCRIPTED_LAWS = {
    "ScriptedApproach": approach_policy,
    "ScriptedTransport": transport_policy,
    "ScriptedHandover": handover_policy,
}


@dataclass(frozen=True, eq=False)
class KnowledgePolicy:
    """A frozen state-to-action-distribution map usable as external knowledge.

    ``LearnedInnerActor`` entries carry the MLP spec and a read-only copy of the
    trained parameters of a previous task's inner actor.
    """

    id: str
    kind: str
    net_spec: MlpSpec = None
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in _SCRIPTED_LAWS and self.kind != LEARNED_KIND:
            raise RegistrationError(f"unknown knowledge kind {self.kind!r}")
        if self.kind == LEARNED_KIND:
            if self.net_spec is None or self.params is None:
                raise RegistrationError("a learned knowledge policy needs net_spec and params")
            frozen = np.array(self.params, dtype=np.float64)
            frozen.flags.writeable = False
            object.__setattr__(self, "params", frozen)

    @property
    def action_dim(self):
        return None if self.net_spec is None else self.net_spec.output_dim // 2

    def act_dist(self, obs, layout):
        """``(mean action, std)``; for learned actors the std is the pre-squash scale."""
        if self.kind == LEARNED_KIND:
            loc, log_std = self.distribution(obs, layout)
            return np.tanh(loc), np.exp(log_std)
        return _SCRIPTED_LAWS[self.kind](obs, layout)

    def distribution(self, obs, layout):
        """Pre-squash Gaussian ``(loc, log_std)``."""
        if self.kind == LEARNED_KIND:
            head = GaussianHeadOutput.from_network(mlp_forward(self.net_spec, self.params, obs), self.action_dim)
            return head.mean, head.log_std
        mean, std = _SCRIPTED_LAWS[self.kind](obs, layout)
        return np.arctanh(np.clip(mean, -MEAN_CLIP, MEAN_CLIP)), np.log(std)


@dataclass(frozen=True)
class KnowledgeKey:
    embedding: np.ndarray
    owner_policy_id: str


def init_key(rng, d_k=D_K):
    bound = 1.0 / math.sqrt(d_k)
    return rng.uniform(-bound, bound, size=d_k)


@dataclass(frozen=True)
class KnowledgeSet:
    policies: tuple = ()
    keys: tuple = ()

    def __post_init__(self):
        if len(self.policies) != len(self.keys):
            raise RegistrationError("policies and keys must have equal length")
        ids = [p.id for p in self.policies]
        if len(set(ids)) != len(ids):
            raise RegistrationError(f"duplicate knowledge ids in {ids}")

    @property
    def n(self):
        return len(self.policies)

    @property
    def ids(self):
        return [p.id for p in self.policies]

    def key_matrix(self):
        if not self.keys:
            return np.zeros((0, D_K))
        return np.stack([k.embedding for k in self.keys])

    def index(self, policy_id):
        return self.ids.index(policy_id)

    def with_keys(self, matrix):
        """Copy of the set with key embeddings replaced row by row."""
        keys = tuple(KnowledgeKey(np.array(row, dtype=np.float64), p.id) for row, p in zip(matrix, self.policies))
        return KnowledgeSet(self.policies, keys)

    def distributions(self, obs, layout):
        """Stacked pre-squash ``(loc, log_std)`` of shape (..., n, action_dim)."""
        obs = np.asarray(obs, dtype=np.float64)
        if not self.policies:
            shape = obs.shape[:-1] + (0, layout.action_dim)
            return np.zeros(shape), np.zeros(shape)
        locs, log_stds = zip(*(p.distribution(obs, layout) for p in self.policies))
        return np.stack(locs, axis=-2), np.stack(log_stds, axis=-2)


def add_knowledge(kset, policy, rng=None, key=None, d_k=D_K):
    """Return a new set with ``policy`` appended.

    The key is drawn fresh from the standard init law unless one is supplied.
    """
    if policy.id in kset.ids:
        raise RegistrationError(f"knowledge id {policy.id!r} already registered")
    if key is None:
        if rng is None:
            raise RegistrationError("need an rng to initialize a fresh key")
        key = init_key(rng, d_k)
    key = np.array(key, dtype=np.float64)
    if kset.keys and key.shape != kset.keys[0].embedding.shape:
        raise RegistrationError(f"key length {key.shape[0]} does not match set key length {kset.keys[0].embedding.shape[0]}")
    if not np.isfinite(key).all():
        raise RegistrationError("knowledge key must be finite")
    return KnowledgeSet(kset.policies + (policy,), kset.keys + (KnowledgeKey(key, policy.id),))


def scripted_knowledge_set(rng, d_k=D_K):
    """The initial three-policy set: approach, transport, handover."""
    kset = KnowledgeSet()
    for pid, kind in (("approach", "ScriptedApproach"), ("transport", "ScriptedTransport"), ("handover", "ScriptedHandover")):
        kset = add_knowledge(kset, KnowledgePolicy(pid, kind), rng, d_k=d_k)
    return kset
