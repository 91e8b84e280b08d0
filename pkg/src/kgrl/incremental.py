"""Carrying trained components from one task to the next.

Three pipelines decide what a new task's mixture policy inherits from a
source checkpoint:

* ``KeysOnly``      selected knowledge keys; fresh query and inner actor
* ``KeysAndQuery``  selected keys and the query network
* ``All``           selected keys, the query, the inner actor and its key

Unselected keys are drawn fresh from the standard init law and critics are
always fresh. Knowledge identity is by policy id, never by position. In a
group run the replay buffer starts empty unless the edge sets ``carry_buffer``.
"""
from dataclasses import dataclass, field
import json
import os
from pathlib import Path

import numpy as np

from .approximators import MlpSpec
from .harness.checkpoint import (
    Checkpoint,
    knowledge_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
    trainer_checkpoint,
)
from .knowledge import LEARNED_KIND, KnowledgeKey, KnowledgePolicy, KnowledgeSet, init_key, scripted_knowledge_set
from .learner import Trainer, stream, streams_for
from .policy import KianPolicy

PIPELINES = ("KeysOnly", "KeysAndQuery", "All")


class TransferError(ValueError):
    def __init__(self, component, message):
        super().__init__(f"{component}: {message}")
        self.component, self.detail = component, message


class ExpansionError(ValueError):
    pass


@dataclass(frozen=True)
class TransferPlan:
    pipeline: str
    source: object  # Checkpoint or path
    target: object  # TaskSpec
    key_selection: tuple = None  # knowledge ids; None selects all source ids
    expand_with_inner: bool = False

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise TransferError("pipeline", f"unknown pipeline {self.pipeline!r}")
        if self.key_selection is not None:
            if not self.key_selection:
                raise TransferError("keys", "key selection must be non-empty")
            object.__setattr__(self, "key_selection", tuple(self.key_selection))

    def describe(self):
        return {"pipeline": self.pipeline, "key_selection": None if self.key_selection is None else list(self.key_selection),
                "expand_with_inner": self.expand_with_inner}


def _ckpt(source):
    return source if isinstance(source, Checkpoint) else load_checkpoint(source)


def learned_id(task_id):
    return f"inner:{task_id}"


def check_dims(pipeline, src_obs, src_act, dst_obs, dst_act, expand=False):
    """Raise :class:`TransferError` if the pipeline cannot map between these dimensions."""
    if pipeline in ("KeysAndQuery", "All") and src_obs != dst_obs:
        raise TransferError("query", f"observation size {src_obs} does not match target {dst_obs}")
    if pipeline == "All" and src_act != dst_act:
        raise TransferError("inner_actor", f"action size {src_act} does not match target {dst_act}")
    if expand and (src_obs != dst_obs or src_act != dst_act):
        raise TransferError("expand_with_inner", f"source actor is {src_obs}->{src_act}, target needs {dst_obs}->{dst_act}")


def expand_knowledge(kset, source):
    """Append the source's trained inner actor as frozen knowledge, with its trained key."""
    ckpt = _ckpt(source)
    pm = ckpt.manifest["policy"]
    task_id = ckpt.manifest["task"]["task_id"]
    spec = MlpSpec.from_dict(pm["inner_spec"])
    pid = learned_id(task_id)
    if pid in kset.ids:
        raise ExpansionError(f"knowledge id {pid!r} already present")
    if kset.policies:
        dims = {p.action_dim for p in kset.policies if p.action_dim is not None}
        if dims and spec.output_dim // 2 not in dims:
            raise ExpansionError(f"source action size {spec.output_dim // 2} does not match set action size {dims}")
    if pm["algorithm"] == "kian":
        key = ckpt.blocks["policy.keys"][0]
    else:
        key = init_key(stream(ckpt.manifest["seed"], "init.expand"), len(kset.key_matrix()[0]) if kset.n else 4)
    policy = KnowledgePolicy(pid, LEARNED_KIND, spec, ckpt.blocks["policy.inner"])
    if kset.keys and len(key) != len(kset.keys[0].embedding):
        raise ExpansionError("key length differs from the set's key length")
    return KnowledgeSet(kset.policies + (policy,), kset.keys + (KnowledgeKey(np.array(key), pid),))


def transfer(plan, config, seed):
    """Initialized mixture policy for ``plan.target`` built from ``plan.source``."""
    ckpt = _ckpt(plan.source)
    pm = ckpt.manifest["policy"]
    if pm["algorithm"] != "kian":
        raise TransferError("source", "transfer needs a mixture-policy checkpoint")
    src_inner = MlpSpec.from_dict(pm["inner_spec"])
    src_query = MlpSpec.from_dict(pm["query_spec"])
    target = plan.target
    check_dims(plan.pipeline, src_inner.input_dim, src_inner.output_dim // 2, target.obs_dim, target.action_dim,
               plan.expand_with_inner)
    if config.d_k != pm["d_k"]:
        raise TransferError("keys", f"key length {pm['d_k']} does not match configured {config.d_k}")

    src_set = knowledge_from_checkpoint(ckpt)
    selection = src_set.ids if plan.key_selection is None else list(plan.key_selection)
    missing = [k for k in selection if k not in src_set.ids]
    if missing:
        raise TransferError("keys", f"unknown source knowledge ids {missing}")

    # target set: the source's knowledge policies, copied keys where selected, fresh otherwise
    streams = streams_for(seed)
    fresh_rng = streams("init.knowledge")
    keys = []
    for pol, key in zip(src_set.policies, src_set.keys):
        fresh = init_key(fresh_rng, config.d_k)
        keys.append(KnowledgeKey(key.embedding.copy() if pol.id in selection else fresh, pol.id))
    kset = KnowledgeSet(src_set.policies, tuple(keys))
    if plan.expand_with_inner:
        kset = expand_knowledge(kset, ckpt)

    inner_hidden = src_inner.hidden_dims if plan.pipeline == "All" else config.actor_hidden
    query_hidden = src_query.hidden_dims if plan.pipeline in ("KeysAndQuery", "All") else config.query_hidden
    activation = src_inner.activation if plan.pipeline == "All" else config.activation
    policy = KianPolicy.create(target.layout, kset, streams, inner_hidden, query_hidden, activation,
                               config.temperature, config.d_k)
    if plan.pipeline in ("KeysAndQuery", "All"):
        if policy.query_spec != src_query:
            raise TransferError("query", "network shape differs from the source query")
        policy.params["query"] = ckpt.blocks["policy.query"].copy()
    if plan.pipeline == "All":
        if policy.inner_spec != src_inner:
            raise TransferError("inner_actor", "network shape differs from the source inner actor")
        policy.params["inner"] = ckpt.blocks["policy.inner"].copy()
        policy.params["keys"][0] = ckpt.blocks["policy.keys"][0]
    return policy


# --- groups ---------------------------------------------------------------------------


@dataclass
class LineageRecord:
    """Append-only ordered list of (task id, checkpoint hash, plan) entries."""

    entries: list = field(default_factory=list)

    def append(self, task_id, checkpoint_hash, plan, checkpoint_file, metrics_file, seed):
        self.entries.append({"task_id": task_id, "checkpoint_hash": checkpoint_hash, "plan": plan,
                             "checkpoint": checkpoint_file, "metrics": metrics_file, "seed": seed})

    @property
    def hashes(self):
        return [e["checkpoint_hash"] for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def write(self, path, name, status):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump({"group": name, "status": status, "records": self.entries}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls(json.load(fh)["records"])


def initial_knowledge(kind, seed, d_k=4):
    """Starting knowledge for a from-scratch run: the scripted set or nothing."""
    if kind == "none":
        return KnowledgeSet()
    return scripted_knowledge_set(stream(seed, "init.knowledge"), d_k)


def validate_group(group):
    """Static checks on every edge, before any training starts."""
    ids = [] if group.knowledge == "none" else ["approach", "transport", "handover"]
    for i, edge in enumerate(group.edges, 1):
        src, dst = group.tasks[i - 1], group.tasks[i]
        try:
            check_dims(edge.pipeline, src.obs_dim, src.action_dim, dst.obs_dim, dst.action_dim, edge.expand_with_inner)
            if edge.carry_buffer and (src.obs_dim, src.action_dim) != (dst.obs_dim, dst.action_dim):
                raise TransferError("replay_buffer", f"transitions are {src.obs_dim}/{src.action_dim}-dimensional, "
                                    f"target needs {dst.obs_dim}/{dst.action_dim}")
            if edge.keys is not None:
                missing = [k for k in edge.keys if k not in ids]
                if missing:
                    raise TransferError("keys", f"unknown source knowledge ids {missing}")
        except TransferError as exc:
            raise TransferError(f"edge {i} ({src.task_id}->{dst.task_id}) {exc.component}", exc.detail) from None
        if edge.expand_with_inner:
            ids = ids + [learned_id(src.task_id)]


def run_group(group, out_dir, on_task_done=None):
    """Train the group's tasks in order; returns the :class:`LineageRecord`.

    The lineage manifest is rewritten after every task, so a failure leaves
    the completed prefix on disk.
    """
    validate_group(group)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lineage = LineageRecord()
    manifest = out / "lineage.json"
    source = previous = None
    for i, (task, seed) in enumerate(zip(group.tasks, group.seeds)):
        plan_desc = None
        metrics = f"{i:02d}_{task.task_id}_metrics.csv"
        ckpt_name = f"{i:02d}_{task.task_id}.ckpt"
        metrics_path = out / metrics
        if metrics_path.exists():
            metrics_path.unlink()
        try:
            if i == 0:
                knowledge = initial_knowledge(group.knowledge, seed, group.learner.d_k)
                trainer = Trainer(task, group.learner, seed, knowledge=knowledge, metrics_path=metrics_path)
            else:
                edge = group.edges[i - 1]
                plan = TransferPlan(edge.pipeline, source, task, edge.keys, edge.expand_with_inner)
                plan_desc = dict(plan.describe(), carry_buffer=edge.carry_buffer)
                policy = transfer(plan, group.learner, seed)
                trainer = Trainer(task, group.learner, seed, policy=policy, metrics_path=metrics_path)
                if edge.carry_buffer:
                    old = previous.buffer
                    trainer.buffer.load({k: v[:old.size] for k, v in old.arrays().items()}, old.cursor, old.size)
            try:
                trainer.run()
            finally:
                trainer.close()
            meta, blocks = trainer_checkpoint(trainer, include_buffer=False)
            digest = save_checkpoint(out / ckpt_name, meta, blocks)
        except Exception as exc:
            lineage.write(manifest, group.name, f"failed at task {i + 1} ({task.task_id}): {exc}")
            raise GroupRunError(i, task.task_id, exc) from exc
        lineage.append(task.task_id, digest, plan_desc, ckpt_name, metrics, seed)
        lineage.write(manifest, group.name, "running" if i + 1 < len(group.tasks) else "complete")
        source = load_checkpoint(out / ckpt_name)
        previous = trainer
        if on_task_done:
            on_task_done(i, trainer)
    return lineage


class GroupRunError(RuntimeError):
    def __init__(self, index, task_id, cause):
        super().__init__(f"task {index + 1} ({task_id}) failed: {cause}")
        self.index, self.task_id = index, task_id
