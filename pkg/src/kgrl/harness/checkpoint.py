"""Checkpoint container: JSON manifest header followed by little-endian float64 blocks.

File layout::

    b"KGRLCKPT"            8-byte magic
    <u8 header length>     little-endian
    <header JSON>          {"format_version", "manifest", "blocks", "content_hash"}
    <block bytes>          concatenated '<f8' arrays in directory order

The content hash is SHA-256 over the canonical JSON of manifest and block
directory plus every block byte, so any corrupted parameter is detected.
"""
from dataclasses import asdict, dataclass
import hashlib
import json
import os
import struct

import numpy as np

from ..approximators import MlpSpec
from ..envs import TaskSpec
from ..knowledge import LEARNED_KIND, KnowledgeKey, KnowledgePolicy, KnowledgeSet
from ..learner import LearnerConfig, Trainer
from ..policy import GaussianActor, KianPolicy

MAGIC = b"KGRLCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    blocks: dict
    content_hash: str
    version: int = FORMAT_VERSION


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _digest(manifest, directory, payloads):
    h = hashlib.sha256()
    h.update(_canonical({"manifest": manifest, "blocks": directory}))
    for p in payloads:
        h.update(p)
    return h.hexdigest()


def encode(manifest, blocks):
    """Serialized bytes and content hash for ``manifest`` and named float arrays."""
    directory, payloads, offset = [], [], 0
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        data = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(data)})
        payloads.append(data)
        offset += len(data)
    digest = _digest(manifest, directory, payloads)
    header = _canonical({"format_version": FORMAT_VERSION, "manifest": manifest, "blocks": directory,
                         "content_hash": digest})
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payloads), digest


def save_checkpoint(path, manifest, blocks):
    """Write atomically (temp file + rename); returns the content hash."""
    data, digest = encode(manifest, blocks)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return digest


def decode(data):
    if len(data) < len(MAGIC) + 8:
        raise CheckpointTruncatedError("file ends before the header length field")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(data[start:start + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    body = data[start + hlen:]
    directory = header["blocks"]
    needed = sum(b["length"] for b in directory)
    if len(body) < needed:
        raise CheckpointTruncatedError(f"parameter data truncated: {len(body)} of {needed} bytes")
    if len(body) > needed:
        raise CheckpointFormatError("trailing bytes after the last parameter block")
    payloads = [body[b["offset"]:b["offset"] + b["length"]] for b in directory]
    digest = _digest(header["manifest"], directory, payloads)
    if digest != header["content_hash"]:
        raise CheckpointHashError(f"content hash mismatch: stored {header['content_hash'][:12]}, computed {digest[:12]}")
    blocks = {b["name"]: np.frombuffer(p, dtype="<f8").reshape(b["shape"]).astype(np.float64)
              for b, p in zip(directory, payloads)}
    return Checkpoint(header["manifest"], blocks, digest, version)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def read_manifest(path):
    """Header only (no hash verification); for inspection."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if len(head) < len(MAGIC) + 8 or head[:len(MAGIC)] != MAGIC:
            raise CheckpointFormatError("not a checkpoint file")
        (hlen,) = struct.unpack("<Q", head[len(MAGIC):])
        raw = fh.read(hlen)
    if len(raw) < hlen:
        raise CheckpointTruncatedError("file ends inside the header")
    return json.loads(raw)


def block_digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


# --- mapping between trainers/policies and checkpoints --------------------------------


def task_to_dict(spec):
    return asdict(spec)


def task_from_dict(d):
    return TaskSpec(**d).validate()


def knowledge_manifest(kset):
    return [{"id": p.id, "kind": p.kind, "net_spec": None if p.net_spec is None else p.net_spec.to_dict()}
            for p in kset.policies]


def policy_manifest(policy):
    if isinstance(policy, KianPolicy):
        return {"algorithm": "kian", "inner_spec": policy.inner_spec.to_dict(),
                "query_spec": policy.query_spec.to_dict(), "temperature": policy.temperature,
                "d_k": policy.d_k, "knowledge": knowledge_manifest(policy.knowledge)}
    return {"algorithm": "sac", "inner_spec": policy.inner_spec.to_dict(), "knowledge": []}


def trainer_checkpoint(trainer, include_buffer=True):
    """``(manifest, blocks)`` for a trainer; everything needed to resume exactly."""
    meta, arrays = trainer.state()
    if not include_buffer:
        arrays = {k: v for k, v in arrays.items() if not k.startswith("buffer.")}
    meta["resumable"] = include_buffer
    meta["task"] = task_to_dict(trainer.spec)
    meta["config"] = trainer.config.to_dict()
    meta["policy"] = policy_manifest(trainer.policy)
    meta["alpha"] = trainer.coeffs.value
    meta["global_step"] = trainer.step_count
    for p in trainer.policy.knowledge.policies if trainer.policy.n else ():
        if p.kind == LEARNED_KIND:
            arrays[f"knowledge.{p.id}"] = p.params
    return meta, arrays


def knowledge_from_checkpoint(ckpt):
    """The checkpoint's knowledge set with the trained keys."""
    pm = ckpt.manifest["policy"]
    policies = []
    for entry in pm.get("knowledge", []):
        spec = MlpSpec.from_dict(entry["net_spec"]) if entry["net_spec"] else None
        params = ckpt.blocks[f"knowledge.{entry['id']}"] if entry["kind"] == LEARNED_KIND else None
        policies.append(KnowledgePolicy(entry["id"], entry["kind"], spec, params))
    keys = ckpt.blocks.get("policy.keys")
    key_rows = [] if keys is None else keys[1:]
    return KnowledgeSet(tuple(policies), tuple(KnowledgeKey(np.array(k), p.id) for k, p in zip(key_rows, policies)))


def policy_from_checkpoint(ckpt):
    task = task_from_dict(ckpt.manifest["task"])
    pm = ckpt.manifest["policy"]
    inner_spec = MlpSpec.from_dict(pm["inner_spec"])
    if pm["algorithm"] == "sac":
        return GaussianActor(task.layout, inner_spec, {"inner": ckpt.blocks["policy.inner"].copy()})
    params = {k: ckpt.blocks[f"policy.{k}"].copy() for k in ("query", "keys", "inner")}
    return KianPolicy(task.layout, knowledge_from_checkpoint(ckpt), inner_spec,
                      MlpSpec.from_dict(pm["query_spec"]), params, pm["temperature"])


def trainer_from_checkpoint(ckpt, metrics_path=None):
    """Rebuild a trainer positioned exactly where the checkpoint was taken."""
    if not ckpt.manifest.get("resumable", False):
        raise CheckpointError("checkpoint was saved without replay data and cannot be resumed")
    task = task_from_dict(ckpt.manifest["task"])
    config = LearnerConfig.from_dict(ckpt.manifest["config"])
    policy = policy_from_checkpoint(ckpt)
    trainer = Trainer(task, config, ckpt.manifest["seed"], policy=policy, metrics_path=metrics_path)
    trainer.load_state(ckpt.manifest, ckpt.blocks)
    return trainer
