"""Flat ``dotted.key = value`` run and group configuration with total validation.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every key is checked against a known field before anything is trained, and
each error names the offending field.
"""
from dataclasses import dataclass, field, fields, replace
import math
from pathlib import Path

from ..envs import TASK_IDS, TaskSpec, ConfigError, task_spec
from ..learner import ALPHA_CHOICES, LearnerConfig

BETA_BASE_CHOICES = (0.0, 2e-4)
PIPELINES = ("KeysOnly", "KeysAndQuery", "All")


class ConfigValidationError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def parse_flat(text, source="<config>"):
    """``{key: raw string value}``; rejects malformed lines and duplicate keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"{source}:{lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigValidationError(f"{source}:{lineno}", f"bad key {key!r}")
        if key in out:
            raise ConfigValidationError(key, f"duplicate key (line {lineno})")
        out[key] = value
    return out


def read_flat(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigValidationError(str(path), f"cannot read config: {exc.strerror}") from None
    return parse_flat(text, path.name)


# --- typed value parsers ---------------------------------------------------------------


def _int(key, v, lo=None):
    try:
        x = int(v)
    except ValueError:
        raise ConfigValidationError(key, f"expected an integer, got {v!r}") from None
    if lo is not None and x < lo:
        raise ConfigValidationError(key, f"must be >= {lo}, got {x}")
    return x


def _float(key, v, lo=None, hi=None, lo_open=False, hi_open=False):
    try:
        x = float(v)
    except ValueError:
        raise ConfigValidationError(key, f"expected a number, got {v!r}") from None
    if not math.isfinite(x):
        raise ConfigValidationError(key, "must be finite")
    if lo is not None and (x < lo or (lo_open and x == lo)):
        raise ConfigValidationError(key, f"must be {'>' if lo_open else '>='} {lo}, got {x}")
    if hi is not None and (x > hi or (hi_open and x == hi)):
        raise ConfigValidationError(key, f"must be {'<' if hi_open else '<='} {hi}, got {x}")
    return x


def _bool(key, v):
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigValidationError(key, f"expected true/false, got {v!r}")


def _dims(key, v):
    parts = [p for p in v.replace(" ", "").split(",") if p]
    if not parts:
        raise ConfigValidationError(key, "needs at least one layer size")
    return tuple(_int(key, p, lo=1) for p in parts)


def _choice(key, v, choices):
    if v not in choices:
        raise ConfigValidationError(key, f"must be one of {', '.join(choices)}, got {v!r}")
    return v


def _list(v):
    return [p.strip() for p in v.split(",") if p.strip()]


_LEARNER_FIELDS = {
    "learner.total_steps": ("total_steps", lambda k, v: _int(k, v, 0)),
    "learner.gamma": ("gamma", lambda k, v: _float(k, v, 0, 1, True, True)),
    "learner.tau": ("tau", lambda k, v: _float(k, v, 0, 1, True)),
    "learner.batch_size": ("batch_size", lambda k, v: _int(k, v, 1)),
    "learner.buffer_size": ("buffer_size", lambda k, v: _int(k, v, 1)),
    "learner.warmup_steps": ("warmup_steps", lambda k, v: _int(k, v, 0)),
    "learner.updates_per_step": ("updates_per_step", lambda k, v: _int(k, v, 1)),
    "learner.eval_interval": ("eval_interval", lambda k, v: _int(k, v, 0)),
    "learner.eval_episodes": ("eval_episodes", lambda k, v: _int(k, v, 1)),
    "learner.actor_lr": ("actor_lr", lambda k, v: _float(k, v, 0, 1, True)),
    "learner.critic_lr": ("critic_lr", lambda k, v: _float(k, v, 0, 1, True)),
    "learner.alpha_lr": ("alpha_lr", lambda k, v: _float(k, v, 0, 1, True)),
    "learner.beta.d_e": ("beta_d_e", lambda k, v: _float(k, v, 0)),
    "learner.beta.c_e": ("beta_c_e", lambda k, v: _float(k, v, 0)),
    "learner.beta.enabled": ("beta_enabled", _bool),
    "learner.algorithm": ("algorithm", lambda k, v: _choice(k, v, ("kian", "sac"))),
    "learner.temperature": ("temperature", lambda k, v: _float(k, v, 0, lo_open=True)),
    "learner.stop_success": ("stop_success", lambda k, v: _float(k, v, 0, 1, True)),
    "learner.checkpoint_interval": ("checkpoint_interval", lambda k, v: _int(k, v, 0)),
    "network.actor_hidden": ("actor_hidden", _dims),
    "network.query_hidden": ("query_hidden", _dims),
    "network.critic_hidden": ("critic_hidden", _dims),
    "network.activation": ("activation", lambda k, v: _choice(k, v, ("relu", "tanh"))),
    "network.d_k": ("d_k", lambda k, v: _int(k, v, 1)),
}

_TASK_FIELDS = {f.name: f.type for f in fields(TaskSpec) if f.name not in ("task_id", "kind", "arms")}


def _task(key_prefix, task_id, raw):
    if task_id not in TASK_IDS:
        raise ConfigValidationError(key_prefix, f"unknown task {task_id!r}; expected one of {', '.join(TASK_IDS)}")
    overrides = {}
    for name, kind in _TASK_FIELDS.items():
        key = f"{key_prefix}.{name}"
        if key in raw:
            conv = _int if kind in (int, "int") else _float
            overrides[name] = conv(key, raw[key])
    try:
        return task_spec(task_id, **overrides)
    except ConfigError as exc:
        raise ConfigValidationError(key_prefix, str(exc)) from None


def _learner(raw):
    kw = {}
    for key, (name, conv) in _LEARNER_FIELDS.items():
        if key in raw:
            kw[name] = conv(key, raw[key])
    allow = _bool("learner.allow_unlisted", raw.get("learner.allow_unlisted", "false"))
    if "learner.alpha" in raw:
        v = raw["learner.alpha"]
        if v.lower() == "auto":
            kw["alpha_auto"] = True
        else:
            kw["alpha"] = _float("learner.alpha", v, 0)
            if not allow and not any(math.isclose(kw["alpha"], c) for c in ALPHA_CHOICES):
                raise ConfigValidationError("learner.alpha", f"must be auto or one of {ALPHA_CHOICES}")
    if "learner.alpha_init" in raw:
        kw["alpha"] = _float("learner.alpha_init", raw["learner.alpha_init"], 0, lo_open=True)
    c_e = kw.get("beta_c_e", LearnerConfig.beta_c_e)
    if not allow and not any(math.isclose(c_e, c, abs_tol=1e-15) for c in BETA_BASE_CHOICES):
        raise ConfigValidationError("learner.beta.c_e", f"must be one of {BETA_BASE_CHOICES} unless learner.allow_unlisted")
    cfg = LearnerConfig(**kw)
    if cfg.buffer_size < cfg.batch_size:
        raise ConfigValidationError("learner.buffer_size", "must be at least learner.batch_size")
    if cfg.alpha_auto and cfg.alpha <= 0:
        raise ConfigValidationError("learner.alpha_init", "auto-tuned alpha must start positive")
    return cfg


_RUN_KEYS = {"run.seed", "run.name", "run.knowledge", "task.trajectory_dump", "learner.alpha", "learner.alpha_init",
             "learner.allow_unlisted"}


def _check_unknown(raw, allowed_fixed, allowed_prefixes=()):
    for key in raw:
        if key in allowed_fixed or key in _LEARNER_FIELDS:
            continue
        if any(key.startswith(p) for p in allowed_prefixes):
            continue
        raise ConfigValidationError(key, "unknown configuration key")


@dataclass
class RunConfig:
    task: TaskSpec
    learner: LearnerConfig
    seed: int = 0
    name: str = "run"
    knowledge: str = "scripted"  # "scripted" or "none"
    trajectory_dump: bool = False  # write (step, state, action, reward) rows for every training step


def parse_run_config(raw, default_name="run"):
    task_keys = {f"task.{n}" for n in _TASK_FIELDS} | {"task.id"}
    _check_unknown(raw, _RUN_KEYS | task_keys)
    if "task.id" not in raw:
        raise ConfigValidationError("task.id", "missing required field")
    if raw["task.id"] not in TASK_IDS:
        raise ConfigValidationError("task.id", f"unknown task {raw['task.id']!r}; expected one of {', '.join(TASK_IDS)}")
    task = _task("task", raw["task.id"], raw)
    learner = _learner(raw)
    knowledge = _choice("run.knowledge", raw.get("run.knowledge", "scripted"), ("scripted", "none"))
    if learner.algorithm == "sac" and knowledge != "none":
        knowledge = "none"
    return RunConfig(task, learner, _int("run.seed", raw.get("run.seed", "0"), 0),
                     raw.get("run.name", default_name), knowledge,
                     _bool("task.trajectory_dump", raw.get("task.trajectory_dump", "false")))


def load_run_config(path):
    return parse_run_config(read_flat(path), Path(path).stem)


@dataclass
class EdgePlan:
    """How task ``index`` is initialized from task ``index - 1``."""

    pipeline: str = "KeysOnly"
    keys: tuple = None  # None selects every source knowledge id
    expand_with_inner: bool = False
    carry_buffer: bool = False  # start from the previous task's replay data instead of an empty buffer


@dataclass
class GroupConfig:
    tasks: list
    edges: list  # len(tasks) - 1 EdgePlans
    learner: LearnerConfig
    seeds: list
    name: str = "group"
    knowledge: str = "scripted"


def parse_group_config(raw, default_name="group"):
    _check_unknown(raw, _RUN_KEYS | {"group.tasks", "group.seed", "group.seeds", "group.name"},
                   ("edge.", "task."))
    if "group.tasks" not in raw:
        raise ConfigValidationError("group.tasks", "missing required field")
    names = _list(raw["group.tasks"])
    if not names:
        raise ConfigValidationError("group.tasks", "needs at least one task")
    tasks = []
    for i, tid in enumerate(names):
        if tid not in TASK_IDS:
            raise ConfigValidationError("group.tasks", f"unknown task {tid!r} at position {i + 1}")
        tasks.append(_task(f"task.{tid}", tid, raw))
    for key in raw:
        if key.startswith("task."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in names or parts[2] not in _TASK_FIELDS:
                raise ConfigValidationError(key, "unknown configuration key")
    edges = []
    for i in range(1, len(tasks)):
        pre = f"edge.{i}"
        pipeline = _choice(f"{pre}.pipeline", raw.get(f"{pre}.pipeline", "KeysOnly"), PIPELINES)
        keys = tuple(_list(raw[f"{pre}.keys"])) if f"{pre}.keys" in raw else None
        if keys is not None and not keys:
            raise ConfigValidationError(f"{pre}.keys", "key selection must be non-empty")
        expand = _bool(f"{pre}.expand_with_inner", raw.get(f"{pre}.expand_with_inner", "false"))
        carry = _bool(f"{pre}.carry_buffer", raw.get(f"{pre}.carry_buffer", "false"))
        edges.append(EdgePlan(pipeline, keys, expand, carry))
    for key in raw:
        if key.startswith("edge."):
            parts = key.split(".")
            ok = (len(parts) == 3 and parts[1].isdigit() and 1 <= int(parts[1]) < len(tasks)
                  and parts[2] in ("pipeline", "keys", "expand_with_inner", "carry_buffer"))
            if not ok:
                raise ConfigValidationError(key, "unknown edge key or edge index out of range")
    if "group.seeds" in raw:
        seeds = [_int("group.seeds", s, 0) for s in _list(raw["group.seeds"])]
        if len(seeds) != len(tasks):
            raise ConfigValidationError("group.seeds", f"needs {len(tasks)} seeds, got {len(seeds)}")
    else:
        base = _int("group.seed", raw.get("group.seed", "0"), 0)
        seeds = [base + i for i in range(len(tasks))]
    learner = _learner(raw)
    if learner.algorithm != "kian" and len(tasks) > 1:
        raise ConfigValidationError("learner.algorithm", "transfer pipelines need the mixture policy")
    knowledge = _choice("run.knowledge", raw.get("run.knowledge", "scripted"), ("scripted", "none"))
    return GroupConfig(tasks, edges, learner, seeds, raw.get("group.name", default_name), knowledge)


def load_group_config(path):
    return parse_group_config(read_flat(path), Path(path).stem)


def with_learner(cfg, **kw):
    return replace(cfg, learner=replace(cfg.learner, **kw))
