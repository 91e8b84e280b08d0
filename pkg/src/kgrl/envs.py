"""Physics-free kinematic stand-ins for ten surgical manipulation tasks.

Positions live in a normalized 1 m workspace box ``[-0.5, 0.5]^3``. Actions are
in ``[-1, 1]`` and are scaled to a per-step displacement (``a_scale`` metres) or
rotation (``rot_scale`` radians). Grippers close automatically near an object
and open near the goal or when the other arm takes the object over, so the
jaw is never part of the action.

Observation layouts (indices into the flat vector):

==============  ==============================================================
kind            layout
==============  ==============================================================
reach           ee(0:3) goal(3:6)
ecm_reach       ee(0:3) yaw(3) pitch(4) goal(5:8)
orient          ee(0:3) roll(3) roll_goal(4)
pick            ee(0:3) grasp(3) object(4:7) goal(7:10)
bimanual        ee1(0:3) ee2(3:6) grasp1(6) grasp2(7) object(8:11) goal(11:14)
track           yaw(0) pitch(1) target(2:5) image_offset(5:7)
==============  ==============================================================
"""
import csv
from dataclasses import dataclass, field, replace
import math

import numpy as np

from .layout import ObsLayout

WORKSPACE = 0.5
A_SCALE = 0.05
ROT_SCALE = 0.1
RELEASE_TOL = 0.01
D_COLLIDE = 0.01
CAMERA_POS = np.array([-0.45, 0.0, 0.0])
FOCAL = 1.0
BEHIND_OFFSET = 10.0
ANGLE_LIMIT = 1.2
TRACK_AMPLITUDE = 0.08
TRACK_FREQ = 0.1
SUCCESS_BONUS = 20.0

TASK_IDS = (
    "NeedleReach", "ECMReach", "MisOrient", "GauzeRetrieve", "NeedlePick",
    "PegTransfer", "NeedleRegrasp", "BiPegTransfer", "StaticTrack", "ActiveTrack",
)

# reachable x-range per arm in bimanual tasks; the handover zone is their overlap
ARM_X_RANGE = ((-WORKSPACE, 0.05), (-0.05, WORKSPACE))


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


_LAYOUTS = {
    "reach": ObsLayout(6, 3, ee=((0, 3),), goal=(3, 6), arm_actions=((0, 3),)),
    "ecm_reach": ObsLayout(8, 3, ee=((0, 3),), goal=(5, 8), arm_actions=((0, 3),)),
    "orient": ObsLayout(5, 1, ee=((0, 3),)),
    "pick": ObsLayout(10, 3, ee=((0, 3),), grasp=(3,), object=(4, 7), goal=(7, 10), arm_actions=((0, 3),)),
    "bimanual": ObsLayout(
        14, 6, ee=((0, 3), (3, 6)), grasp=(6, 7), object=(8, 11), goal=(11, 14),
        arm_actions=((0, 3), (3, 6)),
    ),
    "track": ObsLayout(7, 2),
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    arms: int
    horizon: int
    grasp_threshold: float
    c_og: int
    c_ro: int
    c_rg: int
    p: float
    success_tol: float
    a_scale: float = A_SCALE
    rot_scale: float = ROT_SCALE
    track_steps: int = 3
    droop: float = 0.0

    @property
    def layout(self):
        return _LAYOUTS[self.kind]

    @property
    def obs_dim(self):
        return self.layout.obs_dim

    @property
    def action_dim(self):
        return self.layout.action_dim

    def validate(self):
        if self.task_id not in TASK_IDS:
            raise ConfigError(f"unknown task_id {self.task_id!r}")
        if not 0.01 <= self.grasp_threshold <= 0.1:
            raise ConfigError(f"grasp_threshold must lie in [0.01, 0.1], got {self.grasp_threshold}")
        for name in ("c_og", "c_ro", "c_rg"):
            if getattr(self, name) not in (0, 1):
                raise ConfigError(f"{name} must be 0 or 1, got {getattr(self, name)}")
        if self.p not in (0, 2):
            raise ConfigError(f"p must be 0 or 2, got {self.p}")
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        return self

    def with_overrides(self, **overrides):
        return replace(self, **overrides).validate()

    @property
    def coeffs(self):
        return (self.c_og, self.c_ro, self.c_rg, self.p)


TASKS = {
    spec.task_id: spec
    for spec in (
        TaskSpec("NeedleReach", "reach", 1, 50, 0.05, 0, 0, 1, 0, 0.025),
        TaskSpec("ECMReach", "ecm_reach", 1, 50, 0.05, 0, 0, 1, 0, 0.025),
        TaskSpec("MisOrient", "orient", 1, 50, 0.05, 0, 0, 1, 0, 0.05),
        TaskSpec("GauzeRetrieve", "pick", 1, 50, 0.06, 1, 1, 0, 0, 0.025, droop=0.02),
        TaskSpec("NeedlePick", "pick", 1, 50, 0.03, 1, 1, 0, 0, 0.025),
        TaskSpec("PegTransfer", "pick", 1, 60, 0.02, 1, 1, 0, 0, 0.025),
        TaskSpec("NeedleRegrasp", "bimanual", 2, 100, 0.05, 1, 1, 0, 2, 0.025),
        TaskSpec("BiPegTransfer", "bimanual", 2, 100, 0.03, 1, 1, 0, 2, 0.025),
        TaskSpec("StaticTrack", "track", 1, 50, 0.05, 0, 0, 1, 0, 0.05),
        TaskSpec("ActiveTrack", "track", 1, 50, 0.05, 0, 0, 1, 0, 0.05),
    )
}


def task_spec(task_id, **overrides):
    if task_id not in TASKS:
        raise ConfigError(f"unknown task_id {task_id!r}; expected one of {', '.join(TASK_IDS)}")
    spec = TASKS[task_id]
    return spec.with_overrides(**overrides) if overrides else spec


@dataclass
class WorldState:
    ee: np.ndarray
    grasp: np.ndarray
    obj: np.ndarray = field(default_factory=lambda: np.zeros(3))
    goal: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    roll: float = 0.0
    roll_goal: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    path: np.ndarray = field(default_factory=lambda: np.zeros(5))
    step: int = 0
    track_count: int = 0

    def copy(self):
        return WorldState(
            self.ee.copy(), self.grasp.copy(), self.obj.copy(), self.goal.copy(),
            self.grasp_offset.copy(), self.roll, self.roll_goal, self.yaw, self.pitch,
            self.target.copy(), self.path.copy(), self.step, self.track_count,
        )

    def holder(self):
        held = np.flatnonzero(self.grasp)
        return int(held[0]) if held.size else -1

    def to_vector(self):
        return np.concatenate([
            self.ee.ravel(), self.grasp.astype(np.float64), self.obj, self.goal, self.grasp_offset,
            [self.roll, self.roll_goal, self.yaw, self.pitch], self.target, self.path,
            [self.step, self.track_count],
        ])

    @classmethod
    def from_vector(cls, vec, arms):
        vec = np.asarray(vec, dtype=np.float64)
        i = 3 * arms
        ee = vec[:i].reshape(arms, 3).copy()
        grasp = vec[i:i + arms] > 0.5
        i += arms
        obj, goal, off = vec[i:i + 3].copy(), vec[i + 3:i + 6].copy(), vec[i + 6:i + 9].copy()
        i += 9
        roll, roll_goal, yaw, pitch = (float(v) for v in vec[i:i + 4])
        i += 4
        target, path = vec[i:i + 3].copy(), vec[i + 3:i + 8].copy()
        i += 8
        return cls(ee, grasp, obj, goal, off, roll, roll_goal, yaw, pitch, target, path,
                   int(vec[i]), int(vec[i + 1]))


@dataclass
class StepResult:
    next_state: WorldState
    reward: float
    done: bool
    info: dict


def dense_reward(distances, collision, success, coeffs):
    """``-c_og*d_og - c_ro*d_ro - c_rg*d_rg - p*[collision] + 20*[success]``."""
    d_og, d_ro, d_rg = distances
    c_og, c_ro, c_rg, p = coeffs
    reward = -c_og * d_og - c_ro * d_ro - c_rg * d_rg
    if collision:
        reward -= p
    if success:
        reward += SUCCESS_BONUS
    return float(reward)


def camera_frame(yaw, pitch):
    """Forward, right and up unit vectors of a camera looking along +x at zero angles."""
    cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, sp])
    right = np.array([-sy, cy, 0.0])
    up = np.array([-sp * cy, -sp * sy, cp])
    return forward, right, up


def project_to_image(camera_orientation, target_pos, camera_pos=CAMERA_POS, focal=FOCAL):
    """Pinhole projection; returns ``(offset_from_center, behind_camera)``.

    A target behind the image plane gets the fixed offset ``(BEHIND_OFFSET,
    BEHIND_OFFSET)`` instead of raising.
    """
    yaw, pitch = camera_orientation
    forward, right, up = camera_frame(yaw, pitch)
    v = np.asarray(target_pos, dtype=np.float64) - camera_pos
    depth = float(v @ forward)
    if depth <= 1e-9:
        return np.array([BEHIND_OFFSET, BEHIND_OFFSET]), True
    offset = focal * np.array([v @ right, v @ up]) / depth
    return np.clip(offset, -BEHIND_OFFSET, BEHIND_OFFSET), False


def _active_target(path, t):
    base = path[:3]
    return base + TRACK_AMPLITUDE * np.array([0.0, math.sin(TRACK_FREQ * t + path[3]), math.sin(TRACK_FREQ * t + path[4])])


# --- resets ---------------------------------------------------------------------------


def _u(rng, lo, hi):
    return rng.uniform(lo, hi)


def reset_state(spec, rng):
    """Draw a randomized initial world state for ``spec``."""
    arms = spec.arms
    s = WorldState(ee=np.zeros((arms, 3)), grasp=np.zeros(arms, dtype=bool))
    tid = spec.task_id
    if spec.kind in ("reach", "ecm_reach"):
        s.ee[0] = rng.uniform(-0.2, 0.2, 3)
        s.goal = rng.uniform(-0.2, 0.2, 3)
        if spec.kind == "ecm_reach":
            s.yaw, s.pitch = (float(v) for v in rng.uniform(-0.3, 0.3, 2))
    elif spec.kind == "orient":
        s.ee[0] = rng.uniform(-0.2, 0.2, 3)
        s.roll = float(_u(rng, -1.0, 1.0))
        s.roll_goal = float(_u(rng, -0.2, 0.2))
    elif spec.kind == "pick":
        if tid == "PegTransfer":
            s.ee[0] = [_u(rng, -0.1, 0.1), _u(rng, -0.1, 0.1), 0.1]
            s.obj = np.array([_u(rng, -0.25, -0.1), _u(rng, -0.1, 0.1), -0.15])
            s.goal = np.array([_u(rng, 0.1, 0.25), _u(rng, -0.1, 0.1), -0.15])
        else:
            s.ee[0] = [_u(rng, -0.15, 0.15), _u(rng, -0.15, 0.15), _u(rng, 0.0, 0.15)]
            s.obj = np.array([_u(rng, -0.2, 0.2), _u(rng, -0.2, 0.2), -0.2])
            s.goal = np.array([_u(rng, -0.2, 0.2), _u(rng, -0.2, 0.2), _u(rng, 0.0, 0.2)])
    elif spec.kind == "bimanual":
        s.ee[0] = [_u(rng, -0.3, -0.1), _u(rng, -0.1, 0.1), _u(rng, 0.0, 0.1)]
        s.ee[1] = [_u(rng, 0.1, 0.3), _u(rng, -0.1, 0.1), _u(rng, 0.0, 0.1)]
        s.goal = np.array([_u(rng, 0.15, 0.3), _u(rng, -0.1, 0.1), _u(rng, -0.15, 0.0)])
        if tid == "NeedleRegrasp":
            s.obj = s.ee[0].copy()
            s.grasp[0] = True
        else:
            s.obj = np.array([_u(rng, -0.3, -0.15), _u(rng, -0.1, 0.1), -0.15])
    elif spec.kind == "track":
        base = np.array([_u(rng, 0.0, 0.3), _u(rng, -0.2, 0.2), _u(rng, -0.2, 0.2)])
        phases = rng.uniform(0.0, 2.0 * math.pi, 2) if tid == "ActiveTrack" else np.zeros(2)
        s.path = np.concatenate([base, phases])
        s.target = _active_target(s.path, 0) if tid == "ActiveTrack" else base.copy()
    else:  # pragma: no cover - kinds are closed
        raise ConfigError(f"unknown task kind {spec.kind!r}")
    return s


# --- observation -----------------------------------------------------------------------


def observe(spec, s):
    k = spec.kind
    if k == "reach":
        return np.concatenate([s.ee[0], s.goal])
    if k == "ecm_reach":
        return np.concatenate([s.ee[0], [s.yaw, s.pitch], s.goal])
    if k == "orient":
        return np.concatenate([s.ee[0], [s.roll, s.roll_goal]])
    if k == "pick":
        return np.concatenate([s.ee[0], [float(s.grasp[0])], s.obj, s.goal])
    if k == "bimanual":
        return np.concatenate([s.ee[0], s.ee[1], s.grasp.astype(np.float64), s.obj, s.goal])
    offset, _ = project_to_image((s.yaw, s.pitch), s.target)
    return np.concatenate([[s.yaw, s.pitch], s.target, offset])


# --- dynamics -------------------------------------------------------------------------


def _move_arms(spec, s, action):
    collision = False
    for arm, (lo, hi) in enumerate(spec.layout.arm_actions):
        proposal = s.ee[arm] + spec.a_scale * action[lo:hi]
        if np.any(np.abs(proposal) > WORKSPACE):
            collision = True
        proposal = np.clip(proposal, -WORKSPACE, WORKSPACE)
        if spec.arms == 2:
            xlo, xhi = ARM_X_RANGE[arm]
            proposal[0] = min(max(proposal[0], xlo), xhi)
        s.ee[arm] = proposal
    return collision


def _update_grasp(spec, s):
    holder = s.holder()
    if holder >= 0:
        s.obj = s.ee[holder] + s.grasp_offset
    droop = np.array([0.0, 0.0, -spec.droop])
    for arm in range(spec.arms):
        if s.grasp[arm]:
            continue
        # only a higher-index arm can take a held object over (handover runs arm 1 -> arm 2)
        if holder >= 0 and arm < holder:
            continue
        if np.linalg.norm(s.ee[arm] - s.obj) < spec.grasp_threshold:
            s.grasp[:] = False
            s.grasp[arm] = True
            s.grasp_offset = (s.obj - s.ee[arm]) + droop
            s.obj = s.ee[arm] + s.grasp_offset
            holder = arm
    if holder >= 0 and np.linalg.norm(s.obj - s.goal) < RELEASE_TOL:
        s.grasp[:] = False


def step(spec, state, action):
    """Advance one control step; ``state`` is not modified."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (spec.action_dim,):
        raise InputError(f"action must have shape ({spec.action_dim},), got {action.shape}")
    if not np.isfinite(action).all():
        raise InputError("action contains non-finite values")
    action = np.clip(action, -1.0, 1.0)
    s = state.copy()
    s.step += 1
    collision = False
    behind = False
    d_og = d_ro = d_rg = 0.0
    k = spec.kind
    if k in ("reach", "ecm_reach"):
        collision = _move_arms(spec, s, action)
        d_rg = float(np.linalg.norm(s.ee[0] - s.goal))
        success = d_rg < spec.success_tol
    elif k == "orient":
        s.roll = float(np.clip(s.roll + spec.rot_scale * action[0], -math.pi, math.pi))
        d_rg = abs(s.roll - s.roll_goal)
        success = d_rg < spec.success_tol
    elif k in ("pick", "bimanual"):
        collision = _move_arms(spec, s, action)
        if spec.arms == 2 and np.linalg.norm(s.ee[0] - s.ee[1]) < D_COLLIDE:
            collision = True
        _update_grasp(spec, s)
        d_og = float(np.linalg.norm(s.obj - s.goal))
        d_ro = float(min(np.linalg.norm(s.ee[a] - s.obj) for a in range(spec.arms)))
        d_rg = float(np.linalg.norm(s.ee[0] - s.goal))
        success = d_og < spec.success_tol
    else:  # track
        s.yaw = float(np.clip(s.yaw + spec.rot_scale * action[0], -ANGLE_LIMIT, ANGLE_LIMIT))
        s.pitch = float(np.clip(s.pitch + spec.rot_scale * action[1], -ANGLE_LIMIT, ANGLE_LIMIT))
        if spec.task_id == "ActiveTrack":
            s.target = _active_target(s.path, s.step)
        offset, behind = project_to_image((s.yaw, s.pitch), s.target)
        d_rg = float(np.linalg.norm(offset))
        s.track_count = s.track_count + 1 if d_rg < spec.success_tol else 0
        success = s.track_count >= spec.track_steps
    reward = dense_reward((d_og, d_ro, d_rg), collision, success, spec.coeffs)
    truncated = s.step >= spec.horizon and not success
    info = {
        "success": bool(success), "collision": bool(collision), "behind_camera": behind,
        "d_og": d_og, "d_ro": d_ro, "d_rg": d_rg, "truncated": truncated,
    }
    return StepResult(s, reward, bool(success or truncated), info)


class KinematicEnv:
    """Stateful wrapper: owns the world state and a private RNG for resets."""

    def __init__(self, spec, seed=None, rng=None, trajectory_path=None):
        self.spec = spec.validate()
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.state = None
        self._traj = None
        if trajectory_path is not None:
            self._traj_file = open(trajectory_path, "w", newline="")
            self._traj = csv.writer(self._traj_file)
            self._traj.writerow(["step", "state", "action", "reward"])

    @property
    def obs_dim(self):
        return self.spec.obs_dim

    @property
    def action_dim(self):
        return self.spec.action_dim

    def reset(self):
        self.state = reset_state(self.spec, self.rng)
        return observe(self.spec, self.state)

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        result = step(self.spec, self.state, action)
        if self._traj is not None:
            self._traj.writerow([
                result.next_state.step,
                " ".join(repr(float(v)) for v in observe(self.spec, self.state)),
                " ".join(repr(float(v)) for v in np.asarray(action, dtype=np.float64)),
                repr(result.reward),
            ])
            self._traj_file.flush()
        self.state = result.next_state
        return observe(self.spec, self.state), result

    def close(self):
        if self._traj is not None:
            self._traj_file.close()
            self._traj = None


def make_env(spec, seed=None, rng=None, trajectory_path=None):
    if isinstance(spec, str):
        spec = task_spec(spec)
    if not isinstance(spec, TaskSpec):
        raise ConfigError(f"expected a TaskSpec or task id, got {spec!r}")
    return KinematicEnv(spec, seed=seed, rng=rng, trajectory_path=trajectory_path)
