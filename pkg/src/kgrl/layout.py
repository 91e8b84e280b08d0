"""Named fields of a task's flat observation and action vectors."""
from dataclasses import dataclass, field


@dataclass(frozen=True)
class ObsLayout:
    """Index ranges are ``(start, stop)`` pairs; absent fields are ``None``/empty."""

    obs_dim: int
    action_dim: int
    ee: tuple = ()  # one (start, stop) per arm
    grasp: tuple = ()  # one index per arm
    object: tuple = None
    goal: tuple = None
    arm_actions: tuple = ()  # position action block per arm
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def arms(self):
        return len(self.ee)

    def take(self, obs, rng):
        return obs[..., rng[0]:rng[1]]
