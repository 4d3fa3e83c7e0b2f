from dataclasses import dataclass, field

import numpy as np


@dataclass
class Step:
    """One reinforcement step as seen by the learner."""
    state: object
    action: np.ndarray
    log_prob: float
    value: float
    entropy: float
    reward: float = 0.0
    cache: object = None
    info: dict = field(default_factory=dict)


@dataclass
class TrajectoryBuffer:
    steps: list = field(default_factory=list)
    terminal: bool = False
    bootstrap: float = 0.0

    def append(self, step):
        if not np.isfinite(step.reward):
            raise ValueError(f"non-finite reward {step.reward}")
        self.steps.append(step)

    def __len__(self):
        return len(self.steps)

    @property
    def rewards(self):
        return np.array([s.reward for s in self.steps], dtype=float)

    @property
    def values(self):
        return np.array([s.value for s in self.steps], dtype=float)

    @property
    def log_probs(self):
        return np.array([s.log_prob for s in self.steps], dtype=float)

    @property
    def entropies(self):
        return np.array([s.entropy for s in self.steps], dtype=float)

    @property
    def actions(self):
        return [s.action for s in self.steps]
