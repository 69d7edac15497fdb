"""Shared experience store.

One cyclic buffer holds transitions from every individual in the system.
Writes overwrite the oldest slot once capacity is reached; reads are uniform
with replacement. A lock serializes access so parallel evaluation workers
can share one buffer (single-writer discipline per append).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

BUFFER_FORMAT_VERSION = 1


@dataclass
class Transition:
    """One environment step as seen by the buffer.

    env_reward is the raw environment reward; gradient learners never read
    it, they recompute rewards from their trees.
    """

    state: np.ndarray
    action: object
    env_reward: float
    next_state: np.ndarray
    done: bool


class InsufficientExperience(ValueError):
    pass


class CyclicBuffer:
    """Preallocated ring of transitions with uniform sampling.

    action_dim None means discrete integer actions; otherwise actions are
    float vectors of that width.
    """

    def __init__(self, capacity, obs_dim, action_dim=None):
        capacity = int(capacity)
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs_dim = int(obs_dim)
        self.action_dim = None if action_dim is None else int(action_dim)
        self._states = np.zeros((capacity, obs_dim))
        self._next_states = np.zeros((capacity, obs_dim))
        if self.action_dim is None:
            self._actions = np.zeros(capacity, dtype=np.int64)
        else:
            self._actions = np.zeros((capacity, self.action_dim))
        self._rewards = np.zeros(capacity)
        self._dones = np.zeros(capacity, dtype=bool)
        self._size = 0
        self._cursor = 0
        self.total_appends = 0
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __len__(self):
        return self._size

    @property
    def size(self):
        return self._size

    def append(self, transition):
        state = np.asarray(transition.state, dtype=np.float64)
        next_state = np.asarray(transition.next_state, dtype=np.float64)
        if state.shape != (self.obs_dim,) or next_state.shape != (self.obs_dim,):
            raise ValueError(
                f"observation shape mismatch: expected ({self.obs_dim},), "
                f"got {state.shape} / {next_state.shape}"
            )
        if self.action_dim is None:
            action = int(transition.action)
        else:
            action = np.asarray(transition.action, dtype=np.float64)
            if action.shape != (self.action_dim,):
                raise ValueError(f"action shape mismatch: expected ({self.action_dim},), got {action.shape}")
        with self._lock:
            i = self._cursor
            self._states[i] = state
            self._next_states[i] = next_state
            self._actions[i] = action
            self._rewards[i] = float(transition.env_reward)
            self._dones[i] = bool(transition.done)
            self._cursor = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self.total_appends += 1

    def sample_indices(self, n, rng):
        if self._size < n:
            raise InsufficientExperience(
                f"insufficient experience: buffer holds {self._size} transitions, need {n}"
            )
        return rng.integers(0, self._size, size=n)

    def sample_arrays(self, n, rng):
        """Uniform with replacement: (states, actions, rewards, next_states, dones)."""
        with self._lock:
            idx = self.sample_indices(n, rng)
            return (
                self._states[idx],
                self._actions[idx],
                self._rewards[idx],
                self._next_states[idx],
                self._dones[idx],
            )

    def sample_minibatch(self, n, rng):
        """Uniform with replacement, as a list of Transition copies."""
        states, actions, rewards, next_states, dones = self.sample_arrays(n, rng)
        return [
            Transition(states[i], actions[i], float(rewards[i]), next_states[i], bool(dones[i]))
            for i in range(n)
        ]

    def dump(self, path):
        with self._lock:
            np.savez(
                path,
                format_version=BUFFER_FORMAT_VERSION,
                capacity=self.capacity,
                obs_dim=self.obs_dim,
                action_dim=-1 if self.action_dim is None else self.action_dim,
                states=self._states,
                actions=self._actions,
                rewards=self._rewards,
                next_states=self._next_states,
                dones=self._dones,
                size=self._size,
                cursor=self._cursor,
                total_appends=self.total_appends,
            )

    @classmethod
    def restore(cls, path):
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != BUFFER_FORMAT_VERSION:
                raise ValueError(f"unsupported buffer dump version {version}")
            action_dim = int(data["action_dim"])
            buf = cls(int(data["capacity"]), int(data["obs_dim"]), None if action_dim < 0 else action_dim)
            buf._states[:] = data["states"]
            buf._next_states[:] = data["next_states"]
            buf._actions[:] = data["actions"]
            buf._rewards[:] = data["rewards"]
            buf._dones[:] = data["dones"]
            buf._size = int(data["size"])
            buf._cursor = int(data["cursor"])
            buf.total_appends = int(data["total_appends"])
        return buf
