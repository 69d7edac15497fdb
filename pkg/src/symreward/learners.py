"""Gradient learners supervised by symbolic reward trees.

Two off-policy learners share the same shape: sample transitions, recompute
rewards with their own tree (never the stored environment reward), regress
toward bootstrapped TD targets, and softly track target networks. The
continuous variant is a twin-critic deterministic-policy update; the
discrete variant is an ensemble-Q update whose target takes the max over
actions of the min over heads.

Each learner owns its networks and optimizer state; nothing is shared
between learners except the replay buffer they sample from.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import symtree
from .neuronet import AdamState, Mlp, adam_step, soft_update

log = logging.getLogger(__name__)

FEATURE_LAYOUTS = ("sa", "sas")


@dataclass
class RewardSanitizer:
    """Total guard between raw tree outputs and TD targets.

    Non-finite values become nonfinite_value; finite values are clamped to
    [-clamp_bound, clamp_bound]. The output is therefore always finite and
    bounded, whatever the tree does.
    """

    clamp_bound: float = 10.0
    nonfinite_value: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.clamp_bound) and self.clamp_bound > 0):
            raise ValueError(f"clamp_bound must be finite and positive, got {self.clamp_bound}")
        if not math.isfinite(self.nonfinite_value) or abs(self.nonfinite_value) > self.clamp_bound:
            raise ValueError("nonfinite_value must be finite and within the clamp bound")

    def __call__(self, r):
        if not math.isfinite(r):
            return self.nonfinite_value
        return float(min(max(r, -self.clamp_bound), self.clamp_bound))

    def apply_batch(self, arr):
        arr = np.asarray(arr, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            clipped = np.clip(arr, -self.clamp_bound, self.clamp_bound)
        return np.where(np.isfinite(arr), clipped, self.nonfinite_value)


def stack_batch(batch, discrete):
    """Transitions -> (states, actions, rewards, next_states, done_mask) arrays."""
    if not batch:
        raise ValueError("batch must be nonempty")
    states = np.stack([np.asarray(t.state, dtype=np.float64) for t in batch])
    next_states = np.stack([np.asarray(t.next_state, dtype=np.float64) for t in batch])
    if discrete:
        actions = np.array([int(t.action) for t in batch], dtype=np.int64)
    else:
        actions = np.stack([np.asarray(t.action, dtype=np.float64) for t in batch])
    rewards = np.array([float(t.env_reward) for t in batch])
    dones = np.array([1.0 if t.done else 0.0 for t in batch])
    return states, actions, rewards, next_states, dones


def transition_features(states, actions, next_states, layout, discrete):
    """Concatenate the transition fields in the configured tree layout."""
    if layout not in FEATURE_LAYOUTS:
        raise ValueError(f"unknown feature layout {layout!r}")
    a = actions.astype(np.float64)[:, None] if discrete else actions
    parts = [states, a]
    if layout == "sas":
        parts.append(next_states)
    return np.concatenate(parts, axis=1)


class _LearnerBase:
    """State and behavior common to both learner variants."""

    def __init__(self, obs_dim, tree, gamma, tau, feature_layout, sanitizer, discrete):
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {gamma}")
        if feature_layout not in FEATURE_LAYOUTS:
            raise ValueError(f"unknown feature layout {feature_layout!r}")
        self.obs_dim = obs_dim
        self.feature_layout = feature_layout
        self.set_tree(tree)
        self.gamma = float(gamma)
        self.tau = float(tau)
        self.sanitizer = RewardSanitizer() if sanitizer is None else sanitizer
        self.discrete = discrete
        self.updates_applied = 0
        self.updates_skipped = 0
        self.reinits = 0

    def set_tree(self, tree):
        """Swap in a new reward tree; network parameters are untouched."""
        expected = (self.obs_dim * 2 if self.feature_layout == "sas" else self.obs_dim) \
            + self._action_width()
        if tree.feature_dim != expected:
            raise ValueError(
                f"tree feature_dim {tree.feature_dim} does not match layout "
                f"{self.feature_layout!r} width {expected}"
            )
        self.tree = tree

    def intrinsic_reward(self, transition):
        """Sanitized tree output for one transition."""
        s, a, _, s2, _ = stack_batch([transition], self.discrete)
        feats = transition_features(s, a, s2, self.feature_layout, self.discrete)[0]
        return self.sanitizer(symtree.evaluate(self.tree, feats))

    def intrinsic_rewards(self, states, actions, next_states):
        feats = transition_features(states, actions, next_states, self.feature_layout, self.discrete)
        return self.sanitizer.apply_batch(symtree.evaluate_batch(self.tree, feats))


class ContinuousLearner(_LearnerBase):
    """Twin-critic deterministic-policy learner for bounded vector actions.

    The actor ends in tanh and is rescaled to [low, high]; critics score
    (state, action) pairs. Targets start as exact copies and track their
    sources by soft updates with rate tau after every applied update.
    """

    def __init__(self, obs_dim, action_dim, action_low, action_high, tree, rng,
                 hidden=(256, 256), gamma=0.99, tau=1e-3, explore_sigma=0.1,
                 feature_layout="sas", sanitizer=None):
        self.action_dim = int(action_dim)
        super().__init__(obs_dim, tree, gamma, tau, feature_layout, sanitizer, discrete=False)
        if not action_low < action_high:
            raise ValueError(f"need action_low < action_high, got {action_low}, {action_high}")
        self.action_low = float(action_low)
        self.action_high = float(action_high)
        self.explore_sigma = float(explore_sigma)
        self.hidden = tuple(hidden)
        self._center = (self.action_high + self.action_low) / 2.0
        self._half = (self.action_high - self.action_low) / 2.0
        self._build_networks(rng)

    def _action_width(self):
        return self.action_dim

    def _build_networks(self, rng):
        sizes_actor = [self.obs_dim, *self.hidden, self.action_dim]
        sizes_critic = [self.obs_dim + self.action_dim, *self.hidden, 1]
        self.actor = Mlp.create(sizes_actor, rng, output_activation="tanh")
        self.q1 = Mlp.create(sizes_critic, rng)
        self.q2 = Mlp.create(sizes_critic, rng)
        self.actor_target = self.actor.clone()
        self.q1_target = self.q1.clone()
        self.q2_target = self.q2.clone()
        self.adam_actor = AdamState(self.actor)
        self.adam_q1 = AdamState(self.q1)
        self.adam_q2 = AdamState(self.q2)

    def reinit(self, rng):
        """Fresh networks and optimizer state under the same tree."""
        self._build_networks(rng)
        self.reinits += 1
        log.warning("continuous learner reinitialized after divergence")

    def all_finite(self):
        return all(net.all_finite() for net in
                   (self.actor, self.q1, self.q2, self.actor_target, self.q1_target, self.q2_target))

    def _scale(self, raw):
        return self._center + self._half * raw

    def policy_action(self, states):
        return self._scale(self.actor.forward(states))

    def act(self, state, rng, explore=False, force_random=False):
        """Deterministic policy action, optionally with exploration noise.

        force_random draws uniformly within bounds; the orchestrator uses it
        for the global random-warmup phase at the start of a run.
        """
        if force_random:
            return rng.uniform(self.action_low, self.action_high, size=self.action_dim)
        a = self.policy_action(np.asarray(state, dtype=np.float64))
        if explore:
            noise_std = self.explore_sigma * (self.action_high - self.action_low)
            a = a + rng.normal(0.0, noise_std, size=self.action_dim)
        return np.clip(a, self.action_low, self.action_high)

    def td_targets(self, batch):
        """Constant regression targets for a batch:
        y = r_hat + gamma * (1 - done) * min(Q1', Q2')(s', pi'(s'))."""
        states, actions, _, next_states, dones = stack_batch(batch, discrete=False)
        r_hat = self.intrinsic_rewards(states, actions, next_states)
        next_a = self._scale(self.actor_target.forward(next_states))
        next_in = np.concatenate([next_states, next_a], axis=1)
        q_next = np.minimum(self.q1_target.forward(next_in)[:, 0],
                            self.q2_target.forward(next_in)[:, 0])
        return r_hat + self.gamma * (1.0 - dones) * q_next, r_hat

    def critic_loss_and_grads(self, critic, states, actions, y):
        """Mean squared error against constant y, with its parameter gradients."""
        sa = np.concatenate([states, actions], axis=1)
        out, cache = critic.forward_cached(sa)
        diff = out[:, 0] - y
        loss = float(np.mean(diff * diff))
        grads, _ = critic.backward(cache, (2.0 / len(y)) * diff[:, None])
        return loss, grads

    def actor_objective_and_grads(self, states):
        """Mean Q1(s, pi(s)) and the gradients of its negation.

        The returned gradients are for the descent direction of -objective,
        ready for a minimizing Adam step (ascent on the objective).
        """
        n = states.shape[0]
        raw, actor_cache = self.actor.forward_cached(states)
        q_in = np.concatenate([states, self._scale(raw)], axis=1)
        q_out, q_cache = self.q1.forward_cached(q_in)
        objective = float(np.mean(q_out[:, 0]))
        _, gin = self.q1.backward(q_cache, np.full((n, 1), 1.0 / n))
        grad_raw = gin[:, self.obs_dim:] * self._half
        grads, _ = self.actor.backward(actor_cache, -grad_raw)
        return objective, grads

    def update(self, batch, actor_lr, critic_lr):
        """One minibatch update; returns a loss report dict.

        Target values are constants: y = r_hat + gamma * (1 - done) *
        min(Q1', Q2') at the target policy's next action. Both critics take
        one Adam step on their squared error, the actor takes one ascent
        step on mean Q1(s, pi(s)), then every target is softly updated.
        """
        states, actions, _, next_states, dones = stack_batch(batch, discrete=False)
        y, r_hat = self.td_targets(batch)
        report = {
            "mean_reward": float(np.mean(r_hat)),
            "critic_loss_1": math.nan,
            "critic_loss_2": math.nan,
            "actor_objective": math.nan,
            "skipped": False,
        }
        if not np.isfinite(y).all():
            log.warning("continuous update skipped: non-finite TD target")
            report["skipped"] = True
            self.updates_skipped += 1
            return report
        ok = True
        for key, critic, adam in (("critic_loss_1", self.q1, self.adam_q1),
                                  ("critic_loss_2", self.q2, self.adam_q2)):
            loss, grads = self.critic_loss_and_grads(critic, states, actions, y)
            report[key] = loss
            if not math.isfinite(loss):
                log.warning("continuous update skipped: non-finite critic loss")
                ok = False
                continue
            ok = adam_step(critic, grads, adam, critic_lr) and ok
        # actor ascends mean Q1(s, pi(s)) through the freshly updated critic
        objective, actor_grads = self.actor_objective_and_grads(states)
        report["actor_objective"] = objective
        if math.isfinite(objective):
            ok = adam_step(self.actor, actor_grads, self.adam_actor, actor_lr) and ok
        else:
            log.warning("continuous update: non-finite actor objective, actor step skipped")
            ok = False
        soft_update(self.actor_target, self.actor, self.tau)
        soft_update(self.q1_target, self.q1, self.tau)
        soft_update(self.q2_target, self.q2, self.tau)
        report["skipped"] = not ok
        if ok:
            self.updates_applied += 1
        else:
            self.updates_skipped += 1
        return report


class DiscreteLearner(_LearnerBase):
    """Ensemble-Q learner for discrete actions; the Q-net is the policy.

    Acting takes the argmax over the mean of the heads' Q-values. The TD
    target takes, per next state, the max over actions of the min over
    heads of the target networks.
    """

    def __init__(self, obs_dim, n_actions, tree, rng, heads=2, hidden=(256, 256),
                 gamma=0.99, tau=1e-3, epsilon=0.1, feature_layout="sas", sanitizer=None):
        super().__init__(obs_dim, tree, gamma, tau, feature_layout, sanitizer, discrete=True)
        if heads < 1:
            raise ValueError(f"need at least one head, got {heads}")
        self.n_actions = int(n_actions)
        self.n_heads = int(heads)
        self.epsilon = float(epsilon)
        self.hidden = tuple(hidden)
        self._build_networks(rng)

    def _action_width(self):
        return 1

    def _build_networks(self, rng):
        sizes = [self.obs_dim, *self.hidden, self.n_actions]
        self.heads = [Mlp.create(sizes, rng) for _ in range(self.n_heads)]
        self.head_targets = [h.clone() for h in self.heads]
        self.adam_heads = [AdamState(h) for h in self.heads]

    def reinit(self, rng):
        self._build_networks(rng)
        self.reinits += 1
        log.warning("discrete learner reinitialized after divergence")

    def all_finite(self):
        return all(h.all_finite() for h in self.heads + self.head_targets)

    def q_values(self, states):
        """Mean over heads, the acting policy's scores."""
        states = np.asarray(states, dtype=np.float64)
        total = self.heads[0].forward(states)
        for h in self.heads[1:]:
            total = total + h.forward(states)
        return total / self.n_heads

    def act(self, state, rng, explore=False, force_random=False):
        if force_random or (explore and rng.random() < self.epsilon):
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q_values(state)))

    def td_targets(self, batch):
        """y = r_hat + gamma * (1 - done) * max over a' of min over heads."""
        states, actions, _, next_states, dones = stack_batch(batch, discrete=True)
        r_hat = self.intrinsic_rewards(states, actions, next_states)
        next_q = np.minimum.reduce([t.forward(next_states) for t in self.head_targets])
        return r_hat + self.gamma * (1.0 - dones) * next_q.max(axis=1), r_hat

    def head_loss_and_grads(self, head, states, actions, y):
        """Squared error of the taken-action Q-values against constant y."""
        n = len(y)
        rows = np.arange(n)
        out, cache = head.forward_cached(states)
        diff = out[rows, actions] - y
        loss = float(np.mean(diff * diff))
        grad_out = np.zeros((n, self.n_actions))
        grad_out[rows, actions] = (2.0 / n) * diff
        grads, _ = head.backward(cache, grad_out)
        return loss, grads

    def update(self, batch, lr):
        """One minibatch update of every head toward the shared target."""
        states, actions, _, next_states, dones = stack_batch(batch, discrete=True)
        y, r_hat = self.td_targets(batch)
        report = {
            "mean_reward": float(np.mean(r_hat)),
            "head_losses": [math.nan] * self.n_heads,
            "skipped": False,
        }
        if not np.isfinite(y).all():
            log.warning("discrete update skipped: non-finite TD target")
            report["skipped"] = True
            self.updates_skipped += 1
            return report
        ok = True
        for h, (head, adam) in enumerate(zip(self.heads, self.adam_heads)):
            loss, grads = self.head_loss_and_grads(head, states, actions, y)
            report["head_losses"][h] = loss
            if not math.isfinite(loss):
                log.warning("discrete update skipped: non-finite head loss")
                ok = False
                continue
            ok = adam_step(head, grads, adam, lr) and ok
        for head, target in zip(self.heads, self.head_targets):
            soft_update(target, head, self.tau)
        report["skipped"] = not ok
        if ok:
            self.updates_applied += 1
        else:
            self.updates_skipped += 1
        return report


def intrinsic_reward(learner, transition):
    """Sanitized tree output for one transition (module-level surface)."""
    return learner.intrinsic_reward(transition)


def update_continuous(learner, batch, actor_lr, critic_lr):
    return learner.update(batch, actor_lr, critic_lr)


def update_discrete(learner, batch, lr):
    return learner.update(batch, lr)


def act(learner, state, explore, rng, force_random=False):
    return learner.act(state, rng, explore=explore, force_random=force_random)
