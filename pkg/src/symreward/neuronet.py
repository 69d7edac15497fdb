"""Dense network genomes.

One class serves both roles in the system: a policy or value network that can
be trained by hand-rolled backprop with Adam, and a genome that can be
mutated, crossed over, and checkpointed. Everything is float64 numpy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ACTIVATIONS = ("linear", "tanh", "relu")

GENOME_FORMAT_VERSION = 1


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bad layer shapes {self.weights.shape} / {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


class Mlp:
    """Fully connected net; layers chain output-to-input."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weights.shape[1] != prev.weights.shape[0]:
                raise ValueError("layer widths do not chain")
        self.layers = layers

    @classmethod
    def create(cls, sizes, rng, hidden_activation="tanh", output_activation="linear"):
        """Build from [in, h1, ..., out] with uniform(-1/sqrt(fan_in)) init."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        layers = []
        n = len(sizes) - 1
        for i in range(n):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            s = 1.0 / math.sqrt(fan_in)
            act = output_activation if i == n - 1 else hidden_activation
            layers.append(Layer(
                rng.uniform(-s, s, size=(fan_out, fan_in)),
                rng.uniform(-s, s, size=fan_out),
                act,
            ))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].weights.shape[0]

    def signature(self):
        """Architecture tuple used for compatibility checks."""
        return tuple((l.weights.shape[0], l.weights.shape[1], l.activation) for l in self.layers)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        for l in self.layers:
            h = _act(l.activation, h @ l.weights.T + l.bias)
        return h[0] if single else h

    def forward_cached(self, x):
        """Forward pass keeping per-layer (input, preactivation, activation)."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError("forward_cached expects a (batch, in_dim) array")
        cache = []
        for l in self.layers:
            z = h @ l.weights.T + l.bias
            a = _act(l.activation, z)
            cache.append((h, z, a))
            h = a
        return h, cache

    def backward(self, cache, grad_out):
        """Reverse pass: returns ([(gW, gb) per layer], grad wrt input).

        grad_out is dLoss/dOutput for the batch; gradients are sums over the
        batch, so callers fold any 1/B into grad_out.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            x_in, z, a = cache[i]
            act = self.layers[i].activation
            if act == "tanh":
                dz = g * (1.0 - a * a)
            elif act == "relu":
                dz = g * (z > 0.0)
            else:
                dz = g
            grads[i] = (dz.T @ x_in, dz.sum(axis=0))
            g = dz @ self.layers[i].weights
        return grads, g

    def clone(self):
        return Mlp([Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])

    @property
    def n_params(self):
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def flatten(self):
        """Canonical parameter vector: per layer, row-major weights then bias."""
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in self.layers])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} params, got shape {vec.shape}")
        i = 0
        for l in self.layers:
            w = l.weights.size
            l.weights[:] = vec[i:i + w].reshape(l.weights.shape)
            i += w
            b = l.bias.size
            l.bias[:] = vec[i:i + b]
            i += b

    def all_finite(self):
        return all(np.isfinite(l.weights).all() and np.isfinite(l.bias).all() for l in self.layers)


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, net):
        self.m = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers]
        self.v = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers]
        self.t = 0


def adam_step(net, grads, state, lr):
    """One Adam update in place. Returns False (skipping, with a log line)
    when any gradient entry is non-finite; moments are then left untouched."""
    for gw, gb in grads:
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            log.warning("adam_step skipped: non-finite gradient")
            return False
    state.t += 1
    b1t = 1.0 - ADAM_BETA1 ** state.t
    b2t = 1.0 - ADAM_BETA2 ** state.t
    for layer, (gw, gb), mom, sec in zip(net.layers, grads, state.m, state.v):
        for param, g, m, v in ((layer.weights, gw, mom[0], sec[0]), (layer.bias, gb, mom[1], sec[1])):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            param -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return True


def grad_step(net, x, grad_out, lr, state):
    """Convenience: forward, backprop grad_out, apply one Adam step."""
    _, cache = net.forward_cached(x)
    grads, _ = net.backward(cache, grad_out)
    return adam_step(net, grads, state, lr)


@dataclass
class MutationParams:
    """Stochastic weight perturbation settings.

    mut_prob gates whether an individual is mutated at all (applied by the
    selection loop); the rest shape the per-matrix perturbation events.
    """

    mut_prob: float = 0.9
    mut_frac: float = 0.1
    mut_strength: float = 0.1
    supermut_prob: float = 0.05
    reset_prob: float = 0.05

    def __post_init__(self):
        for name in ("mut_prob", "mut_frac", "supermut_prob", "reset_prob"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {val}")
        if self.mut_strength < 0.0:
            raise ValueError(f"mut_strength must be >= 0, got {self.mut_strength}")


def mutate_genome(net, params, rng, event_log=None):
    """Return a perturbed clone; the input net is untouched.

    Per weight matrix M, ceil(mut_frac * M.size) events each pick a random
    entry and branch on fresh uniform draws: with probability supermut_prob
    scale by N(0, 100*mut_strength); else with probability reset_prob replace
    by N(0, 1); else scale by N(0, mut_strength). Biases are left alone.
    Non-finite results are re-drawn from the same branch. event_log, when
    given, collects one (branch, layer_index, row, col) tuple per event with
    branch in {"supermut", "reset", "normal"}.
    """
    child = net.clone()
    for li, layer in enumerate(child.layers):
        m = layer.weights
        n_events = math.ceil(params.mut_frac * m.size)
        for _ in range(n_events):
            i = int(rng.integers(m.shape[0]))
            j = int(rng.integers(m.shape[1]))
            if rng.random() < params.supermut_prob:
                branch = "supermut"
                new = m[i, j] * rng.normal(0.0, 100.0 * params.mut_strength)
                while not np.isfinite(new):
                    new = m[i, j] * rng.normal(0.0, 100.0 * params.mut_strength)
            elif rng.random() < params.reset_prob:
                branch = "reset"
                new = rng.normal(0.0, 1.0)
                while not np.isfinite(new):
                    new = rng.normal(0.0, 1.0)
            else:
                branch = "normal"
                new = m[i, j] * rng.normal(0.0, params.mut_strength)
                while not np.isfinite(new):
                    new = m[i, j] * rng.normal(0.0, params.mut_strength)
            m[i, j] = new
            if event_log is not None:
                event_log.append((branch, li, i, j))
    return child


def crossover_genomes(elite, other, rng, split=None):
    """Single-point crossover on the canonical flat parameter vector.

    The child takes the elite's entries before the split point and the other
    parent's from it on; split 0 reproduces the other parent, split n_params
    reproduces the elite. Architectures must match.
    """
    if elite.signature() != other.signature():
        raise ValueError("crossover requires identical architectures")
    n = elite.n_params
    if split is None:
        split = int(rng.integers(0, n + 1))
    if not 0 <= split <= n:
        raise ValueError(f"split must be in [0, {n}], got {split}")
    vec = np.concatenate([elite.flatten()[:split], other.flatten()[split:]])
    child = elite.clone()
    child.set_flat(vec)
    return child


def soft_update(target, source, tau):
    """In place: target <- tau * source + (1 - tau) * target."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if target.signature() != source.signature():
        raise ValueError("soft_update requires identical architectures")
    for lt, ls in zip(target.layers, source.layers):
        lt.weights[:] = tau * ls.weights + (1.0 - tau) * lt.weights
        lt.bias[:] = tau * ls.bias + (1.0 - tau) * lt.bias


def save_genomes(nets, path):
    """Checkpoint one or more networks as versioned JSON (lossless floats)."""
    payload = {
        "format_version": GENOME_FORMAT_VERSION,
        "networks": [
            [
                {
                    "activation": l.activation,
                    "rows": l.weights.shape[0],
                    "cols": l.weights.shape[1],
                    "weights": l.weights.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in net.layers
            ]
            for net in nets
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_genomes(path):
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != GENOME_FORMAT_VERSION:
        raise ValueError(f"unsupported genome checkpoint version {version!r}")
    nets = []
    for spec in payload["networks"]:
        layers = [
            Layer(
                np.asarray(l["weights"], dtype=np.float64).reshape(l["rows"], l["cols"]),
                np.asarray(l["bias"], dtype=np.float64),
                l["activation"],
            )
            for l in spec
        ]
        nets.append(Mlp(layers))
    return nets
