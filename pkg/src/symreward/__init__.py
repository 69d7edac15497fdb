"""Evolved symbolic reward trees supervising off-policy learners.

Submodules:

- symtree: reward tree representation, generation, variation, serialization
- neuronet: dense-network genomes, backprop, Adam, mutation, crossover
- replay: shared cyclic experience buffer
- learners: reward-shaped gradient learners (continuous and discrete)
- envlab: small sparse-reward environments for desk-scale experiments
- evolution: populations, fitness evaluation, the per-generation loop
- expcli: experiment configuration, runner, exports, command line
"""

from . import symtree, neuronet, replay, learners, envlab, evolution, expcli

__all__ = [
    "symtree",
    "neuronet",
    "replay",
    "learners",
    "envlab",
    "evolution",
    "expcli",
]

__version__ = "0.1.0"
