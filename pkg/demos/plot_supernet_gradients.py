"""
Shared weights and population gradients
=======================================

Every sampled architecture reads its weights from one SuperNet store, so
training one of them moves the others wherever they overlap.  This script
checks the gradients against finite differences and compares the
population gradient with its mini-batch estimate.
"""

import itertools

import numpy as np

from evonas.nn.batch import Batch
from evonas.nn.gradcheck import run_suite
from evonas.search_space import SpaceDescriptor, random_genome
from evonas.supernet import SuperNet, grad_minibatch, grad_population, grad_single

space = SpaceDescriptor(node_count=2, stack_depth=3, reduction_positions=(1,), stem_channels=4)
net = SuperNet(space, num_classes=3, in_channels=1, rng=0)
rng = np.random.default_rng(0)
batch = Batch(rng.standard_normal((8, 1, 8, 8)), rng.integers(0, 3, 8))

###############################################################################
# A single architecture only gets gradient inside its own mask.

g = random_genome(space, rng)
grad, loss = grad_single(net.sample(g), batch)
inside = net.param_mask(net.sample(g).mask)
print(f"loss {loss.value:.3f}; nonzero grads outside mask: {int(np.count_nonzero(grad[~inside]))}")

###############################################################################
# Finite-difference checks for every layer kind and for the whole masked
# network.  Coordinates sitting on a ReLU or max-pool kink are compared with
# the one-sided slope that matches, and counted.

for r in run_suite(seed=0):
    print(f"{r.name:28s} rel err {r.rel_error:.1e}  ({r.n_kinks} kinks of {r.n_checked})")

###############################################################################
# The mean gradient over a population versus averaging random subsets of
# size B.  Enumerating every subset recovers the population gradient.

pop = [random_genome(space, rng) for _ in range(4)]
full, _ = grad_population(net, pop, batch)
sub = [grad_population(net, [pop[i] for i in s], batch)[0] for s in itertools.combinations(range(4), 2)]
print("max |E[subset] - population|:", float(np.abs(np.mean(sub, axis=0) - full).max()))
est, _, idx = grad_minibatch(net, pop, 2, rng, batch)
print("one draw used members", idx.tolist(), "cosine to population",
      float(est @ full / np.linalg.norm(est) / np.linalg.norm(full)))
