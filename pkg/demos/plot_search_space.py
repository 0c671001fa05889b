"""
Cell genomes, genetic operators and connection masks
====================================================

A genome is a pair of cells (normal and reduction).  Each node picks two
earlier outputs and one operation for each of them.  Here we sample a
couple of genomes, breed them, and look at the binary mask that tells the
SuperNet which shared weights a genome uses.
"""

import numpy as np

from evonas.search_space import (
    SpaceDescriptor,
    crossover,
    decode_mask,
    encode_mask,
    format_genome,
    generate_offspring,
    mutate,
    random_genome,
)

space = SpaceDescriptor(node_count=3, stack_depth=4, reduction_positions=(2,), stem_channels=8)
rng = np.random.default_rng(0)

a = random_genome(space, rng, genome_id=0)
b = random_genome(space, rng, genome_id=1)
print("parent a:", format_genome(a, space))
print("parent b:", format_genome(b, space))

###############################################################################
# Crossover takes every node from one of the two parents; mutation redraws a
# node with probability 0.5.  Both always produce a valid genome.

child = crossover(a, b, rng)
print("crossover:", format_genome(child, space))
print("mutation: ", format_genome(mutate(a, rng, space), space))

###############################################################################
# Offspring for a whole population: on average a quarter come from crossover,
# a quarter from mutation and half are fresh random genomes.

pop = [random_genome(space, rng, i) for i in range(8)]
kids = generate_offspring(pop, 1, rng, space, 8)
print({k: sum(g.origin == k for g in kids) for k in sorted({g.origin for g in kids})})

###############################################################################
# The mask has one bit per (layer, node, predecessor, operation) slot.  It
# decodes back to the same genome, and two genomes share exactly the slots
# where both masks are set.

m_a, m_b = encode_mask(a, space), encode_mask(b, space)
print("mask length", m_a.size, "active", int(m_a.sum()), "shared with b", int((m_a & m_b).sum()))
assert decode_mask(m_a, space) == a
