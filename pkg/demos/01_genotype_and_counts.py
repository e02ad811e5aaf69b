"""Encode a cell pair, render it, and count the parameters of both stackings.

Run: python3 demos/01_genotype_and_counts.py
"""

import numpy as np

from enas_us import CountingConfig, build_network, make_stack_plan, network_param_count
from enas_us.genotype import ArchPair, loose_ends, random_arch, to_dot
from enas_us.nets import enumerate_parameters, instantiate
from enas_us.searchspace import PUBLISHED_PARAMS, deviation_pct, forward_shapes

rng = np.random.default_rng(0)
arch = random_arch(5, rng)

# The controller sees a flat integer sequence; decoding it gives the pair back.
seq = arch.encode()
print("sequence of", len(seq), "decisions:", seq)
assert ArchPair.decode(seq, 5) == arch
print("normal cell loose ends:", loose_ends(arch.normal))
print(to_dot(arch.normal, "normal"))

for variant in ("ENAS7", "ENAS17"):
    net = build_network(arch, make_stack_plan(variant))
    for cfg in (CountingConfig(), CountingConfig(include_projection_ops=False)):
        analytic = network_param_count(net, cfg)
        counted = enumerate_parameters(instantiate(net, cfg), cfg)
        print(f"{variant} projections={cfg.include_projection_ops}: {analytic:,} (enumerated {counted:,}, "
              f"{deviation_pct(analytic, PUBLISHED_PARAMS[variant]):+.1f}% vs published)")

# shapes through the short stack on a 100x100 grayscale input
for stage, shape in forward_shapes(build_network(arch, make_stack_plan("ENAS7")), (100, 100, 1)):
    print(f"{stage:>10}  {shape}")
