"""Split a periodic box across ranks and look at what each pulse carries.

Run: python3 demos/01_decomposition.py
"""

import numpy as np

from haloex import AtomSet, DDGrid, SimBox, build_grid, build_halo_zones
from haloex.ddcore import dependency_floor

box = SimBox((6.0, 6.0, 6.0), cutoff=1.0)
grid = build_grid(box, 8)
print(f"8 ranks on a 6 nm cube, cutoff 1.0 -> np = {grid.np}")

# Long thin boxes get cut along the long side first.
print("10x10x5 box, 4 ranks ->", build_grid(SimBox((10.0, 10.0, 5.0), 1.0), 4).np)

atoms = AtomSet.random(3000, box, seed=7)
layout = build_halo_zones(grid, box, atoms)
plan = layout.plans[0]
print(f"\nrank 0 owns {plan.home_count} atoms and receives {plan.total_local - plan.home_count} halo atoms")
print("pulse order (dims):", plan.order)
for p in plan.pulses:
    print(f"  pulse {p.pulse_id}: dim {p.dim}, send {p.send_size:4d} to rank {p.send_rank} "
          f"({p.n_independent} home + {p.n_dependent} forwarded), recv {p.recv_size:4d} from rank {p.recv_rank}, "
          f"shift {p.coord_shift}")

# Forwarded entries can point into any earlier pulse's landing region, not just the previous one.
for p in range(layout.total_pulses):
    floor = dependency_floor(plan, p)
    print(f"pulse {p}:", "packs without waiting" if floor is None else f"waits for pulses {floor}..{p - 1}")

sizes = np.array([[p.send_size for p in pl.pulses] for pl in layout.plans])
print("\nsend sizes per rank x pulse:\n", sizes)
print("layout digest:", layout.digest()[:16])
