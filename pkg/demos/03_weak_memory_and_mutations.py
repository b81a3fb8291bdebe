"""Why each wait and release in the protocol is there.

The weak adversary delays stores and puts until a release or quiet forces
them out.  Removing any one ordering point lets stale NaN-poisoned slots
reach a consumer, which the exchange counts as a leak.

Run: python3 demos/03_weak_memory_and_mutations.py
"""

from haloex import AtomSet, DDGrid, SimBox, build_halo_zones
from haloex.exchange import MUTATIONS, direct_gather_oracle
from haloex.suites import deadlock_fixture, message_passing, run_checked_step

print("message passing, 200 seeds each: fraction of seeds with a stale read")
for how in ("release", "relaxed", "put_relaxed", "put_with_signal"):
    stale = sum(message_passing(s, how) for s in range(200))
    print(f"  {how:16s} {stale / 200:.2f}")

box = SimBox((6.0, 6.0, 6.0), 1.0)
layout = build_halo_zones(DDGrid((2, 2, 2)), box, AtomSet.random(1500, box, seed=31))
oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
islands = [0, 0, 0, 0, 1, 1, 1, 1]
seeds = range(40)

print("\nfused step on np=(2,2,2), 40 weak seeds")
for mutation in (None, *sorted(MUTATIONS)):
    bad = sum(run_checked_step(layout, "fused", s, "weak", islands, mutation, oracle, buf_length=48)[0].wrong
              for s in seeds)
    print(f"  {mutation or 'correct protocol':22s} wrong in {bad:2d}/40 seeds")

# predecessor_only_wait waits on the previous pulse alone; the x pulse can still
# forward atoms that arrived in the z pulse, so that wait is too weak.

exc = deadlock_fixture()
print("\ncircular wait fixture:", type(exc).__name__, exc.waiters)
