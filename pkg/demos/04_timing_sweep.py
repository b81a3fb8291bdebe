"""Calibrate the timing model and compare the two schedules.

Run: python3 demos/04_timing_sweep.py
"""

from haloex.simtime import ANCHORS, calibrate, default_sweep, simulate_step, step_metrics, sweep, synthetic_shape

fit = calibrate()
m = fit.machine
print("calibrated: launch %.2f us, direct link %.2f us, compute %.3f us/katom, non-local intensity %.3f"
      % (m.launch_latency, m.direct_link_latency, m.compute_rate, m.nonlocal_intensity))
for t in ANCHORS:
    print(f"  {t.name:24s} target {t.value:6.1f}  model {fit.predictions[t.name]:6.1f}")

for atoms, np_ in ((11250, (4, 1, 1)), (90000, (4, 1, 1)), (11250, (1, 4, 4)), (11250, (2, 4, 4))):
    shape = synthetic_shape(atoms, np_)
    for s in ("serialized", "fused"):
        mt = step_metrics(shape, s, m)
        print(f"{atoms:7d} {np_} {s:10s} local {mt.local_work:7.1f}  non-local {mt.nonlocal_work:7.1f}  "
              f"non-overlap {mt.non_overlap:6.1f}  step {mt.time_per_step:7.1f} us")

print("\nwhere fused stops winning on an 8x1x1 grid:")
rows = [r for r in sweep(default_sweep(grids=[(8, 1, 1)]), m)]
for r in rows:
    if r["schedule"] == "fused":
        print(f"  {r['atoms_per_rank']:8d} atoms/rank: fused speedup {r['speedup_vs_serialized']:.3f}")

tl = simulate_step(synthetic_shape(11250, (2, 4, 4)), "fused", m)
print("\nfirst intervals of a fused 3D step:")
for row in tl.trace_rows()[:8]:
    print("  ", row)
