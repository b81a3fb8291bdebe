"""Simulated eighth-shell halo exchange with fused, dependency-aware PGAS communication."""

from .ddcore import (AtomSet, CutoffTooLarge, DDGrid, HaloLayout, NoValidDecomposition, PulseData, PulsePlan,
                     SimBox, build_grid, build_halo_zones, pulse_dependencies)
from .exchange import (MUTATIONS, HaloExchange, direct_gather_oracle, direct_scatter_oracle, synthetic_forces)
from .pgas import ExecutionRecord, SimDeadlock, World, run_world
from .simtime import (MachineModel, StepMetrics, StepShape, Timeline, calibrate, metrics, simulate_step, sweep,
                      synthetic_shape)

__all__ = [
    "AtomSet", "CutoffTooLarge", "DDGrid", "HaloLayout", "NoValidDecomposition", "PulseData", "PulsePlan", "SimBox",
    "build_grid", "build_halo_zones", "pulse_dependencies", "MUTATIONS", "HaloExchange", "direct_gather_oracle",
    "direct_scatter_oracle", "synthetic_forces", "ExecutionRecord", "SimDeadlock", "World", "run_world",
    "MachineModel", "StepMetrics", "StepShape", "Timeline", "calibrate", "metrics", "simulate_step", "sweep",
    "synthetic_shape",
]
