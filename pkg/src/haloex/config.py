"""Run configuration: a versioned JSON document with a default for every field."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .simtime import DEFAULT_ATOMS, DEFAULT_GRIDS, SCHEDULES, MachineModel

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    box: tuple[float, float, float] = (6.0, 6.0, 6.0)
    cutoff: float = 1.0
    atom_file: Optional[str] = None
    atom_count: int = 3000
    atom_seed: int = 7
    ranks: int = 8
    np: Optional[tuple[int, int, int]] = None
    gpus_per_node: int = 4
    schedule: str = "fused"
    memory_model: str = "weak"
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    out: str = "haloex-out"
    buf_length: int = 64
    staged_blocks: int = 2
    aggressiveness: float = 0.5
    random_systems: int = 12
    machine: dict = field(default_factory=dict)
    calibrate: bool = True
    sweep_atoms: list[int] = field(default_factory=lambda: list(DEFAULT_ATOMS))
    sweep_grids: list[tuple[int, int, int]] = field(default_factory=lambda: [tuple(g) for g in DEFAULT_GRIDS])
    sweep_schedules: list[str] = field(default_factory=lambda: list(SCHEDULES))

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if len(self.box) != 3 or min(self.box) <= 0:
            raise ConfigError("box needs three positive lengths")
        if self.cutoff <= 0:
            raise ConfigError("cutoff must be positive")
        if self.atom_file is None and self.atom_count < 1:
            raise ConfigError("atom_count must be positive")
        if self.ranks < 1 or self.gpus_per_node < 1:
            raise ConfigError("ranks and gpus_per_node must be positive")
        if self.np is not None and (len(self.np) != 3 or self.np[0] * self.np[1] * self.np[2] != self.ranks):
            raise ConfigError(f"np {self.np} does not multiply to ranks={self.ranks}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.memory_model not in ("sequential", "weak"):
            raise ConfigError("memory_model must be 'sequential' or 'weak'")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.buf_length < 1 or self.staged_blocks < 1:
            raise ConfigError("buf_length and staged_blocks must be positive")
        if not 0 <= self.aggressiveness <= 1:
            raise ConfigError("aggressiveness must be in [0, 1]")
        known = {f.name for f in fields(MachineModel)}
        bad = set(self.machine) - known
        if bad:
            raise ConfigError(f"unknown machine keys {sorted(bad)}")
        try:
            MachineModel(**self.machine)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"machine: {exc}") from exc
        for s in self.sweep_schedules:
            if s not in SCHEDULES:
                raise ConfigError(f"unknown sweep schedule {s!r}")
        for g in self.sweep_grids:
            if len(g) != 3 or min(g) < 1:
                raise ConfigError(f"bad sweep grid {g}")
        return self

    def islands(self) -> list[int]:
        return [r // self.gpus_per_node for r in range(self.ranks)]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_TUPLES = {"box", "np"}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "schema_version" not in data:
        raise ConfigError("config needs a schema_version")
    kw = {}
    try:
        for k, v in data.items():
            if k in _TUPLES and v is not None:
                v = tuple(v)
            if k == "sweep_grids":
                v = [tuple(g) for g in v]
            kw[k] = v
        return RunConfig(**kw).validate()
    except (TypeError, AttributeError) as exc:
        raise ConfigError(f"bad value type: {exc}") from exc


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data)


def with_overrides(cfg: RunConfig, **over) -> RunConfig:
    over = {k: v for k, v in over.items() if v is not None}
    return replace(cfg, **over).validate() if over else cfg
