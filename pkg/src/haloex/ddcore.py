"""Periodic domain decomposition and eighth-shell pulse planning.

Dimensions are indexed x=0, y=1, z=2 everywhere.  Communication pulses run
in z, y, x order (undecomposed dimensions are skipped), each rank sending
toward its forward (+1) neighbour.  A rank therefore imports the halo that
lies on the backward side of its domain in every decomposed dimension, and
atoms received in an earlier pulse are forwarded by later pulses so that the
corner and edge neighbours are served without extra messages.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PULSE_ORDER = (2, 1, 0)
DIM_NAMES = "xyz"


class NoValidDecomposition(ValueError):
    pass


class CutoffTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SimBox:
    lengths: tuple[float, float, float]
    cutoff: float

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        if len(lengths) != 3 or any(not v > 0 for v in lengths):
            raise ValueError(f"box lengths must be three positive numbers, got {self.lengths}")
        if not self.cutoff > 0:
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "cutoff", float(self.cutoff))

    @classmethod
    def cubic(cls, length: float, cutoff: float) -> "SimBox":
        return cls((length, length, length), cutoff)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.lengths, dtype=np.float64)


@dataclass(frozen=True)
class DDGrid:
    np: tuple[int, int, int]

    def __post_init__(self):
        np_ = tuple(int(n) for n in self.np)
        if len(np_) != 3 or any(n < 1 for n in np_):
            raise ValueError(f"domain counts must be three positive integers, got {self.np}")
        object.__setattr__(self, "np", np_)

    @property
    def total_ranks(self) -> int:
        return self.np[0] * self.np[1] * self.np[2]

    @property
    def decomposed(self) -> tuple[int, ...]:
        """Decomposed dimensions in pulse order (z, y, x)."""
        return tuple(d for d in PULSE_ORDER if self.np[d] > 1)

    def rank_of(self, cell: Sequence[int]) -> int:
        cx, cy, cz = (int(c) % n for c, n in zip(cell, self.np))
        return (cx * self.np[1] + cy) * self.np[2] + cz

    def cell_of(self, rank: int) -> tuple[int, int, int]:
        if not 0 <= rank < self.total_ranks:
            raise IndexError(f"rank {rank} outside [0, {self.total_ranks})")
        cz = rank % self.np[2]
        cy = (rank // self.np[2]) % self.np[1]
        cx = rank // (self.np[2] * self.np[1])
        return (cx, cy, cz)

    def forward(self, rank: int, dim: int) -> int:
        cell = list(self.cell_of(rank))
        cell[dim] = (cell[dim] + 1) % self.np[dim]
        return self.rank_of(cell)

    def backward(self, rank: int, dim: int) -> int:
        cell = list(self.cell_of(rank))
        cell[dim] = (cell[dim] - 1) % self.np[dim]
        return self.rank_of(cell)

    def neighbor_count(self) -> int:
        return self.total_ranks - 1


def cell_edges(box: SimBox, grid: DDGrid, dim: int) -> np.ndarray:
    """Split planes of one dimension; the last edge is the box length exactly."""
    n = grid.np[dim]
    length = box.lengths[dim]
    edges = np.array([length * c / n for c in range(n + 1)], dtype=np.float64)
    edges[-1] = length
    return edges


def cell_widths(box: SimBox, grid: DDGrid) -> np.ndarray:
    return box.array / np.asarray(grid.np, dtype=np.float64)


def single_pulse_valid(box: SimBox, np_: Sequence[int]) -> bool:
    return all(box.cutoff < box.lengths[d] / np_[d] for d in range(3) if np_[d] > 1)


def halo_volume_estimate(box: SimBox, np_: Sequence[int]) -> float:
    """Volume of the backward-extended domain minus the domain itself."""
    w = [box.lengths[d] / np_[d] for d in range(3)]
    ext = [w[d] + (box.cutoff if np_[d] > 1 else 0.0) for d in range(3)]
    return math.prod(ext) - math.prod(w)


def factorizations(ranks: int) -> list[tuple[int, int, int]]:
    out = []
    for a in range(1, ranks + 1):
        if ranks % a:
            continue
        rest = ranks // a
        for b in range(1, rest + 1):
            if rest % b == 0:
                out.append((a, b, rest // b))
    return out


def _prime_factors(n: int) -> list[int]:
    factors, p = [], 2
    while p * p <= n:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    if n > 1:
        factors.append(n)
    return sorted(factors, reverse=True)


def build_grid(box: SimBox, ranks: int) -> DDGrid:
    """Factorize ``ranks`` over the box dimensions.

    Prime factors, largest first, go to the dimension whose current cell
    width is longest (ties: z, then y, then x).  If that split leaves a cell
    thinner than the cutoff, every factorization is scored by its halo
    volume and the smallest valid one wins.
    """
    if ranks < 1:
        raise ValueError(f"ranks must be >= 1, got {ranks}")
    np_ = [1, 1, 1]
    widths = list(box.lengths)
    for f in _prime_factors(ranks):
        d = max(PULSE_ORDER, key=lambda k: widths[k])  # max() keeps the first of ties: z, y, x
        np_[d] *= f
        widths[d] = box.lengths[d] / np_[d]
    if single_pulse_valid(box, np_):
        return DDGrid(tuple(np_))
    valid = [f for f in factorizations(ranks) if single_pulse_valid(box, f)]
    if not valid:
        raise NoValidDecomposition(
            f"no factorization of {ranks} ranks keeps every cell wider than cutoff {box.cutoff}"
        )
    return DDGrid(min(valid, key=lambda f: (halo_volume_estimate(box, f), f)))


@dataclass(frozen=True)
class AtomSet:
    positions: np.ndarray
    global_ids: np.ndarray
    home_domain: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        ids = np.asarray(self.global_ids, dtype=np.int64).reshape(-1)
        if len(ids) != len(pos):
            raise ValueError("positions and global_ids differ in length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("global ids must be unique")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "global_ids", ids)

    def __len__(self):
        return len(self.global_ids)

    @classmethod
    def random(cls, n: int, box: SimBox, seed: int) -> "AtomSet":
        rng = np.random.default_rng(seed)
        pos = rng.uniform(0.0, 1.0, size=(n, 3)) * box.array
        return cls(wrap_positions(pos, box), np.arange(n, dtype=np.int64), seed=seed)

    @classmethod
    def from_file(cls, path: str | Path, box: SimBox) -> "AtomSet":
        """Read ``id x y z`` rows separated by whitespace or commas."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].replace(",", " ").strip()
            if line:
                rows.append(line.split())
        if not rows:
            return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        if any(len(r) != 4 for r in rows):
            raise ValueError(f"{path}: every row needs exactly 4 fields (id x y z)")
        data = np.array(rows, dtype=np.float64)
        return cls(wrap_positions(data[:, 1:], box), data[:, 0].astype(np.int64))

    def with_home(self, grid: DDGrid, box: SimBox) -> "AtomSet":
        return AtomSet(self.positions, self.global_ids, home_ranks(self.positions, grid, box), self.seed)


def wrap_positions(positions: np.ndarray, box: SimBox) -> np.ndarray:
    lengths = box.array
    wrapped = np.mod(positions, lengths)
    # fmod of tiny negatives can round up to exactly L
    return np.where(wrapped >= lengths, 0.0, wrapped)


def home_cells(positions: np.ndarray, grid: DDGrid, box: SimBox) -> np.ndarray:
    pos = wrap_positions(np.asarray(positions, dtype=np.float64).reshape(-1, 3), box)
    cells = np.empty(pos.shape, dtype=np.int64)
    for d in range(3):
        edges = cell_edges(box, grid, d)
        # side="right": an atom on a split plane belongs to the higher cell
        c = np.searchsorted(edges, pos[:, d], side="right") - 1
        cells[:, d] = np.clip(c, 0, grid.np[d] - 1)
    return cells


def home_ranks(positions: np.ndarray, grid: DDGrid, box: SimBox) -> np.ndarray:
    c = home_cells(positions, grid, box)
    return (c[:, 0] * grid.np[1] + c[:, 1]) * grid.np[2] + c[:, 2]


def assign_atoms(atoms: AtomSet, grid: DDGrid, box: SimBox) -> list[np.ndarray]:
    """Per-rank ascending indices into ``atoms`` of the home atoms."""
    ranks = home_ranks(atoms.positions, grid, box)
    order = np.argsort(ranks, kind="stable")
    counts = np.bincount(ranks, minlength=grid.total_ranks)
    return np.split(order, np.cumsum(counts)[:-1])


def backward_gap2(q: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Squared distance from points ``q`` to a region bounded below by ``lower``.

    Only the backward side counts: a coordinate at or above its lower bound
    contributes zero.  Terms are summed x, y, z so that callers computing
    the same quantity from the same coordinates get identical bits.
    """
    g = np.maximum(0.0, lower[None, :] - q)
    g2 = g * g
    return (g2[:, 0] + g2[:, 1]) + g2[:, 2]


@dataclass(frozen=True, eq=False)
class PulseData:
    pulse_id: int
    dim: int
    send_rank: int
    recv_rank: int
    send_size: int
    recv_size: int
    atom_offset: int
    remote_offset: int
    coord_shift: np.ndarray
    index_map: np.ndarray
    dep_offset: int
    blocks_for_pulse: int = 1
    send_buf: Optional[int] = None
    recv_buf: Optional[int] = None
    remote_coord_dst: object = None
    remote_force_dst: object = None
    remote_force_src: object = None

    @property
    def name(self) -> str:
        return f"{DIM_NAMES[self.dim]}0"

    @property
    def n_independent(self) -> int:
        return int(np.count_nonzero(self.index_map < self.dep_offset))

    @property
    def n_dependent(self) -> int:
        return self.send_size - self.n_independent


@dataclass(frozen=True, eq=False)
class PulsePlan:
    rank: int
    home_count: int
    pulses: tuple[PulseData, ...]
    order: tuple[int, ...]
    first_dependent_pulse: tuple[Optional[int], ...]
    local_ids: np.ndarray
    local_positions: np.ndarray

    @property
    def total_local(self) -> int:
        return len(self.local_ids)

    def region(self, pulse: int) -> slice:
        p = self.pulses[pulse]
        return slice(p.atom_offset, p.atom_offset + p.recv_size)


@dataclass(frozen=True, eq=False)
class HaloLayout:
    box: SimBox
    grid: DDGrid
    atoms: AtomSet
    plans: tuple[PulsePlan, ...]

    @property
    def total_pulses(self) -> int:
        return len(self.grid.decomposed)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.box, self.grid.np)).encode())
        for plan in self.plans:
            h.update(repr((plan.rank, plan.home_count, plan.first_dependent_pulse)).encode())
            h.update(plan.local_ids.tobytes())
            h.update(plan.local_positions.tobytes())
            for p in plan.pulses:
                h.update(repr((p.pulse_id, p.dim, p.send_rank, p.recv_rank, p.send_size, p.recv_size,
                               p.atom_offset, p.remote_offset, p.dep_offset)).encode())
                h.update(p.coord_shift.tobytes())
                h.update(p.index_map.tobytes())
        return h.hexdigest()


def pulse_dependencies(plan: PulsePlan | Sequence) -> tuple[Optional[int], ...]:
    """Immediate predecessor of every pulse in the global z, y, x order."""
    n = len(plan.pulses) if isinstance(plan, PulsePlan) else len(plan)
    return tuple(None if k == 0 else k - 1 for k in range(n))


def dependency_floor(plan: PulsePlan, pulse: int) -> Optional[int]:
    """Earliest pulse whose received region feeds this pulse's dependent entries.

    The predecessor alone is not enough in 3D: an x pulse forwards atoms that
    arrived in the z pulse as well as in the y pulse, and the y signal on
    this rank says nothing about the z payload on this rank.
    """
    meta = plan.pulses[pulse]
    dep = meta.index_map[meta.index_map >= meta.dep_offset]
    if dep.size == 0:
        return None
    first = int(dep.min())
    for k in range(pulse):
        r = plan.region(k)
        if r.start <= first < r.stop:
            return k
    raise AssertionError("dependent index outside every received region")


def build_halo_zones(grid: DDGrid, box: SimBox, atoms: AtomSet) -> HaloLayout:
    n_ranks = grid.total_ranks
    widths = cell_widths(box, grid)
    for d in grid.decomposed:
        if box.cutoff >= widths[d]:
            raise CutoffTooLarge(
                f"cutoff {box.cutoff} >= cell width {widths[d]:.6g} in {DIM_NAMES[d]}; needs a second pulse"
            )
    homes = assign_atoms(atoms, grid, box)
    pos = [atoms.positions[h].copy() for h in homes]
    ids = [atoms.global_ids[h].copy() for h in homes]
    home_count = [len(h) for h in homes]
    cells = [grid.cell_of(r) for r in range(n_ranks)]
    edges = [cell_edges(box, grid, d) for d in range(3)]
    lower = [np.array([edges[d][cells[r][d]] for d in range(3)]) for r in range(n_ranks)]
    rc2 = box.cutoff * box.cutoff

    pulses: list[list[PulseData]] = [[] for _ in range(n_ranks)]
    for k, d in enumerate(grid.decomposed):
        offsets = [len(p) for p in pos]
        sent = []
        for s in range(n_ranks):
            t = grid.forward(s, d)
            shift = np.zeros(3)
            if cells[s][d] == grid.np[d] - 1:
                shift[d] = -box.lengths[d]
            q = pos[s].copy()
            q[:, d] = q[:, d] + shift[d]
            index_map = np.flatnonzero(backward_gap2(q, lower[t]) <= rc2).astype(np.int64)
            sent.append((t, shift, index_map, q[index_map], ids[s][index_map]))
        for s, (t, shift, index_map, q_sel, id_sel) in enumerate(sent):
            b = grid.backward(s, d)
            recv_size = len(sent[b][2])
            pulses[s].append(
                PulseData(
                    pulse_id=k,
                    dim=d,
                    send_rank=t,
                    recv_rank=b,
                    send_size=len(index_map),
                    recv_size=recv_size,
                    atom_offset=offsets[s],
                    remote_offset=offsets[t],
                    coord_shift=shift,
                    index_map=index_map,
                    dep_offset=home_count[s],
                )
            )
        for s, (t, _, _, q_sel, id_sel) in enumerate(sent):
            pos[t] = np.concatenate([pos[t], q_sel])
            ids[t] = np.concatenate([ids[t], id_sel])

    order = grid.decomposed
    plans = tuple(
        PulsePlan(
            rank=r,
            home_count=home_count[r],
            pulses=tuple(pulses[r]),
            order=order,
            first_dependent_pulse=pulse_dependencies(pulses[r]),
            local_ids=ids[r],
            local_positions=pos[r],
        )
        for r in range(n_ranks)
    )
    return HaloLayout(box=box, grid=grid, atoms=atoms.with_home(grid, box), plans=plans)
