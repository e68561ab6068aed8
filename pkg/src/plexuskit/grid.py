"""Virtual 3D process grid, collectives, and traffic accounting.

A rank program is a generator. Each collective is a request the program
yields; the scheduler hands back the result once every member of the
group has arrived::

    def program(comm):
        h = yield from comm.all_reduce(h, X)

Two schedulers drive such programs: :class:`LockstepScheduler` steps ranks
round-robin on the calling thread, :class:`ThreadedScheduler` runs them on a
pool of worker threads. Both finish a collective through the same
:func:`complete_collective`, so their numerics are identical.

Data moves semantically (gather/sum); bytes are counted with ring formulas.
"""

from __future__ import annotations

import collections
import csv
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Generator

import numpy as np

from .layout import AXIS_NAMES, axis_index, chunk_bounds


class CollectiveError(RuntimeError):
    pass


class DeadlockError(CollectiveError):
    pass


@dataclass(frozen=True)
class GridConfig:
    gx: int
    gy: int
    gz: int

    def __post_init__(self):
        if min(self.gx, self.gy, self.gz) < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.gx, self.gy, self.gz)

    @property
    def size(self) -> int:
        return self.gx * self.gy * self.gz

    def coords(self, rank: int) -> tuple[int, int, int]:
        # x varies fastest
        return (rank % self.gx, (rank // self.gx) % self.gy, rank // (self.gx * self.gy))

    def rank_of(self, coords) -> int:
        x, y, z = coords
        return x + self.gx * (y + self.gy * z)

    def group_key(self, rank: int, axis) -> tuple:
        axis = axis_index(axis)
        c = list(self.coords(rank))
        c[axis] = -1
        return (axis, tuple(c))

    def group_members(self, rank: int, axis) -> list[int]:
        """Ranks in ``rank``'s group along ``axis``, ascending by coordinate."""
        axis = axis_index(axis)
        c = list(self.coords(rank))
        out = []
        for i in range(self.dims[axis]):
            c[axis] = i
            out.append(self.rank_of(c))
        return out

    def groups(self, axis) -> list[list[int]]:
        axis = axis_index(axis)
        seen, out = set(), []
        for r in range(self.size):
            key = self.group_key(r, axis)
            if key not in seen:
                seen.add(key)
                out.append(self.group_members(r, axis))
        return out

    def __str__(self):
        return f"{self.gx}x{self.gy}x{self.gz}"


def make_grid(gx: int, gy: int, gz: int) -> GridConfig:
    return GridConfig(int(gx), int(gy), int(gz))


def enumerate_configs(g: int) -> list[tuple[int, int, int]]:
    """All ordered (Gx, Gy, Gz) with product ``g``, lexicographic."""
    if g < 1:
        raise ValueError("G must be >= 1")
    divs = [d for d in range(1, g + 1) if g % d == 0]
    return [(a, b, g // (a * b)) for a in divs for b in divs if (g // a) % b == 0]


@dataclass
class CommStats:
    """Per-rank byte/call counters keyed by (axis, collective) plus FLOPs."""

    bytes: collections.Counter = field(default_factory=collections.Counter)
    calls: collections.Counter = field(default_factory=collections.Counter)
    flops: collections.Counter = field(default_factory=collections.Counter)
    times: collections.Counter = field(default_factory=collections.Counter)

    def record(self, axis: int, kind: str, nbytes: int):
        self.bytes[(axis, kind)] += int(nbytes)
        self.calls[(axis, kind)] += 1

    def add_flops(self, kind: str, n: int):
        self.flops[kind] += int(n)

    def total_bytes(self, kind: str | None = None, axis: int | None = None) -> int:
        return sum(v for (a, k), v in self.bytes.items()
                   if (kind is None or k == kind) and (axis is None or a == axis))

    def snapshot(self) -> "CommStats":
        return CommStats(collections.Counter(self.bytes), collections.Counter(self.calls),
                         collections.Counter(self.flops), collections.Counter(self.times))

    def __sub__(self, other: "CommStats") -> "CommStats":
        return CommStats(self.bytes - other.bytes, self.calls - other.calls,
                         self.flops - other.flops, self.times - other.times)

    def flat(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for (a, k), v in sorted(self.bytes.items()):
            out[f"bytes_{AXIS_NAMES[a]}_{k}"] = v
        for (a, k), v in sorted(self.calls.items()):
            out[f"calls_{AXIS_NAMES[a]}_{k}"] = v
        for k, v in sorted(self.flops.items()):
            out[f"flops_{k}"] = v
        return out


def write_comm_stats_csv(path, stats_by_rank: dict[int, CommStats]):
    rows = []
    for rank, st in sorted(stats_by_rank.items()):
        for (a, k) in sorted(st.bytes):
            rows.append({"rank": rank, "axis": AXIS_NAMES[a], "collective": k,
                         "calls": st.calls[(a, k)], "bytes": st.bytes[(a, k)]})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rank", "axis", "collective", "calls", "bytes"])
        w.writeheader()
        w.writerows(rows)


@dataclass
class Collective:
    kind: str
    axis: int
    payload: np.ndarray
    dim: int = 0
    tag: str = ""


def ring_bytes(kind: str, total: int, own: int, g: int) -> int:
    """Bytes one rank moves in a ring implementation.

    ``total`` is the full buffer M in bytes and ``own`` the caller's chunk.
    all_reduce counts 2(g-1)/g * M (floored); the other two count M - own,
    which equals (g-1)/g * M whenever chunks are even.
    """
    if g == 1:
        return 0
    if kind == "all_reduce":
        return 2 * (g - 1) * total // g
    return total - own


def complete_collective(kind: str, payloads: list[np.ndarray], dim: int = 0,
                        order: list[int] | None = None, members: list[int] | None = None):
    """Compute every member's result and byte count.

    ``payloads`` are indexed by coordinate along the axis. ``order`` is the
    summation order (defaults to ascending coordinate).
    """
    g = len(payloads)
    members = members if members is not None else list(range(g))
    order = order if order is not None else list(range(g))
    ref = payloads[0]
    for pos, p in enumerate(payloads):
        if p.dtype != ref.dtype or p.ndim != ref.ndim:
            raise CollectiveError(f"{kind}: rank {members[pos]} sent {p.dtype}/{p.ndim}d, "
                                  f"expected {ref.dtype}/{ref.ndim}d")
        if kind == "all_gather":
            other = [s for i, s in enumerate(p.shape) if i != dim]
            want = [s for i, s in enumerate(ref.shape) if i != dim]
            if other != want:
                raise CollectiveError(f"all_gather: rank {members[pos]} sent shape {p.shape}, "
                                      f"incompatible with {ref.shape}")
        elif p.shape != ref.shape:
            raise CollectiveError(f"{kind}: rank {members[pos]} sent shape {p.shape}, "
                                  f"expected {ref.shape}")
    if g == 1:
        return [payloads[0]], [0]
    item = ref.dtype.itemsize
    if kind == "all_gather":
        out = np.concatenate(payloads, axis=dim)
        total = out.size * item
        return [out.copy() for _ in range(g)], [ring_bytes(kind, total, p.size * item, g)
                                                for p in payloads]
    acc = payloads[order[0]].copy()
    for i in order[1:]:
        acc += payloads[i]
    total = acc.size * item
    if kind == "all_reduce":
        return [acc.copy() for _ in range(g)], [ring_bytes(kind, total, 0, g)] * g
    if kind == "reduce_scatter":
        outs, nbytes = [], []
        for pos in range(g):
            lo, hi = chunk_bounds(acc.shape[0], g, pos)
            part = acc[lo:hi].copy()
            outs.append(part)
            nbytes.append(ring_bytes(kind, total, part.size * item, g))
        return outs, nbytes
    raise CollectiveError(f"unknown collective {kind!r}")


class Comm:
    """One rank's handle on the grid. Its collective methods are generators."""

    def __init__(self, grid: GridConfig, rank: int, stats: CommStats | None = None,
                 skip: frozenset = frozenset()):
        self.grid = grid
        self.rank = rank
        self.coords = grid.coords(rank)
        self.stats = stats if stats is not None else CommStats()
        self.skip = skip

    def _issue(self, kind, x, axis, dim=0, tag=""):
        axis = axis_index(axis)
        if tag and tag in self.skip:
            return x
        t0 = time.perf_counter()
        out = yield Collective(kind, axis, x, dim, tag)
        self.stats.times["collectives"] += time.perf_counter() - t0
        return out

    def all_gather(self, x, axis, dim=0, tag=""):
        return (yield from self._issue("all_gather", x, axis, dim, tag))

    def all_reduce(self, x, axis, tag=""):
        return (yield from self._issue("all_reduce", x, axis, 0, tag))

    def reduce_scatter(self, x, axis, tag=""):
        return (yield from self._issue("reduce_scatter", x, axis, 0, tag))


Program = Generator[Collective, Any, Any]


class _Rendezvous:
    """Shared bookkeeping: pending groups, completion, accounting, log."""

    def __init__(self, grid: GridConfig, stats: dict[int, CommStats], deterministic: bool):
        self.grid = grid
        self.stats = stats
        self.deterministic = deterministic
        self.pending: dict[tuple, dict] = {}
        self.log: list[tuple[int, str, tuple[int, ...]]] = []

    def arrive(self, rank: int, req: Collective):
        """Register ``req``; return [(rank, result)] if the group just filled."""
        key = self.grid.group_key(rank, req.axis)
        members = self.grid.group_members(rank, req.axis)
        slot = self.pending.setdefault(key, {"reqs": {}, "arrival": []})
        first = next(iter(slot["reqs"].values()), None)
        if first is not None and (first.kind, first.dim) != (req.kind, req.dim):
            raise CollectiveError(
                f"rank {rank} issued {req.kind} on {AXIS_NAMES[req.axis]} while group "
                f"{members} is in {first.kind}")
        pos = members.index(rank)
        slot["reqs"][pos] = req
        slot["arrival"].append(pos)
        if len(slot["reqs"]) < len(members):
            return None
        del self.pending[key]
        payloads = [slot["reqs"][i].payload for i in range(len(members))]
        order = None if self.deterministic else slot["arrival"]
        outs, nbytes = complete_collective(req.kind, payloads, req.dim, order, members)
        for m, nb in zip(members, nbytes):
            self.stats[m].record(req.axis, req.kind, nb)
        self.log.append((req.axis, req.kind, tuple(members)))
        return list(zip(members, outs))

    def describe_pending(self) -> str:
        parts = []
        for (axis, _), slot in self.pending.items():
            kinds = {r.kind for r in slot["reqs"].values()}
            parts.append(f"{AXIS_NAMES[axis]}:{sorted(kinds)} waiting with {sorted(slot['reqs'])}")
        return "; ".join(parts) or "none"


class LockstepScheduler:
    """Single-threaded round-robin stepping of all ranks."""

    def __init__(self, deterministic: bool = True):
        self.deterministic = deterministic
        self.log: list = []

    def run(self, grid: GridConfig, programs: dict[int, Program],
            stats: dict[int, CommStats]) -> dict[int, Any]:
        rv = _Rendezvous(grid, stats, self.deterministic)
        inbox: dict[int, Any] = {r: None for r in programs}
        runnable = set(programs)
        results: dict[int, Any] = {}
        while len(results) < len(programs):
            if not runnable:
                raise DeadlockError(f"all ranks blocked; pending: {rv.describe_pending()}")
            for r in sorted(programs):
                if r not in runnable:
                    continue
                runnable.discard(r)
                try:
                    req = programs[r].send(inbox.pop(r))
                except StopIteration as stop:
                    results[r] = stop.value
                    continue
                done = rv.arrive(r, req)
                for m, out in done or ():
                    inbox[m] = out
                    runnable.add(m)
        self.log = rv.log
        return results


def default_threads() -> int | None:
    val = os.environ.get("PLEXUSKIT_THREADS")
    return int(val) if val else None


class ThreadedScheduler:
    """Runs ranks on up to ``max_workers`` threads (default: one per rank).

    Ranks blocked in a collective do not hold a worker, so any worker count
    >= 1 is deadlock-free for programs that are themselves deadlock-free.
    """

    def __init__(self, max_workers: int | None = None, deterministic: bool = True):
        self.max_workers = max_workers if max_workers is not None else default_threads()
        self.deterministic = deterministic
        self.log: list = []

    def run(self, grid: GridConfig, programs: dict[int, Program],
            stats: dict[int, CommStats]) -> dict[int, Any]:
        rv = _Rendezvous(grid, stats, self.deterministic)
        lock = threading.Lock()
        ready: queue.Queue = queue.Queue()
        results: dict[int, Any] = {}
        errors: list[BaseException] = []
        # queued + running rank steps; zero with unfinished ranks means deadlock
        inflight = [len(programs)]
        for r in sorted(programs):
            ready.put((r, None))
        nworkers = max(1, min(self.max_workers or len(programs), len(programs)))
        total = len(programs)

        def step_done():
            # called with lock held
            inflight[0] -= 1
            if len(results) < total and not errors and inflight[0] == 0:
                errors.append(DeadlockError(f"all ranks blocked; pending: {rv.describe_pending()}"))
            if len(results) == total or errors:
                for _ in range(nworkers):
                    ready.put(None)

        def worker():
            while True:
                item = ready.get()
                if item is None:
                    return
                r, value = item
                try:
                    req = programs[r].send(value)
                except StopIteration as stop:
                    with lock:
                        results[r] = stop.value
                        step_done()
                    continue
                except BaseException as exc:  # surfaced by run()
                    with lock:
                        errors.append(exc)
                        step_done()
                    continue
                with lock:
                    try:
                        done = rv.arrive(r, req)
                    except BaseException as exc:
                        errors.append(exc)
                        done = None
                    for m, out in done or ():
                        inflight[0] += 1
                        ready.put((m, out))
                    step_done()

        threads = [threading.Thread(target=worker, daemon=True) for _ in range(nworkers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.log = rv.log
        if errors:
            raise errors[0]
        return results


def make_scheduler(kind: str = "threaded", deterministic: bool = True, max_workers=None):
    if kind == "lockstep":
        return LockstepScheduler(deterministic)
    if kind == "threaded":
        return ThreadedScheduler(max_workers, deterministic)
    raise ValueError(f"unknown scheduler {kind!r}")


def run_collective(grid: GridConfig, kind: str, axis, payloads: dict[int, np.ndarray],
                   scheduler=None, dim: int = 0) -> tuple[dict[int, np.ndarray], dict[int, CommStats]]:
    """Run one collective on every rank; convenience for tests and tools."""
    stats = {r: CommStats() for r in range(grid.size)}

    def prog(comm, x):
        return (yield from comm._issue(kind, x, axis, dim))

    programs = {r: prog(Comm(grid, r, stats[r]), payloads[r]) for r in range(grid.size)}
    sched = scheduler or LockstepScheduler()
    return sched.run(grid, programs, stats), stats


__all__ = [
    "GridConfig", "CommStats", "Comm", "Collective", "CollectiveError", "DeadlockError",
    "LockstepScheduler", "ThreadedScheduler", "make_grid", "enumerate_configs",
    "complete_collective", "ring_bytes", "make_scheduler", "run_collective",
    "write_comm_stats_csv",
]
