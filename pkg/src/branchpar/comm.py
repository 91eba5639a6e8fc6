"""Simulated multi-rank communicator.

Ranks are threads inside one process. Collectives rendezvous through a
shared table keyed by (group, per-rank call index on that group), so the
n-th collective a rank issues on a group meets the n-th of every other
member. Results are value copies; nothing is shared between ranks after
a collective returns.

Determinism contract: allreduce_sum reduces in ascending rank order as a
left fold, allgather concatenates in ascending rank order, broadcast
copies the source payload. Two runs of the same program therefore
produce bit-identical collective results regardless of thread timing.

Every completed collective appends one record to a CommTrace. Records
carry a global sequence number that can vary across runs when disjoint
groups run concurrently; ``CommTrace.canonical`` orders records by
(group, issue order within group), which is reproducible.

BRANCHPAR_THREADS caps how many ranks compute simultaneously. Ranks
parked inside a collective release their compute slot, so any cap >= 1
cannot deadlock.
"""

from __future__ import annotations

import csv
import io
import os
import threading
from dataclasses import dataclass

import numpy as np

from .errors import CollectiveError, ContractError, WorldError

PHASES = ("fwd", "bwd", "param")

_WAIT_TICK = 0.05


@dataclass(frozen=True)
class CommRecord:
    seq: int
    kind: str
    group: tuple
    src: int | None
    elements: int
    bytes: int
    phase: str


class CommTrace:
    """Append-only log of completed collectives."""

    def __init__(self):
        self.records: list[CommRecord] = []
        self._lock = threading.Lock()
        self._group_seq: dict[tuple, int] = {}
        self._order: list[int] = []  # per-record issue index within its group

    def add(self, kind, group, src, elements, nbytes, phase) -> None:
        with self._lock:
            seq = len(self.records)
            idx = self._group_seq.get(group, 0)
            self._group_seq[group] = idx + 1
            self.records.append(
                CommRecord(seq, kind, group, src, elements, nbytes, phase))
            self._order.append(idx)

    def canonical(self) -> list[CommRecord]:
        """Records ordered by (group, issue order within the group)."""
        pairs = sorted(zip(self.records, self._order),
                       key=lambda p: (p[0].group, p[1]))
        return [r for r, _ in pairs]

    def totals(self, phase: str | None = None, kind: str | None = None):
        """(count, elements, bytes) over matching records."""
        n = el = by = 0
        for r in self.records:
            if phase is not None and r.phase != phase:
                continue
            if kind is not None and r.kind != kind:
                continue
            n += 1
            el += r.elements
            by += r.bytes
        return n, el, by

    def by_phase(self) -> dict[str, tuple[int, int, int]]:
        return {p: self.totals(phase=p) for p in PHASES}

    def to_csv(self, target) -> None:
        """Write records (canonical order) as CSV to a path or file object."""
        own = isinstance(target, (str, os.PathLike))
        fh = open(target, "w", newline="") if own else target
        try:
            w = csv.writer(fh)
            w.writerow(["seq", "kind", "group", "src", "elements", "bytes", "phase"])
            for r in self.canonical():
                w.writerow([r.seq, r.kind, "|".join(map(str, r.group)),
                            "" if r.src is None else r.src,
                            r.elements, r.bytes, r.phase])
        finally:
            if own:
                fh.close()

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


class _Pending:
    """One in-flight collective: payloads keyed by rank, a result event."""

    def __init__(self, group):
        self.group = group
        self.parts: dict[int, np.ndarray] = {}
        self.meta = None          # (kind, shape, dtype, src, axis)
        self.result = None
        self.error: Exception | None = None
        self.event = threading.Event()
        self.done_count = 0


class World:
    """A fixed set of ranks and their collectives."""

    def __init__(self, n_ranks: int, max_threads: int | None = None):
        if n_ranks < 1:
            raise ContractError(f"n_ranks must be >= 1, got {n_ranks}")
        self.n_ranks = n_ranks
        self.trace = CommTrace()
        self._lock = threading.Lock()
        self._pending: dict[tuple, _Pending] = {}
        self._call_idx: dict[tuple, int] = {}  # (group, rank) -> next index
        self._failures: list[tuple[int, Exception]] = []
        self._fail_event = threading.Event()
        if max_threads is None:
            max_threads = int(os.environ.get("BRANCHPAR_THREADS", "0") or 0)
        self._slots = threading.Semaphore(max_threads) if max_threads > 0 else None

    # -- failure plumbing --------------------------------------------------

    def _register_failure(self, rank: int, exc: Exception) -> None:
        with self._lock:
            self._failures.append((rank, exc))
        self._fail_event.set()

    def _failed_ranks(self):
        with self._lock:
            return sorted({r for r, _ in self._failures})

    # -- collectives --------------------------------------------------------

    def _meet(self, kind, group, rank, x, src, axis, phase):
        group = tuple(group)
        if sorted(group) != list(group) or len(set(group)) != len(group):
            raise CollectiveError(f"group must be sorted and unique, got {group}")
        if rank not in group:
            raise CollectiveError(f"rank {rank} is not in group {group}")
        if any(not (0 <= g < self.n_ranks) for g in group):
            raise CollectiveError(f"group {group} exceeds world of {self.n_ranks}")
        if phase not in PHASES:
            raise ContractError(f"phase must be one of {PHASES}, got {phase!r}")
        x = np.asarray(x)
        meta = (kind, x.shape, str(x.dtype), src, axis)

        with self._lock:
            ck = (group, rank)
            idx = self._call_idx.get(ck, 0)
            self._call_idx[ck] = idx + 1
            key = (group, idx)
            pend = self._pending.get(key)
            if pend is None:
                pend = _Pending(group)
                self._pending[key] = pend
            if pend.error is None:
                if pend.meta is None:
                    pend.meta = meta
                elif pend.meta != meta:
                    pend.error = CollectiveError(
                        f"collective mismatch on group {group} call {idx}: "
                        f"rank {rank} issued {meta}, others issued {pend.meta}")
                    pend.event.set()
            if pend.error is None:
                pend.parts[rank] = np.array(x, copy=True)
                if len(pend.parts) == len(group):
                    pend.result = self._combine(kind, pend, src, axis)
                    r = pend.result
                    self.trace.add(kind, group, src, int(r.size),
                                   int(r.size * r.itemsize), phase)
                    del self._pending[key]
                    pend.event.set()

        self._wait(pend, group)
        if pend.error is not None:
            raise pend.error
        return np.array(pend.result, copy=True)

    def _combine(self, kind, pend, src, axis):
        parts = pend.parts
        order = sorted(parts)
        if kind == "broadcast":
            return parts[src]
        if kind == "allreduce_sum":
            acc = parts[order[0]]
            for r in order[1:]:
                acc = acc + parts[r]
            return acc
        if kind == "allgather":
            return np.concatenate([parts[r] for r in order], axis=axis)
        raise CollectiveError(f"unknown collective kind {kind!r}")

    def _wait(self, pend, group):
        released = False
        if self._slots is not None and not pend.event.is_set():
            self._slots.release()
            released = True
        try:
            while not pend.event.wait(_WAIT_TICK):
                if self._fail_event.is_set():
                    dead = self._failed_ranks()
                    raise WorldError(
                        f"collective on group {group} cannot complete: "
                        f"rank(s) {dead} failed")
        finally:
            if released:
                self._slots.acquire()

    def broadcast(self, group, rank, src, x, phase):
        """Copy ``x`` as held by ``src`` to every rank in the group."""
        if src not in tuple(group):
            raise CollectiveError(f"broadcast src {src} not in group {tuple(group)}")
        return self._meet("broadcast", group, rank, x, src, None, phase)

    def allreduce_sum(self, group, rank, x, phase):
        """Elementwise sum over the group, reduced in ascending rank order."""
        return self._meet("allreduce_sum", group, rank, x, None, None, phase)

    def allgather(self, group, rank, x, axis, phase):
        """Concatenate each rank's shard along ``axis`` in rank order."""
        return self._meet("allgather", group, rank, x, None, axis, phase)

    # -- execution -----------------------------------------------------------

    def run(self, fn):
        """Run ``fn(rank, world)`` on every rank; return results by rank.

        The first rank exception is re-raised here after all threads stop.
        Ranks blocked on a collective whose peers died raise WorldError.
        """
        results = [None] * self.n_ranks

        def runner(rank):
            if self._slots is not None:
                self._slots.acquire()
            try:
                results[rank] = fn(rank, self)
            except Exception as exc:  # noqa: BLE001 - must unblock peers
                self._register_failure(rank, exc)
            finally:
                if self._slots is not None:
                    self._slots.release()

        threads = [threading.Thread(target=runner, args=(r,), daemon=True)
                   for r in range(self.n_ranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        with self._lock:
            if self._failures:
                rank, exc = self._failures[0]
                raise exc
        return results


def spawn_world(n_ranks: int, rank_main, max_threads: int | None = None):
    """Run ``rank_main(rank, world)`` across a fresh world.

    Returns (results, trace).
    """
    world = World(n_ranks, max_threads=max_threads)
    results = world.run(rank_main)
    return results, world.trace
