"""Module-aware resource manager: independent Cluster and Booster node pools."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

from .platform import NodeKind, PlatformConfig


class SchedulerError(RuntimeError):
    pass


@dataclass(frozen=True)
class JobRequest:
    id: str
    cluster_nodes: int
    booster_nodes: int

    def count(self, kind: NodeKind) -> int:
        return self.cluster_nodes if kind is NodeKind.CLUSTER else self.booster_nodes


@dataclass(frozen=True)
class Allocation:
    job: str
    cluster_set: frozenset[int]
    booster_set: frozenset[int]

    def nodes(self, kind: NodeKind) -> list[int]:
        """Sorted node indices of one kind."""
        chosen = self.cluster_set if kind is NodeKind.CLUSTER else self.booster_set
        return sorted(chosen)


@dataclass(frozen=True)
class PoolState:
    free: dict[NodeKind, tuple[bool, ...]]  # True = free

    def free_count(self, kind: NodeKind) -> int:
        return sum(self.free[kind])

    def busy_count(self, kind: NodeKind) -> int:
        return len(self.free[kind]) - self.free_count(kind)


class ModuleScheduler:
    """Strict-FIFO scheduler over two independently allocated node pools.

    All public methods are serialized behind one lock, so the scheduler may be
    driven from any thread.
    """

    def __init__(self, cfg: PlatformConfig):
        self._size = {
            NodeKind.CLUSTER: cfg.cluster.node_count,
            NodeKind.BOOSTER: cfg.booster.node_count,
        }
        self._free = {kind: [True] * n for kind, n in self._size.items()}
        self._queue: deque[JobRequest] = deque()
        self._live: dict[str, Allocation] = {}
        self._known: set[str] = set()
        self._lock = threading.Lock()

    def submit(self, req: JobRequest) -> str:
        if req.cluster_nodes < 0 or req.booster_nodes < 0:
            raise SchedulerError(f"job {req.id}: negative node count")
        if req.cluster_nodes + req.booster_nodes < 1:
            raise SchedulerError(f"job {req.id}: requests no nodes")
        for kind, total in self._size.items():
            if req.count(kind) > total:
                raise SchedulerError(
                    f"job {req.id}: {req.count(kind)} {kind.value} nodes requested, "
                    f"machine has {total}; never satisfiable"
                )
        with self._lock:
            if req.id in self._known:
                raise SchedulerError(f"duplicate job id {req.id!r}")
            self._known.add(req.id)
            self._queue.append(req)
        return req.id

    def try_allocate(self) -> list[tuple[str, Allocation]]:
        granted = []
        with self._lock:
            while self._queue:
                head = self._queue[0]
                if any(head.count(k) > sum(self._free[k]) for k in self._size):
                    break
                self._queue.popleft()
                alloc = Allocation(
                    job=head.id,
                    cluster_set=self._take(NodeKind.CLUSTER, head.cluster_nodes),
                    booster_set=self._take(NodeKind.BOOSTER, head.booster_nodes),
                )
                self._live[head.id] = alloc
                granted.append((head.id, alloc))
        return granted

    def _take(self, kind: NodeKind, count: int) -> frozenset[int]:
        pool = self._free[kind]
        picked = [i for i, free in enumerate(pool) if free][:count]
        for i in picked:
            pool[i] = False
        return frozenset(picked)

    def release(self, alloc: Allocation) -> None:
        with self._lock:
            live = self._live.get(alloc.job)
            if live is None or live != alloc:
                raise SchedulerError(f"allocation of job {alloc.job!r} is not live")
            del self._live[alloc.job]
            for i in alloc.cluster_set:
                self._free[NodeKind.CLUSTER][i] = True
            for i in alloc.booster_set:
                self._free[NodeKind.BOOSTER][i] = True

    def pool_status(self) -> PoolState:
        with self._lock:
            return PoolState({k: tuple(v) for k, v in self._free.items()})

    def queued(self) -> list[str]:
        with self._lock:
            return [r.id for r in self._queue]

    def live(self) -> dict[str, Allocation]:
        with self._lock:
            return dict(self._live)
