"""Deterministic message-passing runtime with virtual time.

Every emulated rank runs in its own OS thread, but only one thread holds the
baton at any moment.  A rank gives up the baton only when it blocks (receive,
wait, collective) or finishes; the next rank is chosen in fixed global-id
order.  Virtual clocks are bookkeeping only: they advance by the platform's
``compute_cost`` and ``comm_cost`` charges, never by wall-clock time.

Message matching is by (context, source, destination, tag) with FIFO order
per key, so no wildcard receives exist and results never depend on the
interleaving.  Collectives use binomial trees with fixed child order.
"""

from __future__ import annotations

import itertools
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .modsched import Allocation
from .platform import NodeKind, PlatformConfig, Solver, comm_cost, compute_cost

_ROLES: dict[str, Callable[..., Any]] = {}


def register_role(name: str, fn: Callable[..., Any] | None = None):
    """Register a named entry function ``fn(ctx, *args)``; usable as a decorator."""
    if fn is None:
        def deco(f):
            _ROLES[name] = f
            return f
        return deco
    _ROLES[name] = fn
    return fn


def registered_roles() -> list[str]:
    return sorted(_ROLES)


class MPRTError(RuntimeError):
    pass


class DeadlockError(MPRTError):
    """Raised when the program drains with blocked ranks or unmatched messages."""


class CollectiveMismatch(MPRTError):
    pass


class SpawnError(MPRTError):
    pass


class _Aborted(BaseException):
    # BaseException so application code with `except Exception` cannot swallow it
    pass


@dataclass(frozen=True)
class Rank:
    world_id: int
    index: int
    node_kind: NodeKind
    node_index: int
    gid: int

    def label(self) -> str:
        return f"w{self.world_id}.{self.index}"


@dataclass(frozen=True)
class Group:
    id: int
    members: tuple[Rank, ...]

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class MessageEnvelope:
    src: Rank
    dst: Rank
    tag: int
    payload: bytes
    send_time: float
    arrival: float


class RequestHandle:
    _ids = itertools.count()

    def __init__(self, kind: str, key: tuple, completion: float | None = None, nbytes: int = 0):
        self.id = next(RequestHandle._ids)
        self.kind = kind  # "send" | "recv"
        self.key = key
        self.completion = completion
        self.envelope: MessageEnvelope | None = None
        self.nbytes = nbytes
        self.waited = False

    @property
    def state(self) -> str:
        if self.kind == "send" or self.envelope is not None:
            return "complete"
        return "pending"


@dataclass
class TraceEvent:
    time: float
    rank: str
    op: str
    peer: str
    nbytes: int

    def line(self) -> str:
        return f"{self.time * 1e6:.6f}, {self.rank}, {self.op}, {self.peer}, {self.nbytes}"


@dataclass
class _Proc:
    rank: Rank
    clock: float
    fn: Callable[..., Any]
    args: tuple
    alloc: Allocation
    parent: "InterComm | None" = None
    state: str = "new"
    pred: Callable[[], bool] | None = None
    waiting_for: str = ""
    result: Any = None
    go: threading.Event = field(default_factory=threading.Event)
    thread: threading.Thread | None = None
    coll_seq: dict[int, int] = field(default_factory=dict)


@dataclass
class _Slot:
    op: str
    size: int
    entries: dict[int, tuple] = field(default_factory=dict)
    result: Any = None
    error: MPRTError | None = None
    done: bool = False


class Runtime:
    """One emulated machine run: worlds of ranks plus their virtual clocks."""

    def __init__(self, cfg: PlatformConfig, *, ranks_per_node: int = 1, trace: bool = False):
        if ranks_per_node < 1:
            raise ValueError("ranks_per_node must be >= 1")
        self.cfg = cfg
        self.ranks_per_node = ranks_per_node
        self.tracing = trace
        self.trace: list[TraceEvent] = []
        self._roles: dict[str, Callable[..., Any]] = {}
        self._procs: list[_Proc] = []
        self._worlds: dict[int, Group] = {}
        self._ids = itertools.count()
        self._mail: dict[tuple, deque[MessageEnvelope]] = {}
        self._posted: dict[tuple, deque[RequestHandle]] = {}
        self._slots: dict[tuple[int, int], _Slot] = {}
        self._finished = threading.Event()
        self._abort: BaseException | None = None
        self._running = False
        self._live = 0
        self._lock = threading.Lock()

    # -- setup -------------------------------------------------------------

    def register_role(self, name: str, fn: Callable[..., Any]) -> None:
        self._roles[name] = fn

    def _role(self, name: str) -> Callable[..., Any]:
        fn = self._roles.get(name) or _ROLES.get(name)
        if fn is None:
            raise SpawnError(f"unknown role {name!r}")
        return fn

    def _place(self, n: int, kind: NodeKind, alloc: Allocation, start: float,
               fn: Callable[..., Any], args: tuple) -> Group:
        nodes = alloc.nodes(kind)
        need = math.ceil(n / self.ranks_per_node)
        if n < 1:
            raise MPRTError("world size must be >= 1")
        if len(nodes) < need:
            raise MPRTError(
                f"allocation {alloc.job!r} has {len(nodes)} {kind.value} nodes, "
                f"{need} needed for {n} ranks"
            )
        world_id = next(self._ids)
        members = []
        for i in range(n):
            rank = Rank(world_id, i, kind, nodes[i % len(nodes)], len(self._procs))
            members.append(rank)
            self._procs.append(_Proc(rank, start, fn, args, alloc))
        group = Group(world_id, tuple(members))
        self._worlds[world_id] = group
        return group

    def init_world(self, role: str, n: int, kind: NodeKind, alloc: Allocation, *args) -> Group:
        """Create a world of ``n`` ranks running ``role``; clocks start at 0."""
        return self._place(n, kind, alloc, 0.0, self._role(role), args)

    def world(self, world_id: int) -> Group:
        return self._worlds[world_id]

    def worlds(self) -> list[Group]:
        return [self._worlds[k] for k in sorted(self._worlds)]

    def clocks(self, world_id: int) -> list[float]:
        return [self._procs[r.gid].clock for r in self._worlds[world_id].members]

    def results(self, world_id: int) -> list[Any]:
        return [self._procs[r.gid].result for r in self._worlds[world_id].members]

    # -- driving -----------------------------------------------------------

    def run(self) -> dict[int, list[Any]]:
        """Run every rank to completion; returns results per world id."""
        if self._running:
            raise MPRTError("runtime is already running")
        if not self._procs:
            return {}
        self._running = True
        self._finished.clear()
        self._start(self._procs[0])
        self._finished.wait()
        for proc in list(self._procs):
            if proc.thread is not None:
                proc.thread.join()
        self._running = False
        if self._abort is not None:
            raise self._abort
        leftovers = [
            f"{env.src.label()} -> {env.dst.label()} tag {env.tag} ({len(env.payload)} bytes)"
            for queue in self._mail.values() for env in queue
        ]
        leftovers += [
            f"recv posted by {self._procs[h.key[2]].rank.label()} from "
            f"{self._procs[h.key[1]].rank.label()} tag {h.key[3]}"
            for queue in self._posted.values() for h in queue
        ]
        if leftovers:
            raise DeadlockError("unmatched operations at drain: " + "; ".join(leftovers))
        return {w: self.results(w) for w in sorted(self._worlds)}

    def _start(self, proc: _Proc) -> None:
        with self._lock:
            self._live += 1
        proc.thread = threading.Thread(target=self._body, args=(proc,), daemon=True,
                                       name=f"rank-{proc.rank.label()}")
        proc.state = "running"
        proc.thread.start()
        proc.go.set()

    def _body(self, proc: _Proc) -> None:
        proc.go.wait()
        proc.go.clear()
        try:
            if self._abort is None:
                proc.result = proc.fn(RankContext(self, proc), *proc.args)
        except _Aborted:
            pass
        except BaseException as exc:  # surfaced to the caller of run()
            with self._lock:
                if self._abort is None:
                    self._abort = exc
            self._wake_all()
        proc.state = "done"
        if self._abort is None:
            self._switch(proc, wait=False)
        with self._lock:
            self._live -= 1
            if self._abort is not None and self._live == 0:
                self._finished.set()

    def _pick(self, after: int) -> _Proc | None:
        n = len(self._procs)
        for off in range(1, n + 1):
            p = self._procs[(after + off) % n]
            if p.state == "new":
                return p
            if p.state == "blocked" and p.pred():
                return p
        return None

    def _switch(self, cur: _Proc, wait: bool = True) -> None:
        nxt = self._pick(cur.rank.gid)
        if nxt is None:
            blocked = [p for p in self._procs if p.state == "blocked"]
            if blocked:
                detail = "; ".join(f"{p.rank.label()} waiting for {p.waiting_for}" for p in blocked)
                pending = [
                    f"{e.src.label()}->{e.dst.label()} tag {e.tag}"
                    for q in self._mail.values() for e in q
                ]
                if pending:
                    detail += "; unmatched messages: " + ", ".join(pending)
                self._abort = DeadlockError("deadlock at drain: " + detail)
                self._wake_all()
            else:
                self._finished.set()
        elif nxt.state == "new":
            self._start(nxt)
        else:
            nxt.state = "running"
            nxt.go.set()
        if wait:
            cur.go.wait()
            cur.go.clear()
            if self._abort is not None:
                raise _Aborted()

    def _wake_all(self) -> None:
        for p in self._procs:
            if p.state == "blocked":
                p.go.set()

    def _block(self, proc: _Proc, pred: Callable[[], bool], what: str) -> None:
        if pred():
            return
        proc.state = "blocked"
        proc.pred = pred
        proc.waiting_for = what
        self._switch(proc)
        proc.state = "running"
        proc.pred = None

    # -- trace -------------------------------------------------------------

    def _log(self, proc: _Proc, op: str, peer: str, nbytes: int) -> None:
        if self.tracing:
            self.trace.append(TraceEvent(proc.clock, proc.rank.label(), op, peer, nbytes))

    def trace_lines(self) -> list[str]:
        return [ev.line() for ev in self.trace]

    # -- point to point ----------------------------------------------------

    def _post_send(self, proc: _Proc, ctx_id: int, dst: Rank, tag: int, payload: bytes) -> RequestHandle:
        payload = bytes(payload)
        cost = comm_cost(len(payload), proc.rank.node_kind, dst.node_kind, self.cfg)
        env = MessageEnvelope(proc.rank, dst, tag, payload, proc.clock, proc.clock + cost)
        key = (ctx_id, proc.rank.gid, dst.gid, tag)
        self._log(proc, "send", dst.label(), len(payload))
        posted = self._posted.get(key)
        if posted:
            handle = posted.popleft()
            handle.envelope = env
            handle.completion = env.arrival
        else:
            self._mail.setdefault(key, deque()).append(env)
        return RequestHandle("send", key, completion=env.arrival, nbytes=len(payload))

    def _post_recv(self, proc: _Proc, ctx_id: int, src: Rank, tag: int) -> RequestHandle:
        key = (ctx_id, src.gid, proc.rank.gid, tag)
        handle = RequestHandle("recv", key)
        queue = self._mail.get(key)
        if queue:
            env = queue.popleft()
            if not queue:
                del self._mail[key]
            handle.envelope = env
            handle.completion = env.arrival
        else:
            self._posted.setdefault(key, deque()).append(handle)
        return handle

    def _wait_all(self, proc: _Proc, handles: Sequence[RequestHandle]) -> list[bytes | None]:
        for h in handles:
            if h.waited:
                raise MPRTError(f"request {h.id} already waited on")
        pending = [h for h in handles if h.kind == "recv"]
        if pending:
            what = ", ".join(f"recv key {h.key}" for h in pending if h.envelope is None)
            self._block(proc, lambda: all(h.envelope is not None for h in pending), what)
        done = proc.clock
        for h in handles:
            h.waited = True
            done = max(done, h.completion)
        proc.clock = done
        out = []
        for h in handles:
            if h.kind == "recv":
                self._log(proc, "recv", h.envelope.src.label(), len(h.envelope.payload))
                out.append(h.envelope.payload)
            else:
                out.append(None)
        return out

    def _recv(self, proc: _Proc, ctx_id: int, src: Rank, tag: int) -> bytes:
        handle = self._post_recv(proc, ctx_id, src, tag)
        self._block(proc, lambda: handle.envelope is not None,
                    f"recv from {src.label()} tag {tag}")
        env = handle.envelope
        handle.waited = True
        cost = comm_cost(len(env.payload), env.src.node_kind, proc.rank.node_kind, self.cfg)
        proc.clock = max(proc.clock, env.send_time) + cost
        self._log(proc, "recv", src.label(), len(env.payload))
        return env.payload

    # -- collectives -------------------------------------------------------

    def _collective(self, proc: _Proc, group: Group, op: str, signature: Any,
                    value: Any, finish: Callable[[dict[int, tuple]], Any]) -> Any:
        seq = proc.coll_seq.get(group.id, 0)
        proc.coll_seq[group.id] = seq + 1
        key = (group.id, seq)
        slot = self._slots.get(key)
        if slot is None:
            slot = self._slots[key] = _Slot(op, group.size)
        index = next(i for i, r in enumerate(group.members) if r.gid == proc.rank.gid)
        slot.entries[index] = (op, signature, proc.clock, value)
        if len(slot.entries) == slot.size:
            sigs = {(e[0], repr(e[1])) for e in slot.entries.values()}
            if len(sigs) > 1:
                slot.error = CollectiveMismatch(
                    f"collective mismatch on group {group.id}: {sorted(sigs)}")
            else:
                try:
                    slot.result = finish(slot.entries)
                except MPRTError as exc:
                    slot.error = exc
            slot.done = True
        else:
            self._block(proc, lambda: slot.done, f"{op} on group {group.id}")
        slot.size -= 1
        if slot.size == 0:
            del self._slots[key]
        if slot.error is not None:
            raise type(slot.error)(str(slot.error))
        return slot.result

    def _tree_times(self, group: Group, entry: list[float], up_bytes: list[int],
                    down_bytes: int) -> float:
        """Completion time of a binomial reduce followed by a binomial broadcast.

        Every reduce message from rank ``r`` carries ``up_bytes[r]`` bytes; all
        members leave at the latest broadcast arrival.
        """
        n = group.size
        if n == 1:
            return entry[0]
        kinds = [r.node_kind for r in group.members]
        t = list(entry)
        rounds = math.ceil(math.log2(n))
        for s in range(rounds):
            step = 1 << s
            for r in range(0, n, step << 1):
                src = r + step
                if src < n:
                    c = comm_cost(up_bytes[src], kinds[src], kinds[r], self.cfg)
                    t[r] = max(t[r], t[src]) + c
        d = [0.0] * n
        d[0] = t[0]
        for s in reversed(range(rounds)):
            step = 1 << s
            for r in range(0, n, step << 1):
                dst = r + step
                if dst < n:
                    d[dst] = d[r] + comm_cost(down_bytes, kinds[r], kinds[dst], self.cfg)
        return max(d)

    def _allreduce(self, proc: _Proc, group: Group, op: str, values) -> np.ndarray:
        arr = np.array(values, dtype=np.float64).ravel()
        if op not in ("sum", "max"):
            raise ValueError(f"unsupported reduction {op!r}")

        def finish(entries):
            n = group.size
            acc = [entries[i][3] for i in range(n)]
            lengths = {a.size for a in acc}
            if len(lengths) > 1:
                raise CollectiveMismatch(f"allreduce length mismatch: {sorted(lengths)}")
            combine = np.add if op == "sum" else np.maximum
            step = 1
            while step < n:
                for r in range(0, n, step << 1):
                    if r + step < n:
                        acc[r] = combine(acc[r], acc[r + step])
                step <<= 1
            nbytes = arr.size * 8
            done = self._tree_times(group, [entries[i][2] for i in range(n)],
                                    [nbytes] * n, nbytes)
            return acc[0], done

        result, done = self._collective(proc, group, "allreduce", op, arr.copy(), finish)
        proc.clock = max(proc.clock, done)
        self._log(proc, f"allreduce_{op}", f"g{group.id}", arr.size * 8)
        return result.copy()

    def _barrier(self, proc: _Proc, group: Group) -> None:
        def finish(entries):
            n = group.size
            return self._tree_times(group, [entries[i][2] for i in range(n)], [0] * n, 0)

        done = self._collective(proc, group, "barrier", None, None, finish)
        proc.clock = max(proc.clock, done)
        self._log(proc, "barrier", f"g{group.id}", 0)

    def _allgather(self, proc: _Proc, group: Group, payload: bytes) -> list[bytes]:
        def finish(entries):
            n = group.size
            blocks = [entries[i][3] for i in range(n)]
            sizes = [len(b) for b in blocks]
            done = self._tree_times_gather(group, [entries[i][2] for i in range(n)], sizes)
            return blocks, done

        blocks, done = self._collective(proc, group, "allgather", None, bytes(payload), finish)
        proc.clock = max(proc.clock, done)
        self._log(proc, "allgather", f"g{group.id}", sum(len(b) for b in blocks))
        return list(blocks)

    def _tree_times_gather(self, group: Group, entry: list[float], sizes: list[int]) -> float:
        n = group.size
        if n == 1:
            return entry[0]
        kinds = [r.node_kind for r in group.members]
        t = list(entry)
        acc = list(sizes)
        rounds = math.ceil(math.log2(n))
        for s in range(rounds):
            step = 1 << s
            for r in range(0, n, step << 1):
                src = r + step
                if src < n:
                    t[r] = max(t[r], t[src]) + comm_cost(acc[src], kinds[src], kinds[r], self.cfg)
                    acc[r] += acc[src]
        total = sum(sizes)
        d = [0.0] * n
        d[0] = t[0]
        for s in reversed(range(rounds)):
            step = 1 << s
            for r in range(0, n, step << 1):
                dst = r + step
                if dst < n:
                    d[dst] = d[r] + comm_cost(total, kinds[r], kinds[dst], self.cfg)
        return max(d)

    def _spawn(self, proc: _Proc, group: Group, role: str, n_children: int,
               target: NodeKind, alloc: Allocation, args: tuple) -> "InterComm":
        signature = (role, n_children, target.value, alloc)

        def finish(entries):
            if n_children < 1:
                raise SpawnError("spawn requires n_children >= 1")
            try:
                fn = self._role(role)
            except SpawnError as exc:
                raise SpawnError(str(exc)) from None
            start = max(entries[i][2] for i in range(group.size))
            try:
                children = self._place(n_children, target, alloc, start, fn, args)
            except MPRTError as exc:
                raise SpawnError(str(exc)) from None
            inter_id = next(self._ids)
            for child in children.members:
                self._procs[child.gid].parent = InterComm(
                    self, self._procs[child.gid], inter_id, children, group
                )
            return inter_id, children, start

        inter_id, children, start = self._collective(proc, group, "spawn", signature, None, finish)
        proc.clock = max(proc.clock, start)
        self._log(proc, "spawn", f"w{children.id}", 0)
        return InterComm(self, proc, inter_id, group, children)


class Communicator:
    """A rank's handle on an intra-world group (one handle per rank)."""

    kind = "world"

    def __init__(self, rt: Runtime, proc: _Proc, group: Group):
        self._rt = rt
        self._proc = proc
        self.group = group
        self.id = group.id
        self.members = group.members
        self.rank = next(i for i, r in enumerate(group.members) if r.gid == proc.rank.gid)

    @property
    def size(self) -> int:
        return self.group.size

    def _peer(self, index: int) -> Rank:
        if not 0 <= index < self.size:
            raise MPRTError(f"rank index {index} out of range for size {self.size}")
        return self.members[index]

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        h = self._rt._post_send(self._proc, self.id, self._peer(dst), tag, payload)
        self._rt._wait_all(self._proc, [h])

    def recv(self, src: int, tag: int) -> bytes:
        return self._rt._recv(self._proc, self.id, self._peer(src), tag)

    def isend(self, dst: int, tag: int, payload: bytes) -> RequestHandle:
        return self._rt._post_send(self._proc, self.id, self._peer(dst), tag, payload)

    def irecv(self, src: int, tag: int) -> RequestHandle:
        return self._rt._post_recv(self._proc, self.id, self._peer(src), tag)

    def wait_all(self, handles: Sequence[RequestHandle]) -> list[bytes | None]:
        return self._rt._wait_all(self._proc, handles)

    def allreduce(self, op: str, values) -> np.ndarray:
        return self._rt._allreduce(self._proc, self.group, op, values)

    def allgather(self, payload: bytes) -> list[bytes]:
        return self._rt._allgather(self._proc, self.group, payload)

    def barrier(self) -> None:
        self._rt._barrier(self._proc, self.group)

    def spawn(self, role: str, n_children: int, target: NodeKind, alloc: Allocation,
              args: tuple = ()) -> "InterComm":
        return self._rt._spawn(self._proc, self.group, role, n_children, target, alloc, tuple(args))


class InterComm:
    """Connection between a local group and a remote group (spawner and children)."""

    kind = "inter"

    def __init__(self, rt: Runtime, proc: _Proc, inter_id: int, local: Group, remote: Group):
        self._rt = rt
        self._proc = proc
        self.id = inter_id
        self.local_group = local
        self.remote_group = remote

    @property
    def local_size(self) -> int:
        return self.local_group.size

    @property
    def remote_size(self) -> int:
        return self.remote_group.size

    @property
    def rank(self) -> int:
        return next(i for i, r in enumerate(self.local_group.members) if r.gid == self._proc.rank.gid)

    def _peer(self, index: int) -> Rank:
        if not 0 <= index < self.remote_size:
            raise MPRTError(f"remote index {index} out of range for size {self.remote_size}")
        return self.remote_group.members[index]

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        h = self._rt._post_send(self._proc, self.id, self._peer(dst), tag, payload)
        self._rt._wait_all(self._proc, [h])

    def recv(self, src: int, tag: int) -> bytes:
        return self._rt._recv(self._proc, self.id, self._peer(src), tag)

    def isend(self, dst: int, tag: int, payload: bytes) -> RequestHandle:
        return self._rt._post_send(self._proc, self.id, self._peer(dst), tag, payload)

    def irecv(self, src: int, tag: int) -> RequestHandle:
        return self._rt._post_recv(self._proc, self.id, self._peer(src), tag)

    def wait_all(self, handles: Sequence[RequestHandle]) -> list[bytes | None]:
        return self._rt._wait_all(self._proc, handles)


class RankContext:
    """What a role function sees: its world, its clock, and the cost model."""

    def __init__(self, rt: Runtime, proc: _Proc):
        self._rt = rt
        self._proc = proc
        self.world = Communicator(rt, proc, rt.world(proc.rank.world_id))
        self.alloc = proc.alloc
        # pure compute seconds charged so far, per solver
        self.busy = {Solver.FIELD: 0.0, Solver.PARTICLE: 0.0}

    @property
    def rank(self) -> Rank:
        return self._proc.rank

    @property
    def kind(self) -> NodeKind:
        return self._proc.rank.node_kind

    @property
    def cfg(self) -> PlatformConfig:
        return self._rt.cfg

    @property
    def clock(self) -> float:
        return self._proc.clock

    def compute(self, work: float, solver: Solver) -> float:
        """Charge ``work`` units of solver work; returns the charged seconds."""
        cost = compute_cost(work, self.kind, solver, self._rt.cfg)
        self._proc.clock += cost
        self.busy[solver] += cost
        return cost

    def charge(self, seconds: float, op: str = "charge") -> None:
        """Charge an explicit modeled overhead (e.g. the cross-module exchange surcharge)."""
        if seconds < 0:
            raise ValueError("cannot charge negative time")
        self._proc.clock += seconds
        self._rt._log(self._proc, op, "-", 0)

    def get_parent(self) -> InterComm | None:
        return self._proc.parent


def launch(cfg: PlatformConfig, role: str, n: int, kind: NodeKind, alloc: Allocation,
           *args, trace: bool = False, ranks_per_node: int = 1) -> Runtime:
    """Convenience wrapper: create a runtime, start one world, run to completion."""
    rt = Runtime(cfg, ranks_per_node=ranks_per_node, trace=trace)
    rt.init_world(role, n, kind, alloc, *args)
    rt.run()
    return rt
