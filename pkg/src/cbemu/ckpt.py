"""Multi-level checkpoint/restart with task-local container files.

Every node bundles the blocks of all its ranks for one epoch into a single
container.  Levels widen the failure scope they survive:

* ``LOCAL``  container in the node's own store,
* ``BUDDY``  plus a replica in the store of node ``(k + 1) % n``,
* ``GLOBAL`` plus a copy in the shared global store.

Node-local NVM and the global file system are emulated as directories.

Container layout (little-endian)::

    b"CBCK" | u32 version | u32 count | count x (u32 rank, u64 offset, u64 length, u64 checksum) | payloads
"""

from __future__ import annotations

import enum
import logging
import math
import os
import re
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

MAGIC = b"CBCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_ENTRY = struct.Struct("<IQQQ")
RETAIN = 2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class CheckpointError(RuntimeError):
    pass


class CorruptBlock(CheckpointError):
    def __init__(self, rank: int, msg: str):
        super().__init__(msg)
        self.rank = rank


class CheckpointLevel(enum.IntEnum):
    LOCAL = 1
    BUDDY = 2
    GLOBAL = 3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


@dataclass(frozen=True)
class CheckpointBlock:
    rank: int
    epoch: int
    payload: bytes
    checksum: int = -1

    def __post_init__(self) -> None:
        if self.checksum == -1:
            object.__setattr__(self, "checksum", fnv1a64(self.payload))
        elif self.checksum != fnv1a64(self.payload):
            raise CorruptBlock(self.rank, f"checksum mismatch for rank {self.rank}")


def container_pack(blocks: list[CheckpointBlock]) -> bytes:
    """One container image holding every block (all of the same epoch)."""
    if len({b.epoch for b in blocks}) > 1:
        raise CheckpointError("blocks of one container must share an epoch")
    ranks = [b.rank for b in blocks]
    if len(set(ranks)) != len(ranks):
        raise CheckpointError("duplicate rank in container")
    offset = _HEAD.size + _ENTRY.size * len(blocks)
    index, body = [], []
    for b in blocks:
        index.append(_ENTRY.pack(b.rank, offset, len(b.payload), b.checksum))
        body.append(b.payload)
        offset += len(b.payload)
    return _HEAD.pack(MAGIC, VERSION, len(blocks)) + b"".join(index) + b"".join(body)


def container_unpack(data: bytes, epoch: int = 0) -> list[CheckpointBlock]:
    """Inverse of :func:`container_pack`; corrupt payloads name their rank."""
    if len(data) < _HEAD.size:
        raise CheckpointError("truncated container header")
    magic, version, count = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad container magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    end_index = _HEAD.size + _ENTRY.size * count
    if len(data) < end_index:
        raise CheckpointError("truncated container index")
    blocks = []
    for i in range(count):
        rank, off, length, checksum = _ENTRY.unpack_from(data, _HEAD.size + i * _ENTRY.size)
        if off < end_index or off + length > len(data):
            raise CheckpointError(f"block of rank {rank} lies outside the file")
        payload = data[off:off + length]
        if fnv1a64(payload) != checksum:
            raise CorruptBlock(rank, f"checksum mismatch for rank {rank}")
        blocks.append(CheckpointBlock(rank, epoch, payload, checksum))
    return blocks


@dataclass(frozen=True)
class FailureModel:
    node_mtbf: float
    checkpoint_cost: float

    def __post_init__(self) -> None:
        if not (self.node_mtbf > 0 and self.checkpoint_cost > 0):
            raise ValueError("node_mtbf and checkpoint_cost must be positive")


def plan_interval(fm: FailureModel, n_nodes: int) -> float:
    """Young's optimal interval ``sqrt(2 C MTBF_sys)``, ``MTBF_sys = node_mtbf / n``."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    return math.sqrt(2.0 * fm.checkpoint_cost * fm.node_mtbf / n_nodes)


@dataclass
class CheckpointSet:
    epoch: int
    level: CheckpointLevel
    # level -> node -> container path
    locations: dict[CheckpointLevel, dict[int, Path]] = field(default_factory=dict)
    complete: dict[CheckpointLevel, bool] = field(default_factory=dict)


class CheckpointStore:
    """Per-node directories plus a global directory under ``root``.

    ``rank_nodes[r]`` is the node hosting rank ``r``; node indices run
    ``0 .. n_nodes - 1`` and buddies are assigned cyclically.
    """

    def __init__(self, root: str | os.PathLike, rank_nodes: list[int]):
        if not rank_nodes:
            raise ValueError("at least one rank is required")
        self.root = Path(root)
        self.rank_nodes = list(rank_nodes)
        self.n_nodes = max(rank_nodes) + 1
        if set(rank_nodes) != set(range(self.n_nodes)):
            raise ValueError("node indices must be contiguous from 0")
        self._lock = threading.Lock()
        self.catalog: dict[int, CheckpointSet] = {}
        for k in range(self.n_nodes):
            self.node_dir(k).mkdir(parents=True, exist_ok=True)
        self.global_dir().mkdir(parents=True, exist_ok=True)

    def node_dir(self, k: int) -> Path:
        return self.root / f"node{k}"

    def global_dir(self) -> Path:
        return self.root / "global"

    def buddy(self, k: int) -> int:
        return (k + 1) % self.n_nodes

    def local_path(self, k: int, epoch: int) -> Path:
        return self.node_dir(k) / f"epoch{epoch}.cbck"

    def buddy_path(self, k: int, epoch: int) -> Path:
        # the copy of node k's container, stored on its buddy
        return self.node_dir(self.buddy(k)) / f"buddy_of_{k}_epoch{epoch}.cbck"

    def global_path(self, k: int, epoch: int) -> Path:
        return self.global_dir() / f"node{k}_epoch{epoch}.cbck"

    def _paths(self, level: CheckpointLevel, k: int, epoch: int) -> Path:
        return {
            CheckpointLevel.LOCAL: self.local_path,
            CheckpointLevel.BUDDY: self.buddy_path,
            CheckpointLevel.GLOBAL: self.global_path,
        }[level](k, epoch)

    def ckpt_write(self, state: dict[int, bytes], epoch: int,
                   level: CheckpointLevel) -> CheckpointSet:
        """Write every rank's image for ``epoch`` at ``level`` (and the levels below)."""
        if set(state) != set(range(len(self.rank_nodes))):
            raise CheckpointError("every participating rank must provide its image")
        level = CheckpointLevel(level)
        if level == CheckpointLevel.BUDDY and self.n_nodes == 1:
            log.warning("single node cannot hold a buddy copy; writing Global instead")
            level = CheckpointLevel.GLOBAL
        with self._lock:
            cs = CheckpointSet(epoch, level)
            for k in range(self.n_nodes):
                blocks = [CheckpointBlock(r, epoch, state[r])
                          for r in sorted(state) if self.rank_nodes[r] == k]
                image = container_pack(blocks)
                for lvl in CheckpointLevel:
                    if lvl > level or (lvl == CheckpointLevel.BUDDY and self.n_nodes == 1):
                        continue
                    path = self._paths(lvl, k, epoch)
                    try:
                        _atomic_write(path, image)
                    except OSError as exc:
                        raise CheckpointError(f"writing {path}: {exc}") from exc
                    cs.locations.setdefault(lvl, {})[k] = path
            for lvl in cs.locations:
                cs.complete[lvl] = True
            self.catalog[epoch] = cs
            self._prune()
            return cs

    def _prune(self) -> None:
        """Keep the newest ``RETAIN`` epochs of every level."""
        for lvl in CheckpointLevel:
            epochs = sorted(e for e, cs in self.catalog.items() if lvl in cs.locations)
            for e in epochs[:-RETAIN]:
                for path in self.catalog[e].locations.pop(lvl).values():
                    path.unlink(missing_ok=True)
                self.catalog[e].complete.pop(lvl, None)
        for e in [e for e, cs in self.catalog.items() if not cs.locations]:
            del self.catalog[e]

    def destroy_node(self, k: int) -> None:
        """Emulate losing node ``k``'s local storage."""
        d = self.node_dir(k)
        for p in d.glob("*.cbck"):
            p.unlink()

    def _read_node(self, k: int, epoch: int, level: CheckpointLevel) -> list[CheckpointBlock] | None:
        path = self._paths(level, k, epoch)
        try:
            data = path.read_bytes()
        except OSError:
            return None
        try:
            return container_unpack(data, epoch)
        except CheckpointError as exc:
            log.warning("ignoring unreadable container %s: %s", path, exc)
            return None

    def recover_epoch(self, epoch: int) -> tuple[dict[int, bytes], dict[int, CheckpointLevel]] | None:
        """Rank images of ``epoch`` from the cheapest surviving copy per node."""
        images: dict[int, bytes] = {}
        used: dict[int, CheckpointLevel] = {}
        for k in range(self.n_nodes):
            for lvl in CheckpointLevel:
                blocks = self._read_node(k, epoch, lvl)
                if blocks is not None:
                    images.update((b.rank, b.payload) for b in blocks)
                    used[k] = lvl
                    break
            else:
                return None
        if set(images) != set(range(len(self.rank_nodes))):
            return None
        return images, used

    def ckpt_restart_latest(self, failed_nodes: set[int] | frozenset = frozenset()
                            ) -> tuple[int, dict[int, bytes]]:
        """Newest epoch recoverable after ``failed_nodes`` lost their local stores."""
        for k in failed_nodes:
            self.destroy_node(k)
        for epoch in sorted(self._epochs_on_disk(), reverse=True):
            got = self.recover_epoch(epoch)
            if got is not None:
                return epoch, got[0]
        raise CheckpointError("no recoverable checkpoint epoch")

    def _epochs_on_disk(self) -> set[int]:
        pat = re.compile(r"epoch(\d+)\.cbck$")
        found = set()
        for p in self.root.rglob("*.cbck"):
            m = pat.search(p.name)
            if m:
                found.add(int(m.group(1)))
        return found


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class CheckpointAgent:
    """Collective, interval-driven checkpointing for one world of ranks.

    Each rank calls :meth:`step_end` after every step.  The first rank to
    report a step decides, from its virtual clock, whether an interval
    boundary has passed; the others follow that decision so an epoch always
    collects every rank.  The epoch number is the step number.
    """

    def __init__(self, store: CheckpointStore, level: CheckpointLevel, interval: float):
        if not interval > 0:
            raise ValueError("checkpoint interval must be positive")
        self.store = store
        self.level = CheckpointLevel(level)
        self.interval = interval
        self.size = len(store.rank_nodes)
        self._lock = threading.Lock()
        self._decided: dict[int, bool] = {}
        self._pending: dict[int, dict[int, bytes]] = {}
        self._next = interval
        self.epochs: list[int] = []

    def step_end(self, rank: int, step: int, clock: float, image) -> None:
        """``image`` is a zero-argument callable returning this rank's bytes."""
        with self._lock:
            if step not in self._decided:
                due = clock >= self._next
                if due:
                    self._next = (math.floor(clock / self.interval) + 1) * self.interval
                self._decided[step] = due
            if not self._decided[step]:
                return
            images = self._pending.setdefault(step, {})
            images[rank] = image()
            if len(images) == self.size:
                self.store.ckpt_write(self._pending.pop(step), step, self.level)
                self.epochs.append(step)
