"""Simulated driver/worker cluster with round and byte accounting.

The driver talks to workers only through ``broadcast`` and ``reduce``. Each
call is one communication round no matter how many workers take part.
Worker computations receive a ``WorkerContext`` holding their local
objective, the broadcasts they have received and a private scratch dict;
the driver never sees shard data.

Payloads are dicts of named vectors and scalars. Every message is checked
against an O(d) budget of ``max_vectors * d`` floats plus a small scalar
allowance.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ProtocolViolation
from .problems import local_objective

BYTES_PER_FLOAT = 8
DEFAULT_MAX_VECTORS = 3
SCALAR_ALLOWANCE = 64


def _payload_floats(payload):
    total = 0
    for val in payload.values():
        total += np.size(val) if val is not None else 0
    return int(total)


@dataclass(frozen=True)
class LedgerEntry:
    iteration: int
    label: str
    direction: str  # "broadcast", "reduce", "skipped" or "monitor"
    message_bytes: int  # largest single message
    messages: int
    rounds: int


@dataclass(frozen=True)
class LedgerSnapshot:
    rounds: int
    bytes: int
    entries: tuple

    def rounds_per_iteration(self):
        out = {}
        for e in self.entries:
            out[e.iteration] = out.get(e.iteration, 0) + e.rounds
        return out

    def labels(self, iteration=None):
        return [e.label for e in self.entries if iteration is None or e.iteration == iteration]


class CommLedger:
    """Running count of rounds and bytes with a per-call breakdown."""

    def __init__(self):
        self.rounds = 0
        self.bytes = 0
        self.entries = []
        self.iteration = 0

    def begin_iteration(self, t):
        self.iteration = int(t)

    def record(self, label, direction, message_bytes, messages):
        rounds = 1 if direction in ("broadcast", "reduce") else 0
        self.rounds += rounds
        self.bytes += message_bytes * messages
        self.entries.append(LedgerEntry(self.iteration, label, direction, int(message_bytes),
                                        int(messages), rounds))

    def note_skipped(self, label):
        """Record a round that the protocol avoided (no cost)."""
        self.record(label, "skipped", 0, 0)

    def snapshot(self):
        return LedgerSnapshot(self.rounds, self.bytes, tuple(self.entries))


class WorkerContext:
    """What a worker computation can see: its own f_i, its inbox and its scratch state."""

    __slots__ = ("index", "objective", "inbox", "state", "seed")

    def __init__(self, index, objective, seed):
        self.index = index
        self.objective = objective
        self.inbox = {}
        self.state = {}
        self.seed = seed

    def rng(self, *stream):
        """Deterministic generator keyed by (cluster seed, worker index, *stream)."""
        return np.random.default_rng([self.seed, self.index, *[int(s) for s in stream]])


def _thread_cap():
    env = os.environ.get("DINGO_THREADS", "")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


class ClusterEnv:
    """m workers, each owning one shard of a finite-sum objective.

    Args:
        objective: the Objective shared by all workers.
        shards: one Shard per worker.
        seed: root seed for worker-side randomness.
        threads: parallelism cap (default: DINGO_THREADS or the CPU count).
        max_vectors: default O(d) budget c, in vectors of length d per message.
    """

    def __init__(self, objective, shards, seed=0, threads=None, max_vectors=DEFAULT_MAX_VECTORS):
        if not shards:
            raise ProtocolViolation("a cluster needs at least one worker")
        self.m = len(shards)
        self.dim = objective.dim
        self.max_vectors = max_vectors
        self.ledger = CommLedger()
        self.__workers = [WorkerContext(i, local_objective(objective, s), seed)
                          for i, s in enumerate(shards)]
        cap = threads if threads is not None else _thread_cap()
        self._threads = max(1, min(int(cap), self.m))

    def _targets(self, targets):
        if targets is None:
            return list(range(self.m))
        out = sorted(set(int(i) for i in targets))
        if out and (out[0] < 0 or out[-1] >= self.m):
            raise ProtocolViolation(f"worker index out of range: {out}")
        return out

    def _check_budget(self, label, floats, max_vectors):
        budget = (max_vectors if max_vectors is not None else self.max_vectors) * self.dim
        if floats > budget + SCALAR_ALLOWANCE:
            raise ProtocolViolation(
                f"{label}: message of {floats} floats exceeds the O(d) budget of {budget}")

    def broadcast(self, label, payload, targets=None, max_vectors=None):
        """Send ``payload`` (dict of vectors/scalars) to the target workers. One round."""
        idx = self._targets(targets)
        if not idx:
            return
        floats = _payload_floats(payload)
        self._check_budget(label, floats, max_vectors)
        frozen = {}
        for key, val in payload.items():
            if isinstance(val, np.ndarray):
                val = val.copy()
                val.setflags(write=False)
            frozen[key] = val
        for i in idx:
            self.__workers[i].inbox.update(frozen)
        self.ledger.record(label, "broadcast", floats * BYTES_PER_FLOAT, len(idx))

    def reduce(self, label, fn, targets=None, max_vectors=None, vector_keys=()):
        """Run ``fn(ctx) -> dict`` on the target workers and gather the results. One round.

        Entries named in ``vector_keys`` must be vectors of length d (or
        stacks of them, shape (k, d)).

        Returns:
            List of the workers' result dicts in worker-index order (empty list
            and no round when ``targets`` is empty).
        """
        idx = self._targets(targets)
        if not idx:
            return []
        workers = [self.__workers[i] for i in idx]
        if self._threads > 1 and len(workers) > 1:
            with ThreadPoolExecutor(max_workers=self._threads) as pool:
                results = list(pool.map(fn, workers))
        else:
            results = [fn(w) for w in workers]
        sizes = []
        for i, res in zip(idx, results):
            if not isinstance(res, dict):
                raise ProtocolViolation(f"{label}: worker {i} must return a dict")
            for key in vector_keys:
                shape = np.shape(res.get(key))
                if not shape or shape[-1] != self.dim or len(shape) > 2:
                    raise DimensionError(f"{label}: worker {i} returned {key} of shape {shape}")
            floats = _payload_floats(res)
            self._check_budget(label, floats, max_vectors)
            sizes.append(floats)
        self.ledger.record(label, "reduce", max(sizes) * BYTES_PER_FLOAT, len(idx))
        return results

    def monitor(self, label, fn):
        """Evaluate ``fn`` on every worker for instrumentation only (no round charged).

        Used to log the full objective and gradient norm of methods that
        never compute them as part of their protocol (mini-batch SGD).
        """
        results = [fn(w) for w in self.__workers]
        self.ledger.record(label, "monitor", 0, 0)
        return results

    def ledger_report(self):
        return self.ledger.snapshot()


def fixed_order_sum(vectors):
    """Sum in list order (worker-index order), so results are bit-reproducible."""
    it = iter(vectors)
    acc = np.array(next(it), dtype=np.float64, copy=True)
    for v in it:
        acc += v
    return acc


def fixed_order_mean(vectors, m=None):
    """(1/m) * fixed-order sum; ``m`` defaults to the number of vectors."""
    vectors = list(vectors)
    m = len(vectors) if m is None else m
    return fixed_order_sum(vectors) / m


def ledger_report(env):
    return env.ledger_report()
