"""Fork-join execution of per-block work.

Every phase of an outer iteration (assembly, factorization, first solve,
each inner step) runs one task per block on a thread pool and ends with a
barrier.  Results come back in block order, and any reduction over blocks is
done by the caller in that fixed order, so outputs do not depend on the
number of workers.  Threads are enough here because the heavy kernels
(sparse products, SuperLU factor/solve) run in compiled code.
"""
from __future__ import annotations

import os
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .errors import PilmError

__all__ = ["WorkPlan", "WorkerPool", "TaskError", "run_phase", "default_workers",
           "simulate_communication_volume", "PHASES"]

PHASES = ("assemble", "coupling", "factor", "first_solve", "inner_step")


class TaskError(PilmError, RuntimeError):
    def __init__(self, phase, block, cause):
        self.phase = phase
        self.block = block
        super().__init__(f"task for block {block} failed in phase '{phase}': {cause!r}")


@dataclass
class WorkPlan:
    phase: str
    tasks: Sequence[Callable[[], Any]]

    @property
    def K(self):
        return len(self.tasks)


def default_workers(K):
    return max(1, min(int(K), os.cpu_count() or 1))


def _call(plan, i):
    try:
        return plan.tasks[i]()
    except PilmError:
        raise
    except Exception as exc:  # noqa: BLE001 - rewrapped with the block index
        raise TaskError(plan.phase, i, exc) from exc


class WorkerPool:
    """Thread pool that runs :class:`WorkPlan` phases and times them."""

    def __init__(self, workers=1):
        self.workers = max(1, int(workers))
        self._executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self.timings = defaultdict(float)

    def run(self, plan):
        t0 = time.perf_counter()
        if self._executor is None or plan.K <= 1:
            out = [_call(plan, i) for i in range(plan.K)]
        else:
            futures = [self._executor.submit(_call, plan, i) for i in range(plan.K)]
            out = [f.result() for f in futures]
        self.timings[plan.phase] += time.perf_counter() - t0
        return out

    def map(self, phase, fn, K):
        return self.run(WorkPlan(phase, [lambda i=i: fn(i) for i in range(K)]))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_phase(plan, workers=1):
    """Run one phase on a throwaway pool and return the outputs in block order."""
    with WorkerPool(workers) as pool:
        return pool.run(plan)


def simulate_communication_volume(part, n_iters, ell, bytes_per_value=8):
    """Values exchanged per inner step under the two delivery strategies.

    ``broadcast``: the master sends the whole aggregated vector to every
    node, ``K * n`` values.  ``targeted``: node ``i`` receives only the
    blocks of its neighbours, ``sum_i sum_{j in N_i} n_j`` values.  Totals
    assume ``ell`` exchanges per outer iteration.
    """
    sizes = [int(v) for v in part.block_sizes]
    n = sum(sizes)
    K = part.K
    broadcast = K * n if K > 1 else 0
    targeted = sum(sizes[j] for i in range(K) for j in part.neighbors[i])
    steps = int(n_iters) * int(ell)
    return {
        "per_inner_step": {"broadcast": broadcast, "targeted": targeted},
        "total_values": {"broadcast": broadcast * steps, "targeted": targeted * steps},
        "total_bytes": {"broadcast": broadcast * steps * bytes_per_value,
                        "targeted": targeted * steps * bytes_per_value},
    }
