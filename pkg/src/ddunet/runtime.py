"""Multi-worker execution of DDU-Net forward/backward passes.

Workers stand in for devices. Each owns the clone passes for the subimages
assigned to it; the coordinator owns the communication network, the loss
and the optimizer. Per pass the protocol is::

    forward:  parallel encode -> gather F maps -> comm net -> scatter -> parallel decode
    backward: parallel decoder backward -> gather grads -> comm net backward
              -> scatter grads -> parallel encoder backward -> ordered reduction

Everything that crosses the worker/coordinator boundary is copied, which
keeps the communication accounting honest. Clone parameter gradients are
collected per subimage and summed by the coordinator in row-major order, so
results are bit-identical for every worker count and assignment.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .layers import Context
from .model import DDUNet, commit_contexts
from .partition import PartitionLayout, partition, stitch
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


class WorkerError(RuntimeError):
    """A worker task failed; the original exception is chained."""


@dataclass(frozen=True)
class RuntimePlan:
    workers: int
    assignment: tuple[int, ...]  # subimage index (row-major) -> worker id

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if any(not 0 <= w < self.workers for w in self.assignment):
            raise ValueError("assignment refers to a non-existent worker")

    @property
    def num_cells(self) -> int:
        return len(self.assignment)

    def cells_of(self, worker: int) -> list[int]:
        return [k for k, w in enumerate(self.assignment) if w == worker]


def thread_cap() -> int | None:
    value = os.environ.get("DDU_THREADS")
    return int(value) if value else None


def make_plan(layout: PartitionLayout, workers: int | None = None) -> RuntimePlan:
    """Round-robin assignment of the layout's cells; default one worker per cell."""
    n = layout.num_cells
    w = n if workers is None else workers
    cap = thread_cap()
    if cap is not None:
        w = min(w, cap)
    w = max(1, min(w, n))
    return RuntimePlan(w, tuple(k % w for k in range(n)))


@dataclass
class _CloneState:
    ctx: Context
    bottleneck: Tensor | None = None
    skips: list[Tensor] = field(default_factory=list)
    bottleneck_in: Tensor | None = None
    skips_in: list[Tensor] = field(default_factory=list)
    returned: Tensor | None = None
    logits: Tensor | None = None
    param_grads: dict = field(default_factory=dict)


class Runtime:
    """Runs a model over a fixed :class:`RuntimePlan`.

    Use as a context manager (or call :meth:`close`) to release the
    thread pool.
    """

    def __init__(self, model: DDUNet, plan: RuntimePlan):
        self.model = model
        self.plan = plan
        self._pool = ThreadPoolExecutor(plan.workers, thread_name_prefix="ddu-worker") if plan.workers > 1 else None
        self._pass = None
        self.weights_version = 0
        self._worker_version = [0] * plan.workers
        self.comm_values_sent = 0  # values crossing the boundary in the current step

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- fork/join -----------------------------------------------------------
    def _parallel(self, fn, args: dict[int, object]) -> dict[int, object]:
        """Run ``fn(k, args[k])`` for every cell on its worker; barrier at the end."""

        def work(worker: int):
            if self._worker_version[worker] != self.weights_version:
                raise WorkerError(f"worker {worker} holds stale weights")
            return {k: fn(k, args[k]) for k in self.plan.cells_of(worker)}

        results: dict[int, object] = {}
        try:
            if self._pool is None:
                for w in range(self.plan.workers):
                    results.update(work(w))
            else:
                futures = [self._pool.submit(work, w) for w in range(self.plan.workers)]
                for f in futures:
                    results.update(f.result())
        except WorkerError:
            raise
        except Exception as exc:
            raise WorkerError(f"worker task failed: {exc}") from exc
        return results

    def _send(self, arr: np.ndarray) -> np.ndarray:
        self.comm_values_sent += arr.size
        return arr.copy()

    # -- forward ------------------------------------------------------------
    def run_forward(self, image: Tensor, layout: PartitionLayout, ctx: Context | None = None) -> Tensor:
        model = self.model
        if layout.num_cells != self.plan.num_cells:
            raise ValueError(f"plan covers {self.plan.num_cells} cells, layout has {layout.num_cells}")
        model.check_layout(image.shape, layout)
        ctx = ctx or Context()
        self.comm_values_sent = 0
        cells = layout.cells()
        sub = partition(Tensor(image.data), layout)
        states = {k: _CloneState(ctx.fork(k)) for k in range(len(cells))}
        comm_ctx = ctx.fork(len(cells))
        F = model.config.comm_maps

        def encode(k, x):
            st = states[k]
            b, skips = model.encode(x, st.ctx)
            st.bottleneck, st.skips = b, skips
            st.bottleneck_in = b.detach(requires_grad=True)
            st.skips_in = [s.detach(requires_grad=True) for s in skips]
            return b.data[:, b.shape[1] - F:] if F else None

        outgoing = self._parallel(encode, {k: sub[i][j] for k, (i, j) in enumerate(cells)})

        # gather -> comm net -> scatter (coordinator)
        if F:
            received = {k: Tensor(self._send(outgoing[k]), requires_grad=True) for k in range(len(cells))}
            grid = [[received[i * layout.M + j] for j in range(layout.M)] for i in range(layout.N)]
            out = model.communicate(grid, layout, comm_ctx)
            comm_out = {i * layout.M + j: out[i][j] for i, j in cells}
            back = {k: self._send(comm_out[k].data) for k in comm_out}
        else:
            received, comm_out, back = {}, {}, {k: None for k in range(len(cells))}

        def decode(k, returned):
            st = states[k]
            q = Tensor(returned, requires_grad=True) if returned is not None else None
            st.returned = q
            kept, _ = model.split_bottleneck(st.bottleneck_in)
            z = model.merge_bottleneck(kept, q)
            st.logits = model.decode(z, st.skips_in, st.ctx)
            return st.logits.data

        sub_logits = self._parallel(decode, back)
        commit_contexts(comm_ctx, [states[k].ctx for k in range(len(cells))])

        leaves = {k: Tensor(sub_logits[k], requires_grad=True) for k in sub_logits}
        grid = [[leaves[i * layout.M + j] for j in range(layout.M)] for i in range(layout.N)]
        self._pass = dict(states=states, received=received, comm_out=comm_out, leaves=leaves, done=False)
        return stitch(grid, layout)

    # -- backward -----------------------------------------------------------
    def run_backward(self, loss: Tensor) -> None:
        """Back-propagate ``loss`` through the last forward pass into parameter grads."""
        if self._pass is None or self._pass["done"]:
            raise RuntimeError("run_backward needs a preceding run_forward")
        p = self._pass
        p["done"] = True
        states, leaves, F = p["states"], p["leaves"], self.model.config.comm_maps
        backward(loss)
        grads_in = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(leaves[k].data)
                    for k in leaves}

        def decoder_backward(k, g):
            st = states[k]
            backward([st.logits], [g], param_grads=st.param_grads)
            return st.returned.grad if st.returned is not None else None

        returned_grads = self._parallel(decoder_backward, grads_in)

        # comm net backward at the rendezvous
        if F:
            ks = sorted(p["comm_out"])
            gs = []
            for k in ks:
                g = returned_grads[k]
                gs.append(self._send(g) if g is not None else np.zeros_like(p["comm_out"][k].data))
            backward([p["comm_out"][k] for k in ks], gs)
            sent_grads = {}
            for k in ks:
                g = p["received"][k].grad
                sent_grads[k] = self._send(g if g is not None else np.zeros_like(p["received"][k].data))
        else:
            sent_grads = {k: None for k in states}

        def encoder_backward(k, comm_grad):
            st = states[k]
            b = st.bottleneck_in
            gb = b.grad.copy() if b.grad is not None else np.zeros_like(b.data)
            if comm_grad is not None:
                gb[:, gb.shape[1] - F:] += comm_grad
            roots = [st.bottleneck, *st.skips]
            grads = [gb] + [s.grad if s.grad is not None else np.zeros_like(s.data) for s in st.skips_in]
            backward(roots, grads, param_grads=st.param_grads)
            return st.param_grads

        local_grads = self._parallel(encoder_backward, sent_grads)
        # central accumulation, fixed row-major order
        for k in sorted(local_grads):
            for param, g in local_grads[k].items():
                param.grad = param.grad + g
        self._pass = None

    def broadcast_weights(self) -> None:
        """Barrier after an optimizer step: every worker adopts the new weights.

        Workers share the coordinator's parameter storage, so this only
        advances the version every worker must hold before the next pass.
        """
        self.weights_version += 1
        for w in range(self.plan.workers):
            self._worker_version[w] = self.weights_version
