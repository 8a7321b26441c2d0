"""Stage-level continuous batching."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from ..errors import SimulationComplete
from .workload import Request


@dataclass
class StageBatch:
    stage_index: int
    decoding: list = field(default_factory=list)
    prefilling: list = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "mixed" if self.prefilling else "decode_only"

    @property
    def size(self) -> int:
        return len(self.decoding) + len(self.prefilling)

    @property
    def empty(self) -> bool:
        return not self.decoding and not self.prefilling

    @property
    def tokens(self) -> int:
        return len(self.decoding) + sum(r.l_in for r in self.prefilling)


def form_stage(clock: float, wait_queue: deque, running: list, max_batch: int,
               stage_index: int = 0, closed_loop: bool = False) -> StageBatch:
    """Evict finished requests, then admit arrived ones into free slots.

    ``running`` is updated in place.  Admitted requests prefill in this stage.
    In closed-loop mode a request is issued at the moment it is admitted, so
    its arrival time is moved up to ``clock``.  Returns an empty batch when
    nothing is runnable yet; raises :class:`SimulationComplete` when both the
    queue and the running set are empty.
    """
    running[:] = [r for r in running if not r.done]
    if not running and not wait_queue:
        raise SimulationComplete()
    decoding = list(running)
    admitted = []
    while wait_queue and len(running) < max_batch and wait_queue[0].arrival_time <= clock:
        req: Request = wait_queue.popleft()
        if closed_loop:
            req.arrival_time = max(req.arrival_time, clock)
        req.admit_time = clock
        running.append(req)
        admitted.append(req)
    return StageBatch(stage_index, decoding, admitted)
