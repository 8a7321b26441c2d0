"""Expert co-processing: lookup tables and the sorted-prefix partitioner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..cost import ExecUnit, exec_units, kernel_times, stack_pim_unit
from ..hardware import DeviceConfig
from ..model import ModelConfig, moe_expert_cost

EXACT_UP_TO = 4096
COARSE_STRIDE = 64
SMALL_N = 16


class ExpertLUT:
    """Expert execution time by token count, per unit, for one expert shard.

    Entries are exact up to ``exact_up_to`` tokens and linearly interpolated
    between multiples of ``stride`` above that.  The PIM entry is the time of
    the largest per-stack column slice.  A unit missing on the device gets
    infinite times.
    """

    def __init__(self, model: ModelConfig, device: DeviceConfig, fraction: float = 1.0,
                 max_tokens: int = EXACT_UP_TO, exact_up_to: int = EXACT_UP_TO,
                 stride: int = COARSE_STRIDE, xpu: ExecUnit | None = None,
                 pim: ExecUnit | None = None):
        self.model = model
        self.device = device
        self.fraction = fraction
        self.exact_up_to = exact_up_to
        self.stride = stride
        units = exec_units(device)
        self.units = {"xpu": xpu or units.get("xpu"),
                      "pim": pim or (stack_pim_unit(device) if device.has_pim else None)}
        self.shard_cols = max(1, math.ceil(model.intermediate * fraction))
        self.stack_cols = math.ceil(self.shard_cols / device.n_stacks)
        n = np.arange(exact_up_to + 1)
        self._table = {kind: self._exact(kind, n) for kind in ("xpu", "pim")}
        self._coarse: dict[tuple[str, int], float] = {}
        if max_tokens > exact_up_to:
            grid = np.arange(exact_up_to, max_tokens + stride, stride)
            for kind in ("xpu", "pim"):
                for g, t in zip(grid, self._exact(kind, grid)):
                    self._coarse[(kind, int(g))] = float(t)

    def _profile_arrays(self, kind: str, n: np.ndarray):
        m = self.model
        cols = self.stack_cols if kind == "pim" else self.shard_cols
        one = moe_expert_cost(1, m.hidden, cols, m.precision, m.ffn_matrices)
        flops = one.flops * n
        nbytes = np.where(n > 0, one.weight_bytes + one.act_bytes * n, 0.0)
        return flops, nbytes

    def _exact(self, kind: str, n: np.ndarray) -> np.ndarray:
        unit = self.units[kind]
        n = np.asarray(n)
        if unit is None:
            return np.full(n.shape, np.inf)
        flops, nbytes = self._profile_arrays(kind, n)
        return kernel_times(flops, nbytes, unit)

    def exact(self, kind: str, tokens: int) -> float:
        return float(self._exact(kind, np.array([tokens]))[0])

    def _grid(self, kind: str, g: int) -> float:
        key = (kind, g)
        if key not in self._coarse:
            self._coarse[key] = self.exact(kind, g)
        return self._coarse[key]

    def __call__(self, kind: str, tokens: int) -> float:
        if tokens <= self.exact_up_to:
            return float(self._table[kind][tokens])
        lo = (tokens - self.exact_up_to) // self.stride * self.stride + self.exact_up_to
        if lo == tokens:
            return self._grid(kind, lo)
        hi = lo + self.stride
        a, b = self._grid(kind, lo), self._grid(kind, hi)
        return a + (b - a) * (tokens - lo) / self.stride

    def times(self, kind: str, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size and counts.max() <= self.exact_up_to:
            return self._table[kind][counts]
        return np.array([self(kind, int(c)) for c in counts])

    @property
    def pim_available(self) -> bool:
        return self.units["pim"] is not None


def build_lut(model: ModelConfig, device: DeviceConfig, fraction: float = 1.0,
              max_tokens: int = EXACT_UP_TO) -> ExpertLUT:
    return ExpertLUT(model, device, fraction, max_tokens)


@dataclass(frozen=True)
class ExpertAssignment:
    order: tuple          # expert indices sorted ascending by count
    prefix: int           # first ``prefix`` experts of ``order`` go to PIM
    units: tuple          # per expert (original index): "pim" or "xpu"
    predicted_makespan: float
    pim_time: float
    xpu_time: float

    @property
    def pim_experts(self) -> tuple:
        return self.order[:self.prefix]

    @property
    def xpu_experts(self) -> tuple:
        return self.order[self.prefix:]


def _unit_costs(counts: np.ndarray, lut) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert (pim, xpu) times; experts without tokens launch nothing."""
    if isinstance(lut, ExpertLUT):
        pim, xpu = lut.times("pim", counts), lut.times("xpu", counts)
    else:
        pim = np.array([lut("pim", int(c)) for c in counts], dtype=float)
        xpu = np.array([lut("xpu", int(c)) for c in counts], dtype=float)
    idle = counts == 0
    return np.where(idle, 0.0, pim), np.where(idle, 0.0, xpu)


def prefix_makespans(counts, lut) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Makespan of every sorted prefix p = 0..n (first p experts on PIM)."""
    counts = np.asarray(counts, dtype=np.int64)
    order = np.argsort(counts, kind="stable")
    pim, xpu = _unit_costs(counts[order], lut)
    pim_cum = np.concatenate([[0.0], np.cumsum(pim)])
    xpu_tail = np.concatenate([np.cumsum(xpu[::-1])[::-1], [0.0]])
    return order, np.maximum(pim_cum, xpu_tail), pim_cum, xpu_tail


def partition_experts(counts, lut) -> ExpertAssignment:
    """Assign the experts with the fewest tokens to PIM, choosing the best prefix.

    Every prefix of the ascending-count order is evaluated; ties go to the
    smaller prefix.  Experts with zero tokens cost nothing and sit at the
    front of the order, so they ride along with PIM whenever PIM is usable.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = len(counts)
    if n <= SMALL_N and isinstance(lut, ExpertLUT) and lut.pim_available:
        return _partition_small(counts.tolist(), lut)
    order, spans, pim_cum, xpu_tail = prefix_makespans(counts, lut)
    pim_ok = np.isfinite(pim_cum[-1]) or not np.any(counts)
    if isinstance(lut, ExpertLUT):
        pim_ok = pim_ok and lut.pim_available
    if not pim_ok:
        # first finite prefix is p = 0 once infinities appear
        spans = np.where(np.isfinite(spans), spans, np.inf)
    zeros = int(np.sum(counts == 0)) if pim_ok else 0
    cand = spans[zeros:]
    p = zeros + int(np.argmin(cand))
    units = ["xpu"] * n
    for e in order[:p]:
        units[int(e)] = "pim"
    return ExpertAssignment(tuple(int(e) for e in order), p, tuple(units), float(spans[p]),
                            float(pim_cum[p]), float(xpu_tail[p]))


def _partition_small(counts: list, lut: ExpertLUT) -> ExpertAssignment:
    """Same search as :func:`partition_experts` in plain Python for few experts."""
    n = len(counts)
    order = sorted(range(n), key=lambda e: counts[e])
    pim = [lut("pim", counts[e]) if counts[e] else 0.0 for e in order]
    xpu = [lut("xpu", counts[e]) if counts[e] else 0.0 for e in order]
    pim_cum = [0.0]
    for t in pim:
        pim_cum.append(pim_cum[-1] + t)
    xpu_tail = [0.0]
    for t in reversed(xpu):
        xpu_tail.append(xpu_tail[-1] + t)
    xpu_tail.reverse()
    zeros = sum(1 for c in counts if c == 0)
    p = min(range(zeros, n + 1), key=lambda q: max(pim_cum[q], xpu_tail[q]))
    units = ["xpu"] * n
    for e in order[:p]:
        units[e] = "pim"
    return ExpertAssignment(tuple(order), p, tuple(units), max(pim_cum[p], xpu_tail[p]),
                            pim_cum[p], xpu_tail[p])


def brute_force_partition(counts, lut) -> tuple[float, tuple]:
    """Optimal makespan over all 2^n unit assignments (independent oracle)."""
    counts = np.asarray(counts, dtype=np.int64)
    n = len(counts)
    if n > 20:
        raise ValueError("brute force limited to 20 experts")
    pim, xpu = _unit_costs(counts, lut)
    masks = (np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1
    on_pim = masks.astype(bool)
    pim_sum = np.where(on_pim, pim[None, :], 0.0).sum(axis=1)
    xpu_sum = np.where(on_pim, 0.0, xpu[None, :]).sum(axis=1)
    spans = np.maximum(pim_sum, xpu_sum)
    best = int(np.argmin(spans))
    return float(spans[best]), tuple("pim" if m else "xpu" for m in on_pim[best])
