"""Roofline timing, collectives, energy and the PIM-variant EDAP comparison."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument
from .hardware import BASE_STACK_BW, DeviceConfig, derive_bandwidths
from .model import WorkProfile

UNIT_KINDS = ("xpu", "pim")


@dataclass(frozen=True)
class ExecUnit:
    kind: str
    peak_flops: float
    bandwidth: float
    launch_overhead_s: float = 0.0

    def __post_init__(self):
        if self.kind not in UNIT_KINDS:
            raise InvalidArgument(f"unit kind must be one of {UNIT_KINDS}")
        if self.peak_flops <= 0 or self.bandwidth <= 0:
            raise InvalidArgument("unit peak_flops and bandwidth must be > 0")

    @property
    def peak_op_b(self) -> float:
        return self.peak_flops / self.bandwidth


def exec_units(device: DeviceConfig, efficiency: float | None = None) -> dict[str, ExecUnit]:
    """Device-wide execution units; bandwidth is derated by the DRAM efficiency."""
    eff = device.dram_efficiency if efficiency is None else efficiency
    xpu_bw, pim_bw = derive_bandwidths(device)
    units = {}
    if device.has_xpu:
        units["xpu"] = ExecUnit("xpu", device.xpu_peak_flops, xpu_bw * eff,
                                device.launch_overhead_s)
    if device.has_pim:
        units["pim"] = ExecUnit("pim", device.pim_peak_flops, pim_bw * eff,
                                device.launch_overhead_s)
    return units


def stack_pim_unit(device: DeviceConfig, efficiency: float | None = None) -> ExecUnit:
    """The Logic-PIM unit of a single stack."""
    eff = device.dram_efficiency if efficiency is None else efficiency
    st = device.stack
    return ExecUnit("pim", st.pim_peak_flops_per_stack, st.pim_bw_per_stack * eff,
                    device.launch_overhead_s)


def kernel_time(profile: WorkProfile, unit: ExecUnit) -> float:
    compute = profile.flops / unit.peak_flops
    memory = (profile.weight_bytes + profile.act_bytes) / unit.bandwidth
    return max(compute, memory) + unit.launch_overhead_s


def kernel_times(flops: np.ndarray, nbytes: np.ndarray, unit: ExecUnit) -> np.ndarray:
    """Vectorised :func:`kernel_time` over parallel arrays."""
    return np.maximum(np.asarray(flops, float) / unit.peak_flops,
                      np.asarray(nbytes, float) / unit.bandwidth) + unit.launch_overhead_s


def allreduce_time(nbytes: float, n_participants: int, link_bw: float) -> float:
    """Ring all-reduce: each participant sends and receives 2(n-1)/n of the data."""
    if n_participants < 1:
        raise InvalidArgument("n_participants must be >= 1")
    if n_participants == 1 or nbytes <= 0:
        return 0.0
    return 2.0 * (n_participants - 1) / n_participants * nbytes / link_bw


def intra_device_reduce_profile(partial_bytes_per_stack: float, n_stacks: int,
                                precision: int = 2) -> WorkProfile:
    elems = partial_bytes_per_stack / precision
    return WorkProfile(flops=float(max(n_stacks - 1, 0) * elems),
                       act_bytes=float(n_stacks * partial_bytes_per_stack),
                       kernel_class="allreduce_partial")


def intra_device_reduce_time(partial_bytes_per_stack: float, device: DeviceConfig,
                             unit: ExecUnit | None = None) -> float:
    """xPU reads every stack's partial sums and adds them."""
    if device.n_stacks < 1:
        raise InvalidArgument("device needs at least one stack")
    unit = unit or exec_units(device)["xpu"]
    prof = intra_device_reduce_profile(partial_bytes_per_stack, device.n_stacks)
    return kernel_time(prof, unit)


@dataclass(frozen=True)
class EnergyParams:
    """Dynamic and static energy constants.

    These are configuration placeholders: only ordinal comparisons are
    meaningful under the defaults.
    """

    xpu_read_pj_per_bit: float = 6.0
    pim_read_pj_per_bit: float = 4.0
    xpu_pj_per_flop: float = 0.5
    pim_pj_per_flop: float = 0.5
    link_pj_per_bit: float = 5.0
    static_w: float = 20.0

    def __post_init__(self):
        if min(self.xpu_read_pj_per_bit, self.pim_read_pj_per_bit, self.xpu_pj_per_flop,
               self.pim_pj_per_flop, self.link_pj_per_bit, self.static_w) < 0:
            raise InvalidArgument("energy parameters must be >= 0")

    def read_pj_per_bit(self, kind: str) -> float:
        return self.pim_read_pj_per_bit if kind == "pim" else self.xpu_read_pj_per_bit

    def pj_per_flop(self, kind: str) -> float:
        return self.pim_pj_per_flop if kind == "pim" else self.xpu_pj_per_flop


def energy_components(profile: WorkProfile, kind: str, params: EnergyParams) -> tuple[float, float]:
    """(DRAM joules, compute joules) of one kernel on a ``kind`` unit."""
    dram = profile.bytes * 8 * params.read_pj_per_bit(kind) * 1e-12
    compute = profile.flops * params.pj_per_flop(kind) * 1e-12
    return dram, compute


def kernel_energy(profile: WorkProfile, unit: ExecUnit | str, params: EnergyParams) -> float:
    kind = unit if isinstance(unit, str) else unit.kind
    return sum(energy_components(profile, kind, params))


# EDAP comparison of PIM variants, per HBM stack

DRAM_PROCESS_AREA_FACTOR = 10.0
LOGIC_PIM_GEMM_AREA = 3.02     # 32 GEMM modules, mm^2 in logic process
LOGIC_PIM_BUFFER_AREA = 2.26
SOFTMAX_AREA = 1.64
LOGIC_PIM_TSV_AREA = 10.89
LOGIC_PIM_AREA = 17.80


@dataclass(frozen=True)
class PimVariant:
    name: str
    bw_multiplier: float
    peak_op_b: float
    area_mm2: float
    read_pj_per_bit: float
    pj_per_flop: float

    def unit(self, base_bw: float = BASE_STACK_BW) -> ExecUnit:
        bw = base_bw * self.bw_multiplier
        return ExecUnit("pim", bw * self.peak_op_b, bw, 0.0)


def default_variants() -> list[PimVariant]:
    """Bank-PIM, BankGroup-PIM and Logic-PIM with default area/energy constants.

    DRAM-die compute and buffers are scaled by the DRAM-process area factor;
    Bank-PIM carries half the MACs of Logic-PIM (16x bandwidth at 1 Op/B vs
    4x at 8 Op/B).  Softmax/activation units sit on the logic die for all.
    """
    f = DRAM_PROCESS_AREA_FACTOR
    bank_area = (LOGIC_PIM_GEMM_AREA / 2 + LOGIC_PIM_BUFFER_AREA) * f + SOFTMAX_AREA
    bg_area = (LOGIC_PIM_GEMM_AREA + LOGIC_PIM_BUFFER_AREA) * f + SOFTMAX_AREA
    return [
        PimVariant("bank_pim", 16.0, 1.0, bank_area, read_pj_per_bit=1.0, pj_per_flop=1.0),
        PimVariant("bankgroup_pim", 4.0, 8.0, bg_area, read_pj_per_bit=2.0, pj_per_flop=1.0),
        PimVariant("logic_pim", 4.0, 8.0, LOGIC_PIM_AREA, read_pj_per_bit=4.0, pj_per_flop=0.5),
    ]


def edap(delay: float, energy: float, area: float) -> float:
    if delay <= 0 or energy <= 0 or area <= 0:
        raise InvalidArgument("delay, energy and area must be positive")
    return delay * energy * area


def gemm_at_op_b(op_b: float, rows: int = 16384, cols: int = 4096,
                 precision: int = 2) -> WorkProfile:
    """FP16 GEMM whose weight-only intensity equals ``op_b`` (tokens = op_b)."""
    wbytes = rows * cols * precision
    return WorkProfile(flops=2.0 * op_b * rows * cols, weight_bytes=float(wbytes),
                       kernel_class="fc")


def edap_sweep(op_b_range: Iterable[float], variants: Sequence[PimVariant] | None = None,
               base_bw: float = BASE_STACK_BW) -> list[dict]:
    variants = list(variants) if variants is not None else default_variants()
    rows = []
    for op_b in op_b_range:
        if op_b <= 0:
            raise InvalidArgument("op_b must be positive")
        prof = gemm_at_op_b(op_b)
        for v in variants:
            delay = kernel_time(prof, v.unit(base_bw))
            energy = (prof.bytes * 8 * v.read_pj_per_bit + prof.flops * v.pj_per_flop) * 1e-12
            rows.append({"op_b": op_b, "variant": v.name, "delay": delay, "energy": energy,
                         "area": v.area_mm2, "edap": edap(delay, energy, v.area_mm2)})
    return rows


EDAP_COLUMNS = ("op_b", "variant", "delay", "energy", "area", "edap")


def edap_csv(rows: Sequence[dict], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EDAP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
