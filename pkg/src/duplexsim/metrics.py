"""Reported quantities derived from a trace."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cost import EnergyParams
from .errors import InvalidArgument
from .sched.trace import Trace

PERCENTILES = (50, 90, 99)
PERCENTILE_NOTE = "# percentiles: nearest-rank"


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the smallest sample with at least p% at or below it."""
    if not 0 < p <= 100:
        raise InvalidArgument("p must be in (0, 100]")
    if len(samples) == 0:
        return math.nan
    ordered = sorted(samples)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def summarize(samples: Sequence[float]) -> dict[int, float]:
    return {p: percentile(samples, p) for p in PERCENTILES}


@dataclass
class LatencyReport:
    t2ft: list = field(default_factory=list)
    e2e: list = field(default_factory=list)
    tbt: list = field(default_factory=list)
    excluded: int = 0
    throughput: float = 0.0
    stage_ratio: float = math.nan

    def pct(self, metric: str) -> dict[int, float]:
        return summarize(getattr(self, metric))

    @property
    def n_complete(self) -> int:
        return len(self.t2ft)


def latencies(trace: Trace) -> LatencyReport:
    """Per-request T2FT/E2E and pooled TBT; incomplete requests are excluded."""
    rep = LatencyReport()
    for r in trace.requests:
        if not r.complete:
            rep.excluded += 1
            continue
        rep.t2ft.append(r.t2ft)
        rep.e2e.append(r.e2e)
        rep.tbt.extend(r.tbt)
    if not trace.empty:
        rep.throughput = throughput(trace)
        rep.stage_ratio = stage_ratio(trace)
    return rep


def wall_time(trace: Trace) -> float:
    if trace.empty:
        return 0.0
    return trace.stages[-1].end - trace.stages[0].start


def throughput(trace: Trace) -> float:
    """Generated tokens per second of wall time."""
    if trace.empty:
        raise InvalidArgument("throughput of an empty trace")
    return trace.generated_tokens / wall_time(trace)


def stage_ratio(trace: Trace) -> float:
    """Fraction of stages that are decode-only."""
    if trace.empty:
        return math.nan
    return sum(s.kind == "decode_only" for s in trace.stages) / len(trace.stages)


def stage_kinds(trace: Trace) -> np.ndarray:
    return np.array([s.kind for s in trace.stages], dtype=object)


@dataclass
class EnergyReport:
    dram: float = 0.0
    compute: float = 0.0
    link: float = 0.0
    static: float = 0.0
    by_class: dict = field(default_factory=dict)
    tokens: int = 0

    @property
    def total(self) -> float:
        return self.dram + self.compute + self.link + self.static

    @property
    def per_token(self) -> float:
        return self.total / self.tokens if self.tokens else math.nan

    def component_per_token(self, name: str) -> float:
        return getattr(self, name) / self.tokens if self.tokens else math.nan


def _stage_mask(trace: Trace, stage_col: np.ndarray, stages) -> np.ndarray:
    if stages is None:
        return np.ones(len(stage_col), dtype=bool)
    return np.isin(stage_col, np.asarray(list(stages), dtype=np.int64))


def energy_report(trace: Trace, params: EnergyParams | None = None,
                  stages: Iterable[int] | None = None) -> EnergyReport:
    """Dynamic energy of every kernel plus static power over the covered time.

    With ``stages`` only those stages (kernels, tokens and durations) count.
    """
    params = params or EnergyParams()
    stages = None if stages is None else sorted(set(stages))
    cols = trace.kernels.columns()
    sel = _stage_mask(trace, cols["stage"], stages)
    unit, cls = cols["unit"][sel], cols["class"][sel]
    nbytes, flops = cols["bytes"][sel], cols["flops"][sel]
    bits = nbytes * 8.0
    is_link = unit == "link"
    is_pim = unit == "pim"
    read = np.where(is_pim, params.pim_read_pj_per_bit, params.xpu_read_pj_per_bit)
    per_flop = np.where(is_pim, params.pim_pj_per_flop, params.xpu_pj_per_flop)
    dram_j = np.where(is_link, 0.0, bits * read) * 1e-12
    comp_j = np.where(is_link, 0.0, flops * per_flop) * 1e-12
    link_j = np.where(is_link, bits * params.link_pj_per_bit, 0.0) * 1e-12
    rep = EnergyReport(dram=float(dram_j.sum()), compute=float(comp_j.sum()),
                       link=float(link_j.sum()))
    total_j = dram_j + comp_j + link_j
    for name in sorted(set(cls.tolist())):
        rep.by_class[name] = float(total_j[cls == name].sum())
    n_dev = trace.meta.get("n_devices", 1)
    if stages is None:
        span = wall_time(trace)
        rep.tokens = trace.generated_tokens
    else:
        chosen = [s for s in trace.stages if s.index in set(stages)]
        span = sum(s.end - s.start for s in chosen)
        rep.tokens = sum(s.batch for s in chosen)
    rep.static = params.static_w * n_dev * span
    return rep


ROOFLINE_COLUMNS = ("class", "unit", "stage_kind", "op_b", "achieved_flops", "peak_flops",
                    "utilization", "n_kernels")


def roofline_points(trace: Trace, stage_kind: str | None = None) -> list[dict]:
    """Aggregate intensity and achieved throughput per (kernel class, unit).

    Achieved flops/s divide total flops by total device-seconds, so the
    utilisation is the time-weighted mean over the kernels of a class.
    """
    cols = trace.kernels.columns()
    if len(cols["stage"]) == 0:
        return []
    kinds = stage_kinds(trace)
    k_of = kinds[cols["stage"]]
    rows = []
    peaks = {"xpu": trace.meta.get("xpu_peak_flops", 0.0),
             "pim": trace.meta.get("pim_peak_flops", 0.0)}
    wanted = [stage_kind] if stage_kind else sorted(set(kinds.tolist()))
    dev_seconds = (cols["end"] - cols["start"]) * cols["n_dev"]
    for kind in wanted:
        base = k_of == kind
        for unit in ("xpu", "pim"):
            for name in sorted(set(cols["class"][base & (cols["unit"] == unit)].tolist())):
                sel = base & (cols["unit"] == unit) & (cols["class"] == name)
                flops = float(cols["flops"][sel].sum())
                nbytes = float(cols["bytes"][sel].sum())
                secs = float(dev_seconds[sel].sum())
                achieved = flops / secs if secs else 0.0
                peak = peaks[unit]
                rows.append({"class": name, "unit": unit, "stage_kind": kind,
                             "op_b": flops / nbytes if nbytes else math.inf,
                             "achieved_flops": achieved, "peak_flops": peak,
                             "utilization": achieved / peak if peak else 0.0,
                             "n_kernels": int(cols["n_kernels"][sel].sum())})
    return rows


def utilization(trace: Trace, kernel_class: str, unit: str = "xpu",
                stage_kind: str = "decode_only") -> float:
    for row in roofline_points(trace, stage_kind):
        if row["class"] == kernel_class and row["unit"] == unit:
            return row["utilization"]
    return math.nan


def busy_fractions(trace: Trace) -> dict[str, float]:
    """Busy device-seconds per unit kind over (unit count x wall time)."""
    cols = trace.kernels.columns()
    wall = wall_time(trace)
    counts = {"xpu": trace.meta.get("xpu_units", 1), "pim": trace.meta.get("pim_units", 0),
              "link": trace.meta.get("n_devices", 1)}
    out = {}
    dev_seconds = (cols["end"] - cols["start"]) * cols["n_dev"]
    for unit, n in counts.items():
        busy = float(dev_seconds[cols["unit"] == unit].sum()) if len(dev_seconds) else 0.0
        out[unit] = busy / (n * wall) if n and wall else 0.0
    return out


# CSV emitters

LATENCY_COLUMNS = ("mode", "model", "l_in", "l_out", "batch", "metric", "p50", "p90", "p99")
THROUGHPUT_COLUMNS = ("mode", "model", "l_in", "l_out", "batch", "seed", "tokens", "wall_s",
                      "throughput", "stage_ratio")
ENERGY_COLUMNS = ("mode", "model", "component", "joules", "joules_per_token")


def latency_rows(trace: Trace, key: dict) -> list[dict]:
    rep = latencies(trace)
    rows = []
    for metric in ("t2ft", "tbt", "e2e"):
        pct = rep.pct(metric)
        rows.append({**{c: key.get(c, "") for c in LATENCY_COLUMNS[:5]}, "metric": metric,
                     "p50": pct[50], "p90": pct[90], "p99": pct[99]})
    return rows


def throughput_row(trace: Trace, key: dict) -> dict:
    return {**{c: key.get(c, "") for c in THROUGHPUT_COLUMNS[:6]},
            "tokens": trace.generated_tokens, "wall_s": wall_time(trace),
            "throughput": throughput(trace), "stage_ratio": stage_ratio(trace)}


def energy_rows(trace: Trace, key: dict, params: EnergyParams | None = None) -> list[dict]:
    rep = energy_report(trace, params)
    rows = []
    comps = [(c, getattr(rep, c)) for c in ("dram", "compute", "link", "static")]
    comps += [(f"class:{k}", v) for k, v in rep.by_class.items()]
    comps.append(("total", rep.total))
    for name, j in comps:
        rows.append({"mode": key.get("mode", ""), "model": key.get("model", ""),
                     "component": name, "joules": j,
                     "joules_per_token": j / rep.tokens if rep.tokens else math.nan})
    return rows


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def to_csv(rows: Sequence[dict], columns: Sequence[str], path: str | Path | None = None,
           header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n",
                       extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
