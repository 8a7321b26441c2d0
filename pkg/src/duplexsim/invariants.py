"""Trace-level invariant checks (token conservation, expert prefixes, space disjointness)."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .errors import InvariantViolation
from .sched.trace import Trace


def check_tokens(trace: Trace) -> None:
    for r in trace.requests:
        ts = r.token_timestamps
        if len(ts) != r.l_out:
            raise InvariantViolation(f"request {r.id}: {len(ts)} tokens, expected {r.l_out}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvariantViolation(f"request {r.id}: token timestamps not increasing")
        if ts and ts[0] < r.arrival:
            raise InvariantViolation(f"request {r.id}: first token before arrival")


def _groups(cols: dict, sel: np.ndarray):
    """Indices of ``sel`` rows grouped by (stage, layer, node)."""
    idx = np.flatnonzero(sel)
    if not len(idx):
        return
    key = np.stack([cols["stage"][idx], cols["layer"][idx], cols["node"][idx]])
    order = np.lexsort(key[::-1])
    idx, key = idx[order], key[:, order]
    cut = np.flatnonzero(np.any(np.diff(key, axis=1) != 0, axis=0)) + 1
    yield from np.split(idx, cut)


def check_expert_prefix(trace: Trace) -> None:
    """On every device, experts sent to PIM carry no more tokens than those on the xPU."""
    cols = trace.kernels.columns()
    sel = cols["class"] == "moe_expert"
    for grp in _groups(cols, sel):
        units = cols["unit"][grp]
        if not (np.any(units == "pim") and np.any(units == "xpu")):
            continue
        by_dev = defaultdict(lambda: {"pim": [], "xpu": []})
        for k in grp:
            by_dev[int(cols["device"][k])][cols["unit"][k]].append(int(cols["tokens"][k]))
        for dev, u in by_dev.items():
            if u["pim"] and u["xpu"] and max(u["pim"]) > min(u["xpu"]):
                raise InvariantViolation(
                    f"stage {int(cols['stage'][grp[0]])} layer {int(cols['layer'][grp[0]])} "
                    f"device {dev}: PIM experts are not a smallest-count prefix")


def check_space_disjointness(trace: Trace) -> None:
    """xPU and PIM kernels that overlap in time on one device touch disjoint spaces."""
    cols = trace.kernels.columns()
    sel = (cols["unit"] != "link") & (cols["spaces"] != 0)
    for grp in _groups(cols, sel):
        units = cols["unit"][grp]
        pim, xpu = grp[units == "pim"], grp[units == "xpu"]
        if not len(pim) or not len(xpu):
            continue
        for a in pim:
            for b in xpu:
                da, db = cols["device"][a], cols["device"][b]
                if da != db and da != -1 and db != -1:
                    continue
                overlap = min(cols["end"][a], cols["end"][b]) - max(cols["start"][a], cols["start"][b])
                if overlap > 0 and cols["spaces"][a] & cols["spaces"][b]:
                    raise InvariantViolation(
                        f"stage {int(cols['stage'][a])} layer {int(cols['layer'][a])}: "
                        f"concurrent xPU and PIM kernels share memory spaces")


def check_trace(trace: Trace) -> None:
    check_tokens(trace)
    check_expert_prefix(trace)
    check_space_disjointness(trace)
