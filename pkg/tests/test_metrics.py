import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from duplexsim.cost import EnergyParams
from duplexsim.errors import InvalidArgument, InvariantViolation
from duplexsim.invariants import (check_expert_prefix, check_space_disjointness,
                                  check_tokens, check_trace)
from duplexsim.metrics import (ENERGY_COLUMNS, LATENCY_COLUMNS, PERCENTILE_NOTE,
                               THROUGHPUT_COLUMNS, busy_fractions, energy_report,
                               energy_rows, latencies, latency_rows, percentile,
                               roofline_points, stage_ratio, throughput, throughput_row,
                               to_csv, utilization, wall_time)
from duplexsim.sched.trace import RequestRecord, StageRecord, Trace


def synthetic(timestamps=(10.0, 11.0, 12.0), l_out=3, kernels=()):
    tr = Trace(meta={"n_devices": 2, "xpu_peak_flops": 100.0, "pim_peak_flops": 10.0,
                     "xpu_units": 1, "pim_units": 1})
    tr.stages = [StageRecord(i, "mixed" if i == 0 else "decode_only", t - 1.0, t, 1, int(i == 0))
                 for i, t in enumerate(timestamps)]
    tr.stages[0] = StageRecord(0, "mixed", 0.0, timestamps[0], 1, 1)
    tr.requests = [RequestRecord(0, 0.0, 4, l_out, tuple(timestamps))]
    for k in kernels:
        tr.kernels.add(**k)
    return tr


def test_percentile_nearest_rank():
    xs = [15, 20, 35, 40, 50]
    assert percentile(xs, 30) == 20
    assert percentile(xs, 40) == 20
    assert percentile(xs, 50) == 35
    assert percentile(xs, 100) == 50
    assert percentile(xs, 1) == 15
    assert math.isnan(percentile([], 50))
    with pytest.raises(InvalidArgument):
        percentile(xs, 0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_percentile_monotone_and_is_a_sample(xs):
    vals = [percentile(xs, p) for p in (1, 50, 90, 99, 100)]
    assert vals == sorted(vals)
    assert all(v in xs for v in vals)
    assert vals[-1] == max(xs)


def test_request_latencies():
    rep = latencies(synthetic())
    assert rep.t2ft == [10.0] and rep.e2e == [12.0] and rep.tbt == [1.0, 1.0]
    assert rep.n_complete == 1 and rep.excluded == 0


def test_incomplete_requests_excluded():
    rep = latencies(synthetic(l_out=5))
    assert rep.n_complete == 0 and rep.excluded == 1 and rep.tbt == []


def test_throughput_and_stage_ratio():
    tr = synthetic()
    assert wall_time(tr) == 12.0
    assert throughput(tr) == 3 / 12.0
    assert stage_ratio(tr) == 2 / 3
    empty = Trace()
    assert wall_time(empty) == 0.0 and math.isnan(stage_ratio(empty))
    with pytest.raises(InvalidArgument):
        throughput(empty)


def test_hundred_tokens_over_ten_seconds():
    ts = tuple(0.1 * (i + 1) for i in range(100))
    tr = synthetic(ts, l_out=100)
    assert throughput(tr) == pytest.approx(10.0, rel=1e-12)


def test_empty_trace_energy_is_zero():
    rep = energy_report(Trace())
    assert rep.total == 0.0 and math.isnan(rep.per_token)


def test_energy_components_hand_computed():
    p = EnergyParams()
    tr = synthetic(kernels=[
        dict(stage=0, layer=0, kernel_class="fc", unit="xpu", start=0, end=1, nbytes=1e9, flops=2e12),
        dict(stage=1, layer=0, kernel_class="attention", unit="pim", start=10, end=11, nbytes=1e9, flops=1e9),
        dict(stage=1, layer=0, kernel_class="transfer", unit="link", start=10, end=11, nbytes=1e6, flops=0),
    ])
    rep = energy_report(tr, p)
    assert rep.dram == pytest.approx(8e9 * (6.0 + 4.0) * 1e-12)
    assert rep.compute == pytest.approx((2e12 + 1e9) * 0.5e-12)
    assert rep.link == pytest.approx(8e6 * 5.0e-12)
    assert rep.static == pytest.approx(20.0 * 2 * 12.0)
    assert sum(rep.by_class.values()) == pytest.approx(rep.dram + rep.compute + rep.link)
    assert rep.per_token == pytest.approx(rep.total / 3)
    assert rep.component_per_token("static") == pytest.approx(160.0)


def test_energy_additive_over_stages(run_small):
    tr = run_small("duplex")
    whole = energy_report(tr)
    idx = [s.index for s in tr.stages]
    half = len(idx) // 2
    a, b = energy_report(tr, stages=idx[:half]), energy_report(tr, stages=idx[half:])
    assert a.dram + b.dram == pytest.approx(whole.dram, rel=1e-9)
    assert a.compute + b.compute == pytest.approx(whole.compute, rel=1e-9)
    assert a.tokens + b.tokens == whole.tokens
    # closed-loop stages are back to back, so static energy splits exactly too
    assert a.static + b.static == pytest.approx(whole.static, rel=1e-9)


def test_roofline_compute_bound_utilization():
    tr = synthetic(kernels=[
        dict(stage=0, layer=0, kernel_class="fc", unit="xpu", start=0, end=1.0, nbytes=1, flops=90.0),
        dict(stage=0, layer=1, kernel_class="fc", unit="xpu", start=1, end=2.0, nbytes=1, flops=90.0),
    ])
    (row,) = roofline_points(tr, "mixed")
    assert row["utilization"] == pytest.approx(0.9)
    assert row["op_b"] == 90.0 and row["n_kernels"] == 2
    assert utilization(tr, "fc", "xpu", "mixed") == pytest.approx(0.9)
    assert math.isnan(utilization(tr, "fc", "pim", "mixed"))
    assert roofline_points(Trace()) == []


def test_simulated_utilization_and_busy_bounds(run_small):
    tr = run_small("duplex_pe")
    for row in roofline_points(tr):
        assert 0.0 <= row["utilization"] <= 1.0 + 1e-9
    busy = busy_fractions(tr)
    assert all(0.0 <= v <= 1.0 + 1e-9 for v in busy.values())
    assert busy["xpu"] > 0 and busy["pim"] > 0


def test_littles_law(run_small):
    # mean occupancy equals arrival rate times mean residence time
    tr = run_small("gpu_baseline", qps=2.0)
    rep = latencies(tr)
    wall = wall_time(tr)
    lam = rep.n_complete / wall
    weighted = sum(s.batch * (s.end - s.start) for s in tr.stages) / wall
    resid = sum(r.token_timestamps[-1] - (r.token_timestamps[0] - _stage_len(tr, r))
                for r in tr.requests) / len(tr.requests)
    assert weighted == pytest.approx(lam * resid, rel=0.05)


def _stage_len(tr, r):
    for s in tr.stages:
        if s.end == r.token_timestamps[0]:
            return s.end - s.start
    raise AssertionError


def test_csv_emitters_are_stable(tmp_path):
    tr = synthetic()
    key = {"mode": "duplex", "model": "mixtral", "l_in": 4, "l_out": 3, "batch": 1, "seed": 0}
    text = to_csv(latency_rows(tr, key), LATENCY_COLUMNS, tmp_path / "l.csv", PERCENTILE_NOTE)
    lines = text.splitlines()
    assert lines[0] == PERCENTILE_NOTE
    assert lines[1] == ",".join(LATENCY_COLUMNS)
    assert lines[2] == "duplex,mixtral,4,3,1,t2ft,10.0,10.0,10.0"
    assert (tmp_path / "l.csv").read_text() == text
    row = throughput_row(tr, key)
    assert row["tokens"] == 3 and row["throughput"] == 0.25
    assert to_csv([row], THROUGHPUT_COLUMNS).splitlines()[1].startswith("duplex,mixtral,4,3,1,0,3,")
    comps = [r["component"] for r in energy_rows(tr, key)]
    assert comps[:4] == ["dram", "compute", "link", "static"] and comps[-1] == "total"
    assert to_csv(energy_rows(tr, key), ENERGY_COLUMNS) == to_csv(energy_rows(tr, key), ENERGY_COLUMNS)


def test_invariants_detect_violations():
    base = dict(stage=0, layer=0, kernel_class="moe_expert", start=0.0, end=1.0,
                nbytes=1, flops=1, device=0)
    ok = synthetic(kernels=[dict(base, unit="pim", spaces=1, tokens=1),
                            dict(base, unit="xpu", spaces=2, tokens=5)])
    check_trace(ok)
    clash = synthetic(kernels=[dict(base, unit="pim", spaces=1, tokens=1),
                               dict(base, unit="xpu", spaces=3, tokens=5)])
    with pytest.raises(InvariantViolation):
        check_space_disjointness(clash)
    inverted = synthetic(kernels=[dict(base, unit="pim", spaces=1, tokens=9),
                                  dict(base, unit="xpu", spaces=2, tokens=5)])
    with pytest.raises(InvariantViolation):
        check_expert_prefix(inverted)
    with pytest.raises(InvariantViolation):
        check_tokens(synthetic((10.0, 12.0, 11.0)))


def test_closed_loop_throughput_is_stable_at_saturation(run_small):
    a = throughput(run_small("gpu_baseline", n=96))
    b = throughput(run_small("gpu_baseline", n=192))
    assert abs(b / a - 1.0) < 0.05


def test_glam_decode_attention_utilization_is_tiny(run_small):
    tr = run_small("gpu_baseline", model="glam", n=64, batch=64)
    assert utilization(tr, "attention", "xpu", "decode_only") < 0.03
    assert utilization(tr, "moe_expert", "xpu", "decode_only") < 0.15
