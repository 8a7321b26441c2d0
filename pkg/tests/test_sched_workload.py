from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from duplexsim.errors import InvalidArgument, SimulationComplete
from duplexsim.sched import Request, form_stage, gen_workload, is_closed_loop


def test_cv_zero_gives_exact_lengths():
    wl = gen_workload(3, 50, 2048, 1024, cv=0)
    assert all((r.l_in, r.l_out) == (2048, 1024) for r in wl)
    assert is_closed_loop(wl)


def test_workload_deterministic():
    a = gen_workload(11, 100, 512, 256, qps=4)
    b = gen_workload(11, 100, 512, 256, qps=4)
    assert [(r.arrival_time, r.l_in, r.l_out) for r in a] == [(r.arrival_time, r.l_in, r.l_out) for r in b]
    c = gen_workload(12, 100, 512, 256, qps=4)
    assert [r.l_in for r in a] != [r.l_in for r in c]


def test_poisson_mean_gap():
    wl = gen_workload(0, 10_000, 128, 128, qps=8)
    gaps = np.diff([0.0] + [r.arrival_time for r in wl])
    assert gaps.mean() == pytest.approx(0.125, rel=0.02)
    assert not is_closed_loop(wl)


@given(st.integers(0, 1000), st.floats(1, 50), st.floats(0, 3))
def test_lengths_clamped(seed, mean, cv):
    wl = gen_workload(seed, 20, mean, mean, cv=cv)
    assert all(r.l_in >= 1 and r.l_out >= 1 for r in wl)


def test_bad_workload_args():
    with pytest.raises(InvalidArgument):
        gen_workload(0, 1, 0, 5)
    with pytest.raises(InvalidArgument):
        gen_workload(0, 1, 5, 5, cv=-1)


def test_request_token_accounting():
    r = Request(0, 0.0, 10, 2)
    r.emit_token(1.0)
    assert r.ctx_len == 11 and not r.done
    r.emit_token(2.0)
    assert r.done
    with pytest.raises(InvalidArgument):
        r.emit_token(3.0)


def _req(i, arrival=0.0, l_out=5, generated=0):
    return Request(i, arrival, 16, l_out, generated=generated)


def test_form_stage_decode_only_when_nothing_arrives():
    running = [_req(0, generated=1), _req(1, generated=2)]
    b = form_stage(5.0, deque(), running, 4)
    assert b.kind == "decode_only" and b.size == 2


def test_form_stage_admits_pending_arrival():
    q = deque([_req(7, arrival=1.0), _req(8, arrival=9.0)])
    running = [_req(0, generated=1)]
    b = form_stage(2.0, q, running, 4)
    assert b.kind == "mixed" and [r.id for r in b.prefilling] == [7]
    assert len(q) == 1 and b.prefilling[0].admit_time == 2.0


def test_form_stage_respects_max_batch_and_evicts():
    running = [_req(0, l_out=1, generated=1), _req(1, generated=1)]
    q = deque(_req(i) for i in range(2, 6))
    b = form_stage(0.0, q, running, 3)
    assert [r.id for r in b.decoding] == [1]
    assert [r.id for r in b.prefilling] == [2, 3]
    assert b.size == 3 and len(running) == 3


def test_form_stage_closed_loop_moves_arrival():
    q = deque([_req(0)])
    b = form_stage(4.5, q, [], 2, closed_loop=True)
    assert b.prefilling[0].arrival_time == 4.5


def test_form_stage_signals_completion():
    with pytest.raises(SimulationComplete):
        form_stage(0.0, deque(), [_req(0, l_out=1, generated=1)], 4)


def test_form_stage_empty_when_waiting_for_arrival():
    b = form_stage(0.0, deque([_req(0, arrival=3.0)]), [], 4)
    assert b.empty
