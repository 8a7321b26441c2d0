import pytest

from duplexsim.model import load_model
from duplexsim.sched import Engine, default_system_for_mode, gen_workload


@pytest.fixture(scope="session")
def mixtral():
    return load_model("mixtral")


_CACHE = {}


def small_run(mode, model="mixtral", n=24, l_in=256, l_out=32, batch=8, seed=0, qps=None):
    """Cached short simulation shared by several test modules."""
    key = (mode, model, n, l_in, l_out, batch, seed, qps)
    if key not in _CACHE:
        m = load_model(model)
        system = default_system_for_mode(mode, m, batch)
        wl = gen_workload(seed, n, l_in, l_out, qps=qps)
        _CACHE[key] = Engine(m, system, mode, seed).run(wl)
    return _CACHE[key]


@pytest.fixture(scope="session")
def run_small():
    return small_run


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
