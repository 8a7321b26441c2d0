"""Continuous batching under each system mode.

A short closed-loop Mixtral workload; decode-only stages dominate, so moving
attention and experts to Logic-PIM raises throughput.  The heterogeneous
system wins on typical token latency but pays in tail TBT and time to first
token because every layer crosses the link.  At this small batch the
experts see few tokens each, so the PIM variants land close together.
"""

from duplexsim.metrics import energy_report, latencies, stage_ratio, throughput
from duplexsim.model import load_model
from duplexsim.sched import Engine, default_system_for_mode, gen_workload

model = load_model("mixtral")
workload = gen_workload(seed=0, n_requests=32, mean_l_in=1024, mean_l_out=128)
print(f"{'mode':13s} {'tok/s':>7s} {'decode%':>8s} {'p50 TBT':>8s} {'p99 TBT':>8s} "
      f"{'p50 T2FT':>9s} {'J/token':>8s}")
for mode in ("gpu_baseline", "hetero", "bank_pim", "duplex", "duplex_pe", "duplex_pe_et"):
    trace = Engine(model, default_system_for_mode(mode, model, 16), mode).run(workload)
    lat = latencies(trace)
    tbt, t2ft = lat.pct("tbt"), lat.pct("t2ft")
    print(f"{mode:13s} {throughput(trace):7.0f} {stage_ratio(trace):8.1%} "
          f"{tbt[50] * 1e3:6.1f}ms {tbt[99] * 1e3:6.1f}ms {t2ft[50] * 1e3:7.1f}ms "
          f"{energy_report(trace).per_token:8.3f}")
