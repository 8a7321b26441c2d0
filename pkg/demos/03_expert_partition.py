"""Expert co-processing: split one MoE layer between Logic-PIM and xPU.

Experts are sorted by token count; the cold prefix goes to PIM, the hot tail
to the xPU.  Every prefix is tried and the best makespan wins.  The 2^n
brute force shows how little the prefix restriction costs.
"""

import numpy as np

from duplexsim.hardware import system_preset
from duplexsim.model import load_model
from duplexsim.sched import gate_select
from duplexsim.sched.partition import brute_force_partition, build_lut, partition_experts

model = load_model("mixtral")
lut = build_lut(model, system_preset("duplex", model).device)
for batch in (8, 64, 512):
    counts = gate_select(batch, model.n_experts, model.top_k, seed=batch).counts[0]
    a = partition_experts(counts, lut)
    best, _ = brute_force_partition(counts, lut)
    only_xpu = sum(lut("xpu", int(c)) for c in counts if c)
    print(f"batch {batch:4d} counts {np.sort(counts)}: {a.prefix} experts on PIM, "
          f"makespan {a.predicted_makespan * 1e6:7.1f} us (optimum {best * 1e6:7.1f}, "
          f"xPU alone {only_xpu * 1e6:7.1f})")
