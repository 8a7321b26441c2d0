"""Why decode-time MoE and attention starve a GPU.

Weight-only Op/B of an expert equals the tokens routed to it, and decode
attention reads the KV cache at Op/B equal to the GQA group size.  Both sit
far below the xPU ridge point but near the Logic-PIM one (8).
"""

from duplexsim.cost import exec_units, kernel_time
from duplexsim.hardware import system_preset
from duplexsim.model import attention_cost, attention_kv_bytes, load_model, moe_expert_cost

model = load_model("mixtral")
units = exec_units(system_preset("duplex", model).device)
for kind, unit in units.items():
    print(f"{kind:4s} peak {unit.peak_flops / 1e12:7.1f} TFLOPS, {unit.bandwidth / 1e12:5.2f} TB/s, "
          f"ridge Op/B {unit.peak_flops / unit.bandwidth:6.1f}")

print("\nexpert FFN (weights only)")
for tokens in (1, 4, 16, 64, 256):
    prof = moe_expert_cost(tokens, model.hidden, model.intermediate)
    times = {k: kernel_time(prof, u) * 1e6 for k, u in units.items()}
    print(f"  {tokens:4d} tokens  Op/B {prof.flops / prof.weight_bytes:6.1f}  "
          f"xpu {times['xpu']:7.1f} us  pim {times['pim']:7.1f} us")

print("\ndecode attention (KV only), 4096-token context")
for grp in (1, 4, 8):
    prof = attention_cost(4096, 1, model.n_heads, model.d_head, grp)
    print(f"  grp {grp}: Op/B {prof.flops / attention_kv_bytes(4096, model.n_heads, model.d_head, grp):.1f}")
