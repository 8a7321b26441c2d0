"""Which PIM flavour fits which intensity.

Energy x delay x area for a GEMM at each Op/B.  Bank-PIM's 16x bandwidth wins
while work is bandwidth-bound at tiny Op/B; Logic-PIM's compute and logic
process win once Op/B reaches its ridge point.
"""

from duplexsim.cost import edap_sweep

rows = edap_sweep([1, 2, 4, 8, 16, 32])
for op_b in sorted({r["op_b"] for r in rows}):
    cands = sorted((r for r in rows if r["op_b"] == op_b), key=lambda r: r["edap"])
    ranking = "  ".join(f"{r['variant']} {r['edap']:.3g}" for r in cands)
    print(f"Op/B {op_b:4g}: {ranking}")
