"""Bank bundles: the Logic-PIM datapath reads 8 banks at once.

The xPU path moves 32 B per 1.5 ns per pseudo channel; a bundle read moves
256 B per 3 ns, four times the bandwidth.  Accesses that share a bundle queue
behind each other, disjoint ones overlap.
"""

from duplexsim.dram import AccessRequest, BundleId, BundleLedger, service

led = BundleLedger()
flat = led.space_index([0, 1, 2, 3])
for nbytes in (1 << 20, 1 << 30):
    x = led.transfer_time("xpu", nbytes, flat)
    p = led.transfer_time("pim", nbytes, flat)
    print(f"{nbytes >> 20:5d} MiB striped: xpu {x * 1e6:9.2f} us, pim {p * 1e6:9.2f} us, ratio {x / p:.3f}")

shared = frozenset({BundleId(0, 0, 1)})
other = frozenset({BundleId(0, 0, 2)})
for label, second in (("same bundle", shared), ("other bundle", other)):
    led = BundleLedger()
    t1, led = service(led, AccessRequest("pim", shared, 1 << 16))
    t2, led = service(led, AccessRequest("xpu", second, 1 << 16))
    print(f"{label:12s}: first done {t1 * 1e6:.2f} us, second done {t2 * 1e6:.2f} us")
