"""Transaction-level bank-bundle timing.

A ledger keeps a busy-until timestamp per (stack, pseudo channel, bundle).
Requests wait for every bundle they touch, then stream their bytes at the
path rate of the pseudo channels involved: the xPU path moves one 256-bit
access per tCCD_S per pseudo channel, the Logic-PIM path reads 512 bits from
each of the four bank groups of a bundle per tCCD_L.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvalidArgument
from .hardware import DeviceConfig, MemoryGeometry

PATHS = ("xpu", "pim")


@dataclass(frozen=True, order=True)
class BundleId:
    stack: int
    pseudo_channel: int
    bundle: int


@dataclass(frozen=True)
class AccessRequest:
    path: str
    bundles: frozenset
    bytes: int
    start_time: float = 0.0

    def __post_init__(self):
        if self.path not in PATHS:
            raise InvalidArgument(f"path must be one of {PATHS}")
        if self.bytes <= 0:
            raise InvalidArgument("bytes must be > 0")
        if not self.bundles:
            raise InvalidArgument("bundles must be non-empty")
        object.__setattr__(self, "bundles", frozenset(self.bundles))


def stripe(nbytes: int, n_bundles: int) -> list[int]:
    """Even split, remainder to the lowest indices."""
    if n_bundles < 1:
        raise InvalidArgument("bundle set must be non-empty")
    base, rem = divmod(int(nbytes), n_bundles)
    return [base + (1 if k < rem else 0) for k in range(n_bundles)]


class BundleLedger:
    """Busy-until bookkeeping for every bank bundle of one device."""

    def __init__(self, n_stacks: int = 5, n_pcs: int = 32,
                 geometry: MemoryGeometry | None = None, efficiency: float = 0.9,
                 record: bool = False):
        self.geometry = geometry or MemoryGeometry()
        self.n_stacks = n_stacks
        self.n_pcs = n_pcs
        self.n_bundles = self.geometry.bundles_per_pc
        self.efficiency = efficiency
        shape = (n_stacks, n_pcs, self.n_bundles)
        self.busy_until = np.zeros(shape)
        self.busy_total = np.zeros(shape)
        self.records: list[tuple] | None = [] if record else None

    @classmethod
    def for_device(cls, device: DeviceConfig, record: bool = False) -> "BundleLedger":
        return cls(device.n_stacks, device.stack.n_pseudo_channels, device.stack.geometry,
                   device.dram_efficiency, record)

    def flat_index(self, bundles: Iterable[BundleId]) -> np.ndarray:
        idx = []
        for b in bundles:
            if not (0 <= b.stack < self.n_stacks and 0 <= b.pseudo_channel < self.n_pcs
                    and 0 <= b.bundle < self.n_bundles):
                raise InvalidArgument(f"unknown bundle {b}")
            idx.append((b.stack * self.n_pcs + b.pseudo_channel) * self.n_bundles + b.bundle)
        return np.array(sorted(idx), dtype=np.int64)

    def space_index(self, spaces: Iterable[int]) -> np.ndarray:
        """Flat indices of the given bundle indices across every stack and channel."""
        spaces = sorted(set(spaces))
        for s in spaces:
            if not 0 <= s < self.n_bundles:
                raise InvalidArgument(f"unknown memory space {s}")
        grid = np.arange(self.n_stacks * self.n_pcs)[:, None] * self.n_bundles
        return (grid + np.array(spaces, dtype=np.int64)[None, :]).ravel()

    def beat(self, path: str) -> tuple[int, float]:
        g = self.geometry
        if path == "pim":
            return g.pim_beat_bytes, g.tccd_l
        return g.xpu_beat_bytes, g.tccd_s

    def transfer_time(self, path: str, nbytes: int, flat: np.ndarray) -> float:
        """Beat-quantised streaming time of ``nbytes`` over the channels in ``flat``."""
        pcs = np.unique(flat // self.n_bundles)
        per_pc = stripe(nbytes, len(pcs))
        beat_bytes, interval = self.beat(path)
        beats = math.ceil(per_pc[0] / beat_bytes)
        return beats * interval / self.efficiency

    def reserve(self, flat: np.ndarray, start: float, duration: float, path: str = "xpu",
                nbytes: int = 0) -> tuple[float, float]:
        """Occupy ``flat`` bundles for ``duration`` no earlier than ``start``.

        Returns (effective start, finish)."""
        view_busy = self.busy_until.reshape(-1)
        begin = max(start, float(view_busy[flat].max())) if len(flat) else start
        finish = begin + duration
        view_busy[flat] = finish
        self.busy_total.reshape(-1)[flat] += duration
        if self.records is not None:
            self.records.append((begin, path, flat.copy(), nbytes, duration))
        return begin, finish

    def copy(self) -> "BundleLedger":
        other = BundleLedger(self.n_stacks, self.n_pcs, self.geometry, self.efficiency,
                             record=self.records is not None)
        other.busy_until = self.busy_until.copy()
        other.busy_total = self.busy_total.copy()
        if self.records is not None:
            other.records = list(self.records)
        return other

    def unflatten(self, flat: int) -> BundleId:
        sp, b = divmod(int(flat), self.n_bundles)
        s, pc = divmod(sp, self.n_pcs)
        return BundleId(s, pc, b)

    def dump_csv(self, path: str | Path) -> None:
        """Per-access trace: one row per bundle touched."""
        if self.records is None:
            raise InvalidArgument("ledger was created without record=True")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "path", "stack", "pc", "bundle", "bytes", "duration"])
            for begin, path_, flat, nbytes, duration in self.records:
                share = stripe(nbytes, len(flat))
                for k, f in enumerate(flat):
                    b = self.unflatten(f)
                    w.writerow([repr(begin), path_, b.stack, b.pseudo_channel, b.bundle,
                                share[k], repr(duration)])


def service(ledger: BundleLedger, req: AccessRequest) -> tuple[float, BundleLedger]:
    """Serve one access: wait on every requested bundle, then stream the bytes."""
    flat = ledger.flat_index(req.bundles)
    duration = ledger.transfer_time(req.path, req.bytes, flat)
    _, finish = ledger.reserve(flat, req.start_time, duration, req.path, req.bytes)
    return finish, ledger


def all_bundles(n_stacks: int, n_pcs: int, bundles: Iterable[int]) -> frozenset:
    return frozenset(BundleId(s, pc, b) for s in range(n_stacks) for pc in range(n_pcs)
                     for b in bundles)


class SpaceLedger:
    """Busy-until per memory space (one bundle index across all channels).

    A coarsening of :class:`BundleLedger` used by the stage engine: every
    kernel stripes over all channels of the spaces it touches, so tracking
    whole spaces is exact for the engine's access pattern.
    """

    def __init__(self, n_spaces: int = 4):
        self.busy_until = [0.0] * n_spaces
        self.owner = [""] * n_spaces

    def free_at(self, mask: int) -> float:
        return max((t for s, t in enumerate(self.busy_until) if mask >> s & 1), default=0.0)

    def reserve(self, mask: int, start: float, duration: float, path: str = "xpu"
                ) -> tuple[float, float]:
        begin = max(start, self.free_at(mask))
        finish = begin + duration
        for s in range(len(self.busy_until)):
            if mask >> s & 1:
                self.busy_until[s] = finish
                self.owner[s] = path
        return begin, finish


def space_mask(spaces: Iterable[int]) -> int:
    m = 0
    for s in spaces:
        m |= 1 << int(s)
    return m
