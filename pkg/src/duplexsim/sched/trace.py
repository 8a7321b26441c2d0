"""Simulation trace: stage, kernel and request records."""

from __future__ import annotations

import json
from array import array
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KERNEL_FLOAT_FIELDS = ("start", "end", "bytes", "flops")
KERNEL_INT_FIELDS = ("stage", "layer", "node", "device", "n_dev", "spaces", "n_kernels", "tokens")
UNIT_CODES = ("xpu", "pim", "link")


@dataclass(frozen=True)
class StageRecord:
    index: int
    kind: str
    start: float
    end: float
    batch: int
    prefill_count: int

    def to_dict(self) -> dict:
        return {"index": self.index, "kind": self.kind, "start": self.start, "end": self.end,
                "batch": self.batch, "prefill_count": self.prefill_count}


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival: float
    l_in: int
    l_out: int
    token_timestamps: tuple

    @property
    def complete(self) -> bool:
        return len(self.token_timestamps) == self.l_out

    @property
    def t2ft(self) -> float:
        return self.token_timestamps[0] - self.arrival

    @property
    def e2e(self) -> float:
        return self.token_timestamps[-1] - self.arrival

    @property
    def tbt(self) -> list:
        ts = self.token_timestamps
        return [b - a for a, b in zip(ts, ts[1:])]

    def to_dict(self) -> dict:
        out = {"id": self.id, "arrival": self.arrival, "l_in": self.l_in, "l_out": self.l_out}
        if self.token_timestamps:
            out.update(t2ft=self.t2ft, e2e=self.e2e, tbt=self.tbt)
        return out


class KernelLog:
    """Columnar kernel records (compact enough for long runs)."""

    def __init__(self):
        self._f = {k: array("d") for k in KERNEL_FLOAT_FIELDS}
        self._i = {k: array("q") for k in KERNEL_INT_FIELDS}
        self._cls = array("b")
        self._unit = array("b")
        self.classes: list[str] = []
        self._class_code: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._cls)

    def add(self, stage: int, layer: int, kernel_class: str, unit: str, start: float,
            end: float, nbytes: float, flops: float, node: int = 0, device: int = -1,
            n_dev: int = 1, spaces: int = 0, n_kernels: int = 1, tokens: int = 0) -> None:
        code = self._class_code.get(kernel_class)
        if code is None:
            code = self._class_code[kernel_class] = len(self.classes)
            self.classes.append(kernel_class)
        self._cls.append(code)
        self._unit.append(UNIT_CODES.index(unit))
        f = self._f
        f["start"].append(start)
        f["end"].append(end)
        f["bytes"].append(nbytes)
        f["flops"].append(flops)
        i = self._i
        i["stage"].append(stage)
        i["layer"].append(layer)
        i["node"].append(node)
        i["device"].append(device)
        i["n_dev"].append(n_dev)
        i["spaces"].append(spaces)
        i["n_kernels"].append(n_kernels)
        i["tokens"].append(tokens)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {k: np.frombuffer(v, dtype=np.float64) if len(v) else np.zeros(0)
                for k, v in self._f.items()}
        cols.update({k: np.frombuffer(v, dtype=np.int64) if len(v) else np.zeros(0, np.int64)
                     for k, v in self._i.items()})
        cls = np.frombuffer(self._cls, dtype=np.int8) if len(self._cls) else np.zeros(0, np.int8)
        unit = np.frombuffer(self._unit, dtype=np.int8) if len(self._unit) else np.zeros(0, np.int8)
        cols["class"] = np.array(self.classes, dtype=object)[cls] if len(cls) else np.zeros(0, object)
        cols["unit"] = np.array(UNIT_CODES, dtype=object)[unit] if len(unit) else np.zeros(0, object)
        return cols

    def rows(self):
        cols = self.columns()
        for k in range(len(self)):
            yield {"stage": int(cols["stage"][k]), "layer": int(cols["layer"][k]),
                   "class": cols["class"][k], "unit": cols["unit"][k],
                   "node": int(cols["node"][k]), "device": int(cols["device"][k]),
                   "n_dev": int(cols["n_dev"][k]), "start": float(cols["start"][k]),
                   "end": float(cols["end"][k]), "bytes": float(cols["bytes"][k]),
                   "flops": float(cols["flops"][k]), "spaces": int(cols["spaces"][k]),
                   "n_kernels": int(cols["n_kernels"][k]), "tokens": int(cols["tokens"][k])}


@dataclass
class Trace:
    meta: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    kernels: KernelLog = field(default_factory=KernelLog)
    requests: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.stages

    @property
    def generated_tokens(self) -> int:
        return sum(len(r.token_timestamps) for r in self.requests)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for line in self.iter_jsonl():
                fh.write(line)
                fh.write("\n")

    def iter_jsonl(self):
        yield json.dumps({"type": "meta", **self.meta}, sort_keys=True)
        for s in self.stages:
            yield json.dumps({"type": "stage", **s.to_dict()}, sort_keys=True)
        for k in self.kernels.rows():
            yield json.dumps({"type": "kernel", **k}, sort_keys=True)
        for r in self.requests:
            yield json.dumps({"type": "request", **r.to_dict()}, sort_keys=True)
