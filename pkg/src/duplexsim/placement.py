"""Weight, expert and KV placement across nodes, devices, stacks and memory spaces."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .dram import BundleLedger
from .errors import ConfigError, InvalidArgument
from .hardware import DeviceConfig, SystemConfig, validate_system
from .model import ModelConfig, WorkProfile, kv_cache_bytes

N_SPACES = 4
KV_SPACES = (0, 1, 2)
PREFILL_SCRATCH_SPACE = 3

STRATEGIES = ("expert_parallel", "tensor_parallel_experts")


def balanced_counts(total: int, parts: int) -> list[int]:
    """Split ``total`` items into ``parts`` near-equal counts, larger ones first."""
    if parts < 1:
        raise InvalidArgument("parts must be >= 1")
    base, rem = divmod(int(total), parts)
    return [base + (1 if k < rem else 0) for k in range(parts)]


def strategy_for_mode(mode: str) -> str:
    return "tensor_parallel_experts" if mode == "duplex_pe_et" else "expert_parallel"


@dataclass(frozen=True)
class Placement:
    """Who holds what.

    ``device_experts[g]`` lists ``(expert, fraction)`` pairs held by global
    expert-holding device ``g`` (node-major).  ``memory_space_map[g]`` maps
    each of those experts to a bundle-index memory space.
    """

    strategy: str
    n_nodes: int
    devices_per_node: int
    n_experts: int
    device_experts: tuple
    memory_space_map: tuple
    kv_spaces: tuple = KV_SPACES
    prefill_scratch_space: int = PREFILL_SCRATCH_SPACE
    weight_bytes_per_device: int = 0
    non_expert_bytes_per_device: int = 0
    hetero: bool = False

    @property
    def n_expert_devices(self) -> int:
        return len(self.device_experts)

    def node_of(self, g: int) -> int:
        return g // self.devices_per_node

    def experts_on(self, g: int) -> list[int]:
        return [e for e, _ in self.device_experts[g]]

    def expert_owner_count(self, expert: int) -> int:
        return sum(1 for held in self.device_experts for e, _ in held if e == expert)

    def kv_space(self, request_id: int) -> int:
        return self.kv_spaces[request_id % len(self.kv_spaces)]

    def to_dict(self) -> dict:
        devices = []
        for g, held in enumerate(self.device_experts):
            spaces: dict[int, list] = {s: [] for s in range(N_SPACES)}
            for e, frac in held:
                spaces[self.memory_space_map[g][e]].append({"expert": e, "fraction": frac})
            for s in self.kv_spaces:
                spaces[s].append("kv_cache")
            spaces[self.prefill_scratch_space].append("prefill_qkv_scratch")
            devices.append({"device": g, "node": self.node_of(g),
                            "weight_bytes": self.weight_bytes_per_device,
                            "spaces": {str(k): v for k, v in spaces.items()}})
        return {"strategy": self.strategy, "n_nodes": self.n_nodes,
                "devices_per_node": self.devices_per_node, "hetero": self.hetero,
                "non_expert_bytes_per_device": self.non_expert_bytes_per_device,
                "devices": devices}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _contiguous_blocks(n_items: int, n_bins: int) -> list[list[int]]:
    out, start = [], 0
    for c in balanced_counts(n_items, n_bins):
        out.append(list(range(start, start + c)))
        start += c
    return out


def _expert_parallel(n_experts: int, n_devices: int) -> list[list[tuple[int, float]]]:
    if n_devices <= n_experts:
        return [[(e, 1.0) for e in block] for block in _contiguous_blocks(n_experts, n_devices)]
    # more devices than experts: each expert tensor-split over a device group
    groups = _contiguous_blocks(n_devices, n_experts)
    held: list[list[tuple[int, float]]] = [[] for _ in range(n_devices)]
    for e, devs in enumerate(groups):
        for g in devs:
            held[g].append((e, 1.0 / len(devs)))
    return held


def plan(model: ModelConfig, system: SystemConfig, mode: str = "gpu_baseline") -> Placement:
    strategy = strategy_for_mode(mode)
    report = validate_system(system, model, strategy)
    hetero = system.is_hetero
    per_node = system.pim_devices_per_node if hetero else system.devices_per_node
    n_dev = system.n_nodes * per_node
    if not model.is_moe:
        held = [[] for _ in range(n_dev)]
    elif strategy == "tensor_parallel_experts" and not hetero:
        if system.n_nodes > model.n_experts:
            raise ConfigError("system.n_nodes", "more nodes than experts")
        held = []
        for block in _contiguous_blocks(model.n_experts, system.n_nodes):
            for _ in range(per_node):
                held.append([(e, 1.0 / per_node) for e in block])
    else:
        held = _expert_parallel(model.n_experts, n_dev)
    space_map = tuple({e: k % N_SPACES for k, (e, _) in enumerate(h)} for h in held)
    return Placement(
        strategy=strategy, n_nodes=system.n_nodes, devices_per_node=per_node,
        n_experts=model.n_experts, device_experts=tuple(tuple(h) for h in held),
        memory_space_map=space_map,
        weight_bytes_per_device=report.weight_bytes_per_device,
        non_expert_bytes_per_device=math.ceil(model.non_expert_weight_bytes()
                                              / system.devices_per_node),
        hetero=hetero,
    )


def stack_split(work: WorkProfile, n_stacks: int, units: int | None = None) -> list[WorkProfile]:
    """Divide a kernel over HBM stacks.

    With ``units`` (weight columns for an expert, request x head items for
    attention) the split follows :func:`balanced_counts`; otherwise it is an
    even fractional split.  Field sums always equal the undivided profile.
    """
    if n_stacks < 1:
        raise InvalidArgument("n_stacks must be >= 1")
    if n_stacks == 1:
        return [work]
    if units is None:
        shares = [1.0 / n_stacks] * n_stacks
    else:
        counts = balanced_counts(units, n_stacks)
        shares = [c / units for c in counts] if units else [0.0] * n_stacks
    return [work.scaled(s) for s in shares]


def kv_migration_cost(new_prefill_tokens: int, model: ModelConfig, device: DeviceConfig,
                      devices_sharing: int = 1) -> float:
    """Move freshly written K/V from the prefill scratch space to a KV space.

    Each device holds ``1/devices_sharing`` of the heads; the copy is a read
    from the scratch bundles followed by a write into the KV bundles over the
    xPU path.
    """
    if new_prefill_tokens < 0:
        raise InvalidArgument("tokens must be >= 0")
    if new_prefill_tokens == 0:
        return 0.0
    nbytes = math.ceil(kv_cache_bytes(model, new_prefill_tokens) / devices_sharing)
    ledger = BundleLedger.for_device(device)
    read_t = ledger.transfer_time("xpu", nbytes, ledger.space_index([PREFILL_SCRATCH_SPACE]))
    write_t = ledger.transfer_time("xpu", nbytes, ledger.space_index([KV_SPACES[0]]))
    return device.launch_overhead_s + read_t + write_t
