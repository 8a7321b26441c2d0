"""Device, HBM stack and system topology descriptions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import CapacityExceeded, ConfigError
from .model import ModelConfig, kv_cache_bytes

GiB = 1 << 30

LOGIC_PIM_STACK_FLOPS = 21.3e12
LOGIC_PIM_OP_B = 8.0
# base HBM3 stack bandwidth implied by 21.3 TFLOPS at 8 Op/B over a 4x path
BASE_STACK_BW = LOGIC_PIM_STACK_FLOPS / LOGIC_PIM_OP_B / 4.0

PIM_VARIANTS = ("none", "logic_pim", "bank_pim", "bankgroup_pim")
_VARIANT_BW_MULT = {"none": 0.0, "logic_pim": 4.0, "bank_pim": 16.0, "bankgroup_pim": 4.0}
_VARIANT_OP_B = {"none": 0.0, "logic_pim": 8.0, "bank_pim": 1.0, "bankgroup_pim": 8.0}


@dataclass(frozen=True)
class MemoryGeometry:
    """Bank organisation of one HBM3 pseudo channel (both ranks)."""

    ranks_per_stack: int = 2
    bank_groups_per_pc: int = 4
    banks_per_bank_group: int = 4
    bundles_per_pc: int = 4
    banks_per_bundle: int = 8
    tccd_s: float = 1.5e-9
    tccd_l: float = 3.0e-9
    bits_per_bundle_beat: int = 512  # per bank group, two banks each
    xpu_bits_per_access: int = 256

    def __post_init__(self):
        banks_per_rank = self.bank_groups_per_pc * self.banks_per_bank_group
        if self.banks_per_bundle * self.bundles_per_pc != self.ranks_per_stack * banks_per_rank:
            raise ConfigError("geometry.banks_per_bundle",
                              "bundles must partition the banks of both ranks")
        if not math.isclose(self.tccd_l, 2 * self.tccd_s):
            raise ConfigError("geometry.tccd_l", "must equal 2 * tccd_s")

    @property
    def xpu_beat_bytes(self) -> int:
        return self.xpu_bits_per_access // 8

    @property
    def pim_beat_bytes(self) -> int:
        return self.bank_groups_per_pc * self.bits_per_bundle_beat // 8

    @property
    def xpu_pc_rate(self) -> float:
        """Peak bytes/s of one pseudo channel on the xPU path."""
        return self.xpu_beat_bytes / self.tccd_s

    @property
    def pim_pc_rate(self) -> float:
        return self.pim_beat_bytes / self.tccd_l


@dataclass(frozen=True)
class StackConfig:
    capacity_bytes: int = 16 * GiB
    n_pseudo_channels: int = 32
    base_bw_per_stack: float = BASE_STACK_BW
    pim_variant: str = "none"
    pim_bw_multiplier: float | None = None
    pim_peak_op_b: float | None = None
    geometry: MemoryGeometry = field(default_factory=MemoryGeometry)

    def __post_init__(self):
        if self.pim_variant not in PIM_VARIANTS:
            raise ConfigError("stack.pim_variant", f"must be one of {PIM_VARIANTS}")
        if self.pim_bw_multiplier is None:
            object.__setattr__(self, "pim_bw_multiplier", _VARIANT_BW_MULT[self.pim_variant])
        if self.pim_peak_op_b is None:
            object.__setattr__(self, "pim_peak_op_b", _VARIANT_OP_B[self.pim_variant])
        if self.capacity_bytes <= 0 or self.base_bw_per_stack <= 0:
            raise ConfigError("stack", "capacity and bandwidth must be positive")

    @property
    def has_pim(self) -> bool:
        return self.pim_variant != "none"

    @property
    def pim_bw_per_stack(self) -> float:
        return self.base_bw_per_stack * self.pim_bw_multiplier

    @property
    def pim_peak_flops_per_stack(self) -> float:
        return self.pim_bw_per_stack * self.pim_peak_op_b


@dataclass(frozen=True)
class DeviceConfig:
    name: str = "gpu"
    xpu_peak_flops: float = 990e12
    n_stacks: int = 5
    stack: StackConfig = field(default_factory=StackConfig)
    launch_overhead_s: float = 5e-6
    dram_efficiency: float = 0.9

    def __post_init__(self):
        if self.n_stacks < 1:
            raise ConfigError("device.n_stacks", "must be >= 1")
        if self.xpu_peak_flops < 0:
            raise ConfigError("device.xpu_peak_flops", "must be >= 0")
        if not 0 < self.dram_efficiency <= 1:
            raise ConfigError("device.dram_efficiency", "must be in (0, 1]")

    @property
    def capacity_bytes(self) -> int:
        return self.n_stacks * self.stack.capacity_bytes

    @property
    def has_xpu(self) -> bool:
        return self.xpu_peak_flops > 0

    @property
    def has_pim(self) -> bool:
        return self.stack.has_pim

    @property
    def pim_peak_flops(self) -> float:
        return self.n_stacks * self.stack.pim_peak_flops_per_stack


@dataclass(frozen=True)
class SystemConfig:
    """Nodes of identical devices; hetero systems add dedicated PIM devices."""

    n_nodes: int = 1
    devices_per_node: int = 4
    intra_node_bw: float = 900e9
    inter_node_bw: float = 400e9
    inter_node_latency_s: float = 2e-6
    device: DeviceConfig = field(default_factory=DeviceConfig)
    max_batch: int = 64
    pim_devices_per_node: int = 0
    pim_device: DeviceConfig | None = None

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigError("system.n_nodes", "must be >= 1")
        if not 1 <= self.devices_per_node + self.pim_devices_per_node <= 8:
            raise ConfigError("system.devices_per_node", "must be between 1 and 8")
        if self.devices_per_node < 1:
            raise ConfigError("system.devices_per_node", "must be >= 1")
        if self.max_batch < 1:
            raise ConfigError("system.max_batch", "must be >= 1")
        if self.pim_devices_per_node and self.pim_device is None:
            raise ConfigError("system.pim_device", "required when pim_devices_per_node > 0")

    @property
    def is_hetero(self) -> bool:
        return self.pim_devices_per_node > 0

    @property
    def n_devices(self) -> int:
        return self.n_nodes * (self.devices_per_node + self.pim_devices_per_node)

    def with_batch(self, max_batch: int) -> "SystemConfig":
        return replace(self, max_batch=max_batch)


def derive_bandwidths(device: DeviceConfig) -> tuple[float, float]:
    """Peak (xPU-path, PIM-path) device bandwidth in bytes/s."""
    xpu_bw = device.n_stacks * device.stack.base_bw_per_stack
    pim_bw = xpu_bw * device.stack.pim_bw_multiplier if device.has_pim else 0.0
    return xpu_bw, pim_bw


# device presets
def _device(name: str, variant: str, xpu_flops: float = 990e12) -> DeviceConfig:
    return DeviceConfig(name=name, xpu_peak_flops=xpu_flops,
                        stack=StackConfig(pim_variant=variant))


DEVICE_PRESETS: dict[str, DeviceConfig] = {
    "gpu_baseline": _device("gpu_baseline", "none"),
    "duplex": _device("duplex", "logic_pim"),
    "bank_pim": _device("bank_pim", "bank_pim"),
    "bankgroup_pim": _device("bankgroup_pim", "bankgroup_pim"),
    # standalone Logic-PIM device for the heterogeneous comparison
    "logic_pim_only": _device("logic_pim_only", "logic_pim", xpu_flops=0.0),
}

# default (nodes, devices per node) per model
MODEL_TOPOLOGY = {
    "mixtral": (1, 4),
    "opt": (1, 4),
    "llama3": (1, 4),
    "glam": (1, 8),
    "grok1": (2, 8),
}


def system_preset(name: str, model: ModelConfig | str = "mixtral",
                  max_batch: int = 64) -> SystemConfig:
    """Named system presets sized for ``model``.

    ``hetero`` is two GPUs plus two standalone Logic-PIM devices per node;
    ``gpu_2x`` doubles the device count (filling nodes up to eight first).
    """
    mname = model if isinstance(model, str) else model.name
    nodes, per_node = MODEL_TOPOLOGY.get(mname, (1, 4))
    if name == "hetero":
        return SystemConfig(n_nodes=nodes, devices_per_node=per_node // 2,
                            device=DEVICE_PRESETS["gpu_baseline"], max_batch=max_batch,
                            pim_devices_per_node=per_node - per_node // 2,
                            pim_device=DEVICE_PRESETS["logic_pim_only"])
    if name == "gpu_2x":
        total = 2 * nodes * per_node
        per_node = min(8, total)
        nodes = math.ceil(total / per_node)
        name = "gpu_baseline"
    if name not in DEVICE_PRESETS:
        raise ConfigError("system", f"unknown preset {name!r}")
    return SystemConfig(n_nodes=nodes, devices_per_node=per_node,
                        device=DEVICE_PRESETS[name], max_batch=max_batch)


def _device_from_dict(data: dict) -> DeviceConfig:
    data = dict(data)
    stack = data.pop("stack", {})
    if isinstance(stack, dict):
        stack = dict(stack)
        geom = stack.pop("geometry", {})
        stack = StackConfig(geometry=MemoryGeometry(**geom), **stack)
    return DeviceConfig(stack=stack, **data)


def system_from_dict(data: dict) -> SystemConfig:
    data = dict(data)
    dev = data.pop("device", "gpu_baseline")
    device = DEVICE_PRESETS[dev] if isinstance(dev, str) else _device_from_dict(dev)
    pim = data.pop("pim_device", None)
    if isinstance(pim, str):
        pim = DEVICE_PRESETS[pim]
    elif isinstance(pim, dict):
        pim = _device_from_dict(pim)
    unknown = set(data) - set(SystemConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"system.{sorted(unknown)[0]}", "unknown field")
    return SystemConfig(device=device, pim_device=pim, **data)


def load_system(ref, model: ModelConfig | str = "mixtral", max_batch: int = 64) -> SystemConfig:
    if isinstance(ref, SystemConfig):
        return ref
    if isinstance(ref, dict):
        return system_from_dict(ref)
    if str(ref) in DEVICE_PRESETS or str(ref) in ("hetero", "gpu_2x"):
        return system_preset(str(ref), model, max_batch)
    path = Path(ref)
    if not path.exists():
        raise ConfigError("system", f"unknown preset or missing file {ref!r}")
    from .config import read_structured

    return system_from_dict(read_structured(path))


def system_to_dict(system: SystemConfig) -> dict:
    return asdict(system)


@dataclass(frozen=True)
class CapacityReport:
    weight_bytes_per_device: int
    capacity_bytes: int
    kv_bytes_available: int
    kv_bytes_per_request: int
    max_batch: int
    ctx_len: int
    pim_device_weight_bytes: int = 0


def _expert_bytes_per_device(model: ModelConfig, n_nodes: int, per_node: int,
                             strategy: str) -> int:
    if not model.is_moe:
        return 0
    per_expert = model.ffn_weight_bytes() * model.n_moe_layers
    total_devices = n_nodes * per_node
    if strategy == "tensor_parallel_experts":
        experts_per_node = math.ceil(model.n_experts / n_nodes)
        return math.ceil(experts_per_node * per_expert / per_node)
    if total_devices <= model.n_experts:
        return math.ceil(model.n_experts / total_devices) * per_expert
    return math.ceil(per_expert * model.n_experts / total_devices)


def validate_system(system: SystemConfig, model: ModelConfig,
                    strategy: str = "expert_parallel", ctx_len: int = 0) -> CapacityReport:
    """Per-device weight footprint and the KV-limited batch at ``ctx_len``.

    Non-expert weights are tensor-parallel inside a node and replicated across
    nodes; expert weights follow ``strategy``.  Raises
    :class:`CapacityExceeded` when weights alone do not fit.
    """
    cap = system.device.capacity_bytes
    non_expert = math.ceil(model.non_expert_weight_bytes() / system.devices_per_node)
    kv_per_req_total = kv_cache_bytes(model, ctx_len)
    if system.is_hetero:
        pim_cap = system.pim_device.capacity_bytes
        gpu_w = non_expert
        pim_w = _expert_bytes_per_device(model, system.n_nodes,
                                         system.pim_devices_per_node, "expert_parallel")
        for used, c in ((gpu_w, cap), (pim_w, pim_cap)):
            if used > c:
                raise CapacityExceeded(used - c)
        kv_dev = system.pim_devices_per_node
        kv_free = pim_cap - pim_w
        weight = gpu_w
    else:
        weight = non_expert + _expert_bytes_per_device(model, system.n_nodes,
                                                       system.devices_per_node, strategy)
        if weight > cap:
            raise CapacityExceeded(weight - cap,
                                   f"{model.name} needs {weight} B per device, "
                                   f"capacity {cap} B (short {weight - cap} B)")
        pim_w = 0
        kv_dev = system.devices_per_node
        kv_free = cap - weight
    kv_per_req = math.ceil(kv_per_req_total / kv_dev)
    max_batch = (kv_free // kv_per_req) * system.n_nodes if kv_per_req else 10**12
    return CapacityReport(weight, cap, kv_free, kv_per_req, int(max_batch), ctx_len, pim_w)
