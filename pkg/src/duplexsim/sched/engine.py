"""Stage execution and the serving loop.

One engine instance simulates one (model, system, mode) combination.  Every
stage walks the layers in order with a barrier after each phase; expert and
attention co-processing run two streams per device that may overlap in time
but never share a memory space.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..cost import exec_units, intra_device_reduce_profile, kernel_time, stack_pim_unit
from ..dram import SpaceLedger, space_mask
from ..errors import CapacityExceeded, ConfigError, InvalidArgument, InvariantViolation, SimulationComplete
from ..hardware import SystemConfig, system_preset, validate_system
from ..model import (
    ModelConfig,
    WorkProfile,
    SOFTMAX_FLOPS_PER_ELEMENT,
    attention_cost,
    dense_ffn_cost,
    embedding_cost,
    gate_cost,
    kv_cache_bytes,
    lm_head_cost,
    moe_expert_cost,
    projection_cost,
    qkv_cost,
    softmax_cost,
)
from ..placement import PREFILL_SCRATCH_SPACE, N_SPACES, kv_migration_cost, plan
from .batching import StageBatch, form_stage
from .gating import gate_counts
from .partition import ExpertLUT, partition_experts
from .trace import RequestRecord, StageRecord, Trace
from .workload import Request, is_closed_loop

MODES = ("gpu_baseline", "gpu_2x", "hetero", "bank_pim", "duplex", "duplex_pe", "duplex_pe_et")
PIM_MODES = frozenset({"bank_pim", "duplex", "duplex_pe", "duplex_pe_et"})
COPROC_MODES = frozenset({"duplex_pe", "duplex_pe_et"})
# Logic-PIM layouts keep prefill K/V in a scratch space and move it afterwards
MIGRATION_MODES = frozenset({"duplex", "duplex_pe", "duplex_pe_et"})

DEFAULT_SYSTEM = {
    "gpu_baseline": "gpu_baseline",
    "gpu_2x": "gpu_2x",
    "hetero": "hetero",
    "bank_pim": "bank_pim",
    "duplex": "duplex",
    "duplex_pe": "duplex",
    "duplex_pe_et": "duplex",
}

log = logging.getLogger(__name__)

STAGE_SLACK = 1000
ALL_SPACES = (1 << N_SPACES) - 1
SCRATCH_MASK = 1 << PREFILL_SCRATCH_SPACE


def default_system_for_mode(mode: str, model: ModelConfig | str = "mixtral",
                            max_batch: int = 64) -> SystemConfig:
    if mode not in DEFAULT_SYSTEM:
        raise InvalidArgument(f"unknown mode {mode!r}; expected one of {MODES}")
    return system_preset(DEFAULT_SYSTEM[mode], model, max_batch)


def stage_policy(mode: str, mixed: bool) -> tuple[str, str]:
    """(decode-attention unit, MoE unit) for a stage.

    ``remote`` means the dedicated PIM devices of a heterogeneous system,
    ``coproc`` the xPU/Logic-PIM expert partitioner.
    """
    if mode in ("gpu_baseline", "gpu_2x"):
        return "xpu", "xpu"
    if mode == "hetero":
        return "remote", "remote"
    if mode in COPROC_MODES:
        return "pim", "coproc"
    return ("xpu", "xpu") if mixed else ("pim", "pim")


def decode_attention_profile(model: ModelConfig, ctxs) -> WorkProfile:
    """Summed decode attention (score, softmax, context) of many requests.

    Closed form of summing :func:`attention_cost` and :func:`softmax_cost`
    over single-token queries, which are linear in the context length.
    """
    n = len(ctxs)
    if n == 0:
        return WorkProfile(kernel_class="attention")
    total = float(sum(ctxs))
    groups = model.n_heads // model.grp
    d, p = model.d_head, model.precision
    flops = groups * 4.0 * model.grp * d * total + SOFTMAX_FLOPS_PER_ELEMENT * model.n_heads * total
    act = groups * (2.0 * d * p * total + 2.0 * model.grp * d * p * n)
    return WorkProfile(flops=flops, act_bytes=act, kernel_class="attention")


def prefill_attention_profile(model: ModelConfig, lens) -> WorkProfile:
    out = WorkProfile(kernel_class="attention")
    for l_in in lens:
        att = attention_cost(l_in, l_in, model.n_heads, model.d_head, model.grp, model.precision)
        sm = softmax_cost(l_in, l_in, model.n_heads)
        out = out + att + sm.relabel("attention")
    return out.relabel("attention")


@dataclass
class _Node:
    idx: int
    decoding: list = field(default_factory=list)
    prefilling: list = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return len(self.decoding) + sum(r.l_in for r in self.prefilling)

    @property
    def out_tokens(self) -> int:
        return len(self.decoding) + len(self.prefilling)


@dataclass(frozen=True)
class _MoeGroup:
    """Expert-holding devices with identical contents (simulated once)."""

    node: int
    device: int          # first device id within the node
    n_dev: int
    experts: tuple
    fraction: float
    spaces: tuple        # memory-space mask per expert


class Engine:
    """Simulates stages of one (model, system, mode) combination."""

    def __init__(self, model: ModelConfig, system: SystemConfig, mode: str, seed: int = 0):
        if mode not in MODES:
            raise InvalidArgument(f"unknown mode {mode!r}; expected one of {MODES}")
        self.model, self.system, self.mode, self.seed = model, system, mode, seed
        dev = system.device
        if mode == "hetero" and not system.is_hetero:
            raise ConfigError("system.pim_devices_per_node", "hetero mode needs PIM devices")
        if mode != "hetero" and system.is_hetero:
            raise ConfigError("system.pim_devices_per_node", f"mode {mode} needs a homogeneous system")
        if mode in PIM_MODES and not dev.has_pim:
            raise ConfigError("system.device.stack.pim_variant", f"mode {mode} needs a PIM device")
        units = exec_units(dev)
        if "xpu" not in units:
            raise ConfigError("system.device.xpu_peak_flops", "main devices need an xPU")
        self.xpu = units["xpu"]
        self.placement = plan(model, system, mode)
        self.D = system.devices_per_node
        self.N = system.n_nodes
        if system.is_hetero:
            self.moe_device = system.pim_device
            self.P = system.pim_devices_per_node
            self.remote_pim = exec_units(system.pim_device)["pim"]
            self.moe_stack_pim = stack_pim_unit(system.pim_device)
            self.dev_offset = self.D
        else:
            self.moe_device = dev
            self.P = 0
            self.remote_pim = None
            self.moe_stack_pim = stack_pim_unit(dev) if dev.has_pim else None
            self.dev_offset = 0
        self.stack_pim = stack_pim_unit(dev) if dev.has_pim else None
        self.groups = self._moe_groups()
        self._luts: dict[float, ExpertLUT] = {}
        self.ledgers: dict[tuple[int, int], SpaceLedger] = {}
        self.migrates = mode in MIGRATION_MODES
        self.trace = Trace(meta=self._meta())
        self._add = self.trace.kernels.add
        self._last_end = 0.0

    # setup

    def _meta(self) -> dict:
        s, dev = self.system, self.system.device
        meta = {
            "model": self.model.name, "mode": self.mode, "seed": self.seed,
            "n_nodes": s.n_nodes, "devices_per_node": s.devices_per_node,
            "pim_devices_per_node": s.pim_devices_per_node, "max_batch": s.max_batch,
            "xpu_peak_flops": dev.xpu_peak_flops,
            "pim_peak_flops": (s.pim_device.pim_peak_flops if s.is_hetero
                               else dev.pim_peak_flops if dev.has_pim else 0.0),
            "xpu_units": s.n_nodes * s.devices_per_node,
            "pim_units": s.n_nodes * (s.pim_devices_per_node if s.is_hetero
                                      else s.devices_per_node if dev.has_pim else 0),
            "n_devices": s.n_devices,
            "stage_convention": "the admission stage emits the first token",
        }
        return meta

    def _moe_groups(self) -> list[_MoeGroup]:
        pl = self.placement
        per_node = pl.devices_per_node
        groups: list[_MoeGroup] = []
        for g, held in enumerate(pl.device_experts):
            if not held:
                continue
            node, local = divmod(g, per_node)
            last = groups[-1] if groups else None
            key = tuple(e for e, _ in held)
            if (last is not None and last.node == node and last.experts == key
                    and last.device + last.n_dev == local + self.dev_offset):
                groups[-1] = _MoeGroup(node, last.device, last.n_dev + 1, key,
                                       last.fraction, last.spaces)
                continue
            spaces = tuple(1 << pl.memory_space_map[g][e] for e in key)
            groups.append(_MoeGroup(node, local + self.dev_offset, 1, key, held[0][1], spaces))
        return groups

    def lut(self, fraction: float) -> ExpertLUT:
        if fraction not in self._luts:
            self._luts[fraction] = ExpertLUT(self.model, self.moe_device, fraction)
        return self._luts[fraction]

    def ledger(self, node: int, device: int) -> SpaceLedger:
        key = (node, device)
        if key not in self.ledgers:
            self.ledgers[key] = SpaceLedger(N_SPACES)
        return self.ledgers[key]

    # stage execution

    def _split(self, batch: StageBatch) -> list[_Node]:
        nodes = [_Node(k) for k in range(self.N)]
        for i, r in enumerate(batch.decoding):
            nodes[i % self.N].decoding.append(r)
        off = len(batch.decoding)
        for i, r in enumerate(batch.prefilling):
            nodes[(off + i) % self.N].prefilling.append(r)
        return nodes

    def _tp(self, prof: WorkProfile) -> float:
        """Time of a node-level profile split evenly over the node's xPUs."""
        if prof.flops == 0 and prof.bytes == 0:
            return 0.0
        return kernel_time(prof.scaled(1.0 / self.D), self.xpu)

    def _head_share(self, n_dev: int) -> tuple[float, int]:
        kvh = self.model.n_kv_heads
        per_dev = math.ceil(kvh / n_dev)
        return (per_dev / kvh if kvh >= n_dev else 1.0 / n_dev), max(1, per_dev if kvh >= n_dev else 1)

    def _pim_attention_time(self, prof: WorkProfile, n_req: int, n_dev: int, unit, n_stacks) -> float:
        share, heads = self._head_share(n_dev)
        items = n_req * heads
        stack_share = math.ceil(items / n_stacks) / items
        return kernel_time(prof.scaled(share * stack_share), unit)

    def _fixed_phases(self, nodes: list[_Node], mixed: bool) -> dict:
        """Per-layer phases whose cost does not depend on the gate outcome."""
        m = self.model
        h, p = m.hidden, m.precision
        att_unit, moe_unit = stage_policy(self.mode, mixed)
        ph: dict[str, list] = {k: [] for k in ("qkv", "attn", "proj", "gate", "ffn", "ar",
                                                "moe_pre", "moe_post", "embed", "head")}
        icoll = self.system.intra_node_bw
        for nd in nodes:
            T = nd.tokens
            if T == 0:
                continue
            k = nd.idx
            for name, prof in (("qkv", qkv_cost(m, T)), ("proj", projection_cost(m, T)),
                               ("embed", embedding_cost(m, T)),
                               ("head", lm_head_cost(m, nd.out_tokens))):
                ph[name].append((k, "xpu", "fc", prof, 0.0, self._tp(prof), -1, self.D, ALL_SPACES))
            if m.is_moe:
                prof = gate_cost(m, T)
                ph["gate"].append((k, "xpu", "fc", prof, 0.0, self._tp(prof), -1, self.D, ALL_SPACES))
            if m.n_layers > m.n_moe_layers:
                prof = dense_ffn_cost(m, T)
                ph["ffn"].append((k, "xpu", "fc", prof, 0.0, self._tp(prof), -1, self.D, ALL_SPACES))
            act = T * h * p
            if self.D > 1:
                dur = 2.0 * (self.D - 1) / self.D * act / icoll
                moved = WorkProfile(act_bytes=2.0 * (self.D - 1) * act, kernel_class="transfer")
                ph["ar"].append((k, "link", "transfer", moved, 0.0, dur, -1, self.D, 0))
            ph["attn"].extend(self._attention_plan(nd, att_unit))
            ph["moe_pre"].extend(self._moe_comm(nd, moe_unit, before=True))
            ph["moe_post"].extend(self._moe_comm(nd, moe_unit, before=False))
        return ph

    def _attention_plan(self, nd: _Node, att_unit: str) -> list:
        m = self.model
        k = nd.idx
        ctxs = [r.ctx_len for r in nd.decoding]
        dec = decode_attention_profile(m, ctxs)
        pre = prefill_attention_profile(m, [r.l_in for r in nd.prefilling])
        kv_mask = space_mask(self.placement.kv_space(r.id) for r in nd.decoding)
        out = []
        if att_unit == "xpu" or not ctxs:
            both = dec + pre
            share, _ = self._head_share(self.D)
            dur = kernel_time(both.scaled(share), self.xpu)
            mask = (kv_mask if ctxs else 0) | (SCRATCH_MASK if nd.prefilling else 0)
            return [(k, "xpu", "attention", both, 0.0, dur, -1, self.D, mask)]
        if nd.prefilling:
            share, _ = self._head_share(self.D)
            out.append((k, "xpu", "attention", pre, 0.0, kernel_time(pre.scaled(share), self.xpu),
                        -1, self.D, SCRATCH_MASK))
        if att_unit == "pim":
            dur = self._pim_attention_time(dec, len(ctxs), self.D, self.stack_pim,
                                           self.system.device.n_stacks)
            out.append((k, "pim", "attention", dec, 0.0, dur, -1, self.D, kv_mask))
            return out
        # remote: queries out to the PIM devices, outputs back
        P, bw = self.P, self.system.intra_node_bw
        qkv_b = len(ctxs) * (m.hidden + 2 * m.kv_dim) * m.precision
        kv_new = sum(r.l_in for r in nd.prefilling) * 2 * m.kv_dim * m.precision
        back_b = len(ctxs) * m.hidden * m.precision
        t_in = (qkv_b + kv_new) / P / bw
        dur = self._pim_attention_time(dec, len(ctxs), P, self.moe_stack_pim,
                                       self.moe_device.n_stacks)
        t_out = back_b / P / bw
        dev = self.dev_offset
        out.append((k, "link", "transfer", WorkProfile(act_bytes=qkv_b + kv_new, kernel_class="transfer"),
                    0.0, t_in, dev, P, 0))
        out.append((k, "pim", "attention", dec, t_in, dur, dev, P, kv_mask))
        out.append((k, "link", "transfer", WorkProfile(act_bytes=back_b, kernel_class="transfer"),
                    t_in + dur, t_out, dev, P, 0))
        return out

    def _moe_comm(self, nd: _Node, moe_unit: str, before: bool) -> list:
        """Token dispatch (before) and partial-output combine (after) of a MoE layer."""
        m = self.model
        if not m.is_moe:
            return []
        act = nd.tokens * m.hidden * m.precision
        out = []
        t = 0.0
        if moe_unit == "remote":
            P, bw = self.P, self.system.intra_node_bw
            nbytes = act if before else P * act
            dur = nbytes / bw
            out.append((nd.idx, "link", "transfer",
                        WorkProfile(act_bytes=nbytes * (1 if before else self.D), kernel_class="transfer"),
                        t, dur, self.dev_offset, P, 0))
            t += dur
        elif not before and self.D > 1:
            dur = 2.0 * (self.D - 1) / self.D * act / self.system.intra_node_bw
            out.append((nd.idx, "link", "transfer",
                        WorkProfile(act_bytes=2.0 * (self.D - 1) * act, kernel_class="transfer"),
                        t, dur, -1, self.D, 0))
            t += dur
        if self.N > 1:
            nbytes = act * (self.N - 1) / self.N
            dur = nbytes / self.system.inter_node_bw + self.system.inter_node_latency_s
            out.append((nd.idx, "link", "transfer", WorkProfile(act_bytes=nbytes, kernel_class="transfer"),
                        t, dur, -1, 1, 0))
        return out

    def _emit(self, stage: int, layer: int, rows: list, t0: float) -> float:
        end = t0
        add = self._add
        for node, unit, cls, prof, rel_start, dur, dev, n_dev, mask in rows:
            s = t0 + rel_start
            e = s + dur
            add(stage, layer, cls, unit, s, e, prof.bytes, prof.flops, node, dev, n_dev, mask)
            if e > end:
                end = e
        return end

    def _emit_attention(self, stage: int, layer: int, rows: list, t0: float) -> float:
        """Concurrent attention streams, reserved against each device's ledger."""
        if self.mode not in COPROC_MODES:
            return self._emit(stage, layer, rows, t0)
        end = t0
        for node, unit, cls, prof, rel_start, dur, dev, n_dev, mask in rows:
            begin, finish = t0 + rel_start, t0 + rel_start + dur
            for d in range(self.D):
                b, f = self.ledger(node, d).reserve(mask, t0 + rel_start, dur, unit)
                begin, finish = max(begin, b), max(finish, f)
            self._add(stage, layer, cls, unit, begin, finish, prof.bytes, prof.flops,
                      node, dev, n_dev, mask)
            end = max(end, finish)
        return end

    def _moe_layer(self, stage: int, layer: int, counts: np.ndarray, t0: float,
                   moe_unit: str, node_tokens: list) -> float:
        m = self.model
        h, p = m.hidden, m.precision
        add = self._add
        end = t0
        for g in self.groups:
            c = counts[list(g.experts)]
            lut = self.lut(g.fraction)
            cols = lut.shard_cols
            nd = g.n_dev
            if moe_unit == "coproc":
                assign = partition_experts(c, lut)
                pim_items = [(g.experts[i], g.spaces[i], lut("pim", int(c[i])), int(c[i]))
                             for i in assign.pim_experts if c[i] > 0]
                xpu_items = [(g.experts[i], g.spaces[i], lut("xpu", int(c[i])), int(c[i]))
                             for i in reversed(assign.xpu_experts) if c[i] > 0]
                led = self.ledger(g.node, g.device)
                runs = coprocess(led, pim_items, xpu_items, t0)
            else:
                kind = "xpu" if moe_unit == "xpu" else "pim"
                runs, t = [], t0
                for i, e in enumerate(g.experts):
                    if c[i] > 0:
                        dur = lut(kind, int(c[i]))
                        runs.append((kind, e, g.spaces[i], int(c[i]), t, t + dur))
                        t += dur
            dev_end = t0
            pim_tokens = 0
            one = moe_expert_cost(1, h, cols, p, m.ffn_matrices)
            for kind, e, mask, n, s, f in runs:
                add(stage, layer, "moe_expert", kind, s, f,
                    (one.weight_bytes + one.act_bytes * n) * nd, one.flops * n * nd,
                    g.node, g.device, nd, mask, 1, n)
                dev_end = max(dev_end, f)
                if kind == "pim":
                    pim_tokens += n
            if pim_tokens:
                red = intra_device_reduce_profile(pim_tokens * h * p,
                                                  self.moe_device.n_stacks, p)
                unit = self.remote_pim if moe_unit == "remote" else self.xpu
                dur = kernel_time(red, unit)
                add(stage, layer, "allreduce_partial", unit.kind, dev_end, dev_end + dur,
                    red.bytes * nd, red.flops * nd, g.node, g.device, nd, SCRATCH_MASK)
                dev_end += dur
            end = max(end, dev_end)
        return end

    def simulate_stage(self, batch: StageBatch, clock: float) -> float:
        """Run one stage from ``clock``; returns the stage end time.

        Stages must be simulated in time order: the memory-space ledgers keep
        the reservations of earlier stages.
        """
        if clock < self._last_end:
            raise InvalidArgument(f"clock {clock} precedes the previous stage end {self._last_end}")
        m = self.model
        s = batch.stage_index
        mixed = bool(batch.prefilling)
        nodes = self._split(batch)
        _, moe_unit = stage_policy(self.mode, mixed)
        ph = self._fixed_phases(nodes, mixed)
        counts = None
        if m.is_moe:
            rng = np.random.default_rng([self.seed, s])
            counts = gate_counts(rng, batch.tokens, m.n_experts, m.top_k, m.n_moe_layers)
        node_tokens = [nd.tokens for nd in nodes]
        t = self._emit(s, -1, ph["embed"], clock)
        moe_row = 0
        for layer in range(m.n_layers):
            t = self._emit(s, layer, ph["qkv"], t)
            t = self._emit_attention(s, layer, ph["attn"], t)
            t = self._emit(s, layer, ph["proj"], t)
            t = self._emit(s, layer, ph["ar"], t)
            if m.is_moe_layer(layer):
                t = self._emit(s, layer, ph["gate"], t)
                t = self._emit(s, layer, ph["moe_pre"], t)
                t = self._moe_layer(s, layer, counts[moe_row], t, moe_unit, node_tokens)
                t = self._emit(s, layer, ph["moe_post"], t)
                moe_row += 1
            else:
                t = self._emit(s, layer, ph["ffn"], t)
                t = self._emit(s, layer, ph["ar"], t)
        t = self._emit(s, m.n_layers, ph["head"], t)
        if self.migrates and batch.prefilling:
            t = self._migrate(s, nodes, t)
        self._last_end = t
        return t

    def _migrate(self, stage: int, nodes: list[_Node], t0: float) -> float:
        end = t0
        dev = self.system.device
        for nd in nodes:
            if not nd.prefilling:
                continue
            dur = sum(kv_migration_cost(r.l_in, self.model, dev, self.D) for r in nd.prefilling)
            nbytes = 2.0 * sum(kv_cache_bytes(self.model, r.l_in) for r in nd.prefilling)
            mask = SCRATCH_MASK | space_mask(self.placement.kv_space(r.id) for r in nd.prefilling)
            self._add(stage, self.model.n_layers, "transfer", "xpu", t0, t0 + dur, nbytes, 0.0,
                      nd.idx, -1, self.D, mask)
            end = max(end, t0 + dur)
        return end

    # serving loop

    def effective_max_batch(self, ctx_len: int) -> int:
        """Configured batch limit, lowered if the KV cache of ``ctx_len``-token
        requests would not fit next to the weights."""
        rep = validate_system(self.system, self.model, self.placement.strategy, ctx_len)
        if rep.max_batch < 1:
            raise CapacityExceeded(rep.kv_bytes_per_request - rep.kv_bytes_available,
                                   f"no room for one {ctx_len}-token KV cache")
        eff = min(self.system.max_batch, rep.max_batch)
        if eff < self.system.max_batch:
            log.warning("max_batch %d lowered to %d by KV capacity", self.system.max_batch, eff)
        self.trace.meta["effective_max_batch"] = eff
        return eff

    def run(self, workload: list[Request]) -> Trace:
        reqs = [Request(r.id, r.arrival_time, r.l_in, r.l_out) for r in workload]
        closed = is_closed_loop(reqs) if reqs else True
        queue = deque(sorted(reqs, key=lambda r: (r.arrival_time, r.id)))
        running: list[Request] = []
        clock, stage = 0.0, 0
        guard = sum(r.l_out for r in reqs) + len(reqs) + STAGE_SLACK
        max_batch = self.effective_max_batch(max((r.l_in + r.l_out for r in reqs), default=0))
        while True:
            try:
                batch = form_stage(clock, queue, running, max_batch, stage, closed)
            except SimulationComplete:
                break
            if batch.empty:
                clock = max(clock, queue[0].arrival_time)
                continue
            if stage >= guard:
                raise InvariantViolation(f"stage guard {guard} exceeded")
            end = self.simulate_stage(batch, clock)
            for r in batch.decoding:
                r.emit_token(end)
            for r in batch.prefilling:
                r.emit_token(end)
            self.trace.stages.append(StageRecord(stage, batch.kind, clock, end, batch.size,
                                                 len(batch.prefilling)))
            clock, stage = end, stage + 1
        self.trace.requests = [RequestRecord(r.id, r.arrival_time, r.l_in, r.l_out,
                                             tuple(r.token_timestamps))
                               for r in sorted(reqs, key=lambda r: r.id)]
        return self.trace


def coprocess(ledger: SpaceLedger, pim_items: list, xpu_items: list, t0: float) -> list:
    """Two kernel streams (Logic-PIM, xPU) sharing one device's memory spaces.

    Items are ``(expert, space mask, duration, tokens)``.  The stream that
    frees up first takes its first kernel whose spaces are already free,
    otherwise the one whose spaces free up soonest.  Returns
    ``(unit, expert, mask, tokens, start, end)`` per kernel.
    """
    free = {"pim": t0, "xpu": t0}
    queues = {"pim": list(pim_items), "xpu": list(xpu_items)}
    out = []
    while queues["pim"] or queues["xpu"]:
        kind = min((k for k in ("pim", "xpu") if queues[k]), key=lambda k: free[k])
        q = queues[kind]
        pick = next((i for i, it in enumerate(q) if ledger.free_at(it[1]) <= free[kind]), None)
        if pick is None:
            pick = min(range(len(q)), key=lambda i: ledger.free_at(q[i][1]))
        e, mask, dur, n = q.pop(pick)
        begin, end = ledger.reserve(mask, free[kind], dur, kind)
        free[kind] = end
        out.append((kind, e, mask, n, begin, end))
    return out


def simulate_stage(engine: Engine, batch: StageBatch, clock: float) -> tuple[float, list[dict]]:
    """One stage on ``engine``; returns the stage end and its kernel records."""
    first = len(engine.trace.kernels)
    end = engine.simulate_stage(batch, clock)
    rows = list(engine.trace.kernels.rows())[first:]
    return end, rows


def run(model: ModelConfig, system: SystemConfig, mode: str, workload: list[Request],
        seed: int = 0) -> Trace:
    return Engine(model, system, mode, seed).run(workload)
