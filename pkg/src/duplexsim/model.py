"""LLM architectures and per-kernel work accounting.

Every cost here is a :class:`WorkProfile` -- flops, bytes of weights read and
bytes of activations/KV moved -- which the cost module turns into time and
energy.  Nothing in this module executes tensors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InvalidArgument

KERNEL_CLASSES = (
    "fc",
    "attention",
    "attention_score",
    "attention_context",
    "moe_expert",
    "softmax",
    "activation",
    "allreduce_partial",
    "transfer",
)

# flops per element for the lightweight elementwise kernels
SOFTMAX_FLOPS_PER_ELEMENT = 5
ACTIVATION_FLOPS_PER_ELEMENT = 4

MOE_PATTERNS = ("all", "alternating", "none")


@dataclass(frozen=True)
class WorkProfile:
    flops: float = 0.0
    weight_bytes: float = 0.0
    act_bytes: float = 0.0
    kernel_class: str = "fc"

    def __post_init__(self):
        if self.kernel_class not in KERNEL_CLASSES:
            raise InvalidArgument(f"unknown kernel class {self.kernel_class!r}")
        if min(self.flops, self.weight_bytes, self.act_bytes) < 0:
            raise InvalidArgument("work profile fields must be non-negative")

    @property
    def bytes(self) -> float:
        return self.weight_bytes + self.act_bytes

    @property
    def op_intensity(self) -> float:
        """Flops per byte moved; ``inf`` for a byte-free profile with work."""
        total = self.bytes
        if total > 0:
            return self.flops / total
        return float("inf") if self.flops > 0 else 0.0

    @property
    def weight_op_intensity(self) -> float:
        return self.flops / self.weight_bytes if self.weight_bytes else float("inf")

    def __add__(self, other: "WorkProfile") -> "WorkProfile":
        return WorkProfile(
            self.flops + other.flops,
            self.weight_bytes + other.weight_bytes,
            self.act_bytes + other.act_bytes,
            self.kernel_class,
        )

    def scaled(self, factor: float) -> "WorkProfile":
        return WorkProfile(self.flops * factor, self.weight_bytes * factor,
                           self.act_bytes * factor, self.kernel_class)

    def relabel(self, kernel_class: str) -> "WorkProfile":
        return replace(self, kernel_class=kernel_class)


ZERO_WORK = WorkProfile()


@dataclass(frozen=True)
class ModelConfig:
    """One decoder-only LLM.

    ``ffn_matrices`` is 3 for gated FFNs (gate/up/down) and 2 for plain
    up/down FFNs.  ``total_params`` is the nominal size; the shape-derived
    count is :meth:`param_count`.
    """

    name: str
    total_params: float
    n_layers: int
    hidden: int
    intermediate: int
    n_heads: int
    d_head: int
    grp: int = 1
    n_experts: int = 0
    top_k: int = 0
    moe_layer_pattern: str | None = None  # default: "all" with experts, else "none"
    weight_precision_bytes: int = 2
    vocab: int = 32000
    ffn_matrices: int = 3

    def __post_init__(self):
        if self.moe_layer_pattern is None:
            object.__setattr__(self, "moe_layer_pattern", "all" if self.n_experts else "none")
        for name in ("n_layers", "hidden", "intermediate", "n_heads", "d_head", "grp",
                     "weight_precision_bytes", "vocab"):
            if getattr(self, name) < 1 and not (name == "n_layers" and self.n_layers == 0):
                raise ConfigError(name, "must be >= 1")
        if self.hidden != self.n_heads * self.d_head:
            raise ConfigError("hidden", "must equal n_heads * d_head")
        if self.n_heads % self.grp:
            raise ConfigError("grp", "must divide n_heads")
        if self.moe_layer_pattern not in MOE_PATTERNS:
            raise ConfigError("moe_layer_pattern", f"must be one of {MOE_PATTERNS}")
        if (self.moe_layer_pattern == "none") != (self.n_experts == 0):
            raise ConfigError("moe_layer_pattern", "is 'none' iff n_experts == 0")
        if self.n_experts and not 1 <= self.top_k <= self.n_experts:
            raise ConfigError("top_k", "must satisfy 1 <= top_k <= n_experts")
        if self.ffn_matrices not in (2, 3):
            raise ConfigError("ffn_matrices", "must be 2 or 3")

    @property
    def precision(self) -> int:
        return self.weight_precision_bytes

    @property
    def n_kv_heads(self) -> int:
        return self.n_heads // self.grp

    @property
    def kv_dim(self) -> int:
        return self.hidden // self.grp

    @property
    def is_moe(self) -> bool:
        return self.n_experts > 0

    def is_moe_layer(self, layer: int) -> bool:
        if self.moe_layer_pattern == "all":
            return True
        if self.moe_layer_pattern == "alternating":
            return layer % 2 == 1
        return False

    @property
    def n_moe_layers(self) -> int:
        return sum(self.is_moe_layer(l) for l in range(self.n_layers))

    # weight inventory, in bytes
    def attention_weight_bytes(self) -> int:
        h = self.hidden
        return (h * (h + 2 * self.kv_dim) + h * h) * self.precision

    def ffn_weight_bytes(self) -> int:
        return self.ffn_matrices * self.hidden * self.intermediate * self.precision

    def gate_weight_bytes(self) -> int:
        return self.hidden * self.n_experts * self.precision

    def embedding_bytes(self) -> int:
        return self.vocab * self.hidden * self.precision

    def expert_weight_bytes(self) -> int:
        return self.n_moe_layers * self.n_experts * self.ffn_weight_bytes()

    def non_expert_weight_bytes(self) -> int:
        dense_layers = self.n_layers - self.n_moe_layers
        return (self.n_layers * self.attention_weight_bytes()
                + dense_layers * self.ffn_weight_bytes()
                + self.n_moe_layers * self.gate_weight_bytes()
                + 2 * self.embedding_bytes())

    def weight_bytes(self) -> int:
        return self.non_expert_weight_bytes() + self.expert_weight_bytes()

    def param_count(self) -> float:
        return self.weight_bytes() / self.precision

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, ModelConfig] = {
    "mixtral": ModelConfig("mixtral", 47e9, 32, 4096, 14336, 32, 128, grp=4,
                           n_experts=8, top_k=2, moe_layer_pattern="all", vocab=32000),
    # plain two-matrix experts reproduce the 143B parameter count
    "glam": ModelConfig("glam", 143e9, 32, 4096, 16384, 32, 128, grp=1,
                        n_experts=64, top_k=2, moe_layer_pattern="alternating",
                        vocab=256000, ffn_matrices=2),
    "grok1": ModelConfig("grok1", 314e9, 64, 6144, 32768, 48, 128, grp=6,
                         n_experts=8, top_k=2, moe_layer_pattern="all", vocab=131072),
    "opt": ModelConfig("opt", 66e9, 64, 9216, 36864, 72, 128, grp=1, vocab=50272,
                       ffn_matrices=2),
    "llama3": ModelConfig("llama3", 70e9, 80, 8192, 28672, 64, 128, grp=8, vocab=128256),
}


def model_from_dict(data: dict) -> ModelConfig:
    if "name" not in data:
        raise ConfigError("model.name", "is required")
    known = set(ModelConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"model.{sorted(unknown)[0]}", "unknown field")
    missing = [f for f in ("total_params", "n_layers", "hidden", "intermediate",
                           "n_heads", "d_head") if f not in data]
    if missing:
        raise ConfigError(f"model.{missing[0]}", "is required")
    return ModelConfig(**data)


def load_model(ref: str | Path | dict | ModelConfig) -> ModelConfig:
    """Resolve a preset name, a mapping, or a JSON/YAML file into a ModelConfig."""
    if isinstance(ref, ModelConfig):
        return ref
    if isinstance(ref, dict):
        return model_from_dict(ref)
    key = str(ref).lower()
    if key in PRESETS:
        return PRESETS[key]
    path = Path(ref)
    if not path.exists():
        raise ConfigError("model", f"unknown preset or missing file {ref!r}")
    from .config import read_structured

    return model_from_dict(read_structured(path))


def _check_dims(**dims):
    for name, value in dims.items():
        if value < 1:
            raise InvalidArgument(f"{name} must be >= 1, got {value}")


def fc_cost(tokens: int, in_dim: int, out_dim: int, precision: int = 2) -> WorkProfile:
    """GEMM of ``tokens`` rows against an ``in_dim x out_dim`` weight."""
    _check_dims(tokens=tokens, in_dim=in_dim, out_dim=out_dim, precision=precision)
    return WorkProfile(
        flops=2.0 * tokens * in_dim * out_dim,
        weight_bytes=float(in_dim * out_dim * precision),
        act_bytes=float(tokens * (in_dim + out_dim) * precision),
        kernel_class="fc",
    )


def activation_cost(tokens: int, width: int, precision: int = 2, gated: bool = True,
                    flops_per_element: float = ACTIVATION_FLOPS_PER_ELEMENT) -> WorkProfile:
    if tokens <= 0:
        return ZERO_WORK.relabel("activation")
    n_in = 2 if gated else 1
    return WorkProfile(
        flops=float(flops_per_element * tokens * width),
        act_bytes=float((n_in + 1) * tokens * width * precision),
        kernel_class="activation",
    )


def moe_expert_cost(tokens_for_expert: int, h: int, i: int, precision: int = 2,
                    n_matrices: int = 3) -> WorkProfile:
    """One expert FFN over the tokens routed to it.

    Flops count only the FC layers, so the weight-only intensity equals the
    token count exactly.  Activation bytes cover every FC input/output plus the
    elementwise activation traffic in between.
    """
    _check_dims(h=h, i=i, precision=precision)
    if tokens_for_expert < 0:
        raise InvalidArgument("tokens_for_expert must be >= 0")
    t = tokens_for_expert
    if t == 0:
        return ZERO_WORK.relabel("moe_expert")
    if n_matrices == 3:
        # gate+up read x, write two i-wide outputs; act reads both, writes one; down
        act_elems = t * (3 * h + 6 * i)
    elif n_matrices == 2:
        act_elems = t * (2 * h + 4 * i)
    else:
        raise InvalidArgument("n_matrices must be 2 or 3")
    return WorkProfile(
        flops=2.0 * n_matrices * h * i * t,
        weight_bytes=float(n_matrices * h * i * precision),
        act_bytes=float(act_elems * precision),
        kernel_class="moe_expert",
    )


def attention_cost(ctx_len: int, q_len: int, n_heads: int, d_head: int, grp: int,
                   precision: int = 2) -> WorkProfile:
    """Score and context GEMMs of one request, summed over KV groups.

    Each group multiplies a ``(grp * q_len) x d_head`` query block against its
    own K and V, so the KV-only intensity of a decode step is exactly ``grp``.
    Softmax is accounted separately by :func:`softmax_cost`.
    """
    _check_dims(q_len=q_len, n_heads=n_heads, d_head=d_head, grp=grp, precision=precision)
    if ctx_len < q_len:
        raise InvalidArgument("ctx_len must be >= q_len")
    if n_heads % grp:
        raise InvalidArgument("grp must divide n_heads")
    groups = n_heads // grp
    rows = grp * q_len
    flops_per_group = 2.0 * (2 * rows * d_head * ctx_len)
    kv_bytes = 2 * ctx_len * d_head * precision
    qo_bytes = 2 * rows * d_head * precision
    return WorkProfile(
        flops=groups * flops_per_group,
        act_bytes=float(groups * (kv_bytes + qo_bytes)),
        kernel_class="attention",
    )


def attention_kv_bytes(ctx_len: int, n_heads: int, d_head: int, grp: int,
                       precision: int = 2) -> float:
    return float((n_heads // grp) * 2 * ctx_len * d_head * precision)


def softmax_cost(ctx_len: int, q_len: int, n_heads: int,
                 flops_per_element: float = SOFTMAX_FLOPS_PER_ELEMENT) -> WorkProfile:
    """Softmax over score rows; fused with attention so no extra bytes."""
    return WorkProfile(flops=float(flops_per_element * n_heads * q_len * ctx_len),
                       kernel_class="softmax")


def kv_cache_bytes(model: ModelConfig, ctx_len: int) -> int:
    if ctx_len < 0:
        raise InvalidArgument("ctx_len must be >= 0")
    return 2 * model.n_layers * ctx_len * model.kv_dim * model.precision


def dense_ffn_cost(model: ModelConfig, tokens: int) -> WorkProfile:
    return moe_expert_cost(tokens, model.hidden, model.intermediate, model.precision,
                           model.ffn_matrices).relabel("fc")


def qkv_cost(model: ModelConfig, tokens: int) -> WorkProfile:
    return fc_cost(tokens, model.hidden, model.hidden + 2 * model.kv_dim, model.precision)


def projection_cost(model: ModelConfig, tokens: int) -> WorkProfile:
    return fc_cost(tokens, model.hidden, model.hidden, model.precision)


def gate_cost(model: ModelConfig, tokens: int) -> WorkProfile:
    return fc_cost(tokens, model.hidden, model.n_experts, model.precision)


def embedding_cost(model: ModelConfig, tokens: int) -> WorkProfile:
    """Row gather from the embedding table, treated as a weight-free FC."""
    return WorkProfile(act_bytes=float(2 * tokens * model.hidden * model.precision),
                       kernel_class="fc")


def lm_head_cost(model: ModelConfig, tokens: int) -> WorkProfile:
    return fc_cost(tokens, model.hidden, model.vocab, model.precision)


class LayerEntry(NamedTuple):
    layer: int
    kernel_class: str
    profile: WorkProfile
    label: str


@dataclass(frozen=True)
class StageComposition:
    """Token makeup of one stage: context lengths of decoding requests and
    input lengths of prefilling ones."""

    decode_ctx: tuple[int, ...] = ()
    prefill_lens: tuple[int, ...] = ()

    @property
    def tokens(self) -> int:
        return len(self.decode_ctx) + sum(self.prefill_lens)

    @property
    def output_tokens(self) -> int:
        return len(self.decode_ctx) + len(self.prefill_lens)


def round_robin_counts(tokens: int, n_experts: int, top_k: int) -> np.ndarray:
    """A valid gate outcome without randomness: token j picks experts
    ``j*k, ..., j*k + k - 1`` modulo ``n_experts``."""
    counts = np.zeros(n_experts, dtype=np.int64)
    total = tokens * top_k
    full, rem = divmod(total, n_experts)
    counts += full
    counts[:rem] += 1
    return counts


def stage_layer_profiles(model: ModelConfig, stage: StageComposition,
                         expert_counts: Sequence[Sequence[int]] | np.ndarray | None = None,
                         ) -> list[LayerEntry]:
    """Ordered kernel list for one stage.

    Layer ``-1`` is the embedding and layer ``n_layers`` the LM head.  MoE
    layers emit one ``moe_expert`` entry per expert (zero-token experts
    included); ``expert_counts`` has one row per MoE layer, defaulting to a
    round-robin gate outcome.
    """
    if not stage.decode_ctx and not stage.prefill_lens:
        raise InvalidArgument("empty stage")
    T = stage.tokens
    p = model.precision
    entries = [LayerEntry(-1, "fc", embedding_cost(model, T), "embedding")]
    moe_row = 0
    for layer in range(model.n_layers):
        entries.append(LayerEntry(layer, "fc", qkv_cost(model, T), "qkv"))
        for r, ctx in enumerate(stage.decode_ctx):
            prof = attention_cost(ctx, 1, model.n_heads, model.d_head, model.grp, p)
            entries.append(LayerEntry(layer, "attention", prof, f"decode{r}"))
        for r, l_in in enumerate(stage.prefill_lens):
            prof = attention_cost(l_in, l_in, model.n_heads, model.d_head, model.grp, p)
            entries.append(LayerEntry(layer, "attention", prof, f"prefill{r}"))
        entries.append(LayerEntry(layer, "fc", projection_cost(model, T), "proj"))
        if model.is_moe_layer(layer):
            if expert_counts is None:
                counts = round_robin_counts(T, model.n_experts, model.top_k)
            else:
                counts = np.asarray(expert_counts[moe_row])
            moe_row += 1
            entries.append(LayerEntry(layer, "fc", gate_cost(model, T), "gate"))
            for e, c in enumerate(counts):
                prof = moe_expert_cost(int(c), model.hidden, model.intermediate, p,
                                       model.ffn_matrices)
                entries.append(LayerEntry(layer, "moe_expert", prof, f"expert{e}"))
        else:
            entries.append(LayerEntry(layer, "fc", dense_ffn_cost(model, T), "ffn"))
    entries.append(LayerEntry(model.n_layers, "fc",
                              lm_head_cost(model, stage.output_tokens), "lm_head"))
    return entries


def sum_profiles(profiles: Iterable[WorkProfile], kernel_class: str = "fc") -> WorkProfile:
    flops = wb = ab = 0.0
    for prof in profiles:
        flops += prof.flops
        wb += prof.weight_bytes
        ab += prof.act_bytes
    return WorkProfile(flops, wb, ab, kernel_class)


def save_model(model: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2))
