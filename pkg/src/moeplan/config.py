"""Model, cluster, and job descriptions plus the flat-document parser.

The on-disk format is a strict flat key/value subset of YAML: one
``key: value`` scalar per line, ``#`` comments, no nesting, no anchors or
aliases. Byte-typed keys accept unit suffixes (KiB/MiB/GiB/TiB, or their
decimal KB/MB/GB/TB forms) which are normalized to plain bytes at parse
time. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ParseError, UnknownPreset, ValidationError

_UNIT_SUFFIXES = {
    "kib": 1024,
    "mib": 1024**2,
    "gib": 1024**3,
    "tib": 1024**4,
    "kb": 1000,
    "mb": 1000**2,
    "gb": 1000**3,
    "tb": 1000**4,
    "b": 1,
}


@dataclass(frozen=True)
class LinkSpec:
    """Point-to-point latency and bandwidth of one interconnect tier."""

    latency_sec: float
    bandwidth_bytes_per_sec: float

    def __post_init__(self):
        if self.latency_sec < 0:
            raise ValidationError("latency_sec", "must be >= 0")
        if self.bandwidth_bytes_per_sec <= 0:
            raise ValidationError("bandwidth_bytes_per_sec", "must be > 0")


@dataclass(frozen=True)
class ModelConfig:
    """Transformer/MoE hyperparameters that drive the FLOP and byte formulas."""

    num_layers: int
    hidden_size: int
    num_heads: int
    vocab_size: int
    num_routed_experts: int
    expert_intermediate_size: int
    experts_per_token: int
    num_shared_experts: int
    seq_len: int = 4096
    param_dtype_bytes: int = 2
    master_dtype_bytes: int = 4

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValidationError(f.name, f"must be an integer, got {value!r}")
            if f.name == "num_shared_experts":
                if value < 0:
                    raise ValidationError(f.name, "must be >= 0")
            elif value < 1:
                raise ValidationError(f.name, "must be >= 1")
        if self.hidden_size % self.num_heads != 0:
            raise ValidationError(
                "hidden_size",
                f"{self.hidden_size} not divisible by num_heads={self.num_heads}",
            )
        if self.experts_per_token > self.num_routed_experts:
            raise ValidationError(
                "experts_per_token",
                f"{self.experts_per_token} exceeds num_routed_experts="
                f"{self.num_routed_experts}",
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


@dataclass(frozen=True)
class ClusterTopology:
    """Node/device counts and the two-tier interconnect description."""

    num_nodes: int
    devices_per_node: int
    device_memory_bytes: int
    device_flops_per_sec: float
    intra_node_link: LinkSpec
    inter_node_link: LinkSpec

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValidationError("num_nodes", "must be >= 1")
        if self.devices_per_node < 1:
            raise ValidationError("devices_per_node", "must be >= 1")
        if self.device_memory_bytes <= 0:
            raise ValidationError("device_memory_bytes", "must be > 0")
        if self.device_flops_per_sec <= 0:
            raise ValidationError("device_flops_per_sec", "must be > 0")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.devices_per_node


@dataclass(frozen=True)
class TrainingJob:
    """One training run: batch geometry and the per-device memory budget."""

    global_batch: int
    seq_len: int
    max_device_memory_bytes: int

    def __post_init__(self):
        if self.global_batch < 1:
            raise ValidationError("global_batch", "must be >= 1")
        if self.seq_len < 1:
            raise ValidationError("seq_len", "must be >= 1")
        if self.max_device_memory_bytes <= 0:
            raise ValidationError("max_device_memory_bytes", "must be > 0")


# Table rows for the three shipped model sizes. Sequence length defaults to
# 4096 unless the caller overrides it.
_PRESETS = {
    "105B": dict(
        num_layers=45,
        hidden_size=2560,
        num_heads=32,
        vocab_size=131072,
        num_routed_experts=192,
        expert_intermediate_size=1536,
        experts_per_token=4,
        num_shared_experts=1,
    ),
    "438B": dict(
        num_layers=54,
        hidden_size=5120,
        num_heads=128,
        vocab_size=131072,
        num_routed_experts=256,
        expert_intermediate_size=2048,
        experts_per_token=8,
        num_shared_experts=1,
    ),
    "1119B": dict(
        num_layers=61,
        hidden_size=5120,
        num_heads=128,
        vocab_size=131072,
        num_routed_experts=384,
        expert_intermediate_size=3072,
        experts_per_token=8,
        num_shared_experts=1,
    ),
}


def preset(name: str, seq_len: int = 4096) -> ModelConfig:
    """Return one of the shipped model configurations by size name."""
    if name not in _PRESETS:
        known = ", ".join(sorted(_PRESETS))
        raise UnknownPreset(f"unknown preset {name!r}; available: {known}")
    return ModelConfig(seq_len=seq_len, **_PRESETS[name])


def preset_names() -> tuple[str, ...]:
    return tuple(_PRESETS)


def _parse_scalar(key, raw, want_int, allow_units):
    text = raw.strip()
    if not text:
        raise ParseError(f"empty value for key {key!r}")
    factor = 1
    if allow_units:
        lowered = text.lower()
        for suffix, mult in _UNIT_SUFFIXES.items():
            if lowered.endswith(suffix):
                head = text[: len(text) - len(suffix)].strip()
                if head:
                    text, factor = head, mult
                    break
    try:
        value = float(text) * factor
    except ValueError:
        raise ParseError(f"non-numeric value {raw!r} for key {key!r}") from None
    if want_int:
        if value != int(value):
            raise ParseError(f"key {key!r} requires an integer, got {raw!r}")
        return int(value)
    return value


def parse_flat_document(text: str) -> dict[str, str]:
    """Split a flat key/value document into raw string values.

    Rejects anything beyond the scalar subset: indentation, duplicate keys,
    lines without a colon.
    """
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].rstrip()
        if not stripped.strip():
            continue
        if stripped[0] in " \t":
            raise ParseError(f"line {lineno}: nested structure is not supported")
        if ":" not in stripped:
            raise ParseError(f"line {lineno}: expected 'key: value'")
        key, _, raw = stripped.partition(":")
        key = key.strip()
        raw = raw.strip()
        if not key:
            raise ParseError(f"line {lineno}: missing key")
        if raw.startswith(("&", "*")):
            raise ParseError(f"line {lineno}: anchors/aliases are not supported")
        if not raw:
            raise ParseError(f"line {lineno}: missing value for key {key!r}")
        if key in out:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        out[key] = raw
    if not out:
        raise ParseError("document is empty")
    return out


_MODEL_INT_KEYS = {f.name for f in fields(ModelConfig)}

_CLUSTER_KEYS = {
    "num_nodes": ("int", False),
    "devices_per_node": ("int", False),
    "device_memory_bytes": ("int", True),
    "device_flops_per_sec": ("float", False),
    "intra_node_latency_sec": ("float", False),
    "intra_node_bandwidth_bytes_per_sec": ("float", True),
    "inter_node_latency_sec": ("float", False),
    "inter_node_bandwidth_bytes_per_sec": ("float", True),
}


def load_model_config(text: str) -> ModelConfig:
    """Parse and validate a model document (flat keys, one per field)."""
    raw = parse_flat_document(text)
    unknown = sorted(set(raw) - _MODEL_INT_KEYS)
    if unknown:
        raise ParseError(f"unknown model keys: {', '.join(unknown)}")
    values = {k: _parse_scalar(k, v, want_int=True, allow_units=False) for k, v in raw.items()}
    return ModelConfig(**values)


def load_cluster(text: str) -> ClusterTopology:
    """Parse and validate a cluster document."""
    raw = parse_flat_document(text)
    unknown = sorted(set(raw) - set(_CLUSTER_KEYS))
    if unknown:
        raise ParseError(f"unknown cluster keys: {', '.join(unknown)}")
    missing = sorted(set(_CLUSTER_KEYS) - set(raw))
    if missing:
        raise ParseError(f"missing cluster keys: {', '.join(missing)}")
    values = {}
    for key, (kind, units) in _CLUSTER_KEYS.items():
        values[key] = _parse_scalar(key, raw[key], want_int=kind == "int", allow_units=units)
    return ClusterTopology(
        num_nodes=values["num_nodes"],
        devices_per_node=values["devices_per_node"],
        device_memory_bytes=values["device_memory_bytes"],
        device_flops_per_sec=values["device_flops_per_sec"],
        intra_node_link=LinkSpec(
            values["intra_node_latency_sec"],
            values["intra_node_bandwidth_bytes_per_sec"],
        ),
        inter_node_link=LinkSpec(
            values["inter_node_latency_sec"],
            values["inter_node_bandwidth_bytes_per_sec"],
        ),
    )


def dump_model_config(model: ModelConfig) -> str:
    """Serialize a model back to the flat document format (round-trips)."""
    lines = [f"{f.name}: {getattr(model, f.name)}" for f in fields(ModelConfig)]
    return "\n".join(lines) + "\n"


def dump_cluster(cluster: ClusterTopology) -> str:
    """Serialize a cluster back to the flat document format (round-trips)."""

    def fmt(x):
        return repr(x) if isinstance(x, float) else str(x)

    pairs = [
        ("num_nodes", cluster.num_nodes),
        ("devices_per_node", cluster.devices_per_node),
        ("device_memory_bytes", cluster.device_memory_bytes),
        ("device_flops_per_sec", cluster.device_flops_per_sec),
        ("intra_node_latency_sec", cluster.intra_node_link.latency_sec),
        (
            "intra_node_bandwidth_bytes_per_sec",
            cluster.intra_node_link.bandwidth_bytes_per_sec,
        ),
        ("inter_node_latency_sec", cluster.inter_node_link.latency_sec),
        (
            "inter_node_bandwidth_bytes_per_sec",
            cluster.inter_node_link.bandwidth_bytes_per_sec,
        ),
    ]
    return "\n".join(f"{k}: {fmt(v)}" for k, v in pairs) + "\n"


def with_seq_len(model: ModelConfig, seq_len: int) -> ModelConfig:
    return replace(model, seq_len=seq_len)


def parse_byte_size(text: str) -> int:
    """'45GiB' / '2MB' / '1024' -> bytes."""
    return _parse_scalar("byte size", text, want_int=True, allow_units=True)
