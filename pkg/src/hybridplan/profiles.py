"""Hardware, model, and training profiles that feed the cost model.

Profiles are immutable once constructed and are exchanged as strict JSON
documents: a file holds a top-level ``"cluster"`` object and/or ``"model"``
and ``"training"`` objects.  Unknown keys are rejected unless the loader is
put in lenient mode.  A synthetic generator provides canonical
dense-Transformer layer profiles when no measured model profile exists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

from .errors import NoBandwidthEntry, ParseError, ValidationError
from .serialize import dumps_canonical

INTRA_NODE = "intra_node"
INTER_NODE = "inter_node"
SPANS = (INTRA_NODE, INTER_NODE)


def is_power_of_two(n: object) -> bool:
    return isinstance(n, int) and not isinstance(n, bool) and n >= 1 and (n & (n - 1)) == 0


def _require_number(obj: object, name: str) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ValidationError(f"{name} must be a number")
    return float(obj)


def _require_int(obj: object, name: str) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise ValidationError(f"{name} must be an integer")
    return obj


@dataclass(frozen=True)
class BandwidthEntry:
    """One measured point of the bus-bandwidth curve for a group span/size."""

    span: str
    group_size: int
    bus_bandwidth: float  # bytes/s
    latency: float  # seconds

    def validate(self) -> None:
        if self.span not in SPANS:
            raise ValidationError(f"bandwidth entry span must be one of {SPANS}")
        if not is_power_of_two(self.group_size) or self.group_size < 2:
            raise ValidationError("bandwidth entry group_size must be a power of two >= 2")
        if not self.bus_bandwidth > 0:
            raise ValidationError("bus_bandwidth must be > 0")
        if self.latency < 0:
            raise ValidationError("latency must be >= 0")


@dataclass(frozen=True)
class ClusterProfile:
    """Accelerator counts, rates, and the measured communication table."""

    n_devices: int
    devices_per_node: int
    device_flops: float  # sustained FLOP/s per device
    device_memory_bytes: int
    memory_reserve_fraction: float
    bandwidth_table: tuple[BandwidthEntry, ...] = ()

    def validate(self) -> None:
        if not is_power_of_two(self.n_devices):
            raise ValidationError("n_devices must be a power of two")
        if not is_power_of_two(self.devices_per_node):
            raise ValidationError("devices_per_node must be a power of two")
        if self.devices_per_node > self.n_devices:
            raise ValidationError("devices_per_node must be <= n_devices")
        if not self.device_flops > 0:
            raise ValidationError("device_flops must be > 0")
        if not self.device_memory_bytes > 0:
            raise ValidationError("device_memory_bytes must be > 0")
        if not 0 <= self.memory_reserve_fraction < 1:
            raise ValidationError("memory_reserve_fraction must be in [0, 1)")
        seen: set[tuple[str, int]] = set()
        for entry in self.bandwidth_table:
            entry.validate()
            key = (entry.span, entry.group_size)
            if key in seen:
                raise ValidationError(
                    f"duplicate bandwidth entry for (span={entry.span}, group_size={entry.group_size})"
                )
            seen.add(key)

    def memory_budget_bytes(self) -> int:
        """Plannable bytes per device after the framework reserve."""
        return int(math.floor(self.device_memory_bytes * (1.0 - self.memory_reserve_fraction)))


def lookup_bandwidth(cluster: ClusterProfile, span: str, group_size: int) -> BandwidthEntry:
    """Resolve the table entry for a communication group.

    Exact (span, group_size) matches win; otherwise the entry with the
    largest group_size <= requested for the same span is used.  Bandwidth is
    typically non-increasing with group size, so the fallback is optimistic
    but deterministic.
    """
    if span not in SPANS:
        raise ValidationError(f"span must be one of {SPANS}")
    if not is_power_of_two(group_size) or group_size < 2:
        raise ValidationError("group_size must be a power of two >= 2")
    best: BandwidthEntry | None = None
    for entry in cluster.bandwidth_table:
        if entry.span != span or entry.group_size > group_size:
            continue
        if best is None or entry.group_size > best.group_size:
            best = entry
    if best is None:
        raise NoBandwidthEntry(f"no bandwidth entry with span={span}, group_size<={group_size}")
    return best


@dataclass(frozen=True)
class LayerProfile:
    """Per-layer parameter, FLOP, and activation-byte coefficients.

    FLOP coefficients describe the forward pass only; the cost model applies
    a fixed backward/forward ratio.  `boundary_bytes_per_token` is the size
    of the layer's input tensor, the only activation kept when recomputation
    is enabled.
    """

    param_count: float
    flops_per_token: float
    flops_per_token_sq: float
    act_shardable_bytes_per_token: float
    act_replicated_bytes_per_token: float
    boundary_bytes_per_token: float

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError(f"layer field {f.name} must be a number")
            if value < 0:
                raise ValidationError(f"layer field {f.name} must be >= 0")
        full = self.act_shardable_bytes_per_token + self.act_replicated_bytes_per_token
        if self.boundary_bytes_per_token > full:
            raise ValidationError(
                "boundary_bytes_per_token must be <= act_shardable + act_replicated"
            )


@dataclass(frozen=True)
class ModelProfile:
    """Layer list plus the model-wide shape parameters the cost model needs."""

    n_layers: int
    hidden_size: int
    seq_len: int
    layers: tuple[LayerProfile, ...]

    def validate(self) -> None:
        if not isinstance(self.n_layers, int) or self.n_layers < 1:
            raise ValidationError("n_layers must be >= 1")
        if not isinstance(self.hidden_size, int) or self.hidden_size < 1:
            raise ValidationError("hidden_size must be >= 1")
        if not isinstance(self.seq_len, int) or self.seq_len < 1:
            raise ValidationError("seq_len must be >= 1")
        if len(self.layers) != self.n_layers:
            raise ValidationError("layers list length must equal n_layers")
        for layer in self.layers:
            layer.validate()


@dataclass(frozen=True)
class TrainingConfig:
    """Training hyperparameters the planner needs to size work and state.

    Byte multipliers default to half-precision weights/gradients with a
    full-precision master copy plus two optimizer moments per parameter.
    """

    global_batch: int
    bytes_per_param: float = 2.0
    bytes_per_grad: float = 2.0
    optimizer_bytes_per_param: float = 12.0
    comm_overlap_fraction: float = 0.0

    def validate(self) -> None:
        if not is_power_of_two(self.global_batch):
            raise ValidationError("global_batch must be a power of two >= 1")
        for name in ("bytes_per_param", "bytes_per_grad", "optimizer_bytes_per_param"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if not 0.0 <= self.comm_overlap_fraction <= 1.0:
            raise ValidationError("comm_overlap_fraction must be in [0, 1]")


def synth_transformer_profile(n_layers: int, hidden_size: int, seq_len: int) -> ModelProfile:
    """Build a uniform dense-Transformer model profile analytically.

    Per layer, with h = hidden_size: params = 12h^2 + 13h (fused QKV +
    output projection + 4h-wide MLP + biases + two layer norms), forward
    FLOPs 2 per parameter per token plus a 4h coefficient on the quadratic
    attention term, 24h activation bytes/token shardable by tensor
    parallelism, 10h bytes/token shardable only under sequence parallelism,
    and a 2h-byte/token input boundary tensor.  Attention-score memory is
    excluded (flash-attention assumption).
    """
    for name, value in (("n_layers", n_layers), ("hidden_size", hidden_size), ("seq_len", seq_len)):
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ValidationError(f"{name} must be a positive integer")
    h = hidden_size
    param_count = 12 * h * h + 13 * h
    layer = LayerProfile(
        param_count=float(param_count),
        flops_per_token=2.0 * param_count,
        flops_per_token_sq=4.0 * h,
        act_shardable_bytes_per_token=24.0 * h,
        act_replicated_bytes_per_token=10.0 * h,
        boundary_bytes_per_token=2.0 * h,
    )
    profile = ModelProfile(
        n_layers=n_layers,
        hidden_size=hidden_size,
        seq_len=seq_len,
        layers=(layer,) * n_layers,
    )
    profile.validate()
    return profile


# --- JSON schema handling --------------------------------------------------

_CLUSTER_KEYS = {
    "n_devices", "devices_per_node", "device_flops", "device_memory_bytes",
    "memory_reserve_fraction", "bandwidth_table",
}
_ENTRY_KEYS = {"span", "group_size", "bus_bandwidth", "latency"}
_LAYER_KEYS = {
    "param_count", "flops_per_token", "flops_per_token_sq",
    "act_shardable_bytes_per_token", "act_replicated_bytes_per_token",
    "boundary_bytes_per_token",
}
_MODEL_KEYS = {"n_layers", "hidden_size", "seq_len", "layers"}
_TRAINING_KEYS = {
    "global_batch", "bytes_per_param", "bytes_per_grad",
    "optimizer_bytes_per_param", "comm_overlap_fraction",
}
_TOP_KEYS = {"cluster", "model", "training"}


def _check_keys(obj: dict, allowed: set[str], where: str, lenient: bool) -> None:
    if not isinstance(obj, dict):
        raise ValidationError(f"{where} must be a JSON object")
    if lenient:
        return
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {', '.join(unknown)}")


def _read_document(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return doc


def _cluster_from_dict(obj: dict, lenient: bool) -> ClusterProfile:
    _check_keys(obj, _CLUSTER_KEYS, "cluster", lenient)
    missing = sorted(_CLUSTER_KEYS - {"bandwidth_table"} - set(obj))
    if missing:
        raise ValidationError(f"cluster is missing keys: {', '.join(missing)}")
    entries = []
    for i, raw in enumerate(obj.get("bandwidth_table", [])):
        _check_keys(raw, _ENTRY_KEYS, f"bandwidth_table[{i}]", lenient)
        entries.append(BandwidthEntry(
            span=raw.get("span", ""),
            group_size=_require_int(raw.get("group_size"), "group_size"),
            bus_bandwidth=_require_number(raw.get("bus_bandwidth"), "bus_bandwidth"),
            latency=_require_number(raw.get("latency"), "latency"),
        ))
    cluster = ClusterProfile(
        n_devices=_require_int(obj["n_devices"], "n_devices"),
        devices_per_node=_require_int(obj["devices_per_node"], "devices_per_node"),
        device_flops=_require_number(obj["device_flops"], "device_flops"),
        device_memory_bytes=_require_int(obj["device_memory_bytes"], "device_memory_bytes"),
        memory_reserve_fraction=_require_number(
            obj["memory_reserve_fraction"], "memory_reserve_fraction"),
        bandwidth_table=tuple(entries),
    )
    cluster.validate()
    return cluster


def _model_from_dict(obj: dict, lenient: bool) -> ModelProfile:
    _check_keys(obj, _MODEL_KEYS, "model", lenient)
    missing = sorted(_MODEL_KEYS - set(obj))
    if missing:
        raise ValidationError(f"model is missing keys: {', '.join(missing)}")
    layers = []
    raw_layers = obj["layers"]
    if not isinstance(raw_layers, list):
        raise ValidationError("model layers must be a list")
    for i, raw in enumerate(raw_layers):
        _check_keys(raw, _LAYER_KEYS, f"layers[{i}]", lenient)
        missing = sorted(_LAYER_KEYS - set(raw))
        if missing:
            raise ValidationError(f"layers[{i}] is missing keys: {', '.join(missing)}")
        layers.append(LayerProfile(**{k: _require_number(raw[k], k) for k in _LAYER_KEYS}))
    model = ModelProfile(
        n_layers=_require_int(obj["n_layers"], "n_layers"),
        hidden_size=_require_int(obj["hidden_size"], "hidden_size"),
        seq_len=_require_int(obj["seq_len"], "seq_len"),
        layers=tuple(layers),
    )
    model.validate()
    return model


def _training_from_dict(obj: dict, lenient: bool) -> TrainingConfig:
    _check_keys(obj, _TRAINING_KEYS, "training", lenient)
    if "global_batch" not in obj:
        raise ValidationError("training is missing keys: global_batch")
    kwargs = {"global_batch": _require_int(obj["global_batch"], "global_batch")}
    for name in ("bytes_per_param", "bytes_per_grad", "optimizer_bytes_per_param",
                 "comm_overlap_fraction"):
        if name in obj:
            kwargs[name] = _require_number(obj[name], name)
    training = TrainingConfig(**kwargs)
    training.validate()
    return training


def load_cluster_profile(path: str, *, lenient: bool = False) -> ClusterProfile:
    doc = _read_document(path)
    _check_keys(doc, _TOP_KEYS, "profile document", lenient)
    if "cluster" not in doc:
        raise ValidationError(f"{path}: no 'cluster' object")
    return _cluster_from_dict(doc["cluster"], lenient)


def load_model_profile(path: str, *, lenient: bool = False) -> ModelProfile:
    doc = _read_document(path)
    _check_keys(doc, _TOP_KEYS, "profile document", lenient)
    if "model" not in doc:
        raise ValidationError(f"{path}: no 'model' object")
    return _model_from_dict(doc["model"], lenient)


def load_training_config(path: str, *, lenient: bool = False) -> TrainingConfig:
    doc = _read_document(path)
    _check_keys(doc, _TOP_KEYS, "profile document", lenient)
    if "training" not in doc:
        raise ValidationError(f"{path}: no 'training' object")
    return _training_from_dict(doc["training"], lenient)


def cluster_to_dict(cluster: ClusterProfile) -> dict:
    return {
        "n_devices": cluster.n_devices,
        "devices_per_node": cluster.devices_per_node,
        "device_flops": cluster.device_flops,
        "device_memory_bytes": cluster.device_memory_bytes,
        "memory_reserve_fraction": cluster.memory_reserve_fraction,
        "bandwidth_table": [
            {"span": e.span, "group_size": e.group_size,
             "bus_bandwidth": e.bus_bandwidth, "latency": e.latency}
            for e in cluster.bandwidth_table
        ],
    }


def model_to_dict(model: ModelProfile) -> dict:
    return {
        "n_layers": model.n_layers,
        "hidden_size": model.hidden_size,
        "seq_len": model.seq_len,
        "layers": [
            {
                "param_count": layer.param_count,
                "flops_per_token": layer.flops_per_token,
                "flops_per_token_sq": layer.flops_per_token_sq,
                "act_shardable_bytes_per_token": layer.act_shardable_bytes_per_token,
                "act_replicated_bytes_per_token": layer.act_replicated_bytes_per_token,
                "boundary_bytes_per_token": layer.boundary_bytes_per_token,
            }
            for layer in model.layers
        ],
    }


def training_to_dict(training: TrainingConfig) -> dict:
    return {
        "global_batch": training.global_batch,
        "bytes_per_param": training.bytes_per_param,
        "bytes_per_grad": training.bytes_per_grad,
        "optimizer_bytes_per_param": training.optimizer_bytes_per_param,
        "comm_overlap_fraction": training.comm_overlap_fraction,
    }


def save_profiles(path: str, *, cluster: ClusterProfile | None = None,
                  model: ModelProfile | None = None,
                  training: TrainingConfig | None = None) -> None:
    """Write a canonical profile document (sorted keys, fixed float format)."""
    doc: dict = {}
    if cluster is not None:
        doc["cluster"] = cluster_to_dict(cluster)
    if model is not None:
        doc["model"] = model_to_dict(model)
    if training is not None:
        doc["training"] = training_to_dict(training)
    if not doc:
        raise ValidationError("nothing to save")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(doc, sort_keys=True))
