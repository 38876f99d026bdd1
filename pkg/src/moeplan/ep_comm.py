"""Token routing and byte/time accounting for expert-parallel exchange.

Two dispatch modes are modeled:

  global_a2a    one all-to-all across the whole EP group; every
                (token, expert) copy crosses whatever link separates
                source and destination devices.
  hierarchical  same-index devices across nodes all-gather raw tokens
                once, each node filters locally, then an intra-node
                all-to-all redistributes; cross-node traffic becomes
                independent of top-k.

Byte counters are per device (mean over the group) and count payload
sent; self-copies move no bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ClusterTopology
from .errors import InconsistentInput, InvalidParams

EP_MODES = ("global_a2a", "hierarchical")


@dataclass(frozen=True)
class EpLayout:
    """Shape of one expert-parallel group and its expert placement."""

    ep_size: int
    num_nodes_in_group: int
    devices_per_node_in_group: int
    num_routed_experts: int
    expert_to_device: tuple[int, ...]

    def __post_init__(self):
        if self.ep_size != self.num_nodes_in_group * self.devices_per_node_in_group:
            raise InvalidParams("ep_size must equal nodes * devices_per_node")
        if self.num_routed_experts % self.ep_size != 0:
            raise InvalidParams("experts must divide evenly across the EP group")
        if len(self.expert_to_device) != self.num_routed_experts:
            raise InvalidParams("expert_to_device must cover every expert")
        per_device = self.num_routed_experts // self.ep_size
        counts = [0] * self.ep_size
        for dev in self.expert_to_device:
            if not 0 <= dev < self.ep_size:
                raise InvalidParams(f"expert mapped to unknown device {dev}")
            counts[dev] += 1
        if any(c != per_device for c in counts):
            raise InvalidParams("expert placement must be balanced")

    @classmethod
    def contiguous(cls, num_routed_experts, num_nodes_in_group, devices_per_node_in_group):
        ep = num_nodes_in_group * devices_per_node_in_group
        if num_routed_experts % ep != 0:
            raise InvalidParams("experts must divide evenly across the EP group")
        per_device = num_routed_experts // ep
        mapping = tuple(e // per_device for e in range(num_routed_experts))
        return cls(ep, num_nodes_in_group, devices_per_node_in_group, num_routed_experts, mapping)


@dataclass(frozen=True)
class RoutingTable:
    """Chosen experts per token: array of shape (devices, tokens, k)."""

    expert_ids: np.ndarray
    token_bytes: int

    @property
    def num_devices(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def tokens_per_device(self) -> int:
        return self.expert_ids.shape[1]

    @property
    def experts_per_token(self) -> int:
        return self.expert_ids.shape[2]


@dataclass(frozen=True)
class EpTraffic:
    inter_node_bytes_per_device: float
    intra_node_bytes_per_device: float
    mode: str
    num_nodes_in_group: int
    devices_per_node_in_group: int
    est_time_sec: float = 0.0


@dataclass(frozen=True)
class OverlapConfig:
    """Stream count and the FFN compute available to hide communication."""

    num_streams: int = 1
    ffn_compute_sec: float = 0.0


def route_tokens(
    tokens_per_device: int,
    k: int,
    layout: EpLayout,
    skew: float = 0.0,
    seed: int = 0,
    token_bytes: int = 1,
) -> RoutingTable:
    """Sample per-token expert choices, k distinct experts per token.

    skew = 0 routes uniformly; skew > 0 moves that probability mass onto
    expert 0 (the hot expert), remainder spread uniformly. Sampling is
    weighted-without-replacement via Gumbel top-k, deterministic per seed.
    """
    n_exp = layout.num_routed_experts
    if not 1 <= k <= n_exp:
        raise InvalidParams(f"k={k} must be in [1, {n_exp}]")
    if not 0.0 <= skew < 1.0:
        raise InvalidParams("skew must be in [0, 1)")
    if tokens_per_device < 1:
        raise InvalidParams("tokens_per_device must be >= 1")
    if token_bytes < 1:
        raise InvalidParams("token_bytes must be >= 1")
    rng = np.random.default_rng(seed)
    weights = np.full(n_exp, (1.0 - skew) / n_exp)
    weights[0] += skew
    total = layout.ep_size * tokens_per_device
    gumbel = rng.gumbel(size=(total, n_exp))
    keys = np.log(weights)[None, :] + gumbel
    top = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    top = np.sort(top, axis=1)
    ids = top.reshape(layout.ep_size, tokens_per_device, k).astype(np.int32)
    return RoutingTable(expert_ids=ids, token_bytes=token_bytes)


def _copy_matrix(routing: RoutingTable, layout: EpLayout):
    """(source device, destination device) copy counts."""
    dev_of_expert = np.asarray(layout.expert_to_device, dtype=np.int64)
    if routing.expert_ids.max() >= layout.num_routed_experts:
        raise InconsistentInput("routing references an expert outside the layout")
    if routing.num_devices != layout.ep_size:
        raise InconsistentInput("routing table has the wrong device count")
    dest = dev_of_expert[routing.expert_ids]  # (E, B, k)
    e = layout.ep_size
    counts = np.zeros((e, e), dtype=np.int64)
    for src in range(e):
        counts[src] = np.bincount(dest[src].ravel(), minlength=e)
    return counts


def traffic(routing: RoutingTable, layout: EpLayout, mode: str) -> EpTraffic:
    """Per-device byte counters for one dispatch under the given mode."""
    if mode not in EP_MODES:
        raise InvalidParams(f"unknown mode {mode!r}")
    d_g = layout.devices_per_node_in_group
    n_g = layout.num_nodes_in_group
    e = layout.ep_size
    b = routing.tokens_per_device
    copies = _copy_matrix(routing, layout)
    src = np.arange(e)
    dev_pairs_same_node = (src[:, None] // d_g) == (src[None, :] // d_g)
    self_mask = np.eye(e, dtype=bool)
    if mode == "global_a2a":
        inter = copies[~dev_pairs_same_node].sum()
        intra = copies[dev_pairs_same_node & ~self_mask].sum()
    else:
        # All-gather of raw tokens across same-index devices: each device
        # sends its B tokens to one peer per other node, independent of k.
        inter = e * (n_g - 1) * b
        # On the destination node the gathered column holder redistributes;
        # a copy moves intra-node unless holder and expert device share the
        # same local index.
        dev_of_expert = np.asarray(layout.expert_to_device, dtype=np.int64)
        dest = dev_of_expert[routing.expert_ids]
        src_col = (np.arange(e) % d_g)[:, None, None]
        intra = int((dest % d_g != src_col).sum())
    return EpTraffic(
        inter_node_bytes_per_device=inter * routing.token_bytes / e,
        intra_node_bytes_per_device=intra * routing.token_bytes / e,
        mode=mode,
        num_nodes_in_group=n_g,
        devices_per_node_in_group=d_g,
    )


def sent_received_totals(routing: RoutingTable, layout: EpLayout):
    """(bytes sent per device, bytes received per device) for global A2A.

    Conservation check helper: both vectors must sum to the same total.
    """
    copies = _copy_matrix(routing, layout)
    off_device = copies - np.diag(np.diag(copies))
    sent = off_device.sum(axis=1) * routing.token_bytes
    received = off_device.sum(axis=0) * routing.token_bytes
    return sent, received


def ep_time(traffic_result: EpTraffic, cluster: ClusterTopology, overlap: OverlapConfig) -> float:
    """Exposed communication seconds for one dispatch.

    Traffic splits into ``num_streams`` slices; a slice's cross-node
    gather, intra-node exchange, and FFN compute each run on their own
    resource, so later slices hide behind earlier ones. The return value
    is pipeline makespan minus total FFN time (the compute happens either
    way), which for one stream reduces to inter + intra serial time.
    """
    s = overlap.num_streams
    if s < 1:
        raise InvalidParams("num_streams must be >= 1")
    if overlap.ffn_compute_sec < 0:
        raise InvalidParams("ffn_compute_sec must be >= 0")
    n_g = traffic_result.num_nodes_in_group
    d_g = traffic_result.devices_per_node_in_group
    inter_link = cluster.inter_node_link
    intra_link = cluster.intra_node_link
    t_inter = (
        inter_link.latency_sec * (n_g - 1)
        + traffic_result.inter_node_bytes_per_device / s / inter_link.bandwidth_bytes_per_sec
    )
    t_intra = (
        intra_link.latency_sec * (d_g - 1)
        + traffic_result.intra_node_bytes_per_device / s / intra_link.bandwidth_bytes_per_sec
    )
    t_ffn = overlap.ffn_compute_sec / s
    inter_done = intra_done = ffn_done = 0.0
    for _ in range(s):
        inter_done = inter_done + t_inter
        intra_done = max(intra_done, inter_done) + t_intra
        ffn_done = max(ffn_done, intra_done) + t_ffn
    return ffn_done - overlap.ffn_compute_sec


def compare_modes(
    routing: RoutingTable,
    layout: EpLayout,
    cluster: ClusterTopology,
    overlap: OverlapConfig,
) -> list[EpTraffic]:
    """Both modes, with est_time_sec filled for the given overlap config."""
    rows = []
    for mode in EP_MODES:
        t = traffic(routing, layout, mode)
        rows.append(replace(t, est_time_sec=ep_time(t, cluster, overlap)))
    return rows
