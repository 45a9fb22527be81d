"""Latency/bandwidth time estimates for collectives and point-to-point sends.

All collectives assume ring algorithms over the bus bandwidth measured for
the group's span and size.  An all-gather or reduce-scatter over g ranks
makes g-1 ring steps, each moving volume/g bytes; a ring all-reduce is a
reduce-scatter pass followed by an all-gather pass, so

    all_reduce_time(g, v) == reduce_scatter_time(g, v) + all_gather_time(g, v)

holds exactly by construction, for every group size, volume, and latency.
Groups of size 1 cost exactly zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

from .profiles import INTER_NODE, INTRA_NODE, ClusterProfile, is_power_of_two, lookup_bandwidth
from .errors import ValidationError


@dataclass(frozen=True)
class CommGroup:
    """A communicator: how many ranks, and whether it crosses a node."""

    size: int
    span: str

    def validate(self) -> None:
        if not is_power_of_two(self.size):
            raise ValidationError("comm group size must be a power of two >= 1")
        if self.size > 1 and self.span not in (INTRA_NODE, INTER_NODE):
            raise ValidationError("comm group span must be intra_node or inter_node")


def comm_group(cluster: ClusterProfile, size: int) -> CommGroup:
    """Build the group for `size` contiguous ranks.

    With contiguous rank placement a group starting at a node boundary stays
    inside the node iff it is no larger than the node; non-contiguous
    placements are not modeled.
    """
    if not is_power_of_two(size):
        raise ValidationError("comm group size must be a power of two >= 1")
    span = INTRA_NODE if size <= cluster.devices_per_node else INTER_NODE
    return CommGroup(size=size, span=span)


def _ring_pass_time(group: CommGroup, volume: float, cluster: ClusterProfile) -> float:
    """One ring pass: g-1 steps of latency plus ((g-1)/g)*volume of traffic."""
    g = group.size
    if g == 1:
        return 0.0
    if volume < 0:
        raise ValidationError("volume must be >= 0")
    entry = lookup_bandwidth(cluster, group.span, g)
    return entry.latency * (g - 1) + ((g - 1) / g) * volume / entry.bus_bandwidth


def all_gather_time(group: CommGroup, volume: float, cluster: ClusterProfile) -> float:
    return _ring_pass_time(group, volume, cluster)


def reduce_scatter_time(group: CommGroup, volume: float, cluster: ClusterProfile) -> float:
    return _ring_pass_time(group, volume, cluster)


def all_reduce_time(group: CommGroup, volume: float, cluster: ClusterProfile) -> float:
    return reduce_scatter_time(group, volume, cluster) + all_gather_time(group, volume, cluster)


def p2p_time(volume: float, cluster: ClusterProfile, span: str) -> float:
    """One pipeline-boundary transfer over the size-2 link of the given span."""
    if volume < 0:
        raise ValidationError("volume must be >= 0")
    entry = lookup_bandwidth(cluster, span, 2)
    return entry.latency + volume / entry.bus_bandwidth


def stage_boundary_span(cluster: ClusterProfile, devices_per_stage: int, stage_index: int) -> str:
    """Span of the link between `stage_index` and the next stage.

    Stages occupy contiguous rank blocks, so the boundary crosses a node
    exactly when the first rank of the next stage starts a new node.
    """
    first_rank_of_next = (stage_index + 1) * devices_per_stage
    if first_rank_of_next % cluster.devices_per_node == 0:
        return INTER_NODE
    return INTRA_NODE
