"""Per-layer parallel strategies and decision-tree enumeration of the space.

A strategy fixes, for one layer inside a pipeline stage, the tensor-parallel
degree, the implied data-parallel degree, the optimizer/gradient/parameter
sharding stage on the data-parallel axis, and the sequence-parallel and
recomputation flags.  Enumeration walks a decision tree (tp, then sharding
stage, then sp, then recompute) and prunes branches that cannot run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InconsistentStrategy, InvalidDeviceCount, ValidationError
from .profiles import ClusterProfile, is_power_of_two

ZERO_STAGES = (0, 1, 2, 3)


@dataclass(frozen=True)
class ParallelStrategy:
    """One layer's parallelization choice within a stage of tp*dp devices."""

    tp: int
    dp: int
    zero_stage: int
    sp: bool
    recompute: bool

    def validate(self, devices_per_stage: int | None = None) -> None:
        if not is_power_of_two(self.tp):
            raise ValidationError("tp must be a power of two >= 1")
        if not is_power_of_two(self.dp):
            raise ValidationError("dp must be a power of two >= 1")
        if self.zero_stage not in ZERO_STAGES:
            raise ValidationError("zero_stage must be one of 0, 1, 2, 3")
        if self.sp and self.tp == 1:
            raise ValidationError("sp requires tp > 1")
        if self.zero_stage > 0 and self.dp == 1:
            raise ValidationError("zero_stage > 0 requires dp > 1")
        if devices_per_stage is not None and self.tp * self.dp != devices_per_stage:
            raise ValidationError(
                f"tp*dp = {self.tp * self.dp} does not equal devices_per_stage = {devices_per_stage}"
            )

    def to_dict(self) -> dict:
        return {"tp": self.tp, "dp": self.dp, "zero_stage": self.zero_stage,
                "sp": self.sp, "recompute": self.recompute}

    @classmethod
    def from_dict(cls, obj: dict) -> "ParallelStrategy":
        try:
            return cls(tp=obj["tp"], dp=obj["dp"], zero_stage=obj["zero_stage"],
                       sp=obj["sp"], recompute=obj["recompute"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed strategy object: {exc}") from exc

    def same_layout(self, other: "ParallelStrategy") -> bool:
        """True when the activation layout matches (tp, dp, sp all equal)."""
        return self.tp == other.tp and self.dp == other.dp and self.sp == other.sp


@dataclass(frozen=True)
class StrategyConstraints:
    """Pruning knobs applied while enumerating the strategy space."""

    allow_internode_tp: bool = False
    allowed_zero_stages: frozenset[int] = field(default_factory=lambda: frozenset(ZERO_STAGES))
    force_recompute: bool | None = None

    def validate(self) -> None:
        if not set(self.allowed_zero_stages) <= set(ZERO_STAGES):
            raise ValidationError("allowed_zero_stages must be a subset of {0,1,2,3}")
        if 0 not in self.allowed_zero_stages:
            raise ValidationError("allowed_zero_stages must contain 0")


def enumerate_strategies(
    devices_per_stage: int,
    cluster: ClusterProfile,
    constraints: StrategyConstraints = StrategyConstraints(),
) -> list[ParallelStrategy]:
    """All feasible strategies for a stage, in deterministic tree order.

    The tree splits on tp ascending, then zero_stage ascending, then sp
    (false before true), then recompute (false before true).  Pruned
    branches: tp spanning nodes (unless allowed), sp without tensor
    parallelism, sharding without a data-parallel group, disallowed zero
    stages, and the recompute flag when forced.
    """
    if not is_power_of_two(devices_per_stage):
        raise InvalidDeviceCount(f"devices_per_stage must be a power of two >= 1, got {devices_per_stage}")
    if devices_per_stage > cluster.n_devices:
        raise InvalidDeviceCount(
            f"devices_per_stage = {devices_per_stage} exceeds n_devices = {cluster.n_devices}")
    constraints.validate()

    recompute_choices = (
        (constraints.force_recompute,)
        if constraints.force_recompute is not None
        else (False, True)
    )
    out: list[ParallelStrategy] = []
    tp = 1
    while tp <= devices_per_stage:
        if tp <= cluster.devices_per_node or constraints.allow_internode_tp:
            dp = devices_per_stage // tp
            for zero_stage in ZERO_STAGES:
                if zero_stage not in constraints.allowed_zero_stages:
                    continue
                if zero_stage > 0 and dp == 1:
                    continue
                for sp in (False, True):
                    if sp and tp == 1:
                        continue
                    for recompute in recompute_choices:
                        out.append(ParallelStrategy(
                            tp=tp, dp=dp, zero_stage=zero_stage, sp=sp, recompute=recompute))
        tp *= 2
    return out


def strategy_dp_degree(strategy: ParallelStrategy, devices_per_stage: int) -> int:
    """Data-parallel degree implied by the stage size; must match strategy.dp."""
    if devices_per_stage % strategy.tp != 0:
        raise InconsistentStrategy(
            f"tp = {strategy.tp} does not divide devices_per_stage = {devices_per_stage}")
    dp = devices_per_stage // strategy.tp
    if dp != strategy.dp:
        raise InconsistentStrategy(
            f"strategy dp = {strategy.dp} but devices_per_stage/tp = {dp}")
    return dp
