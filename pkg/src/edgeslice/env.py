"""Physical and economic model of the multi-region edge system.

Covers the radio uplink, per-VM FIFO queues, revenue settlement against a
QoS deadline, rental accounting over discrete bandwidth/VM options, and the
short-slot state transition that every allocation policy drives.

Units are SI throughout: bits, Hz, cycles, seconds, watts.  Money is a plain
float "currency unit".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConstraintViolation, InfeasibleUploadError
from .validation import require_finite, require_nonnegative, require_positive


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    """One user's offloading request: data size, computing density, priority,
    distance to the base station."""

    data_size: float        # bits
    compute_density: float  # cycles per bit
    priority: float         # revenue weight
    distance: float         # meters to the BS
    arrival_slot: int = 0   # short-slot index of arrival

    def __post_init__(self):
        require_positive("data_size", self.data_size)
        require_positive("compute_density", self.compute_density)
        require_positive("priority", self.priority)
        require_positive("distance", self.distance)

    @property
    def work(self) -> float:
        """Total CPU cycles the task needs."""
        return self.data_size * self.compute_density


@dataclass(frozen=True)
class RadioParams:
    """Uplink channel constants: transmit power, noise power and the
    distance-based path-loss model gain(l) = pathloss_ref * l^-pathloss_exp."""

    upload_power: float = 0.1      # W
    noise_power: float = 1e-9      # W
    pathloss_ref: float = 1e-3     # gain at 1 m
    pathloss_exp: float = 2.0

    def __post_init__(self):
        require_positive("upload_power", self.upload_power)
        require_positive("noise_power", self.noise_power)
        require_positive("pathloss_ref", self.pathloss_ref)
        require_positive("pathloss_exp", self.pathloss_exp)

    def channel_gain(self, distance: float) -> float:
        require_positive("distance", distance)
        return self.pathloss_ref * distance ** (-self.pathloss_exp)

    def snr(self, distance: float) -> float:
        return self.upload_power * self.channel_gain(distance) / self.noise_power

    def spectral_efficiency(self, distance: float) -> float:
        """bits/s per Hz of allocated uplink bandwidth at this distance."""
        return math.log2(1.0 + self.snr(distance))


@dataclass(frozen=True)
class EconParams:
    """Settlement constants: per-task reward and the completion deadline."""

    reward_per_task: float = 10.0  # currency on on-time completion
    deadline: float = 1.0          # seconds, inclusive

    def __post_init__(self):
        require_positive("reward_per_task", self.reward_per_task)
        require_positive("deadline", self.deadline)


@dataclass(frozen=True)
class RegionCatalog:
    """Rentable options in one region.

    bandwidth_options / vm_options are (capacity, cost) pairs sorted by
    strictly increasing capacity.  All VMs in a region run at vm_frequency.
    """

    bandwidth_options: tuple  # ((Hz, cost), ...)
    vm_options: tuple         # ((count, cost), ...)
    vm_frequency: float       # cycles/s

    def __post_init__(self):
        require_positive("vm_frequency", self.vm_frequency)
        for label, options in (("bandwidth_options", self.bandwidth_options),
                               ("vm_options", self.vm_options)):
            if not options:
                raise ValueError(f"{label} must be non-empty")
            caps = [cap for cap, _ in options]
            if any(c2 <= c1 for c1, c2 in zip(caps, caps[1:])):
                raise ValueError(f"{label} capacities must be strictly increasing")
            for cap, cost in options:
                require_positive(f"{label} capacity", cap)
                require_nonnegative(f"{label} cost", cost)


@dataclass(frozen=True)
class ResourceCatalog:
    """Per-region rentable bandwidth and VM options."""

    regions: tuple  # (RegionCatalog, ...)

    def __post_init__(self):
        if not self.regions:
            raise ValueError("catalog must cover at least one region")

    @property
    def num_regions(self) -> int:
        return len(self.regions)


@dataclass(frozen=True)
class SliceDecision:
    """Per-region one-hot rental choices over the catalog options."""

    bw_choice: tuple  # per region, tuple of 0/1 ints, exactly one 1
    vm_choice: tuple

    def __post_init__(self):
        for label, choices in (("bw_choice", self.bw_choice),
                               ("vm_choice", self.vm_choice)):
            for i, onehot in enumerate(choices):
                if any(v not in (0, 1) for v in onehot):
                    raise ConstraintViolation(
                        f"{label}[{i}] entries must be 0 or 1, got {onehot}")
                if sum(onehot) != 1:
                    raise ConstraintViolation(
                        f"{label}[{i}] must select exactly one option, got {onehot}")

    @classmethod
    def from_indices(cls, catalog: ResourceCatalog, bw_idx, vm_idx) -> "SliceDecision":
        bw, vm = [], []
        for i, reg in enumerate(catalog.regions):
            b = [0] * len(reg.bandwidth_options)
            v = [0] * len(reg.vm_options)
            b[bw_idx[i]] = 1
            v[vm_idx[i]] = 1
            bw.append(tuple(b))
            vm.append(tuple(v))
        return cls(bw_choice=tuple(bw), vm_choice=tuple(vm))

    def bw_index(self, region: int) -> int:
        return self.bw_choice[region].index(1)

    def vm_index(self, region: int) -> int:
        return self.vm_choice[region].index(1)


@dataclass
class VmQueueState:
    """Backlog of one VM: CPU cycles still queued in front of new arrivals."""

    pending_work: float = 0.0

    def __post_init__(self):
        require_nonnegative("pending_work", self.pending_work)


@dataclass
class RegionState:
    """Mutable per-region snapshot between short slots."""

    region: int
    bandwidth: float            # rented uplink Hz in this region
    vm_count: int               # rented VMs in this region
    tasks: list                 # TaskSpec batch for the current short slot
    queues: list                # VmQueueState per rented VM
    long_slot: int = 1
    short_slot: int = 1

    def __post_init__(self):
        if len(self.queues) != self.vm_count:
            raise ValueError(
                f"queue list length {len(self.queues)} != vm_count {self.vm_count}")

    def copy(self) -> "RegionState":
        return RegionState(
            region=self.region,
            bandwidth=self.bandwidth,
            vm_count=self.vm_count,
            tasks=list(self.tasks),
            queues=[VmQueueState(q.pending_work) for q in self.queues],
            long_slot=self.long_slot,
            short_slot=self.short_slot,
        )


@dataclass
class AllocationAction:
    """Per-task uplink shares and VM placements for one region and slot.

    bw_fraction[j] is user j's share of the region's rented bandwidth;
    vm_index[j] is the serving VM.  A zero share means the task is rejected
    (not uploaded, no revenue, no queue load).
    """

    bw_fraction: np.ndarray
    vm_index: np.ndarray

    def __post_init__(self):
        self.bw_fraction = np.asarray(self.bw_fraction, dtype=float)
        self.vm_index = np.asarray(self.vm_index, dtype=int)
        if self.bw_fraction.shape != self.vm_index.shape:
            raise ValueError("bw_fraction and vm_index must have equal length")
        if np.any(~np.isfinite(self.bw_fraction)) or np.any(self.bw_fraction < 0):
            raise ValueError("bw_fraction must be finite and nonnegative")

    def projected(self) -> "AllocationAction":
        """Scale shares down so they sum to at most 1 (budget constraint)."""
        total = float(self.bw_fraction.sum())
        if total <= 1.0:
            return self
        return AllocationAction(self.bw_fraction / total, self.vm_index.copy())


@dataclass(frozen=True)
class TimingBreakdown:
    """Completion-time decomposition of one offloaded task."""

    upload: float
    queue: float
    execute: float
    total: float


@dataclass(frozen=True)
class SettlementRecord:
    """One per-task settlement row of the simulation log."""

    region: int
    long_slot: int
    short_slot: int
    task_id: int
    t_up: float
    t_que: float
    t_exe: float
    t_total: float
    revenue: float

    CSV_HEADER = ("region", "long_slot", "short_slot", "task_id",
                  "t_up", "t_que", "t_exe", "t_total", "revenue")

    def as_row(self) -> tuple:
        return (self.region, self.long_slot, self.short_slot, self.task_id,
                self.t_up, self.t_que, self.t_exe, self.t_total, self.revenue)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def uplink_rate(bw: float, radio: RadioParams, distance: float) -> float:
    """Shannon uplink rate in bits/s for the given bandwidth and distance."""
    require_finite("bw", bw)
    require_nonnegative("bw", bw)
    require_positive("distance", distance)
    return bw * radio.spectral_efficiency(distance)


def task_timing(task: TaskSpec, bw: float, queue: VmQueueState,
                frequency: float, radio: RadioParams) -> TimingBreakdown:
    """Upload + queueing + execution time of one task on its assigned VM.

    Result-return time is zero by model.  The queue contribution is the
    backlog already in front of the task divided by the VM frequency.
    """
    require_positive("frequency", frequency)
    if bw <= 0.0:
        raise InfeasibleUploadError(
            f"task with {task.data_size:.6g} bits cannot upload over zero bandwidth")
    t_up = task.data_size / uplink_rate(bw, radio, task.distance)
    t_que = queue.pending_work / frequency
    t_exe = task.work / frequency
    return TimingBreakdown(upload=t_up, queue=t_que, execute=t_exe,
                           total=t_up + t_que + t_exe)


def settle(timing: TimingBreakdown, econ: EconParams, priority: float) -> float:
    """Revenue for one task: full priority-weighted reward when the total
    completion time meets the deadline (inclusive), otherwise zero."""
    if timing.total <= econ.deadline:
        return econ.reward_per_task * priority
    return 0.0


def rented_and_cost(catalog: ResourceCatalog, slices: SliceDecision):
    """Total rented bandwidth, VM count and rental cost across regions.

    Raises ConstraintViolation unless every region picks exactly one option
    of each kind (the SliceDecision constructor enforces this; shape
    mismatches against the catalog are caught here).
    """
    if (len(slices.bw_choice) != catalog.num_regions
            or len(slices.vm_choice) != catalog.num_regions):
        raise ConstraintViolation("slice decision does not cover every region")
    total_bw = 0.0
    total_vms = 0
    total_cost = 0.0
    for i, reg in enumerate(catalog.regions):
        if (len(slices.bw_choice[i]) != len(reg.bandwidth_options)
                or len(slices.vm_choice[i]) != len(reg.vm_options)):
            raise ConstraintViolation(f"slice vectors do not match catalog in region {i}")
        bw_cap, bw_cost = reg.bandwidth_options[slices.bw_index(i)]
        vm_cnt, vm_cost = reg.vm_options[slices.vm_index(i)]
        total_bw += bw_cap
        total_vms += vm_cnt
        total_cost += bw_cost + vm_cost
    return total_bw, total_vms, total_cost


def rented_in_region(catalog: ResourceCatalog, slices: SliceDecision, region: int):
    """Rented (bandwidth, vm_count) of a single region under a decision."""
    reg = catalog.regions[region]
    bw_cap, _ = reg.bandwidth_options[slices.bw_index(region)]
    vm_cnt, _ = reg.vm_options[slices.vm_index(region)]
    return bw_cap, vm_cnt


def step(state: RegionState, action: AllocationAction, econ: EconParams,
         radio: RadioParams, rng: np.random.Generator | None = None,
         frequency: float = 1e9, slot_duration: float = 1.0):
    """Advance one region by one short slot under an allocation action.

    Tasks are processed in arrival-list order; each sees the backlog of
    earlier same-slot arrivals on its VM.  Tasks that meet the deadline pay
    priority-weighted revenue and add their work to the VM queue; tasks that
    miss (or get zero bandwidth) pay nothing and are dropped.  Queues then
    drain by one slot of service.  The transition is deterministic; ``rng``
    is accepted for interface uniformity and never consulted.

    Returns (reward, next_state, settlement records).
    """
    n = len(state.tasks)
    if action.bw_fraction.shape[0] != n:
        raise ValueError(f"action covers {action.bw_fraction.shape[0]} tasks, state has {n}")
    action = action.projected()
    for j in range(n):
        if action.bw_fraction[j] > 0 and not (0 <= action.vm_index[j] < state.vm_count):
            raise ConstraintViolation(
                f"task {j} assigned to VM {action.vm_index[j]} outside the "
                f"{state.vm_count} rented VMs")

    next_state = state.copy()
    records = []
    reward = 0.0
    for j, task in enumerate(state.tasks):
        frac = float(action.bw_fraction[j])
        if frac <= 0.0:
            records.append(SettlementRecord(
                region=state.region, long_slot=state.long_slot,
                short_slot=state.short_slot, task_id=j,
                t_up=math.inf, t_que=0.0, t_exe=0.0, t_total=math.inf, revenue=0.0))
            continue
        vm = int(action.vm_index[j])
        timing = task_timing(task, frac * state.bandwidth,
                             next_state.queues[vm], frequency, radio)
        revenue = settle(timing, econ, task.priority)
        if revenue > 0.0:
            next_state.queues[vm].pending_work += task.work
        reward += revenue
        records.append(SettlementRecord(
            region=state.region, long_slot=state.long_slot,
            short_slot=state.short_slot, task_id=j,
            t_up=timing.upload, t_que=timing.queue, t_exe=timing.execute,
            t_total=timing.total, revenue=revenue))

    # One slot of FIFO service drains each queue.
    drained = frequency * slot_duration
    for q in next_state.queues:
        q.pending_work = max(0.0, q.pending_work - drained)

    next_state.tasks = []
    next_state.short_slot += 1
    return reward, next_state, records


def horizon_profit(trace) -> float:
    """Total profit over (revenue, cost) pairs, one per long slot."""
    total = 0.0
    for revenue, cost in trace:
        require_finite("revenue", revenue)
        require_finite("cost", cost)
        total += revenue - cost
    return total
