"""Load-scenario generation: Sobol, Latin hypercube and residual/cost-guided sampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .pf_core import DEFAULT_DELTA

SOBOL_BITS = 52  # enough for 2**52 points without direction-number overflow


# ----------------------------------------------------------------------------
# Sobol (unscrambled, Joe-Kuo direction numbers, Gray-code order)


@lru_cache(maxsize=1)
def _joe_kuo_table() -> list[tuple[int, int, tuple[int, ...]]]:
    text = resources.files("gridflow.data").joinpath("joe_kuo_d1024.txt").read_text()
    rows = []
    for line in text.splitlines()[1:]:
        parts = line.split()
        if parts:
            s, a = int(parts[1]), int(parts[2])
            rows.append((s, a, tuple(int(m) for m in parts[3:3 + s])))
    return rows


def max_sobol_dim() -> int:
    return len(_joe_kuo_table()) + 1


@lru_cache(maxsize=8)
def _direction_numbers(dim: int) -> np.ndarray:
    """``(dim, SOBOL_BITS)`` integer direction numbers scaled to ``2**SOBOL_BITS``."""
    if dim > max_sobol_dim():
        raise ValueError(f"Sobol table supports up to {max_sobol_dim()} dimensions, got {dim}")
    L = SOBOL_BITS
    v = np.zeros((dim, L), dtype=np.uint64)
    v[0] = [1 << (L - 1 - i) for i in range(L)]
    for j, (s, a, m) in enumerate(_joe_kuo_table()[: dim - 1], start=1):
        vj = [0] * L
        for i in range(min(s, L)):
            vj[i] = m[i] << (L - 1 - i)
        for i in range(s, L):
            x = vj[i - s] ^ (vj[i - s] >> s)
            for k in range(1, s):
                if (a >> (s - 1 - k)) & 1:
                    x ^= vj[i - k]
            vj[i] = x
        v[j] = vj
    return v


def sobol_unit(dim: int, count: int, index_offset: int = 0) -> np.ndarray:
    """Points ``index_offset .. index_offset+count-1`` of the Sobol sequence in ``[0, 1)``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    v = _direction_numbers(dim)
    out = np.empty((count, dim))
    # Gray-code state of the starting index: x = XOR of v[bit] over bits of i ^ (i >> 1)
    g = index_offset ^ (index_offset >> 1)
    x = np.zeros(dim, dtype=np.uint64)
    bit = 0
    while g:
        if g & 1:
            x ^= v[:, bit]
        g >>= 1
        bit += 1
    scale = 1.0 / float(1 << SOBOL_BITS)
    for k in range(count):
        i = index_offset + k
        out[k] = x * scale
        c = (~i & (i + 1)).bit_length() - 1  # lowest zero bit of i
        x ^= v[:, c]
    return out


def to_box(unit, delta: float = DEFAULT_DELTA) -> np.ndarray:
    return -delta + 2.0 * delta * np.asarray(unit)


def sobol_batch(dim: int, count: int, index_offset: int = 0, delta: float = DEFAULT_DELTA) -> np.ndarray:
    return to_box(sobol_unit(dim, count, index_offset), delta)


# ----------------------------------------------------------------------------
# Latin hypercube


def lhs_unit(dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    jitter = rng.random((count, dim))
    perms = np.argsort(rng.random((count, dim)), axis=0)
    return (perms + jitter) / count


def lhs_batch(dim: int, count: int, rng: np.random.Generator, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """One sample per stratum ``[k/count, (k+1)/count)`` in each dimension, mapped to the box."""
    return to_box(lhs_unit(dim, count, rng), delta)


# ----------------------------------------------------------------------------
# buffers and guided sampling


class SampleBuffer:
    """Bounded store of scored scenarios; the lowest-priority entry is evicted first.

    ``priority`` is ``"residual"`` (high residual norm kept) or ``"low_cost"``
    (low cost kept).
    """

    FIELDS = ("residual_norm", "cost", "loss", "epoch")

    def __init__(self, dim: int, capacity: int = 4096, priority: str = "residual"):
        if priority not in ("residual", "low_cost"):
            raise ValueError(priority)
        self.dim = dim
        self.capacity = capacity
        self.priority_kind = priority
        self.scenarios = np.empty((0, dim))
        self.residual_norm = np.empty(0)
        self.cost = np.empty(0)
        self.loss = np.empty(0)
        self.epoch = np.empty(0)

    def __len__(self):
        return len(self.residual_norm)

    @property
    def priority(self) -> np.ndarray:
        return self.residual_norm if self.priority_kind == "residual" else -self.cost

    def add(self, scenarios, residual_norm, cost, loss, epoch: int) -> None:
        scenarios = np.atleast_2d(scenarios)
        m = len(scenarios)
        self.scenarios = np.vstack([self.scenarios, scenarios])
        self.residual_norm = np.concatenate([self.residual_norm, np.broadcast_to(residual_norm, m)])
        self.cost = np.concatenate([self.cost, np.broadcast_to(cost, m)])
        self.loss = np.concatenate([self.loss, np.broadcast_to(loss, m)])
        self.epoch = np.concatenate([self.epoch, np.full(m, float(epoch))])
        if len(self) > self.capacity:
            # stable: among equal priorities the older entry goes first
            order = np.argsort(-self.priority, kind="stable")[: self.capacity]
            keep = np.sort(order)
            self._select(keep)

    def _select(self, idx) -> None:
        self.scenarios = self.scenarios[idx]
        for f in self.FIELDS:
            setattr(self, f, getattr(self, f)[idx])

    def top(self, k: int) -> np.ndarray:
        """Indices of the ``k`` highest-priority entries."""
        return np.argsort(-self.priority, kind="stable")[:k]

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.scenarios": self.scenarios}
        for f in self.FIELDS:
            out[f"{prefix}.{f}"] = getattr(self, f)
        return out

    def load_arrays(self, arrays: dict, prefix: str) -> None:
        self.scenarios = arrays[f"{prefix}.scenarios"].reshape(-1, self.dim)
        for f in self.FIELDS:
            setattr(self, f, arrays[f"{prefix}.{f}"])


class RegionKind(enum.Enum):
    HIGH_RESIDUAL = ("HighResidual", 0.05)
    LOW_COST = ("LowCost", 0.10)
    HISTORICAL_LOW_COST = ("HistoricalLowCost", 0.08)
    LINEARIZED_LOW_COST = ("LinearizedLowCost", 0.06)
    CONTROLLED_VIOLATION = ("ControlledViolation", 0.12)

    @property
    def sigma(self) -> float:
        return self.value[1]


@dataclass
class RegionSpec:
    kind: RegionKind
    centers: np.ndarray  # (k, d)

    @property
    def sigma(self) -> float:
        return self.kind.sigma


def perturb(centers, count: int, sigma: float, rng, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """``count`` draws of ``center + N(0, sigma^2 I)`` clamped to the box, centres picked uniformly."""
    centers = np.atleast_2d(centers)
    pick = rng.integers(0, len(centers), size=count)
    noise = rng.normal(0.0, sigma, size=(count, centers.shape[1]))
    return np.clip(centers[pick] + noise, -delta, delta)


def candidate_regions(high_residual: SampleBuffer, low_cost: SampleBuffer, top_k: int = 8) -> list[RegionSpec]:
    """Centres for the five region kinds, or an empty list when no history exists."""
    if len(high_residual) == 0 and len(low_cost) == 0:
        return []
    hr = high_residual if len(high_residual) else low_cost
    lc = low_cost if len(low_cost) else high_residual
    if lc.priority_kind == "low_cost":
        recent = np.flatnonzero(lc.epoch == lc.epoch.max())
        recent = recent[np.argsort(lc.cost[recent], kind="stable")[:top_k]]
        best = np.argsort(lc.cost, kind="stable")[:top_k]
    else:
        recent = best = lc.top(top_k)
    return [
        RegionSpec(RegionKind.HIGH_RESIDUAL, hr.scenarios[hr.top(top_k)]),
        RegionSpec(RegionKind.LOW_COST, lc.scenarios[recent]),
        RegionSpec(RegionKind.HISTORICAL_LOW_COST, lc.scenarios),
        RegionSpec(RegionKind.LINEARIZED_LOW_COST, lc.scenarios[best]),
        RegionSpec(RegionKind.CONTROLLED_VIOLATION, lc.scenarios[best]),
    ]


def guided_batch(regions: list[RegionSpec], dim: int, count: int, rng, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Split ``count`` evenly over the regions (remainder to high-residual).

    Falls back to :func:`lhs_batch` when there are no regions.
    """
    if not regions:
        return lhs_batch(dim, count, rng, delta)
    share, rem = divmod(count, len(regions))
    parts = []
    for k, reg in enumerate(regions):
        m = share + (rem if k == 0 else 0)
        if m:
            parts.append(perturb(reg.centers, m, reg.sigma, rng, delta))
    return np.vstack(parts)


def augment_from_buffer(buffer: SampleBuffer, count: int, rng, delta: float = DEFAULT_DELTA,
                        loss_threshold: float = 5e-3) -> np.ndarray:
    """Perturb buffered scenarios whose loss exceeds ``loss_threshold`` with ``sigma = 0.15 delta``."""
    hard = np.flatnonzero(buffer.loss > loss_threshold) if len(buffer) else np.empty(0, int)
    if hard.size == 0 or count <= 0:
        return np.empty((0, buffer.dim))
    return perturb(buffer.scenarios[hard], count, augmentation_sigma(delta), rng, delta)


def augmentation_sigma(delta: float) -> float:
    return 0.15 * delta


# ----------------------------------------------------------------------------
# stage schedule


class Strategy(str, enum.Enum):
    SOBOL = "stage1-sobol"
    LHS = "stage2-lhs"
    LHS_GUIDED = "stage2-lhs-guided"
    ADAPTIVE = "stage3-adaptive"


@dataclass(frozen=True)
class StageSchedule:
    total_epochs: int
    stage1_frac: float = 0.3
    stage2_frac: float = 0.7
    guided_frac: float = 0.5  # fraction of stage 2 after which guided refresh starts
    guided_refresh_interval: int = 500

    @property
    def stage1_end(self) -> int:
        return int(round(self.stage1_frac * self.total_epochs))

    @property
    def stage2_end(self) -> int:
        return int(round(self.stage2_frac * self.total_epochs))

    @property
    def stage2_guided_start(self) -> int:
        return self.stage1_end + int(round(self.guided_frac * (self.stage2_end - self.stage1_end)))


def stage_for_epoch(schedule: StageSchedule, epoch: int) -> Strategy:
    if epoch < schedule.stage1_end:
        return Strategy.SOBOL
    if epoch < schedule.stage2_guided_start:
        return Strategy.LHS
    if epoch < schedule.stage2_end:
        return Strategy.LHS_GUIDED
    return Strategy.ADAPTIVE


class ScenarioSampler:
    """Per-epoch batch generator owning the Sobol offset, the buffers and guided centres.

    Batch composition: stage 2 late = 3/4 LHS + 1/4 guided (centres refreshed every
    ``guided_refresh_interval`` epochs); stage 3 = 1/2 guided + 1/4 augmentation +
    LHS for the rest.
    """

    def __init__(self, dim: int, schedule: StageSchedule, delta: float = DEFAULT_DELTA,
                 capacity: int = 4096, top_k: int = 8):
        self.dim = dim
        self.schedule = schedule
        self.delta = delta
        self.top_k = top_k
        self.sobol_offset = 0
        self.high_residual = SampleBuffer(dim, capacity, "residual")
        self.low_cost = SampleBuffer(dim, capacity, "low_cost")
        self.regions: list[RegionSpec] = []
        self.regions_epoch = -1

    def batch(self, epoch: int, count: int, rng) -> np.ndarray:
        strategy = stage_for_epoch(self.schedule, epoch)
        if strategy is Strategy.SOBOL:
            out = sobol_batch(self.dim, count, self.sobol_offset, self.delta)
            self.sobol_offset += count
            return out
        if strategy is Strategy.LHS:
            return lhs_batch(self.dim, count, rng, self.delta)
        if strategy is Strategy.LHS_GUIDED:
            since = epoch - self.schedule.stage2_guided_start
            if since % self.schedule.guided_refresh_interval == 0 or self.regions_epoch < 0:
                self._refresh(epoch)
            n_guided = count // 4
            return np.vstack([
                lhs_batch(self.dim, count - n_guided, rng, self.delta),
                guided_batch(self.regions, self.dim, n_guided, rng, self.delta),
            ])
        self._refresh(epoch)
        n_guided = count // 2
        aug = augment_from_buffer(self.high_residual, count // 4, rng, self.delta)
        n_lhs = count - n_guided - len(aug)
        return np.vstack([
            guided_batch(self.regions, self.dim, n_guided, rng, self.delta),
            aug,
            lhs_batch(self.dim, n_lhs, rng, self.delta),
        ])

    def _refresh(self, epoch: int) -> None:
        self.regions = candidate_regions(self.high_residual, self.low_cost, self.top_k)
        self.regions_epoch = epoch

    def record(self, scenarios, residual_norm, cost, loss, epoch: int) -> None:
        self.high_residual.add(scenarios, residual_norm, cost, loss, epoch)
        self.low_cost.add(scenarios, residual_norm, cost, loss, epoch)

    # checkpoint support
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"sobol_offset": self.sobol_offset, "regions_epoch": self.regions_epoch,
                "regions": [r.kind.name for r in self.regions]}
        arrays = {**self.high_residual.to_arrays("buf_hr"), **self.low_cost.to_arrays("buf_lc")}
        for k, r in enumerate(self.regions):
            arrays[f"region{k}"] = r.centers
        return meta, arrays

    def load_state(self, meta: dict, arrays: dict) -> None:
        self.sobol_offset = int(meta["sobol_offset"])
        self.regions_epoch = int(meta["regions_epoch"])
        self.high_residual.load_arrays(arrays, "buf_hr")
        self.low_cost.load_arrays(arrays, "buf_lc")
        self.regions = [
            RegionSpec(RegionKind[name], arrays[f"region{k}"].reshape(-1, self.dim))
            for k, name in enumerate(meta["regions"])
        ]
