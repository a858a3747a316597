"""Game instances and the coalition value function.

A game is a roster of agents with capability profiles in [0, 1]^d plus the
coordination-cost parameters of the value function.  A coalition's value is
the mean of the componentwise maximum of its members' profiles minus a
superlinear size cost alpha * k**beta; agents compare coalitions by the
per-capita share of that value.

Coalitions are bitmasks over agent ids, so set operations are O(1) and every
structural check below reduces to integer arithmetic over a precomputed
value table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Sequence

TIE_EPS = 1e-12
DEDUP_EPS = 1e-9
MAX_AGENTS = 64
DEFAULT_ALPHA = 0.15
DEFAULT_BETA = 1.3


class EnumerationBudgetError(ValueError):
    """Raised when an exhaustive check would exceed its configured cap."""


class Aggregation(Enum):
    """How member capabilities combine into a coalition capability vector."""

    COMPONENTWISE_MAX = "componentwise_max"
    # Per-dimension spread (max - min).  Deliberately not monotone in member
    # capabilities; exists only so tests can exercise failure paths of the
    # structural checks.
    COMPONENTWISE_SPREAD = "componentwise_spread"


@dataclass(frozen=True)
class CapabilityProfile:
    """Skill vector of one agent, every entry in [0, 1]."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        for v in self.values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"capability scores must lie in [0, 1], got {v}")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i: int) -> float:
        return self.values[i]

    def dominates(self, other: "CapabilityProfile") -> bool:
        """True if this profile is componentwise >= `other`."""
        return all(a >= b for a, b in zip(self.values, other.values))


@dataclass(frozen=True)
class AgentSpec:
    """One agent: a small integer id, a free-text label, and a profile.

    The label typically records model/configuration metadata; it plays no
    role in any value computation.
    """

    id: int
    label: str
    profile: CapabilityProfile


@dataclass(frozen=True)
class GameSpec:
    """A full game instance: agents plus value-function parameters."""

    agents: tuple[AgentSpec, ...]
    d: int
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    aggregation: Aggregation = Aggregation.COMPONENTWISE_MAX

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents", tuple(self.agents))
        n = len(self.agents)
        if n < 1:
            raise ValueError("a game needs at least one agent")
        if n > MAX_AGENTS:
            raise ValueError(f"at most {MAX_AGENTS} agents supported, got {n}")
        if [a.id for a in self.agents] != list(range(n)):
            raise ValueError("agent ids must be 0..n-1 in order")
        for a in self.agents:
            if len(a.profile) != self.d:
                raise ValueError(
                    f"agent {a.id} profile has length {len(a.profile)}, expected d={self.d}"
                )
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta >= 1:
            raise ValueError("beta must be >= 1")

    @property
    def n(self) -> int:
        return len(self.agents)

    def profile(self, agent: int) -> CapabilityProfile:
        return self.agents[agent].profile

    @classmethod
    def from_profiles(
        cls,
        profiles: Sequence[Sequence[float]],
        alpha: float = DEFAULT_ALPHA,
        beta: float = DEFAULT_BETA,
        labels: Sequence[str] | None = None,
        aggregation: Aggregation = Aggregation.COMPONENTWISE_MAX,
    ) -> "GameSpec":
        if not profiles:
            raise ValueError("a game needs at least one agent")
        d = len(profiles[0])
        agents = tuple(
            AgentSpec(
                id=i,
                label=labels[i] if labels else f"agent-{i}",
                profile=CapabilityProfile(tuple(p)),
            )
            for i, p in enumerate(profiles)
        )
        return cls(agents=agents, d=d, alpha=alpha, beta=beta, aggregation=aggregation)

    def with_params(self, **kwargs) -> "GameSpec":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class Coalition:
    """A set of agent ids, stored as a bitmask."""

    mask: int

    def __post_init__(self) -> None:
        if self.mask < 0:
            raise ValueError("coalition mask must be non-negative")

    @classmethod
    def of(cls, members: Iterable[int]) -> "Coalition":
        mask = 0
        for m in members:
            if m < 0 or m >= MAX_AGENTS:
                raise ValueError(f"agent id {m} out of range")
            mask |= 1 << m
        return cls(mask)

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.mask.bit_length()) if self.mask >> i & 1)

    def __len__(self) -> int:
        return self.mask.bit_count()

    def __contains__(self, agent: int) -> bool:
        return bool(self.mask >> agent & 1)

    def __iter__(self):
        return iter(self.members)

    @property
    def is_empty(self) -> bool:
        return self.mask == 0

    def with_agent(self, agent: int) -> "Coalition":
        return Coalition(self.mask | 1 << agent)

    def without_agent(self, agent: int) -> "Coalition":
        return Coalition(self.mask & ~(1 << agent))

    def __repr__(self) -> str:
        return f"Coalition({set(self.members) if self.mask else '{}'})"


# Sentinel target for "the agent goes solo" in deviation comparisons.
EMPTY_COALITION = Coalition(0)


@dataclass(frozen=True)
class Partition:
    """An exclusive coalition structure over agents 0..n-1.

    Coalitions are stored in canonical order (ascending smallest member), so
    two partitions with the same blocks compare and hash equal.
    """

    n: int
    coalitions: tuple[Coalition, ...]

    def __post_init__(self) -> None:
        blocks = tuple(sorted(self.coalitions, key=lambda c: c.mask & -c.mask))
        object.__setattr__(self, "coalitions", blocks)
        union = 0
        for c in blocks:
            if c.is_empty:
                raise ValueError("partitions may not contain an empty coalition")
            if union & c.mask:
                raise ValueError("coalitions must be pairwise disjoint")
            union |= c.mask
        if union != (1 << self.n) - 1:
            raise ValueError(f"coalitions must cover exactly agents 0..{self.n - 1}")

    @classmethod
    def from_blocks(cls, n: int, blocks: Iterable[Iterable[int]]) -> "Partition":
        return cls(n, tuple(Coalition.of(b) for b in blocks))

    @classmethod
    def from_masks(cls, n: int, masks: Iterable[int]) -> "Partition":
        return cls(n, tuple(Coalition(m) for m in masks))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(n, tuple(Coalition(1 << i) for i in range(n)))

    @property
    def masks(self) -> tuple[int, ...]:
        return tuple(c.mask for c in self.coalitions)

    def coalition_of(self, agent: int) -> Coalition:
        for c in self.coalitions:
            if agent in c:
                return c
        raise ValueError(f"agent {agent} not in partition")

    def move(self, agent: int, target: Coalition) -> "Partition":
        """Partition after `agent` leaves its coalition and joins `target`.

        `target` must be a coalition of this partition or the empty sentinel
        (the agent becomes a singleton).
        """
        own = self.coalition_of(agent)
        if target.mask == own.mask:
            return self
        if not target.is_empty and target.mask not in self.masks:
            raise ValueError("target must be a coalition of the partition or empty")
        if agent in target:
            raise ValueError("agent already in target coalition")
        new_masks = []
        for m in self.masks:
            if m == own.mask:
                m &= ~(1 << agent)
            elif m == target.mask:
                m |= 1 << agent
            if m:
                new_masks.append(m)
        if target.is_empty:
            new_masks.append(1 << agent)
        return Partition.from_masks(self.n, new_masks)

    def blocks(self) -> list[list[int]]:
        return [list(c.members) for c in self.coalitions]

    def __len__(self) -> int:
        return len(self.coalitions)

    def __iter__(self):
        return iter(self.coalitions)

    def __repr__(self) -> str:
        return "Partition(" + " | ".join(str(set(c.members)) for c in self.coalitions) + ")"


def _as_mask(coalition: Coalition | int) -> int:
    return coalition.mask if isinstance(coalition, Coalition) else int(coalition)


def _aggregate_mean(game: GameSpec, mask: int) -> float:
    members = [i for i in range(game.n) if mask >> i & 1]
    profiles = [game.agents[i].profile.values for i in members]
    if game.aggregation is Aggregation.COMPONENTWISE_MAX:
        agg = (max(p[j] for p in profiles) for j in range(game.d))
    else:
        agg = (
            max(p[j] for p in profiles) - min(p[j] for p in profiles)
            for j in range(game.d)
        )
    return sum(agg) / game.d


def coalition_value(game: GameSpec, coalition: Coalition | int) -> float:
    """Value of a coalition: aggregated capability minus coordination cost."""
    mask = _as_mask(coalition)
    if mask == 0:
        raise ValueError("empty coalition has no value")
    if mask >> game.n:
        raise ValueError("coalition contains agents outside the game")
    k = mask.bit_count()
    return _aggregate_mean(game, mask) - game.alpha * k**game.beta


def per_capita_value(game: GameSpec, coalition: Coalition | int, agent: int) -> float:
    """Equal share of the coalition value; the quantity agents compare."""
    mask = _as_mask(coalition)
    if not mask >> agent & 1:
        raise ValueError(f"agent {agent} is not a member of the coalition")
    return coalition_value(game, mask) / mask.bit_count()


def potential(game: GameSpec, partition: Partition) -> float:
    """Sum of coalition values over the partition."""
    if partition.n != game.n:
        raise ValueError("partition size does not match the game")
    return sum(coalition_value(game, c) for c in partition.coalitions)


@lru_cache(maxsize=64)
def value_table(game: GameSpec) -> tuple[float, ...]:
    """Coalition values for every nonempty mask, indexed by mask.

    Index 0 holds nan (the empty coalition has no value).  Intended for the
    hot paths; limited to n <= 20 to bound memory.
    """
    if game.n > 20:
        raise EnumerationBudgetError("value_table supports at most 20 agents")
    vals = [math.nan] * (1 << game.n)
    for mask in range(1, 1 << game.n):
        vals[mask] = coalition_value(game, mask)
    return tuple(vals)


@lru_cache(maxsize=64)
def per_capita_table(game: GameSpec) -> tuple[float, ...]:
    """Per-capita coalition values for every nonempty mask, indexed by mask."""
    vals = value_table(game)
    return tuple(
        v / mask.bit_count() if mask else math.nan for mask, v in enumerate(vals)
    )


def iter_coalition_masks(n: int, max_size: int) -> Iterator[int]:
    """All nonempty coalition masks of size <= max_size, smallest sizes first."""
    for k in range(1, min(max_size, n) + 1):
        for combo in combinations(range(n), k):
            mask = 0
            for i in combo:
                mask |= 1 << i
            yield mask


def count_coalitions(n: int, max_size: int) -> int:
    return sum(math.comb(n, k) for k in range(1, min(max_size, n) + 1))


def value_gap_delta(
    game: GameSpec,
    max_size: int = 4,
    budget: int = 2_000_000,
) -> float:
    """Minimum nonzero per-capita value separation seen by any single agent.

    Enumerates, for each agent, the per-capita values of every coalition of
    size <= max_size containing it, merges values closer than DEDUP_EPS, and
    returns the smallest surviving gap.  Returns math.inf when every agent
    sees a single distinct value.
    """
    if count_coalitions(game.n, max_size) > budget:
        raise EnumerationBudgetError(
            f"value-gap enumeration over {count_coalitions(game.n, max_size)} "
            f"coalitions exceeds the budget of {budget}"
        )
    per_agent: list[list[float]] = [[] for _ in range(game.n)]
    for mask in iter_coalition_masks(game.n, max_size):
        pc = coalition_value(game, mask) / mask.bit_count()
        m = mask
        while m:
            i = (m & -m).bit_length() - 1
            per_agent[i].append(pc)
            m &= m - 1
    best = math.inf
    for values in per_agent:
        values.sort()
        prev = values[0]
        for v in values[1:]:
            gap = v - prev
            if gap > DEDUP_EPS:
                best = min(best, gap)
            prev = v
    return best


def coalition_value_range(game: GameSpec, max_size: int | None = None) -> float:
    """max v(S) - min v(S) over nonempty coalitions of size <= max_size."""
    max_size = game.n if max_size is None else max_size
    lo, hi = math.inf, -math.inf
    for mask in iter_coalition_masks(game.n, max_size):
        v = coalition_value(game, mask)
        lo, hi = min(lo, v), max(hi, v)
    return hi - lo


@dataclass(frozen=True)
class MonotonicityWitness:
    weaker_agent: int
    stronger_agent: int
    base_members: tuple[int, ...]
    value_with_weaker: float
    value_with_stronger: float


@dataclass(frozen=True)
class MonotonicityReport:
    passed: bool
    comparable_pairs: int
    checks: int
    witness: MonotonicityWitness | None = None


def check_capability_monotonicity(game: GameSpec, max_size: int = 4) -> MonotonicityReport:
    """Exhaustively test that dominated agents never add more value.

    For every ordered pair (i, j) with profile_i <= profile_j componentwise
    and every base coalition S of size < max_size avoiding both, checks
    v(S + i) <= v(S + j).  Vacuously passes when no pair is comparable.
    """
    pairs = [
        (i, j)
        for i in range(game.n)
        for j in range(game.n)
        if i != j and game.profile(j).dominates(game.profile(i))
    ]
    checks = 0
    others = list(range(game.n))
    for i, j in pairs:
        rest = [a for a in others if a not in (i, j)]
        for k in range(0, min(max_size - 1, len(rest)) + 1):
            for combo in combinations(rest, k):
                base = 0
                for a in combo:
                    base |= 1 << a
                checks += 1
                v_i = coalition_value(game, base | 1 << i)
                v_j = coalition_value(game, base | 1 << j)
                if v_i > v_j + TIE_EPS:
                    return MonotonicityReport(
                        passed=False,
                        comparable_pairs=len(pairs),
                        checks=checks,
                        witness=MonotonicityWitness(
                            weaker_agent=i,
                            stronger_agent=j,
                            base_members=combo,
                            value_with_weaker=v_i,
                            value_with_stronger=v_j,
                        ),
                    )
    return MonotonicityReport(passed=True, comparable_pairs=len(pairs), checks=checks)


@dataclass(frozen=True)
class AlignmentWitness:
    partition: Partition
    agent: int
    target_members: tuple[int, ...]
    per_capita_before: float
    per_capita_after: float
    potential_before: float
    potential_after: float


@dataclass(frozen=True)
class AlignmentReport:
    passed: bool
    partitions_checked: int
    deviations_checked: int
    witness: AlignmentWitness | None = None


def iter_partition_blocks(n: int) -> Iterator[tuple[int, ...]]:
    """All set partitions of 0..n-1 as tuples of bitmasks.

    Restricted-growth-string order; within a partition, blocks are ordered by
    smallest member.  Yields Bell(n) tuples.
    """
    if n <= 0:
        yield ()
        return
    a = [0] * n
    m = [0] * n
    while True:
        blocks = [0] * (m[n - 1] + 1)
        for i, ai in enumerate(a):
            blocks[ai] |= 1 << i
        yield tuple(blocks)
        i = n - 1
        while i > 0 and a[i] == m[i - 1] + 1:
            i -= 1
        if i == 0:
            return
        a[i] += 1
        m[i] = max(m[i - 1], a[i])
        for j in range(i + 1, n):
            a[j] = 0
            m[j] = m[j - 1]


def check_potential_alignment(
    game: GameSpec,
    partition_cap: int = 150_000,
) -> AlignmentReport:
    """Check that every strictly improving deviation strictly raises Phi.

    Exhausts all partitions; fails with the first witness where an agent's
    per-capita value improves but the total value does not strictly increase
    (a zero change counts as a failure).
    """
    bell = _bell_number(game.n)
    if bell > partition_cap:
        raise EnumerationBudgetError(
            f"alignment check over {bell} partitions exceeds the cap of {partition_cap}"
        )
    vals = value_table(game)
    n = game.n
    partitions = 0
    deviations = 0
    for blocks in iter_partition_blocks(n):
        partitions += 1
        phi = sum(vals[b] for b in blocks)
        for own in blocks:
            bits = own
            while bits:
                agent_bit = bits & -bits
                bits &= bits - 1
                agent = agent_bit.bit_length() - 1
                pc_own = vals[own] / own.bit_count()
                for target in blocks:
                    if target == own:
                        continue
                    deviations += 1
                    joined = target | agent_bit
                    pc_new = vals[joined] / joined.bit_count()
                    if pc_new <= pc_own + TIE_EPS:
                        continue
                    rest = own & ~agent_bit
                    phi_new = (
                        phi
                        - vals[own]
                        - vals[target]
                        + vals[joined]
                        + (vals[rest] if rest else 0.0)
                    )
                    if phi_new <= phi + TIE_EPS:
                        return AlignmentReport(
                            passed=False,
                            partitions_checked=partitions,
                            deviations_checked=deviations,
                            witness=AlignmentWitness(
                                partition=Partition.from_masks(n, blocks),
                                agent=agent,
                                target_members=Coalition(target).members,
                                per_capita_before=pc_own,
                                per_capita_after=pc_new,
                                potential_before=phi,
                                potential_after=phi_new,
                            ),
                        )
                # solo deviation
                if own != agent_bit:
                    deviations += 1
                    pc_new = vals[agent_bit]
                    if pc_new > pc_own + TIE_EPS:
                        rest = own & ~agent_bit
                        phi_new = phi - vals[own] + vals[agent_bit] + (
                            vals[rest] if rest else 0.0
                        )
                        if phi_new <= phi + TIE_EPS:
                            return AlignmentReport(
                                passed=False,
                                partitions_checked=partitions,
                                deviations_checked=deviations,
                                witness=AlignmentWitness(
                                    partition=Partition.from_masks(n, blocks),
                                    agent=agent,
                                    target_members=(),
                                    per_capita_before=pc_own,
                                    per_capita_after=pc_new,
                                    potential_before=phi,
                                    potential_after=phi_new,
                                ),
                            )
    return AlignmentReport(
        passed=True, partitions_checked=partitions, deviations_checked=deviations
    )


@lru_cache(maxsize=None)
def _bell_number(n: int) -> int:
    if n == 0:
        return 1
    row = [1]
    for _ in range(n - 1):
        new = [row[-1]]
        for x in row:
            new.append(new[-1] + x)
        row = new
    return row[-1]


# ---------------------------------------------------------------------------
# serialization

def game_to_dict(game: GameSpec) -> dict:
    out = {
        "d": game.d,
        "alpha": game.alpha,
        "beta": game.beta,
        "agents": [
            {"id": a.id, "label": a.label, "profile": list(a.profile.values)}
            for a in game.agents
        ],
    }
    if game.aggregation is not Aggregation.COMPONENTWISE_MAX:
        out["aggregation"] = game.aggregation.value
    return out


def game_from_dict(data: dict) -> GameSpec:
    agents = tuple(
        AgentSpec(
            id=int(a["id"]),
            label=str(a.get("label", f"agent-{a['id']}")),
            profile=CapabilityProfile(tuple(a["profile"])),
        )
        for a in sorted(data["agents"], key=lambda a: a["id"])
    )
    return GameSpec(
        agents=agents,
        d=int(data["d"]),
        alpha=float(data.get("alpha", DEFAULT_ALPHA)),
        beta=float(data.get("beta", DEFAULT_BETA)),
        aggregation=Aggregation(data.get("aggregation", "componentwise_max")),
    )


def load_game(path: str | Path) -> GameSpec:
    with open(path, encoding="utf-8") as fh:
        return game_from_dict(json.load(fh))


def save_game(game: GameSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(game_to_dict(game), indent=2) + "\n", encoding="utf-8")


def partition_to_dict(partition: Partition) -> dict:
    return {"n": partition.n, "coalitions": partition.blocks()}


def partition_from_dict(data: dict, n: int | None = None) -> Partition:
    blocks = data["coalitions"]
    if n is None:
        n = data.get("n") or sum(len(b) for b in blocks)
    return Partition.from_blocks(int(n), blocks)


def load_partition(path: str | Path, n: int | None = None) -> Partition:
    with open(path, encoding="utf-8") as fh:
        return partition_from_dict(json.load(fh), n=n)


def builtin_game(name: str) -> GameSpec:
    """Load one of the packaged reference games.

    Available: "six_mixed" (six agents, three skill dimensions),
    "trio_specialists" (three complementary specialists),
    "dominated_pair" (two agents on one dimension, no stable partition).
    """
    ref = resources.files("coalitions.data").joinpath(f"{name}.json")
    if not ref.is_file():
        raise ValueError(f"unknown builtin game {name!r}")
    return game_from_dict(json.loads(ref.read_text(encoding="utf-8")))
