"""Improving-dynamics episodes.

One episode runs round-based deviation search: agents are scanned in a fixed
order, each is asked about every deviation target (other coalitions plus
going solo), and the first declared improvement is applied, one deviation
per round.  An episode ends when a full scan finds no willing deviator
(stable) or when the round budget runs out (timeout, counted as unstable).

Every round is logged with the potential before and after, the issued
queries, and whether each answer matched the ground-truth comparison, so a
log can be replayed byte-for-byte from its embedded config and audited for
consistency after the fact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import IO, Sequence

from ._version import ENGINE_VERSION
from .game import (
    Coalition,
    GameSpec,
    Partition,
    TIE_EPS,
    game_from_dict,
    game_to_dict,
    per_capita_table,
    value_gap_delta,
    value_table,
)
from .preferences import (
    OracleKind,
    OracleSpec,
    PreferenceQuery,
    Verdict,
    decide,
    derived_rng,
    majority_verdict,
)
from .stability import is_nash_stable_masks, random_partition, verify_nash


class DeviationRule(Enum):
    FIRST_IMPROVING = "first"
    BEST_IMPROVING = "best"
    RANDOM_IMPROVING = "random"


class EpisodeOutcome(Enum):
    NASH_STABLE = "nash_stable"
    TIMEOUT = "timeout"
    ERROR = "error"


@dataclass(frozen=True)
class InitialPartition:
    """Starting structure: all singletons, a seeded uniform draw, or explicit."""

    kind: str = "singletons"  # singletons | random | explicit
    partition: Partition | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("singletons", "random", "explicit"):
            raise ValueError(f"unknown initial partition kind {self.kind!r}")
        if self.kind == "explicit" and self.partition is None:
            raise ValueError("explicit initial partition requires a partition")

    def realize(self, n: int, seed: int, episode_id: int) -> Partition:
        if self.kind == "singletons":
            return Partition.singletons(n)
        if self.kind == "explicit":
            assert self.partition is not None
            return self.partition
        return random_partition(n, derived_rng("init", seed, episode_id))


@dataclass(frozen=True)
class EpisodeConfig:
    game: GameSpec
    oracles: tuple[OracleSpec, ...]
    initial: InitialPartition = InitialPartition()
    max_rounds: int = 30
    rule: DeviationRule = DeviationRule.FIRST_IMPROVING
    seed: int = 0
    episode_id: int = 0
    record_queries: bool = True

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        oracles = self.oracles
        if isinstance(oracles, OracleSpec):
            oracles = (oracles,)
        if len(oracles) == 1:
            oracles = oracles * self.game.n
        if len(oracles) != self.game.n:
            raise ValueError("need one oracle per agent (or a single shared one)")
        object.__setattr__(self, "oracles", tuple(oracles))


@dataclass(frozen=True)
class QueryRecord:
    agent: int
    target: tuple[int, ...]  # empty tuple = solo move
    delta_v: float
    verdict: Verdict
    critical: bool
    matched: bool | None  # None on exact ties

    def to_list(self) -> list:
        return [
            self.agent,
            list(self.target),
            round(self.delta_v, 12),
            self.verdict.value,
            int(self.critical),
            None if self.matched is None else int(self.matched),
        ]


@dataclass(frozen=True)
class DeviationEvent:
    agent: int
    from_members: tuple[int, ...]
    to_members: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "from": list(self.from_members),
            "to": list(self.to_members),
        }


@dataclass(frozen=True)
class RoundRecord:
    index: int
    partition_before: tuple[tuple[int, ...], ...]
    n_queries: int
    deviation: DeviationEvent | None
    phi_before: float
    phi_after: float
    queries: tuple[QueryRecord, ...] = ()

    def to_dict(self, record_queries: bool) -> dict:
        out = {
            "type": "round",
            "index": self.index,
            "partition": [list(b) for b in self.partition_before],
            "n_queries": self.n_queries,
            "deviation": self.deviation.to_dict() if self.deviation else None,
            "phi_before": round(self.phi_before, 12),
            "phi_after": round(self.phi_after, 12),
        }
        if record_queries:
            out["queries"] = [q.to_list() for q in self.queries]
        return out


@dataclass(frozen=True)
class EpisodeSummary:
    n_queries: int
    critical_queries: int
    critical_matched: int
    easy_queries: int
    easy_matched: int
    consistent: bool
    ground_truth_stable: bool
    phi_initial: float
    phi_terminal: float

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "critical_queries": self.critical_queries,
            "critical_matched": self.critical_matched,
            "easy_queries": self.easy_queries,
            "easy_matched": self.easy_matched,
            "consistent": self.consistent,
            "ground_truth_stable": self.ground_truth_stable,
            "phi_initial": round(self.phi_initial, 12),
            "phi_terminal": round(self.phi_terminal, 12),
        }


@dataclass(frozen=True)
class EpisodeLog:
    config: EpisodeConfig
    rounds: tuple[RoundRecord, ...]
    outcome: EpisodeOutcome
    terminal_partition: Partition
    round_count: int
    deviation_count: int
    summary: EpisodeSummary
    error: str | None = None
    engine: str = ENGINE_VERSION


def run_episode(config: EpisodeConfig, external=None) -> EpisodeLog:
    """Run one seeded episode to stability, timeout, or oracle failure.

    `external` maps ExternalEndpointSpec to live plugin sessions; required
    only when some oracle has kind EXTERNAL.  Identical configs produce
    identical logs.
    """
    game = config.game
    n = game.n
    vals = value_table(game)
    pc = per_capita_table(game)
    oracles = config.oracles
    gaps = [o.gap_threshold for o in oracles]

    partition = config.initial.realize(n, config.seed, config.episode_id)
    blocks = sorted(partition.masks, key=lambda m: m & -m)
    phi = sum(vals[b] for b in blocks)

    rounds: list[RoundRecord] = []
    outcome = EpisodeOutcome.TIMEOUT
    error: str | None = None
    deviations = 0
    n_queries = 0
    crit_total = crit_match = easy_total = easy_match = 0
    consistent = True
    phi_initial = phi

    from .plugin import OracleTransportError  # deferred: only needed on failure paths

    round_index = 0
    try:
        for round_index in range(1, config.max_rounds + 1):
            own_of = {}
            for m in blocks:
                bits = m
                while bits:
                    b = bits & -bits
                    bits &= bits - 1
                    own_of[b.bit_length() - 1] = m
            order = list(range(n))
            if config.rule is DeviationRule.RANDOM_IMPROVING:
                derived_rng("scan", config.seed, config.episode_id, round_index).shuffle(order)

            partition_before = tuple(tuple(Coalition(m).members) for m in blocks)
            queries: list[QueryRecord] = []
            ordinal = 0
            chosen: tuple[int, int, int] | None = None  # agent, own, target
            best_delta = -math.inf

            for agent in order:
                own = own_of[agent]
                bit = 1 << agent
                for target in [m for m in blocks if m != own] + [0]:
                    ordinal += 1
                    n_queries += 1
                    joined = target | bit
                    if joined == own:
                        # going solo while already alone: structural tie
                        if config.record_queries:
                            queries.append(
                                QueryRecord(agent, (), 0.0, Verdict.INDIFFERENT, False, None)
                            )
                        continue
                    delta = pc[joined] - pc[own]
                    oracle = oracles[agent]
                    ctx = (config.episode_id, round_index, ordinal)
                    if oracle.kind is OracleKind.EXTERNAL:
                        verdict = _external_majority(
                            oracle, game, agent, own, target, ctx, external
                        )
                    elif oracle.majority_k == 1:
                        verdict = decide(oracle, delta, ctx)
                    else:
                        verdict = majority_verdict(
                            decide(oracle, delta, ctx, rep)
                            for rep in range(oracle.majority_k)
                        )
                    if delta > TIE_EPS:
                        reference = Verdict.PREFER_CANDIDATE
                    elif delta < -TIE_EPS:
                        reference = Verdict.PREFER_CURRENT
                    else:
                        reference = Verdict.INDIFFERENT
                    critical = abs(delta) < gaps[agent]
                    matched: bool | None = None
                    if reference is not Verdict.INDIFFERENT:
                        matched = verdict is reference
                        if critical:
                            crit_total += 1
                            crit_match += matched
                        else:
                            easy_total += 1
                            easy_match += matched
                        if not matched:
                            consistent = False
                    if config.record_queries:
                        queries.append(
                            QueryRecord(
                                agent,
                                Coalition(target).members,
                                delta,
                                verdict,
                                critical,
                                matched,
                            )
                        )
                    if verdict is Verdict.PREFER_CANDIDATE:
                        if config.rule is DeviationRule.BEST_IMPROVING:
                            if delta > best_delta:
                                best_delta = delta
                                chosen = (agent, own, target)
                        else:
                            chosen = (agent, own, target)
                            break
                if chosen is not None and config.rule is not DeviationRule.BEST_IMPROVING:
                    break

            if chosen is None:
                rounds.append(
                    RoundRecord(
                        index=round_index,
                        partition_before=partition_before,
                        n_queries=ordinal,
                        deviation=None,
                        phi_before=phi,
                        phi_after=phi,
                        queries=tuple(queries),
                    )
                )
                outcome = EpisodeOutcome.NASH_STABLE
                break

            agent, own, target = chosen
            bit = 1 << agent
            rest = own & ~bit
            joined = target | bit
            phi_after = phi - vals[own] + (vals[rest] if rest else 0.0) + vals[joined]
            if target:
                phi_after -= vals[target]
            new_blocks = [m for m in blocks if m not in (own, target)]
            if rest:
                new_blocks.append(rest)
            new_blocks.append(joined)
            blocks = sorted(new_blocks, key=lambda m: m & -m)
            deviations += 1
            rounds.append(
                RoundRecord(
                    index=round_index,
                    partition_before=partition_before,
                    n_queries=ordinal,
                    deviation=DeviationEvent(
                        agent=agent,
                        from_members=Coalition(own).members,
                        to_members=Coalition(joined).members,
                    ),
                    phi_before=phi,
                    phi_after=phi_after,
                    queries=tuple(queries),
                )
            )
            phi = phi_after
    except OracleTransportError as exc:
        outcome = EpisodeOutcome.ERROR
        error = f"{type(exc).__name__}: {exc}"

    terminal = Partition.from_masks(n, blocks)
    summary = EpisodeSummary(
        n_queries=n_queries,
        critical_queries=crit_total,
        critical_matched=crit_match,
        easy_queries=easy_total,
        easy_matched=easy_match,
        consistent=consistent,
        ground_truth_stable=is_nash_stable_masks(game, blocks),
        phi_initial=phi_initial,
        phi_terminal=phi,
    )
    return EpisodeLog(
        config=config,
        rounds=tuple(rounds),
        outcome=outcome,
        terminal_partition=terminal,
        round_count=len(rounds),
        deviation_count=deviations,
        summary=summary,
        error=error,
    )


def _external_majority(
    oracle: OracleSpec,
    game: GameSpec,
    agent: int,
    own: int,
    target: int,
    ctx: Sequence[int],
    external,
) -> Verdict:
    from .preferences import answer_majority

    if external is None or oracle.external not in external:
        raise RuntimeError("external oracle requires an open plugin session")
    q = PreferenceQuery(agent=agent, current=Coalition(own), candidate=Coalition(target))
    return answer_majority(
        oracle, game, q, ctx=ctx, external=external[oracle.external]
    ).verdict


@dataclass(frozen=True)
class ConvergenceBound:
    max_deviations: float
    max_rounds: float
    delta: float
    value_range: float


def convergence_bound(game: GameSpec) -> ConvergenceBound:
    """Worst-case deviation and round counts for improving dynamics.

    The potential lies between n * min(min v, 0) and n * max(max v, 0), so
    the value range here extends the coalition value spread to the zero
    baseline; a range that ignored the baseline would undercount whenever
    every coalition value is positive.  Deviations are bounded by
    n * range / gap and rounds by n times that, with the gap taken over all
    coalition sizes.  An infinite gap means no agent ever sees two distinct
    values, so no strict improvement is possible and the bounds are zero.
    """
    delta = value_gap_delta(game, max_size=game.n)
    if delta <= 0:
        raise ValueError("no value gap: cannot bound convergence")
    lo, hi = math.inf, -math.inf
    vals = value_table(game)
    for mask in range(1, 1 << game.n):
        lo, hi = min(lo, vals[mask]), max(hi, vals[mask])
    spread = max(hi, 0.0) - min(lo, 0.0)
    if math.isinf(delta):
        return ConvergenceBound(0.0, 0.0, delta, spread)
    max_dev = game.n * spread / delta
    return ConvergenceBound(max_dev, game.n * max_dev, delta, spread)


# ---------------------------------------------------------------------------
# JSONL serialization and replay

def _canonical(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _initial_to_dict(initial: InitialPartition) -> dict:
    return {
        "kind": initial.kind,
        "partition": initial.partition.blocks() if initial.partition else None,
    }


def _initial_from_dict(data: dict, n: int) -> InitialPartition:
    part = data.get("partition")
    return InitialPartition(
        kind=data["kind"],
        partition=Partition.from_blocks(n, part) if part else None,
    )


def oracle_to_dict(oracle: OracleSpec) -> dict:
    out = {
        "kind": oracle.kind.value,
        "epsilon": oracle.epsilon,
        "p_critical": oracle.p_critical,
        "p_easy": oracle.p_easy,
        "critical_gap": oracle.critical_gap,
        "seed": oracle.seed,
        "majority_k": oracle.majority_k,
    }
    if oracle.external is not None:
        out["external"] = {
            "command": list(oracle.external.command) if oracle.external.command else None,
            "url": oracle.external.url,
            "timeout_s": oracle.external.timeout_s,
            "protocol": oracle.external.protocol,
        }
    return out


def oracle_from_dict(data: dict) -> OracleSpec:
    from .preferences import ExternalEndpointSpec

    external = None
    if data.get("external"):
        e = data["external"]
        external = ExternalEndpointSpec(
            command=tuple(e["command"]) if e.get("command") else None,
            url=e.get("url"),
            timeout_s=float(e.get("timeout_s", 10.0)),
            protocol=e.get("protocol", "staged"),
        )
    return OracleSpec(
        kind=OracleKind(data["kind"]),
        epsilon=float(data.get("epsilon", 0.15)),
        p_critical=float(data.get("p_critical", 0.86)),
        p_easy=float(data.get("p_easy", 0.98)),
        critical_gap=data.get("critical_gap"),
        seed=int(data.get("seed", 0)),
        majority_k=int(data.get("majority_k", 1)),
        external=external,
    )


def config_to_dict(config: EpisodeConfig) -> dict:
    return {
        "game": game_to_dict(config.game),
        "oracles": [oracle_to_dict(o) for o in config.oracles],
        "initial": _initial_to_dict(config.initial),
        "max_rounds": config.max_rounds,
        "rule": config.rule.value,
        "seed": config.seed,
        "episode_id": config.episode_id,
        "record_queries": config.record_queries,
    }


def config_from_dict(data: dict) -> EpisodeConfig:
    game = game_from_dict(data["game"])
    return EpisodeConfig(
        game=game,
        oracles=tuple(oracle_from_dict(o) for o in data["oracles"]),
        initial=_initial_from_dict(data["initial"], game.n),
        max_rounds=int(data["max_rounds"]),
        rule=DeviationRule(data["rule"]),
        seed=int(data["seed"]),
        episode_id=int(data["episode_id"]),
        record_queries=bool(data["record_queries"]),
    )


def episode_log_lines(log: EpisodeLog) -> list[str]:
    """Serialize a log as JSONL: header, one line per round, terminal line.

    The terminal line embeds an exhaustive ground-truth verification of the
    final partition so a log is auditable without re-running anything.
    """
    lines = [
        _canonical(
            {"type": "header", "engine": log.engine, "config": config_to_dict(log.config)}
        )
    ]
    for r in log.rounds:
        lines.append(_canonical(r.to_dict(log.config.record_queries)))
    verification = verify_nash(log.config.game, log.terminal_partition).to_dict()
    lines.append(
        _canonical(
            {
                "type": "terminal",
                "outcome": log.outcome.value,
                "partition": log.terminal_partition.blocks(),
                "rounds": log.round_count,
                "deviations": log.deviation_count,
                "summary": log.summary.to_dict(),
                "verification": verification,
                "error": log.error,
            }
        )
    )
    return lines


def write_episode_log(log: EpisodeLog, target: str | Path | IO[str]) -> None:
    text = "\n".join(episode_log_lines(log)) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        Path(target).write_text(text, encoding="utf-8")


@dataclass(frozen=True)
class ReplayReport:
    identical: bool
    lines_checked: int
    first_divergence: int | None = None
    recorded_line: str | None = None
    replayed_line: str | None = None
    version_warning: str | None = None


def replay_lines(recorded: Sequence[str]) -> ReplayReport:
    """Re-run the episode embedded in a recorded log and diff every line."""
    recorded = [ln.strip() for ln in recorded if ln.strip()]
    if not recorded:
        raise ValueError("empty episode log")
    header = json.loads(recorded[0])
    if header.get("type") != "header":
        raise ValueError("episode log must start with a header record")
    warning = None
    if header.get("engine") != ENGINE_VERSION:
        warning = (
            f"log written by engine {header.get('engine')!r}, "
            f"replaying with {ENGINE_VERSION!r}"
        )
    config = config_from_dict(header["config"])
    fresh = episode_log_lines(run_episode(config))
    # compare content below the header so a version bump alone is a warning,
    # not a divergence
    for i in range(1, max(len(recorded), len(fresh))):
        rec = recorded[i] if i < len(recorded) else None
        new = fresh[i] if i < len(fresh) else None
        if rec != new:
            return ReplayReport(
                identical=False,
                lines_checked=i + 1,
                first_divergence=i,
                recorded_line=rec,
                replayed_line=new,
                version_warning=warning,
            )
    return ReplayReport(
        identical=True, lines_checked=len(recorded), version_warning=warning
    )


def replay_file(path: str | Path) -> ReplayReport:
    """Replay a log file; condition files with several episodes are split
    at header records and each episode is replayed in turn."""
    lines = [
        ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()
    ]
    if not lines:
        raise ValueError("empty episode log")
    starts = [
        i for i, ln in enumerate(lines) if json.loads(ln).get("type") == "header"
    ]
    if not starts:
        raise ValueError("episode log contains no header record")
    if starts[0] != 0:
        raise ValueError("episode log must start with a header record")
    starts.append(len(lines))
    checked = 0
    warning = None
    for a, b in zip(starts, starts[1:]):
        report = replay_lines(lines[a:b])
        warning = warning or report.version_warning
        if not report.identical:
            return ReplayReport(
                identical=False,
                lines_checked=checked + report.lines_checked,
                first_divergence=a + (report.first_divergence or 0),
                recorded_line=report.recorded_line,
                replayed_line=report.replayed_line,
                version_warning=warning,
            )
        checked += report.lines_checked
    return ReplayReport(identical=True, lines_checked=checked, version_warning=warning)
