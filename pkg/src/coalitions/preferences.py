"""Preference oracles over coalition comparisons.

An oracle answers "stay in the current coalition or join the candidate?"
under one of four decision models: perfect value comparison, logit choice
with precision 1/epsilon, a two-point flip model that returns the correct
verdict with a consistency probability (lower on close calls than on clear
ones), or an external plugin process.

All randomness is counter-based: each draw hashes (oracle seed, stream
coordinates, repeat index), so answers are replay-deterministic and
independent episodes can run in parallel without perturbing each other.
"""

from __future__ import annotations

import csv
import hashlib
import math
import random
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .game import Coalition, GameSpec, TIE_EPS, per_capita_table


class Verdict(Enum):
    PREFER_CURRENT = "current"
    PREFER_CANDIDATE = "candidate"
    INDIFFERENT = "indifferent"


class Confidence(Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class OracleKind(Enum):
    PERFECT = "perfect"
    LOGIT = "logit"
    CONSISTENCY_NOISE = "consistency_noise"
    EXTERNAL = "external"


class OracleParseFailure(RuntimeError):
    """An external answer carried no parseable preference declaration."""


class InsufficientDataError(ValueError):
    """A choice log is too thin to bin reliably."""


@dataclass(frozen=True)
class ExternalEndpointSpec:
    """Where an external preference plugin lives and how to prompt it."""

    command: tuple[str, ...] | None = None
    url: str | None = None
    timeout_s: float = 10.0
    protocol: str = "staged"

    def __post_init__(self) -> None:
        if (self.command is None) == (self.url is None):
            raise ValueError("exactly one of command or url must be set")


@dataclass(frozen=True)
class OracleSpec:
    """Parameterized decision model; immutable and safe to share."""

    kind: OracleKind
    epsilon: float = 0.15
    p_critical: float = 0.86
    p_easy: float = 0.98
    critical_gap: float | None = None  # defaults to 2 * epsilon
    seed: int = 0
    majority_k: int = 1
    external: ExternalEndpointSpec | None = None

    def __post_init__(self) -> None:
        if self.kind is OracleKind.LOGIT and not self.epsilon > 0:
            raise ValueError("logit oracles require epsilon > 0")
        if self.kind is OracleKind.CONSISTENCY_NOISE:
            if not 0 < self.p_critical <= 1 or not 0 < self.p_easy <= 1:
                raise ValueError("consistency probabilities must lie in (0, 1]")
            if self.p_critical > self.p_easy:
                raise ValueError("p_critical must not exceed p_easy")
        if self.majority_k < 1 or self.majority_k % 2 == 0:
            raise ValueError("majority_k must be an odd integer >= 1")
        if self.kind is OracleKind.EXTERNAL and self.external is None:
            raise ValueError("external oracles need an endpoint spec")

    @property
    def gap_threshold(self) -> float:
        """Value gap below which a decision counts as critical."""
        return 2.0 * self.epsilon if self.critical_gap is None else self.critical_gap


@dataclass(frozen=True)
class PreferenceQuery:
    """One comparison: stay in `current` or join `candidate`.

    `candidate` excludes the agent; the empty coalition means "go solo".
    """

    agent: int
    current: Coalition
    candidate: Coalition

    def __post_init__(self) -> None:
        if self.agent not in self.current:
            raise ValueError("agent must belong to the current coalition")
        if self.agent in self.candidate:
            raise ValueError("candidate coalition must not contain the agent")


@dataclass(frozen=True)
class PreferenceAnswer:
    verdict: Verdict
    confidence: Confidence | None = None


# ---------------------------------------------------------------------------
# counter-based randomness

def _key_bytes(parts: Sequence[int | str]) -> bytes:
    buf = bytearray()
    for p in parts:
        if isinstance(p, str):
            raw = p.encode("utf-8")
            buf += b"s" + len(raw).to_bytes(2, "big") + raw
        else:
            buf += b"i" + struct.pack(">q", p)
    return bytes(buf)


def unit_uniform(*parts: int | str) -> float:
    """Deterministic uniform draw in [0, 1) keyed by the given coordinates."""
    digest = hashlib.blake2b(_key_bytes(parts), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def derived_rng(*parts: int | str) -> random.Random:
    """A fresh random.Random seeded from the given coordinates."""
    digest = hashlib.blake2b(_key_bytes(parts), digest_size=16).digest()
    return random.Random(int.from_bytes(digest, "big"))


# ---------------------------------------------------------------------------
# decision models

def query_delta(game: GameSpec, q: PreferenceQuery) -> float:
    """Per-capita gain of taking the candidate move (join target or go solo)."""
    pc = per_capita_table(game)
    joined = q.candidate.mask | 1 << q.agent
    return pc[joined] - pc[q.current.mask]


def logit_accept_probability(delta: float, epsilon: float) -> float:
    """Probability a logit chooser with precision 1/epsilon takes the move."""
    x = delta / epsilon
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-min(x, 700.0)))
    return math.exp(max(x, -700.0)) / (1.0 + math.exp(max(x, -700.0)))


def _flip(verdict: Verdict) -> Verdict:
    if verdict is Verdict.PREFER_CURRENT:
        return Verdict.PREFER_CANDIDATE
    if verdict is Verdict.PREFER_CANDIDATE:
        return Verdict.PREFER_CURRENT
    return Verdict.INDIFFERENT


def decide(
    oracle: OracleSpec,
    delta: float,
    ctx: Sequence[int | str],
    rep: int = 0,
) -> Verdict:
    """Apply the oracle's decision model to a raw per-capita gap.

    This is the hot path shared by `answer` and the episode runner.  Exact
    ties (|delta| below the tie tolerance) are answered Indifferent by every
    internal model, so structural self-comparisons never inject noise.
    """
    if oracle.kind is OracleKind.PERFECT:
        if delta > TIE_EPS:
            return Verdict.PREFER_CANDIDATE
        if delta < -TIE_EPS:
            return Verdict.PREFER_CURRENT
        return Verdict.INDIFFERENT
    if oracle.kind is OracleKind.LOGIT:
        p = logit_accept_probability(delta, oracle.epsilon)
        u = unit_uniform("pref", oracle.seed, *ctx, rep)
        return Verdict.PREFER_CANDIDATE if u < p else Verdict.PREFER_CURRENT
    if oracle.kind is OracleKind.CONSISTENCY_NOISE:
        if abs(delta) <= TIE_EPS:
            return Verdict.INDIFFERENT
        truth = Verdict.PREFER_CANDIDATE if delta > 0 else Verdict.PREFER_CURRENT
        keep = oracle.p_critical if abs(delta) < oracle.gap_threshold else oracle.p_easy
        u = unit_uniform("pref", oracle.seed, *ctx, rep)
        return truth if u < keep else _flip(truth)
    raise ValueError(f"decide() does not handle oracle kind {oracle.kind}")


def answer(
    oracle: OracleSpec,
    game: GameSpec,
    q: PreferenceQuery,
    ctx: Sequence[int | str] = (),
    rep: int = 0,
    external=None,
) -> PreferenceAnswer:
    """Answer one preference query.

    `ctx` are the stream coordinates (for episodes: id, round, ordinal) that
    key this call's randomness.  External oracles are routed through the
    plugin session passed as `external`; transport failures propagate so the
    caller can abort, while unparseable answers raise OracleParseFailure.
    """
    if oracle.kind is OracleKind.EXTERNAL:
        if external is None:
            raise RuntimeError(
                "external oracle requires an active plugin session; "
                "none was provided"
            )
        return external.ask(game, q, ctx=ctx, rep=rep)
    return PreferenceAnswer(decide(oracle, query_delta(game, q), ctx, rep))


def majority_verdict(verdicts: Iterable[Verdict]) -> Verdict:
    """Modal verdict; any tie in counts resolves to PreferCurrent."""
    counts: dict[Verdict, int] = {}
    for v in verdicts:
        counts[v] = counts.get(v, 0) + 1
    if not counts:
        return Verdict.PREFER_CURRENT
    top = max(counts.values())
    winners = [v for v, c in counts.items() if c == top]
    return winners[0] if len(winners) == 1 else Verdict.PREFER_CURRENT


def answer_majority(
    oracle: OracleSpec,
    game: GameSpec,
    q: PreferenceQuery,
    ctx: Sequence[int | str] = (),
    external=None,
) -> PreferenceAnswer:
    """Repeat the query majority_k times and return the modal verdict.

    Repeats draw from independent sub-streams.  Parse failures from external
    plugins consume their attempt; if every attempt fails the verdict
    defaults to PreferCurrent, which never destabilizes a partition.
    """
    verdicts = []
    for rep in range(oracle.majority_k):
        try:
            verdicts.append(answer(oracle, game, q, ctx=ctx, rep=rep, external=external).verdict)
        except OracleParseFailure:
            continue
    return PreferenceAnswer(majority_verdict(verdicts))


# ---------------------------------------------------------------------------
# consistency measurement

@dataclass(frozen=True)
class QueryConsistency:
    query_index: int
    agreement: float       # probability two independent answers coincide
    modal_rate: float      # share of answers equal to the modal answer
    modal_verdict: Verdict


@dataclass(frozen=True)
class ConsistencyReport:
    per_query: tuple[QueryConsistency, ...]
    agreement: float
    modal_rate: float
    repeats: int


def measure_consistency(
    oracle: OracleSpec,
    game: GameSpec,
    queries: Sequence[PreferenceQuery],
    repeats: int = 10,
    *,
    stream: int = 0,
    external=None,
) -> ConsistencyReport:
    """Estimate self-agreement by re-asking each query `repeats` times.

    The headline number is the pairwise agreement rate, the probability that
    two independent answers to the same query coincide, estimated without
    bias from all answer pairs.  The modal rate (share of answers matching
    the most common one) is reported alongside.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    rows = []
    for qi, q in enumerate(queries):
        counts: dict[Verdict, int] = {}
        for rep in range(repeats):
            v = answer(
                oracle, game, q, ctx=("consistency", stream, qi, rep), external=external
            ).verdict
            counts[v] = counts.get(v, 0) + 1
        pairs = sum(c * (c - 1) for c in counts.values()) / (repeats * (repeats - 1))
        modal = max(counts, key=lambda v: counts[v])
        rows.append(
            QueryConsistency(
                query_index=qi,
                agreement=pairs,
                modal_rate=counts[modal] / repeats,
                modal_verdict=modal,
            )
        )
    return ConsistencyReport(
        per_query=tuple(rows),
        agreement=sum(r.agreement for r in rows) / len(rows),
        modal_rate=sum(r.modal_rate for r in rows) / len(rows),
        repeats=repeats,
    )


# ---------------------------------------------------------------------------
# epsilon estimation from choice logs

#: Irrational-choice rate of a logit chooser at a gap exactly equal to its
#: rationality bound; the threshold the gap estimator inverts.
CRITICAL_IRRATIONAL_RATE = 1.0 / (1.0 + math.e)


@dataclass(frozen=True)
class ChoiceRecord:
    delta_v: float
    verdict: Verdict
    agent: int = 0
    round_index: int = 0
    episode: int = 0


@dataclass(frozen=True)
class EpsilonEstimate:
    estimate: float | None
    ci_low: float | None
    ci_high: float | None
    found: bool
    bin_centers: tuple[float, ...]
    bin_rates: tuple[float, ...]
    threshold: float = CRITICAL_IRRATIONAL_RATE


def _is_irrational(delta: float, verdict: Verdict) -> bool:
    if delta > 0:
        return verdict is Verdict.PREFER_CURRENT
    if delta < 0:
        return verdict is Verdict.PREFER_CANDIDATE
    return False


def _crossing(centers: Sequence[float], rates: Sequence[float], threshold: float) -> float | None:
    for idx, rate in enumerate(rates):
        if rate < threshold:
            if idx == 0:
                return 0.0
            r0, r1 = rates[idx - 1], rate
            c0, c1 = centers[idx - 1], centers[idx]
            if r0 == r1:
                return c1
            return c0 + (r0 - threshold) / (r0 - r1) * (c1 - c0)
    return None


def estimate_epsilon(
    choice_log: Sequence[ChoiceRecord | tuple],
    bins: int = 10,
    min_per_bin: int = 30,
    bootstrap_iterations: int = 500,
    seed: int = 0,
    level: float = 0.95,
) -> EpsilonEstimate:
    """Estimate the rationality bound from logged (gap, verdict) choices.

    Bins choices by absolute gap, computes the irrational-choice rate per
    bin (the verdict contradicting the sign of the gap), and reads off the
    gap at which that rate falls through 1/(1+e), the rate a logit chooser
    shows when the gap equals its bound.  The crossing is interpolated
    between bin centers; a percentile bootstrap over log rows gives the CI.
    Returns found=False when the rate never drops below the threshold, as
    with uniformly random verdicts.
    """
    records = [
        r if isinstance(r, ChoiceRecord) else ChoiceRecord(float(r[0]), Verdict(r[1]))
        for r in choice_log
    ]
    records = [r for r in records if abs(r.delta_v) > TIE_EPS]
    if not any(r.delta_v > 0 for r in records) or not any(r.delta_v < 0 for r in records):
        raise ValueError("choice log must contain gaps of both signs")
    gaps = [abs(r.delta_v) for r in records]
    width = max(gaps) / bins
    if width <= 0:
        raise InsufficientDataError("all gaps are zero")

    def bin_of(gap: float) -> int:
        return min(int(gap / width), bins - 1)

    def rates_of(rows: Sequence[ChoiceRecord]) -> tuple[list[int], list[float]]:
        totals = [0] * bins
        bad = [0] * bins
        for r in rows:
            b = bin_of(abs(r.delta_v))
            totals[b] += 1
            if _is_irrational(r.delta_v, r.verdict):
                bad[b] += 1
        return totals, [bad[b] / totals[b] if totals[b] else math.nan for b in range(bins)]

    totals, rates = rates_of(records)
    thin = min(totals)
    if thin < min_per_bin:
        raise InsufficientDataError(
            f"thinnest gap bin holds {thin} choices; need at least {min_per_bin}"
        )
    centers = tuple((b + 0.5) * width for b in range(bins))
    estimate = _crossing(centers, rates, CRITICAL_IRRATIONAL_RATE)
    if estimate is None:
        return EpsilonEstimate(
            estimate=None,
            ci_low=None,
            ci_high=None,
            found=False,
            bin_centers=centers,
            bin_rates=tuple(rates),
        )

    rng = derived_rng("epsilon-bootstrap", seed)
    resampled = []
    m = len(records)
    for _ in range(bootstrap_iterations):
        sample = [records[rng.randrange(m)] for _ in range(m)]
        _, rs = rates_of(sample)
        est = _crossing(centers, rs, CRITICAL_IRRATIONAL_RATE)
        if est is not None:
            resampled.append(est)
    ci_low = ci_high = None
    if len(resampled) >= max(20, bootstrap_iterations // 2):
        resampled.sort()
        lo_idx = int((1 - level) / 2 * len(resampled))
        hi_idx = min(len(resampled) - 1, int((1 + level) / 2 * len(resampled)))
        ci_low, ci_high = resampled[lo_idx], resampled[hi_idx]
    return EpsilonEstimate(
        estimate=estimate,
        ci_low=ci_low,
        ci_high=ci_high,
        found=True,
        bin_centers=centers,
        bin_rates=tuple(rates),
    )


# ---------------------------------------------------------------------------
# choice log serialization

CHOICE_LOG_FIELDS = ("delta_v", "verdict", "agent", "round", "episode")


def write_choice_log(records: Iterable[ChoiceRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHOICE_LOG_FIELDS)
        for r in records:
            writer.writerow([r.delta_v, r.verdict.value, r.agent, r.round_index, r.episode])


def read_choice_log(path: str | Path) -> list[ChoiceRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                ChoiceRecord(
                    delta_v=float(row["delta_v"]),
                    verdict=Verdict(row["verdict"]),
                    agent=int(row.get("agent") or 0),
                    round_index=int(row.get("round") or 0),
                    episode=int(row.get("episode") or 0),
                )
            )
    return out
