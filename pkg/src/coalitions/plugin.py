"""External preference-oracle plugin boundary.

Renders prompt templates for a deviation query, speaks a line-delimited JSON
protocol to a child process (or POSTs to an HTTP endpoint), and parses the
final preference declaration out of free-form completions.  The engine never
knows what is on the other side; anything that answers the wire format can
act as an oracle.

Wire format, one JSON object per line, UTF-8:

    query:  {"v": 1, "query_id": str, "prompt": str, "agent": int,
             "current": [ids], "candidate": [ids]}
    answer: {"query_id": str, "verdict": "CURRENT"|"CANDIDATE"|"INDIFFERENT",
             "confidence": "low"|"medium"|"high", "raw": str}

`verdict` may be omitted if `raw` carries a parseable declaration.
"""

from __future__ import annotations

import json
import queue
import re
import subprocess
import threading
import urllib.error
import urllib.request
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Sequence

from .game import GameSpec
from .preferences import (
    Confidence,
    ExternalEndpointSpec,
    OracleParseFailure,
    OracleSpec,
    PreferenceAnswer,
    PreferenceQuery,
    Verdict,
)

WIRE_VERSION = 1

PROTOCOLS = ("standard", "cot", "staged")

STAGED_HEADERS = (
    "## Step 1: Capability Analysis",
    "## Step 2: Complementarity Assessment",
    "## Step 3: Value Estimation",
    "## Step 4: Coordination Cost Analysis",
    "## Step 5: Final Preference",
)

DECLARATION_MENU = "I prefer: [CURRENT / CANDIDATE / INDIFFERENT]"
CONFIDENCE_MENU = "Confidence: [low/medium/high]"


class OracleTransportError(RuntimeError):
    """Base for failures talking to an external oracle."""


class OracleTimeoutError(OracleTransportError):
    pass


class OracleWireError(OracleTransportError):
    """Malformed traffic or a dead endpoint."""


class OracleIdMismatchError(OracleTransportError):
    """The answer does not echo the query id."""


# ---------------------------------------------------------------------------
# prompt rendering

def dimension_names(d: int) -> tuple[str, ...]:
    if d == 3:
        return ("math", "facts", "logic")
    return tuple(f"skill_{i + 1}" for i in range(d))

_DIM_TITLES = {"math": "Mathematical reasoning", "facts": "Factual knowledge",
               "logic": "Logical analysis"}


def _title(name: str) -> str:
    return _DIM_TITLES.get(name, name.replace("_", " ").capitalize())


def _short(name: str) -> str:
    return name.capitalize()


def _maxima(game: GameSpec, members: Sequence[int]) -> list[float]:
    return [
        max(game.profile(i)[j] for i in members) for j in range(game.d)
    ]


def _member_list(members: Sequence[int]) -> str:
    return ", ".join(f"agent {i}" for i in members) if members else "(empty)"


def _score_row(names: Sequence[str], scores: Sequence[float], decimals: int) -> str:
    return ", ".join(
        f"{_short(n)}: {s:.{decimals}f}" for n, s in zip(names, scores)
    )


def render_prompt(
    protocol: str,
    game: GameSpec,
    query: PreferenceQuery,
    task_dims: Sequence[str] | None = None,
    decimals: int = 2,
) -> str:
    """Deterministic prompt text for one deviation query.

    The candidate block shows the coalition as it would look after the agent
    joins; a solo move renders the agent alone.  Scores print with two
    decimals unless overridden.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown prompt protocol {protocol!r}")
    if query.agent >= game.n:
        raise ValueError("query agent is not part of the game")
    names = dimension_names(game.d)
    dims = list(task_dims) if task_dims is not None else list(names)
    agent = query.agent
    profile = game.profile(agent)
    current = list(query.current.members)
    candidate = sorted(query.candidate.members + (agent,))

    lines = [f"You are agent {agent} with capabilities:"]
    for name, score in zip(names, profile):
        lines.append(f"- {_title(name)}: {score:.{decimals}f}")
    lines.append("")
    lines.append("Evaluate whether to stay in your current coalition")
    lines.append("or switch to a different one.")
    lines.append("")
    lines.append(f"CURRENT COALITION: {_member_list(current)}")
    lines.append("Capabilities (max per dim):")
    lines.append("  " + _score_row(names, _maxima(game, current), decimals))
    lines.append("")
    lines.append(f"CANDIDATE COALITION (if you join): {_member_list(candidate)}")
    lines.append("Capabilities (max per dim):")
    lines.append("  " + _score_row(names, _maxima(game, candidate), decimals))
    lines.append("")
    lines.append(f"TASK: Answer questions requiring [{', '.join(dims)}]")
    lines.append("")

    if protocol == "staged":
        lines += [
            STAGED_HEADERS[0],
            "List what each member contributes.",
            "",
            STAGED_HEADERS[1],
            "Identify strengths (>0.8) and gaps (<0.7).",
            "",
            STAGED_HEADERS[2],
            "Estimate task performance (0-1) for each coalition.",
            "",
            STAGED_HEADERS[3],
            "Assess communication overhead per coalition size.",
            "",
            STAGED_HEADERS[4],
        ]
    elif protocol == "cot":
        lines += [
            "Think step by step about capability coverage and coordination",
            "costs before declaring your preference.",
            "",
        ]
    else:
        lines.append("State your preference directly.")
        lines.append("")
    lines.append(DECLARATION_MENU)
    lines.append(CONFIDENCE_MENU)
    lines.append("Reason: [one sentence]")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# declaration parsing

_DECL_RE = re.compile(
    r"i\s*prefer\s*:?\s*\[?\s*(current|candidate|indifferent)\b", re.IGNORECASE
)
_CONF_RE = re.compile(r"confidence\s*:?\s*\[?\s*(low|medium|high)\b", re.IGNORECASE)

_VERDICTS = {
    "current": Verdict.PREFER_CURRENT,
    "candidate": Verdict.PREFER_CANDIDATE,
    "indifferent": Verdict.INDIFFERENT,
}


def parse_declaration(raw: str) -> PreferenceAnswer:
    """Extract the final preference declaration from a completion.

    Scans for the last "I prefer: X" occurrence, skipping the literal option
    menu (where the captured word is followed by a slash), and reads an
    optional confidence declared after it.  Raises OracleParseFailure when
    no declaration is found.
    """
    last = None
    for m in _DECL_RE.finditer(raw):
        tail = raw[m.end() : m.end() + 8].lstrip()
        if tail.startswith("/"):
            continue  # the instruction menu, not an answer
        last = m
    if last is None:
        raise OracleParseFailure("no preference declaration found")
    verdict = _VERDICTS[last.group(1).lower()]
    confidence = None
    conf = None
    for cm in _CONF_RE.finditer(raw, last.end()):
        tail = raw[cm.end() : cm.end() + 8].lstrip()
        if tail.startswith("/"):
            continue
        conf = cm
        break
    if conf is not None:
        confidence = Confidence(conf.group(1).lower())
    return PreferenceAnswer(verdict=verdict, confidence=confidence)


# ---------------------------------------------------------------------------
# wire types

@dataclass(frozen=True)
class OracleWireQuery:
    query_id: str
    prompt: str
    agent: int
    current: tuple[int, ...]
    candidate: tuple[int, ...]
    v: int = WIRE_VERSION

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "v": self.v,
                "query_id": self.query_id,
                "prompt": self.prompt,
                "agent": self.agent,
                "current": list(self.current),
                "candidate": list(self.candidate),
            },
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class OracleWireAnswer:
    query_id: str
    verdict: str | None
    confidence: str | None
    raw: str

    @classmethod
    def from_json(cls, text: str) -> "OracleWireAnswer":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise OracleWireError(f"malformed answer line: {exc}") from exc
        if not isinstance(data, dict) or "query_id" not in data:
            raise OracleWireError("answer must be an object with a query_id")
        return cls(
            query_id=str(data["query_id"]),
            verdict=data.get("verdict"),
            confidence=data.get("confidence"),
            raw=str(data.get("raw", "")),
        )


# ---------------------------------------------------------------------------
# transports

class StdioEndpoint:
    """One child process speaking the line protocol, one query in flight."""

    def __init__(self, command: Sequence[str]):
        try:
            self._proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise OracleWireError(f"cannot start plugin {command!r}: {exc}") from exc
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def exchange(self, query: OracleWireQuery, timeout_s: float) -> OracleWireAnswer:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(query.to_json_line() + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError, OSError) as exc:
            raise OracleWireError(f"plugin pipe closed: {exc}") from exc
        try:
            line = self._lines.get(timeout=timeout_s)
        except queue.Empty:
            raise OracleTimeoutError(
                f"no answer within {timeout_s:.3f}s for query {query.query_id}"
            ) from None
        if line is None:
            raise OracleWireError("plugin closed its output stream")
        answer = OracleWireAnswer.from_json(line)
        if answer.query_id != query.query_id:
            raise OracleIdMismatchError(
                f"expected answer to {query.query_id}, got {answer.query_id}"
            )
        return answer

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait(timeout=2)


class HttpEndpoint:
    """POSTs each query as JSON and reads a JSON answer body."""

    def __init__(self, url: str):
        self.url = url

    def exchange(self, query: OracleWireQuery, timeout_s: float) -> OracleWireAnswer:
        req = urllib.request.Request(
            self.url,
            data=query.to_json_line().encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout_s) as resp:
                body = resp.read().decode("utf-8")
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, TimeoutError):
                raise OracleTimeoutError(str(exc)) from exc
            raise OracleWireError(f"HTTP exchange failed: {exc}") from exc
        except TimeoutError as exc:
            raise OracleTimeoutError(str(exc)) from exc
        answer = OracleWireAnswer.from_json(body)
        if answer.query_id != query.query_id:
            raise OracleIdMismatchError(
                f"expected answer to {query.query_id}, got {answer.query_id}"
            )
        return answer

    def close(self) -> None:
        pass


class ExternalSession:
    """A live connection to one plugin endpoint, usable as an oracle backend."""

    def __init__(self, endpoint: ExternalEndpointSpec):
        self.spec = endpoint
        if endpoint.command is not None:
            self._endpoint = StdioEndpoint(endpoint.command)
        else:
            assert endpoint.url is not None
            self._endpoint = HttpEndpoint(endpoint.url)
        self.queries_sent = 0

    def ask(
        self,
        game: GameSpec,
        q: PreferenceQuery,
        ctx: Sequence[int | str] = (),
        rep: int = 0,
    ) -> PreferenceAnswer:
        query_id = "q-" + "-".join(str(c) for c in ctx) + f"-{rep}-{self.queries_sent}"
        wire = OracleWireQuery(
            query_id=query_id,
            prompt=render_prompt(self.spec.protocol, game, q),
            agent=q.agent,
            current=q.current.members,
            candidate=q.candidate.members,
        )
        self.queries_sent += 1
        answer = self._endpoint.exchange(wire, self.spec.timeout_s)
        if answer.verdict:
            key = answer.verdict.strip().lower()
            if key in _VERDICTS:
                confidence = None
                if answer.confidence and answer.confidence.lower() in (
                    "low",
                    "medium",
                    "high",
                ):
                    confidence = Confidence(answer.confidence.lower())
                return PreferenceAnswer(verdict=_VERDICTS[key], confidence=confidence)
        return parse_declaration(answer.raw)

    def close(self) -> None:
        self._endpoint.close()


@contextmanager
def open_sessions(oracles: Iterable[OracleSpec]):
    """Open one session per distinct external endpoint among the oracles."""
    sessions: dict[ExternalEndpointSpec, ExternalSession] = {}
    try:
        for oracle in oracles:
            if oracle.external is not None and oracle.external not in sessions:
                sessions[oracle.external] = ExternalSession(oracle.external)
        yield sessions
    finally:
        for s in sessions.values():
            s.close()
