"""Plugin stub for exercising the oracle wire protocol.

Reads line-delimited JSON queries on stdin and answers on stdout.  Modes:

    candidate  answer CANDIDATE to everything (default)
    current    answer CURRENT to everything
    sleep      stall for --sleep-s seconds before each answer
    malformed  emit a non-JSON line
    mismatch   echo a wrong query id

Run as `python -m coalitions.oracle_stub [--mode MODE]`.
"""

from __future__ import annotations

import argparse
import json
import sys
import time


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--mode",
        default="candidate",
        choices=["candidate", "current", "sleep", "malformed", "mismatch"],
    )
    parser.add_argument("--sleep-s", type=float, default=5.0)
    args = parser.parse_args(argv)

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            query = json.loads(line)
        except json.JSONDecodeError:
            continue
        if args.mode == "sleep":
            time.sleep(args.sleep_s)
        if args.mode == "malformed":
            sys.stdout.write("this is not json\n")
            sys.stdout.flush()
            continue
        verdict = "CURRENT" if args.mode == "current" else "CANDIDATE"
        query_id = "wrong-id" if args.mode == "mismatch" else query.get("query_id", "")
        answer = {
            "query_id": query_id,
            "verdict": verdict,
            "confidence": "high",
            "raw": f"I prefer: {verdict}\nConfidence: high",
        }
        sys.stdout.write(json.dumps(answer) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
