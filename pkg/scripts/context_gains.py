"""Relative bits-per-byte improvement between consecutive context lengths.

Reads the JSON lines written by ``bytestack eval --lengths ...`` and prints one
row per length: the length, its bits per byte, and the relative drop from the
previous (shorter) length.

    python scripts/context_gains.py runs/demo/sweep.jsonl
"""

from __future__ import annotations

import argparse
import json
import sys

from bytestack.metrics import relative_improvements


def gains_table(records: list[dict]) -> list[dict]:
    rows = sorted(records, key=lambda r: r["context_length"])
    lengths = [r["context_length"] for r in rows]
    if len(set(lengths)) != len(lengths):
        raise ValueError("duplicate context lengths in the sweep")
    bpb = [r["bpb"] for r in rows]
    gains = [None] + relative_improvements(bpb)
    return [{"context_length": n, "bpb": b, "relative_gain": g} for n, b, g in zip(lengths, bpb, gains)]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("reports", help="JSON-lines file from bytestack eval")
    parser.add_argument("--json", action="store_true", help="emit JSON lines instead of a table")
    args = parser.parse_args(argv)
    with open(args.reports) as f:
        records = [json.loads(line) for line in f if line.strip()]
    table = gains_table(records)
    if args.json:
        for row in table:
            print(json.dumps(row))
        return 0
    print(f"{'context':>10} {'bpb':>8} {'gain':>8}")
    for row in table:
        gain = "" if row["relative_gain"] is None else f"{100 * row['relative_gain']:7.2f}%"
        print(f"{row['context_length']:>10} {row['bpb']:>8.4f} {gain:>8}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
