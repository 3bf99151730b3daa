"""Regenerate src/certaindex/data/synthetic_trace.jsonl (50 CoT programs)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from certaindex.probe import write_traces
from certaindex.runtime import generate_workload, synthetic_probe_trace

SEED = 2025
OUT = Path(__file__).resolve().parents[1] / "src" / "certaindex" / "data" / "synthetic_trace.jsonl"


def main() -> None:
    specs = generate_workload(
        50, "CoT", SEED, convergence_range=(1, 30), noise=0.6, hesitation_rate=0.25, interval_tokens=64
    )
    lengths = np.random.default_rng(SEED).integers(20, 41, size=len(specs))
    traces = {f"q{i:03d}": synthetic_probe_trace(s, int(n)) for i, (s, n) in enumerate(zip(specs, lengths))}
    OUT.parent.mkdir(parents=True, exist_ok=True)
    write_traces(OUT, traces)
    print(f"wrote {sum(map(len, traces.values()))} records for {len(traces)} programs to {OUT}")


if __name__ == "__main__":
    main()
