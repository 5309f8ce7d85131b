#!/usr/bin/env python3
"""Run every shipped config through the CLI and summarize exit codes."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    configs = sorted((ROOT / "configs").glob("*.yaml"))
    failures = 0
    for cfg in configs:
        proc = subprocess.run(
            [sys.executable, "-m", "bsvi.cli", str(cfg),
             "--out", str(ROOT / "out" / cfg.stem)],
            capture_output=True, text=True)
        # gate_violation is supposed to refuse; everything else must succeed
        expected = 3 if cfg.stem == "gate_violation" else 0
        status = "ok" if proc.returncode == expected else "UNEXPECTED"
        if proc.returncode != expected:
            failures += 1
        print(f"{cfg.name}: exit={proc.returncode} ({status})")
        if proc.stdout.strip():
            for line in proc.stdout.strip().splitlines():
                print(f"    {line}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
