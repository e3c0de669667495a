"""Freeze scalar-loop oracle values for a fixed instance into tests/fixtures/oracle_values.json.

The values come from tests/oracles.py only, so the fixture pins the reference
numbers independently of the package implementation.
"""
import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))
import oracles  # noqa: E402


def instance():
    rng = np.random.default_rng(20240611)
    x = rng.normal(size=(8, 3))
    classes = [0, 0, 1, 1, 0, 0, 1, 1]
    domains = [0, 0, 0, 0, 1, 1, 1, 1]
    return x, classes, domains


def main():
    x, y, d = instance()
    rows = x.tolist()
    values = {
        "features": rows, "classes": y, "domains": d,
        "within": oracles.within(rows[:4]),
        "cross": oracles.cross(rows[:4], rows[4:]),
        "heterogeneity": oracles.heterogeneity(rows, y, d),
        "mmd": oracles.mmd(rows[:4], rows[4:]),
        "contrastive": oracles.contrastive(rows, y, d),
        "alignment": oracles.alignment(rows, d),
    }
    out = ROOT / "tests" / "fixtures" / "oracle_values.json"
    out.write_text(json.dumps(values, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
