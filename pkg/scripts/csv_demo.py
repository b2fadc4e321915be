#!/usr/bin/env python3
"""End-to-end CLI run on a synthetic 500-row CSV with a categorical column.

Uses the lower-quantile configuration tau=0.1, alpha=0.1, lambda-scale 0.4,
delta2=0.5 and prints the resulting report.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from selqr.cli import main as cli


def make_csv(path, n=500, p=20, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    region = rng.choice(["north", "south", "west"], n)
    y = 1.0 + 0.8 * X[:, 0] - 0.6 * X[:, 3] + 0.5 * (region == "west") \
        + (1 + 0.3 * np.abs(X[:, 1])) * rng.standard_normal(n)
    df = pd.DataFrame(X, columns=[f"z{k}" for k in range(p)])
    df.insert(0, "region", region)
    df.insert(0, "y", y)
    df.to_csv(path, index=False)


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
    out.mkdir(parents=True, exist_ok=True)
    make_csv(out / "data.csv")
    code = cli(["infer", "--input", str(out / "data.csv"), "--response", "y",
                "--one-hot", "region", "--tau", "0.1", "--alpha", "0.1",
                "--lambda-scale", "0.4", "--delta2", "0.5", "-o", str(out)])
    if code == 0:
        print(pd.read_csv(out / "report.csv").to_string(index=False))
    return code


if __name__ == "__main__":
    sys.exit(main())
