"""Regenerate ttest_oracle.json: paired t statistics and two-sided p-values at 50 digits.

Run once by hand; the test-suite only reads the frozen JSON.
"""

import json
from pathlib import Path

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def oracle(a, b):
    d = [mp.mpf(x) - mp.mpf(y) for x, y in zip(a, b)]
    n = len(d)
    mean = mp.fsum(d) / n
    var = mp.fsum((x - mean) ** 2 for x in d) / (n - 1)
    t = mean / mp.sqrt(var / n)
    nu = n - 1
    # two-sided p = I_{nu/(nu+t^2)}(nu/2, 1/2)
    p = mp.betainc(mp.mpf(nu) / 2, mp.mpf(1) / 2, 0, nu / (nu + t**2), regularized=True)
    return t, p


def main():
    rng = np.random.default_rng(20240611)
    cases = []
    for i in range(25):
        n = int(rng.integers(2, 60))
        if i % 3 == 0:  # integer judge scores on the 1-10 scale
            a = rng.integers(1, 11, n).astype(float)
            b = np.clip(a + rng.integers(-3, 4, n), 1, 10).astype(float)
            if np.all(a - b == (a - b)[0]):
                b[0] = 11 - b[0] if b[0] != 5.5 else 1.0
        else:
            a = rng.normal(6, 2, n)
            b = a + rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), n)
        t, p = oracle(a, b)
        cases.append({"a": a.tolist(), "b": b.tolist(), "t": mp.nstr(t, 30), "p": mp.nstr(p, 30), "dof": n - 1})
    out = Path(__file__).with_name("ttest_oracle.json")
    out.write_text(json.dumps(cases, indent=1) + "\n")


if __name__ == "__main__":
    main()
