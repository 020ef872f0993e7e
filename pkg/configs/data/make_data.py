"""Regenerate the small CSV fixtures used by the example configs.

Run from this directory: ``python3 make_data.py``. Output is deterministic.
"""

import numpy as np

from batchexp.environments import MomentTable, sign_flip_table
from batchexp.ingestion import MomentData, UnitRow, write_moment_csv, write_units_csv


def moments(rng):
    table = sign_flip_table(k=2, t_total=6, gap=0.3, advantage=0.05, variance=2.0)
    means = table.means + 0.05 * rng.standard_normal(table.means.shape)
    n = np.full(means.shape, 1000, dtype=np.int64)
    data = MomentData("exp1", "m1", tuple(range(6)), ("control", "treatment"), MomentTable(means, table.vars), n)
    write_moment_csv("moments.csv", [data])


def penn_units(rng, n=600, p=3, k=6):
    # six bonus programs; outcomes are exactly linear so imputation is exact
    coefs = rng.standard_normal((k, p + 1))
    rows = []
    for i in range(n):
        x = rng.standard_normal(p)
        arm = i % k
        y = coefs[arm, 0] + x @ coefs[arm, 1:]
        rows.append(UnitRow(f"u{i}", x, str(arm), float(y)))
    write_units_csv("penn_units.csv", rows)


def site_units(rng, sites=8, per_arm=30, p=2):
    theta = np.array([0.3, 1.0, -0.5])
    rows = []
    for s in range(sites):
        shift = rng.standard_normal(p)
        effect = theta[0] + shift @ theta[1:]
        for arm in ("0", "1"):
            for i in range(per_arm):
                x = shift + 0.1 * rng.standard_normal(p)
                y = (effect if arm == "1" else 0.0) + rng.standard_normal()
                rows.append(UnitRow(f"s{s}_{arm}_{i}", x, arm, float(y), f"site{s}"))
    write_units_csv("sites_units.csv", rows)


if __name__ == "__main__":
    rng = np.random.default_rng(2024)
    moments(rng)
    penn_units(rng)
    site_units(rng)
