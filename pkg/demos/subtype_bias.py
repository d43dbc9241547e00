"""Why pooling MDRI/FRR across subtypes misleads: closed-form limit vs simulation.

Two subtypes in equal shares with prevalences 0.25/0.15 and incidences 0.02/0.05, so the
mean incidence is 0.035. The pooled-assay estimator converges elsewhere; the stratified one does not.

Run: python3 demos/subtype_bias.py
"""

from recency.assay import SUBTYPE_A, SUBTYPE_B, frr, mdri
from recency.estimators import (PlimParams, counts_by_subtype, plim_subtype_old, plim_true_mean, subtype_old,
                                subtype_stratified)
from recency.numkernel import RngStream
from recency.simulate import bundled_table, gen_cross_sectional

assays = {"A": SUBTYPE_A, "B": SUBTYPE_B}
values = {s: (mdri(a), frr(a)) for s, a in assays.items()}
params = PlimParams((0.5, 0.5), (0.25, 0.15), (0.02, 0.05), (values["A"][0], values["B"][0]),
                    (values["A"][1], values["B"][1]))

print(f"true mean incidence        {plim_true_mean(params):.5f}")
print(f"pooled-assay limit         {plim_subtype_old(params):.5f}")

table = bundled_table("mixed2")
for n in (10_000, 100_000, 1_000_000):
    counts = counts_by_subtype(gen_cross_sectional(table, n, assays, RngStream(3, n).generator))
    print(f"n={n:>9,}  pooled {subtype_old(counts, values).estimate:.5f}  "
          f"stratified {subtype_stratified(counts, values).estimate:.5f}")
