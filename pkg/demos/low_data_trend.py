"""
Does the logic help more when labels are scarce?
================================================

A config-driven run on the synthetic recommender: for each fraction of the
training ratings we train the mixture and a neural-only baseline, then
compare test RMSE.  The report files land in ``low_data_out/``.
"""
from pathlib import Path

from concordia.harness.experiment import run_experiment

config = Path("low_data.ini")
config.write_text("""[experiment]
name = low-data
seed = 0
fractions = 0.5, 0.8, 1.0
baseline = yes

[generator]
kind = recommend

[neural]
init_seed = 0

[training]
epochs = 20
priors = on
lr_logic = 0.001
""")

report = run_experiment(config, "low_data_out")
rmse = {(r["fraction"], r["model"]): r["mixture_rmse"] for r in report.rows}
print("fraction  concordia  neural  gain")
for f in (0.5, 0.8, 1.0):
    c, n = rmse[(f, "concordia")], rmse[(f, "neural")]
    print(f"{f:8.1f}  {c:9.4f}  {n:6.4f}  {n - c:+.4f}")
