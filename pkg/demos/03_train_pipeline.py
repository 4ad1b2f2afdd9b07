"""
Training the pipeline on one plan
=================================

Graph pre-localization gives a coarse position for every device; crops cut
at that position feed the range refiner; refined ranges go back through
least squares and a Kalman filter. Short training here, so expect numbers
well short of the full benchmark (see ``configs/office_lab.toml``).
"""

# %%
from planloc.config import ExperimentConfig, PlanSpec
from planloc.evaluation import format_table, run_experiment

cfg = ExperimentConfig(name="demo-lab", plans=(PlanSpec(scenario="lab", laps=3),),
                       gnn=(("epochs", 10), ("learning_rate", 2e-3)), fpdnn=(("epochs", 4),),
                       max_fpdnn_pairs=2000)

# %%
summary = run_experiment(cfg, "demo_lab_out")
print(format_table(summary))

# %%
# The bundle holds the per-sample errors and CDF tables for plotting elsewhere.
import csv
rows = list(csv.DictReader(open("demo_lab_out/cdf.csv")))
gnn_fp = [r for r in rows if r["method"] == "GNN+FPDNN+KF"]
half = next(r for r in gnn_fp if float(r["cumulative_fraction"]) >= 0.5)
print("median error of GNN+FPDNN+KF:", round(float(half["error"]), 3), "m")
