"""Checking the closed forms by simulation.

Treat a fitted model as a data-generating process, draw a large
hierarchical dataset and re-estimate every statistic from sample moments.
Desk-scale sizes keep this quick; ``SimConfig.full`` gives the full
10000 x 1000 design.
"""

# %% One report per model
from countvpc.presets import model1, model2, model3, model5
from countvpc.simulate import SimConfig, verify

for name, spec, row in (
    ("Model 1", model1(), {}),
    ("Model 2", model2(), {}),
    ("Model 3", model3(), {}),
    ("Model 5, FSM student", model5(), {"fsm": 1.0}),
):
    report = verify(spec, SimConfig.desk(spec, seed=1), row)
    print(name)
    print(report.to_table())

# %% Reproducibility
# Each cluster has its own counter-based random stream, so the dataset does
# not depend on the number of worker threads.
from countvpc.simulate import simulate_dataset

spec = model2()
a = simulate_dataset(spec, SimConfig(n_clusters=500, n_units=50, seed=9, threads=1))
b = simulate_dataset(spec, SimConfig(n_clusters=500, n_units=50, seed=9, threads=4))
print("identical across thread counts:", bool((a.y == b.y).all()))
