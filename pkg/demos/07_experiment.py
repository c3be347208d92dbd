"""Miniature training-set-size experiment (a scaled-down acceptance run).

Trains the baseline and the fusion-trained model at two corpus sizes and
prints the accuracy table. The full-size protocol lives in
tests/test_acceptance.py; this one finishes in a few minutes.

Run:  python demos/07_experiment.py
"""

from mwpdual import harness

config = harness.RunConfig.from_dict({
    "seed": 1,
    "mode": "solve_only",
    "decoder": "sequential",
    "expr_encoder": "gcn",
    "d_h": 64,
    "lr": 1e-3,
    "epochs": 20,
    "batch_size": 16,
    "beam": 1,
    "synthetic": {"n_records": 700, "op_count": [1, 3], "operands": [2, 20],
                  "distractor_prob": 0.3},
    "corpus_seed": 42,
    "split": [500, 100, 100],
})

rows = harness.sweep_train_size(config, sizes=[150, 500], repeats=1)
print()
print("size  mode        seed  value_acc  expr_acc")
for row in rows:
    print(f"{row['size']:>4}  {row['mode']:<10}  {row['seed']:>4}"
          f"  {row['value_acc']:>9.3f}  {row['expr_acc']:>8.3f}")

by = {(r["size"], r["mode"]): r["value_acc"] for r in rows}
for size in (150, 500):
    gap = by[(size, "psedual")] - by[(size, "solve_only")]
    print(f"fusion-minus-baseline gap at {size}: {gap:+.3f}")
