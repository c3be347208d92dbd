"""Train a small solver and watch it decode.

Trains the sequential decoder on a few hundred synthetic problems for a
couple of minutes, then decodes test problems greedily and with beam 3.

Run:  python demos/04_solving.py
"""

import numpy as np

from mwpdual import autodiff as ad
from mwpdual import corpus, expr, fusion, harness
from mwpdual.solver import beam_search

config = harness.RunConfig.from_dict({
    "seed": 1,
    "mode": "solve_only",
    "decoder": "sequential",
    "d_h": 64,
    "lr": 1e-3,
    "epochs": 15,
    "batch_size": 16,
    "synthetic": {"n_records": 500, "op_count": [1, 2], "operands": [2, 20]},
    "split": [400, 50, 50],
})

print("training", config.decoder, "decoder for", config.epochs, "epochs ...")
model, report = harness.train(config)
print(f"test: expr_acc={report.expr_acc:.2f}  value_acc={report.value_acc:.2f}")

_, _, test, _ = harness.load_corpus(config)
print()
with ad.no_grad():
    for rec in test[:5]:
        enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
        greedy = model.decoder.free_decode(enc)
        hit = beam_search(enc, model.decoder, beam_size=3)
        pred = expr.prefix_to_text(model.table.decode(greedy.predicted_ids))
        gold = expr.prefix_to_text(rec.gold_prefix)
        mark = "ok " if pred == gold else "MISS"
        print(f"[{mark}] {rec.raw_text}")
        print(f"       gold {gold}   greedy {pred}", end="")
        if hit is not None:
            beam_txt = expr.prefix_to_text(model.table.decode(hit[0]))
            print(f"   beam3 {beam_txt} (score {hit[1]:.3f})")
        else:
            print("   beam3 <invalid>")
