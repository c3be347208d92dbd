"""Scheduled fusion mechanics: schedules, endpoints, gradient reach.

Run:  python demos/06_scheduled_fusion.py
"""

import numpy as np

from mwpdual import autodiff as ad
from mwpdual import corpus, fusion, harness

# The two decay laws. eps weights the gold quantity rows; tau is the
# Gumbel-softmax temperature of the bridge from decoder logits.
fs, gs = fusion.FusionSchedule(), fusion.GumbelSchedule()
print("step      eps        tau")
for t in (0, 100, 1000, 10000, 40000, 100000):
    print(f"{t:>6}  {fs.at(t):.5f}  {gs.at(t):.5f}")
print()

# Build one psedual training context on a toy corpus.
config = harness.RunConfig.from_dict({
    "seed": 5, "mode": "psedual", "decoder": "sequential",
    "expr_encoder": "gcn", "d_h": 32, "lr": 1e-3, "epochs": 0,
    "batch_size": 8,
    "synthetic": {"n_records": 40, "op_count": [1, 2], "operands": [2, 15]},
    "split": [0.7, 0.15, 0.15],
})
train_recs, _, _, _ = harness.load_corpus(config)
rng = np.random.default_rng(config.seed)
vocab = corpus.build_vocab(train_recs)
model = harness.build_model(config, vocab, rng)
ctx = harness.make_context(model, rng)
rec = train_recs[0]

# Endpoint identity: at eps = 1 the predicted branch is skipped outright,
# so the psedual loss IS the teacher-forcing loss, bit for bit.
_, li_psedual = fusion.record_losses(ctx, rec, "psedual", eps=1.0)
_, li_teacher = fusion.record_losses(ctx, rec, "teacher_forcing")
print("infill loss, psedual@eps=1 :", li_psedual.item())
print("infill loss, teacher force :", li_teacher.item())
print("bit-identical:", li_psedual.item() == li_teacher.item())
print()

# Gradient reach: only eps < 1 reaches the decoder parameters.
def decoder_grad(mode, eps=None):
    ctx.params.zero_grad()
    _, l_infill = fusion.record_losses(ctx, rec, mode, eps=eps, noise=None)
    ad.backward(l_infill)
    return max((float(np.abs(p.grad).max()) if p.grad is not None else 0.0)
               for name, p in ctx.params.items() if name.startswith("dec."))


print("max |d L_infill / d decoder|, teacher forcing:",
      decoder_grad("teacher_forcing"))
print("max |d L_infill / d decoder|, fusion eps=0.5 :",
      decoder_grad("psedual", eps=0.5))
