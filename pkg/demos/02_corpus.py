"""Synthetic corpus generation, masking, and infill labels.

Run:  python demos/02_corpus.py
"""

from mwpdual import corpus, expr

cfg = corpus.SynthConfig(n_records=3, op_count=(2, 3), distractor_prob=1.0)
records = corpus.generate_synthetic(cfg, seed=7)

for rec in records:
    print("=" * 72)
    print("text     :", rec.raw_text)
    print("numbers  :", [(pos, v) for pos, v in rec.numbers])
    print("normed   :", " ".join(rec.norm_tokens))
    print("gold     :", expr.prefix_to_text(rec.gold_prefix), "=", rec.answer)

    masked = corpus.mask_numbers(rec)
    print("masked   :", " ".join(masked.masked_tokens))

    # Infill labels point each masked slot at a leaf of the gold tree (in
    # preorder), or at nothing when the number is a distractor.
    labels = corpus.make_infill_labels(rec)
    leaves = expr.leaves_in_order(rec.gold_tree())
    for slot, label in enumerate(labels, start=1):
        target = "NULL (unused)" if label is None else \
            f"leaf {label} = {leaves[label][1].text}"
        print(f"  slot N{slot} -> {target}")

# Vocabulary and the fixed decoder token table.
vocab = corpus.build_vocab(records)
table = corpus.build_decoder_table()
print("=" * 72)
print(f"vocab: {len(vocab)} words, reserved = {vocab.words[:3]}")
print(f"decoder table ({len(table)} tokens):", " ".join(table.tokens))

# Deterministic splits.
parts = corpus.split(list(range(10)), fractions=(0.8, 0.1, 0.1), seed=1)
print("split sizes:", [len(p) for p in parts])
