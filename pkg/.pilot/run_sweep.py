import json, os, sys, time
import concurrent.futures as cf

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from mwpdual import harness

BASE = dict(
    decoder="sequential", expr_encoder="gcn", d_h=128, lr=1e-3,
    batch_size=16, beam=1, epochs=40,
    synthetic={"n_records": 2400, "op_count": [1, 3], "operands": [2, 20],
               "distractor_prob": 0.3},
    corpus_seed=42, split=(2000, 200, 200))


def run(task):
    mode, size, seed = task
    cfg = harness.RunConfig.from_dict({**BASE, "seed": seed, "mode": mode,
                                       "train_size": size})
    t0 = time.time()
    _, rep = harness.train(cfg)
    return {"mode": mode, "size": size, "seed": seed,
            "value_acc": rep.value_acc, "expr_acc": rep.expr_acc,
            "secs": round(time.time() - t0, 1)}


if __name__ == "__main__":
    out = sys.argv[1]
    tasks = [(m, s, r) for s in (250, 500, 1000, 2000)
             for m in ("solve_only", "psedual") for r in (1, 2, 3)]
    with open(out, "w") as fh, cf.ProcessPoolExecutor(max_workers=2) as pool:
        for row in pool.map(run, tasks):
            fh.write(json.dumps(row) + "\n")
            fh.flush()
            print(row, flush=True)
