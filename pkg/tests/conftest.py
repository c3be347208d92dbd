import os

# single-threaded BLAS: these models are all tiny-matrix work, and thread
# handoff costs more than it saves (must be set before numpy loads)
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from mwpdual import corpus, harness


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_corpus():
    """60 distractor-free records: small, fast, all numbers used."""
    cfg = corpus.SynthConfig(n_records=60, op_count=(1, 2), operands=(2, 12))
    return corpus.generate_synthetic(cfg, seed=9)


def tiny_config(**overrides):
    base = dict(
        seed=3,
        mode="solve_only",
        decoder="sequential",
        expr_encoder="gcn",
        d_h=16,
        lr=1e-3,
        epochs=1,
        batch_size=8,
        beam=1,
        synthetic={"n_records": 40, "op_count": [1, 2], "operands": [2, 12]},
        split=(0.7, 0.15, 0.15),
    )
    base.update(overrides)
    return harness.RunConfig.from_dict(base)
