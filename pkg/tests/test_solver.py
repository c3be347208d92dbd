"""Solver tests: encoder, both decoders, losses, beam search.

Beam search is checked two ways: width 1 must equal greedy token-for-token
and score-for-score, and on a frozen tiny model where greedy is known to
be suboptimal, width 3 must recover the optimum found by exhaustively
scoring every candidate sequence with teacher forcing (an independent
route through the same parameters).
"""

import itertools
import math

import numpy as np
import pytest

from mwpdual import autodiff as ad
from mwpdual import corpus, fusion, harness, solver
from mwpdual.autodiff import ParameterSet, Tensor, no_grad
from mwpdual.solver import (EmptyInput, LengthMismatch, MissingGold,
                            ProblemEncoder, SequentialDecoder, SolverOutput,
                            TreeDecoder, beam_search, solve_loss)


def tiny_model(seed=3, decoder="sequential", d_h=16, n_records=24, **synth):
    synth = {"n_records": n_records, "op_count": [1, 2], "operands": [2, 12],
             **synth}
    cfg = harness.RunConfig(
        seed=seed, mode="solve_only", decoder=decoder, d_h=d_h, lr=1e-3,
        epochs=0, batch_size=8, synthetic=synth, split=(0.6, 0.2, 0.2))
    train_recs, valid, test, _ = harness.load_corpus(cfg)
    rng = np.random.default_rng(cfg.seed)
    vocab = corpus.build_vocab(train_recs)
    model = harness.build_model(cfg, vocab, rng)
    return model, train_recs, rng


def _log_softmax(row):
    s = row - row.max()
    return s - np.log(np.exp(s).sum())


class TestProblemEncoder:
    def test_shapes(self):
        model, recs, _ = tiny_model(d_h=8)
        enc = model.encoder.encode([1, 2, 3, 4, 3])
        assert enc.hidden.shape == (5, 8)
        assert enc.summary.shape == (1, 8)

    def test_deterministic(self):
        model, recs, _ = tiny_model(d_h=8)
        a = model.encoder.encode([1, 2, 3])
        b = model.encoder.encode([1, 2, 3])
        assert np.array_equal(a.hidden.data, b.hidden.data)
        assert np.array_equal(a.summary.data, b.summary.data)

    def test_empty_input(self):
        model, _, _ = tiny_model(d_h=8)
        with pytest.raises(EmptyInput):
            model.encoder.encode([])

    def test_directional_halves(self):
        # the forward half at position t must not depend on tokens after t
        model, _, _ = tiny_model(d_h=8)
        a = model.encoder.encode([1, 2, 3, 4]).hidden.data
        b = model.encoder.encode([1, 2, 5, 6]).hidden.data
        assert np.array_equal(a[:2, :4], b[:2, :4])
        assert not np.array_equal(a[:2, 4:], b[:2, 4:])

    def test_odd_width_rejected(self):
        ps = ParameterSet()
        with pytest.raises(solver.SolverError):
            ProblemEncoder(10, 7, ps, np.random.default_rng(0))

    def test_gradcheck_through_encoder(self):
        rng = np.random.default_rng(4)
        ps = ParameterSet(dtype=np.float64)
        enc = ProblemEncoder(5, 4, ps, rng)

        def fn(*_):
            out = enc.encode([0, 3, 1])
            return ad.sum_all(ad.tanh(out.hidden)) + ad.sum_all(out.summary)

        assert ad.gradcheck(fn, ps.tensors()) < 1e-4


class TestSequentialDecoder:
    def test_teacher_shapes(self):
        model, recs, _ = tiny_model()
        gold = model.table.encode_prefix(recs[0].gold_prefix)
        enc = model.encoder.encode(model.vocab.encode(recs[0].norm_tokens))
        out = model.decoder.teacher_decode(enc, gold)
        # one logits row per gold position plus the scored EOS step
        assert out.step_logits.shape == (len(gold) + 1, len(model.table))
        assert len(out.predicted_ids) == len(gold)
        assert out.expr_len == len(gold)

    def test_missing_gold(self):
        model, recs, _ = tiny_model()
        enc = model.encoder.encode([1, 2])
        with pytest.raises(MissingGold):
            model.decoder.teacher_decode(enc, [])

    def test_free_running_eos_first_step(self):
        model, recs, _ = tiny_model()
        # bias the output layer so EOS dominates every step
        model.params["dec.b_out"].data[0, model.table.eos_id] = 50.0
        enc = model.encoder.encode([1, 2, 3])
        out = model.decoder.free_decode(enc)
        assert out.predicted_ids == []
        ok, _ = corpus.expr.is_complete_prefix([])
        assert not ok  # empty expression flags invalid downstream

    def test_free_running_length_cap(self):
        model, _, _ = tiny_model()
        model.params["dec.b_out"].data[0, model.table.token2id["+"]] = 50.0
        enc = model.encoder.encode([1, 2, 3])
        out = model.decoder.free_decode(enc, max_len=7)
        assert len(out.predicted_ids) == 7


class TestTreeDecoder:
    def test_teacher_structure(self):
        model, recs, _ = tiny_model(decoder="tree")
        enc = model.encoder.encode([1, 2, 3])
        gold = model.table.encode_prefix(corpus.expr.prefix_from_text("+ N1 N2"))
        out = model.decoder.teacher_decode(enc, gold)
        assert out.step_logits.shape == (3, len(model.table))
        assert out.expr_len == 3

    def test_incomplete_gold_rejected(self):
        model, _, _ = tiny_model(decoder="tree")
        enc = model.encoder.encode([1, 2, 3])
        plus = model.table.token2id["+"]
        n1 = model.table.token2id["N1"]
        with pytest.raises(LengthMismatch):
            model.decoder.teacher_decode(enc, [plus, n1])
        with pytest.raises(LengthMismatch):
            model.decoder.teacher_decode(enc, [n1, n1])

    def test_stack_depth_bound(self):
        # replay transitions for random gold trees: depth <= ops + 1,
        # and the stack empties exactly at the last token
        model, recs, _ = tiny_model(decoder="tree", n_records=30,
                                    op_count=[1, 3])
        dec = model.decoder
        with no_grad():
            for rec in recs[:10]:
                enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
                keys_proj = dec.attn.project_keys(enc.hidden)
                gold = model.table.encode_prefix(rec.gold_prefix)
                n_ops = rec.gold_tree().n_operators()
                goals, embs = (enc.summary,), ()
                max_depth = 1
                for i, tok in enumerate(gold):
                    goal = goals[-1]
                    _, c = dec._step_logits(goal, enc, keys_proj)
                    goals, embs = dec._transition(goals, embs, tok, goal, c)
                    max_depth = max(max_depth, len(goals))
                    assert (len(goals) == 0) == (i == len(gold) - 1)
                assert max_depth <= n_ops + 1

    def test_free_decode_terminates_complete(self):
        model, recs, _ = tiny_model(decoder="tree")
        with no_grad():
            for rec in recs[:8]:
                enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
                out = model.decoder.free_decode(enc)
                toks = model.table.decode(out.predicted_ids)
                ok, _ = corpus.expr.is_complete_prefix(toks)
                assert ok or len(out.predicted_ids) == solver.MAX_GEN_LEN

    def test_eos_never_emitted(self):
        model, recs, _ = tiny_model(decoder="tree")
        with no_grad():
            for rec in recs[:8]:
                enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
                out = model.decoder.free_decode(enc)
                assert model.table.eos_id not in out.predicted_ids


class TestSolveLoss:
    def test_uniform_logits(self):
        out = SolverOutput(Tensor(np.zeros((3, 20), dtype=np.float64)),
                           [0, 0, 0], "teacher", 3)
        loss = solve_loss(out, [1, 2, 3])
        assert math.isclose(loss.item(), math.log(20), rel_tol=1e-9)

    def test_confident_logits(self):
        logits = np.full((2, 5), -40.0)
        logits[0, 1] = 40.0
        logits[1, 3] = 40.0
        out = SolverOutput(Tensor(logits), [1, 3], "teacher", 2)
        assert solve_loss(out, [1, 3]).item() < 1e-6

    def test_length_mismatch(self):
        out = SolverOutput(Tensor(np.zeros((3, 5))), [0, 0, 0], "teacher", 3)
        with pytest.raises(LengthMismatch):
            solve_loss(out, [1, 2])

    def test_free_output_rejected(self):
        out = SolverOutput(Tensor(np.zeros((3, 5))), [0, 0, 0], "free", 3)
        with pytest.raises(MissingGold):
            solve_loss(out, [1, 2, 3])

    def test_loss_decreases_on_one_sample(self):
        model, recs, rng = tiny_model(d_h=16)
        ctx = harness.make_context(model, rng)
        rec = recs[0]
        first = fusion.joint_step(ctx, [rec], "solve_only")["solve"]
        for _ in range(48):
            last = fusion.joint_step(ctx, [rec], "solve_only")["solve"]
        assert last < first


class TestMemorization:
    @pytest.mark.parametrize("decoder", ["sequential", "tree"])
    def test_single_record_overfit(self, decoder):
        model, recs, rng = tiny_model(seed=11, decoder=decoder, d_h=32,
                                      n_records=12, op_count=[2, 3])
        ctx = harness.make_context(model, rng)
        rec = recs[0]
        loss = None
        for step in range(500):
            loss = fusion.joint_step(ctx, [rec], "solve_only")["solve"]
            if loss < 0.01:
                break
        assert loss < 0.01, f"{decoder} never memorized: loss {loss}"
        gold = model.table.encode_prefix(rec.gold_prefix)
        with no_grad():
            enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
            out = model.decoder.free_decode(enc)
        assert out.predicted_ids == gold


class TestBeamSearch:
    @pytest.mark.parametrize("decoder", ["sequential", "tree"])
    def test_beam_one_equals_greedy(self, decoder):
        model, recs, rng = tiny_model(seed=5, decoder=decoder)
        ctx = harness.make_context(model, rng)
        for _ in range(10):  # a few steps so the distribution has structure
            fusion.joint_step(ctx, recs[:8], "solve_only")
        with no_grad():
            for rec in recs[:6]:
                enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
                free = model.decoder.free_decode(enc)
                hit = beam_search(enc, model.decoder, 1)
                if hit is None:
                    # greedy must not have terminated either
                    toks = model.table.decode(free.predicted_ids)
                    assert not corpus.expr.is_complete_prefix(toks)[0]
                    continue
                tokens, score = hit
                assert tokens == free.predicted_ids
                # same score under the same normalization
                logits = free.step_logits.data
                if decoder == "sequential":
                    targets = free.predicted_ids + [model.table.eos_id]
                else:
                    targets = free.predicted_ids
                lp = sum(_log_softmax(logits[t])[targets[t]]
                         for t in range(len(targets)))
                assert math.isclose(score, lp / len(targets), rel_tol=1e-6)

    def test_beam_score_at_least_greedy(self):
        model, recs, _ = tiny_model(seed=6)
        with no_grad():
            for rec in recs[:6]:
                enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
                b1 = beam_search(enc, model.decoder, 1)
                b3 = beam_search(enc, model.decoder, 3)
                if b1 is not None and b3 is not None:
                    assert b3[1] >= b1[1] - 1e-12

    def test_beam_finds_enumeration_optimum(self):
        # frozen setup where greedy is strictly suboptimal (found by search:
        # seed 13 below); the oracle scores every candidate <= 3 tokens by
        # teacher-forcing it through the same parameters
        cfg = harness.RunConfig(
            seed=13, mode="solve_only", decoder="sequential", d_h=8, lr=1e-3,
            epochs=0, batch_size=4, constants=(), n_max=2,
            synthetic={"n_records": 8, "op_count": [1, 1], "operands": [2, 9]},
            split=(0.5, 0.25, 0.25))
        train_recs, _, _, _ = harness.load_corpus(cfg)
        vocab = corpus.build_vocab(train_recs)
        model = harness.build_model(cfg, vocab, np.random.default_rng(cfg.seed))
        table = model.table
        rec = train_recs[0]
        with no_grad():
            enc = model.encoder.encode(vocab.encode(rec.norm_tokens))
            b1 = model.decoder.beam_decode(enc, 1, max_len=3)
            b3 = model.decoder.beam_decode(enc, 3, max_len=3)

            best = (-np.inf, None)
            toks = [i for i in range(len(table)) if i != table.eos_id]
            for k in range(0, 4):
                for seq in itertools.product(toks, repeat=k):
                    # row 0 logits are gold-independent, so a dummy token
                    # suffices to score the empty expression
                    probe = list(seq) if k else [toks[0]]
                    out = model.decoder.teacher_decode(enc, probe)
                    targets = list(seq) + [table.eos_id]
                    lp = sum(_log_softmax(out.step_logits.data[t])[targets[t]]
                             for t in range(len(targets)))
                    score = lp / len(targets)
                    if score > best[0]:
                        best = (score, list(seq))

        assert b3[1] > b1[1] + 1e-9, "seed no longer adversarial for greedy"
        assert b3[0] == best[1]
        assert math.isclose(b3[1], best[0], rel_tol=1e-6)

    def test_invalid_beam_size(self):
        model, recs, _ = tiny_model()
        enc = model.encoder.encode([1, 2])
        with pytest.raises(solver.SolverError):
            beam_search(enc, model.decoder, 0)
