"""Solving module: problem encoder, two decoders, and beam search.

The encoder is a bidirectional GRU over word embeddings and is shared with
the reexamining side (it also encodes masked problems there).  Two
interchangeable decoders emit prefix expressions over the decoder token
table: a flat recurrent one with additive attention, and a goal-driven
tree decoder that expands a stack of goal vectors in prefix order.
Hidden and embedding sizes are unified at one d_h per run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import expr
from .autodiff import Tensor, no_grad
from .corpus import DecoderTable

MAX_GEN_LEN = 30


class SolverError(RuntimeError):
    pass


class EmptyInput(SolverError):
    pass


class MissingGold(SolverError):
    pass


class LengthMismatch(SolverError):
    pass


@dataclass
class EncoderOutput:
    hidden: Tensor   # [T, d_h]: forward||backward halves per token
    summary: Tensor  # [1, d_h]: sum of directional finals, projected


@dataclass
class SolverOutput:
    step_logits: Tensor       # [steps, V_dec]
    predicted_ids: list[int]  # per-step argmax over the expression steps
    mode: str                 # "teacher" | "free"
    expr_len: int             # leading rows of step_logits aligned to expression tokens


class AdditiveAttention:
    """score(h_i) = v . tanh(W h_i + U q + b); context = softmax-weighted keys."""

    def __init__(self, params, prefix, d_h, rng):
        self.W = params.add(f"{prefix}.W", (d_h, d_h), rng)
        self.U = params.add(f"{prefix}.U", (d_h, d_h), rng)
        self.v = params.add(f"{prefix}.v", (d_h, 1), rng)
        self.b = params.zeros(f"{prefix}.b", (1, d_h))

    def project_keys(self, keys: Tensor) -> Tensor:
        return ad.matmul(keys, self.W)

    def context(self, query: Tensor, keys: Tensor, keys_proj: Tensor) -> Tensor:
        return ad.additive_attention_rows(query, keys, keys_proj,
                                          self.U, self.v, self.b)

    # context() handles any number of query rows at once; the alias keeps
    # call sites readable where a whole step matrix goes through.
    contexts = context


def attention_context(query, keys, attn: AdditiveAttention) -> Tensor:
    """One-shot additive attention (projects keys internally)."""
    return attn.context(query, keys, attn.project_keys(keys))


class GatedTransform:
    """tanh(x W + b) * sigmoid(x G + c), the GTS-style feed-forward gate."""

    def __init__(self, params, prefix, d_in, d_out, rng):
        self.W = params.add(f"{prefix}.W", (d_in, d_out), rng)
        self.b = params.zeros(f"{prefix}.b", (1, d_out))
        self.G = params.add(f"{prefix}.G", (d_in, d_out), rng)
        self.c = params.zeros(f"{prefix}.c", (1, d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.mul(
            ad.tanh(ad.add(ad.matmul(x, self.W), self.b)),
            ad.sigmoid(ad.add(ad.matmul(x, self.G), self.c)),
        )


class ProblemEncoder:
    """Bidirectional GRU text encoder, shared by solving and reexamining."""

    def __init__(self, n_words, d_h, params, rng, prefix="enc"):
        if d_h % 2:
            raise SolverError("d_h must be even (bidirectional halves)")
        self.d_h = d_h
        self.d_half = d_h // 2
        self.embed = params.add(f"{prefix}.embed", (n_words, d_h), rng)
        self.fwd = ad.init_gru(params, f"{prefix}.fwd", d_h, self.d_half, rng)
        self.bwd = ad.init_gru(params, f"{prefix}.bwd", d_h, self.d_half, rng)
        self.W_sum = params.add(f"{prefix}.W_sum", (self.d_half, d_h), rng)
        self.b_sum = params.zeros(f"{prefix}.b_sum", (1, d_h))

    def encode(self, token_ids) -> EncoderOutput:
        if len(token_ids) == 0:
            raise EmptyInput("cannot encode an empty token sequence")
        T = len(token_ids)
        E = ad.gather_rows(self.embed, token_ids)
        h0 = Tensor(np.zeros((1, self.d_half), dtype=self.embed.dtype))
        Hf = ad.gru_sequence(E, h0, self.fwd)
        rev = list(range(T - 1, -1, -1))
        Hb_rev = ad.gru_sequence(ad.gather_rows(E, rev), h0, self.bwd)
        Hb = ad.gather_rows(Hb_rev, rev)
        H = ad.concat_cols([Hf, Hb])
        finals = ad.add(ad.slice_rows(Hf, T - 1, T), ad.slice_rows(Hb_rev, T - 1, T))
        summary = ad.add(ad.matmul(finals, self.W_sum), self.b_sum)
        return EncoderOutput(H, summary)


def _argmax(row: np.ndarray) -> int:
    return int(np.argmax(row))


def _log_softmax_np(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class _BeamCand:
    logp: float
    tokens: tuple
    state: tuple
    done: bool = False


def _rank(cands, beam_size):
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].logp, i))
    return [cands[i] for i in order[:beam_size]]


class SequentialDecoder:
    """Flat GRU decoder with additive attention over the encoder states.

    Teacher-aligned decoding consumes gold token embeddings as inputs (its
    own predictions stay free) and scores one extra EOS step; free-running
    decoding feeds back its own argmax until EOS or the length cap.
    """

    name = "sequential"

    def __init__(self, table: DecoderTable, d_h, params, rng, prefix="dec"):
        self.table = table
        self.d_h = d_h
        self.embed = params.add(f"{prefix}.embed", (len(table), d_h), rng)
        self.start = params.add(f"{prefix}.start", (1, d_h), rng,
                                scale=1.0 / np.sqrt(d_h))
        self.gru = ad.init_gru(params, f"{prefix}.gru", d_h, d_h, rng)
        self.attn = AdditiveAttention(params, f"{prefix}.attn", d_h, rng)
        self.W_out = params.add(f"{prefix}.W_out", (2 * d_h, len(table)), rng)
        self.b_out = params.zeros(f"{prefix}.b_out", (1, len(table)))

    def targets_for(self, gold_ids) -> list[int]:
        return list(gold_ids) + [self.table.eos_id]

    def _logits(self, states, enc, keys_proj) -> Tensor:
        C = self.attn.contexts(states, enc.hidden, keys_proj)
        return ad.add(ad.matmul(ad.concat_cols([states, C]), self.W_out), self.b_out)

    def teacher_decode(self, enc: EncoderOutput, gold_ids) -> SolverOutput:
        if not gold_ids:
            raise MissingGold("teacher-aligned decoding needs a gold sequence")
        k = len(gold_ids)
        X = ad.concat_rows([self.start, ad.gather_rows(self.embed, gold_ids)])
        S = ad.gru_sequence(X, enc.summary, self.gru)
        logits = self._logits(S, enc, self.attn.project_keys(enc.hidden))
        predicted = [_argmax(logits.data[t]) for t in range(k)]
        return SolverOutput(logits, predicted, "teacher", k)

    def free_decode(self, enc: EncoderOutput, max_len: int = MAX_GEN_LEN) -> SolverOutput:
        keys_proj = self.attn.project_keys(enc.hidden)
        s = enc.summary
        x = self.start
        tokens: list[int] = []
        rows = []
        for _ in range(max_len + 1):
            s = ad.gru_sequence(x, s, self.gru)
            rows.append(self._logits(s, enc, keys_proj))
            tok = _argmax(rows[-1].data[0])
            if tok == self.table.eos_id:
                break
            tokens.append(tok)
            if len(tokens) >= max_len:
                break
            x = ad.gather_rows(self.embed, [tok])
        logits = rows[0] if len(rows) == 1 else ad.concat_rows(rows)
        return SolverOutput(logits, tokens, "free", len(tokens))

    def beam_decode(self, enc: EncoderOutput, beam_size: int,
                    max_len: int = MAX_GEN_LEN):
        """Length-normalized beam search; returns (token ids, score) or None."""
        with no_grad():
            keys_proj = self.attn.project_keys(enc.hidden)
            live = [_BeamCand(0.0, (), (enc.summary, self.start))]
            finished = []
            for _ in range(max_len + 1):
                if not live:
                    break
                nxt = []
                for cand in live:
                    s_prev, x = cand.state
                    s = ad.gru_sequence(x, s_prev, self.gru)
                    logits = self._logits(s, enc, keys_proj)
                    logps = _log_softmax_np(logits.data[0])
                    order = np.argsort(-logps, kind="stable")[:beam_size]
                    for tok in order:
                        tok = int(tok)
                        cand2 = _BeamCand(
                            cand.logp + float(logps[tok]),
                            cand.tokens + (tok,),
                            (s, None),
                            done=tok == self.table.eos_id,
                        )
                        nxt.append(cand2)
                live = []
                for cand in _rank(nxt, beam_size):
                    if cand.done:
                        finished.append(cand)
                    elif len(cand.tokens) < max_len:
                        tok = cand.tokens[-1]
                        cand.state = (cand.state[0], ad.gather_rows(self.embed, [tok]))
                        live.append(cand)
            if not finished:
                return None
            # normalized by emitted symbols including EOS
            scored = [(c.logp / len(c.tokens), c.tokens[:-1]) for c in finished]
            best = max(range(len(scored)), key=lambda i: scored[i][0])
            return list(scored[best][1]), scored[best][0]


class TreeDecoder:
    """Goal-driven tree decoder emitting prefix order.

    A stack of goal vectors starts from the encoder summary.  Choosing an
    operator replaces the current goal with gated right- then left-child
    goals (left on top, so generation is prefix order); choosing a leaf
    pops the goal and merges completed subtree embeddings bottom-up, and
    each completed left subtree is injected into the pending right-child
    goal.  EOS never applies here: termination is structural, when the
    stack empties.
    """

    name = "tree"

    def __init__(self, table: DecoderTable, d_h, params, rng, prefix="tree"):
        self.table = table
        self.d_h = d_h
        V = len(table)
        self.embed = params.add(f"{prefix}.embed", (V, d_h), rng)
        self.attn = AdditiveAttention(params, f"{prefix}.attn", d_h, rng)
        self.W_out = params.add(f"{prefix}.W_out", (2 * d_h, V), rng)
        self.b_out = params.zeros(f"{prefix}.b_out", (1, V))
        self.left_goal = GatedTransform(params, f"{prefix}.left", 3 * d_h, d_h, rng)
        self.right_goal = GatedTransform(params, f"{prefix}.right", 3 * d_h, d_h, rng)
        self.merge = GatedTransform(params, f"{prefix}.merge", 3 * d_h, d_h, rng)
        self.inject = GatedTransform(params, f"{prefix}.inject", 2 * d_h, d_h, rng)
        mask = np.zeros((1, V), dtype=np.float32)
        mask[0, table.eos_id] = -1e9
        self._eos_mask = Tensor(mask)
        self._op_ids = {table.token2id[o] for o in expr.OPERATORS}

    def targets_for(self, gold_ids) -> list[int]:
        return list(gold_ids)

    def _step_logits(self, goal, enc, keys_proj):
        c = self.attn.context(goal, enc.hidden, keys_proj)
        logits = ad.add(ad.matmul(ad.concat_cols([goal, c]), self.W_out), self.b_out)
        return ad.add(logits, self._eos_mask), c

    def _transition(self, goals: tuple, embs: tuple, tok_id: int, goal, context):
        """Apply one generated token to the (goal stack, embedding stack)."""
        goals = goals[:-1]
        if tok_id in self._op_ids:
            e_op = ad.gather_rows(self.embed, [tok_id])
            gce = ad.concat_cols([goal, context, e_op])
            right = self.right_goal(gce)
            left = self.left_goal(gce)
            return goals + (right, left), embs + ((e_op, False),)
        cur = ad.gather_rows(self.embed, [tok_id])
        stack = list(embs)
        while stack and stack[-1][1]:
            sub_left = stack.pop()[0]
            e_op = stack.pop()[0]
            cur = self.merge(ad.concat_cols([e_op, sub_left, cur]))
        stack.append((cur, True))
        if goals:
            pending = self.inject(ad.concat_cols([goals[-1], cur]))
            goals = goals[:-1] + (pending,)
        return goals, tuple(stack)

    def teacher_decode(self, enc: EncoderOutput, gold_ids) -> SolverOutput:
        if not gold_ids:
            raise MissingGold("teacher-aligned decoding needs a gold sequence")
        keys_proj = self.attn.project_keys(enc.hidden)
        goals: tuple = (enc.summary,)
        embs: tuple = ()
        rows = []
        predicted = []
        for tok_id in gold_ids:
            if not goals:
                raise LengthMismatch("gold prefix continues past a complete tree")
            goal = goals[-1]
            logits, c = self._step_logits(goal, enc, keys_proj)
            rows.append(logits)
            predicted.append(_argmax(logits.data[0]))
            goals, embs = self._transition(goals, embs, tok_id, goal, c)
        if goals:
            raise LengthMismatch("gold prefix is not a complete expression")
        logits = rows[0] if len(rows) == 1 else ad.concat_rows(rows)
        return SolverOutput(logits, predicted, "teacher", len(gold_ids))

    def free_decode(self, enc: EncoderOutput, max_len: int = MAX_GEN_LEN) -> SolverOutput:
        keys_proj = self.attn.project_keys(enc.hidden)
        goals: tuple = (enc.summary,)
        embs: tuple = ()
        tokens: list[int] = []
        rows = []
        while goals and len(tokens) < max_len:
            goal = goals[-1]
            logits, c = self._step_logits(goal, enc, keys_proj)
            rows.append(logits)
            tok = _argmax(logits.data[0])
            tokens.append(tok)
            goals, embs = self._transition(goals, embs, tok, goal, c)
        logits = rows[0] if len(rows) == 1 else ad.concat_rows(rows)
        return SolverOutput(logits, tokens, "free", len(tokens))

    def beam_decode(self, enc: EncoderOutput, beam_size: int,
                    max_len: int = MAX_GEN_LEN):
        """Length-normalized beam search; returns (token ids, score) or None."""
        with no_grad():
            keys_proj = self.attn.project_keys(enc.hidden)
            live = [_BeamCand(0.0, (), ((enc.summary,), ()))]
            finished = []
            for _ in range(max_len):
                if not live:
                    break
                nxt = []
                for cand in live:
                    goals, embs = cand.state
                    goal = goals[-1]
                    logits, c = self._step_logits(goal, enc, keys_proj)
                    logps = _log_softmax_np(logits.data[0])
                    order = np.argsort(-logps, kind="stable")[:beam_size]
                    for tok in order:
                        tok = int(tok)
                        g2, e2 = self._transition(goals, embs, tok, goal, c)
                        nxt.append(_BeamCand(
                            cand.logp + float(logps[tok]),
                            cand.tokens + (tok,),
                            (g2, e2),
                            done=not g2,
                        ))
                live = []
                for cand in _rank(nxt, beam_size):
                    if cand.done:
                        finished.append(cand)
                    else:
                        live.append(cand)
            if not finished:
                return None
            scored = [(c.logp / len(c.tokens), c.tokens) for c in finished]
            best = max(range(len(scored)), key=lambda i: scored[i][0])
            return list(scored[best][1]), scored[best][0]


def solve_loss(out: SolverOutput, targets) -> Tensor:
    """Mean cross-entropy of the teacher-aligned step logits vs targets."""
    if out.mode != "teacher":
        raise MissingGold("solve_loss needs a teacher-aligned output")
    if out.step_logits.shape[0] != len(targets):
        raise LengthMismatch(
            f"{out.step_logits.shape[0]} steps vs {len(targets)} targets")
    return ad.cross_entropy(out.step_logits, targets)


def beam_search(enc: EncoderOutput, decoder, beam_size: int,
                max_len: int = MAX_GEN_LEN):
    """Decode with the given beam size; (ids, normalized score) or None."""
    if beam_size < 1:
        raise SolverError("beam size must be >= 1")
    return decoder.beam_decode(enc, beam_size, max_len)
