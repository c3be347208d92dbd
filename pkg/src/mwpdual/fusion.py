"""Scheduled fusion: decay schedules, quantity mixing, and the joint step.

Training mixes quantity rows from the gold expression with rows built
from the decoder's own (teacher-aligned) step distributions via a
Gumbel-softmax bridge: Q = eps * Q_gold + (1 - eps) * Q_pred, with eps
decaying exponentially per optimizer step.  At eps = 1 the predicted
branch is skipped outright, so that endpoint is bit-identical to plain
teacher forcing; at eps < 1 the infilling loss reaches the decoder's
parameters through the soft bridge, which is the whole point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import DecoderTable, MwpRecord, Vocab, make_infill_labels, mask_numbers
from .reexam import NoReexamHead, QuantityMatrix, ReexamModule, infill_loss
from .solver import ProblemEncoder, solve_loss

MODES = ("solve_only", "teacher_forcing", "psedual")


@dataclass(frozen=True)
class FusionSchedule:
    """eps(t) = eps0 * decay^t, strictly decreasing in the step counter."""

    eps0: float = 1.0
    decay: float = 0.99999

    def at(self, t: int) -> float:
        if t < 0:
            raise ValueError("step counter must be >= 0")
        return self.eps0 * self.decay ** t


@dataclass(frozen=True)
class GumbelSchedule:
    """tau(t) = max(floor, tau0 * exp(-rate * t)), updated every `every` steps."""

    tau0: float = 1.0
    floor: float = 0.5
    rate: float = 3e-5
    every: int = 100

    def at(self, t: int) -> float:
        if t < 0:
            raise ValueError("step counter must be >= 0")
        t_held = self.every * (t // self.every)
        return max(self.floor, self.tau0 * math.exp(-self.rate * t_held))


def epsilon_at(schedule: FusionSchedule, t: int) -> float:
    return schedule.at(t)


def tau_at(schedule: GumbelSchedule, t: int) -> float:
    return schedule.at(t)


def fuse(q_g: QuantityMatrix, q_p: QuantityMatrix, eps: float) -> QuantityMatrix:
    """Convex combination eps * Q_g + (1 - eps) * Q_p, row-aligned.

    The endpoints short-circuit to the surviving operand so eps = 1 (or 0)
    is exactly, bitwise, the gold (or predicted) matrix; the vanished
    branch carries zero gradient either way.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must be in [0, 1], got {eps}")
    if q_g.rows.shape != q_p.rows.shape or q_g.n_leaves != q_p.n_leaves:
        raise ad.ShapeMismatch(
            f"quantity shapes {q_g.rows.shape} vs {q_p.rows.shape}")
    if eps >= 1.0:
        rows = q_g.rows
    elif eps <= 0.0:
        rows = q_p.rows
    else:
        rows = ad.add(ad.scale(q_g.rows, eps), ad.scale(q_p.rows, 1.0 - eps))
    return QuantityMatrix(rows, list(q_g.leaf_tokens), "fused")


def gumbel_noise_matrix(rng: np.random.Generator, k: int, width: int) -> np.ndarray:
    """k rows of standard Gumbel noise, drawn in one call from the run RNG."""
    u = np.clip(rng.random((k, width)), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def build_qp(expr_logits: Tensor, tree, tau: float, noise,
             reexam: ReexamModule) -> QuantityMatrix:
    """Quantity rows from the decoder's step logits via the soft bridge.

    Each teacher-aligned step distribution is relaxed with Gumbel-softmax,
    soft-embedded, and encoded with the gold tree structure, so the result
    is row-aligned with the gold quantity matrix by construction.
    """
    k = expr_logits.shape[0]
    if k != tree.n_nodes():
        raise ad.ShapeMismatch(
            f"{k} logit rows for a {tree.n_nodes()}-token expression")
    if noise is not None and np.asarray(noise).shape != expr_logits.shape:
        raise ad.ShapeMismatch("noise shape must match the logits")
    rows = []
    for t in range(k):
        row_noise = None if noise is None else noise[t]
        rows.append(ad.gumbel_softmax(
            ad.slice_rows(expr_logits, t, t + 1), tau, row_noise))
    probs = rows[0] if k == 1 else ad.concat_rows(rows)
    return reexam.quantity_from_probs(probs, tree)


@dataclass
class TrainContext:
    """Everything one training run mutates: model, optimizer, counters, RNG."""

    vocab: Vocab
    table: DecoderTable
    encoder: ProblemEncoder
    decoder: object
    reexam: ReexamModule | None
    params: ad.ParameterSet
    adam: ad.Adam
    fusion: FusionSchedule = field(default_factory=FusionSchedule)
    gumbel: GumbelSchedule = field(default_factory=GumbelSchedule)
    lam: float = 1.0
    rng: np.random.Generator = None
    t: int = 0
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class _RecordBundle:
    """Static per-record preprocessing, computed once per run."""

    ids: list[int]
    gold_ids: list[int]
    tree: object
    labels: list
    masked_ids: list[int]
    slot_positions: list[int]


def _bundle(ctx: TrainContext, record: MwpRecord) -> _RecordBundle:
    bundle = ctx.cache.get(record.id)
    if bundle is None:
        masked = mask_numbers(record)
        bundle = _RecordBundle(
            ids=ctx.vocab.encode(record.norm_tokens),
            gold_ids=ctx.table.encode_prefix(record.gold_prefix),
            tree=record.gold_tree(),
            labels=make_infill_labels(record),
            masked_ids=ctx.vocab.encode(masked.masked_tokens),
            slot_positions=list(masked.slot_positions),
        )
        ctx.cache[record.id] = bundle
    return bundle


def record_losses(ctx: TrainContext, record: MwpRecord, mode: str,
                  eps=None, tau=None, noise="draw"):
    """Per-record (solve loss, infill loss or None) as live tensors.

    eps/tau default to the schedules at ctx.t; tests may pin them.  noise
    is "draw" (fresh Gumbel rows from ctx.rng), None (zeros), or an
    explicit array.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    bundle = _bundle(ctx, record)
    enc = ctx.encoder.encode(bundle.ids)
    gold_ids = bundle.gold_ids
    out = ctx.decoder.teacher_decode(enc, gold_ids)
    l_solve = solve_loss(out, ctx.decoder.targets_for(gold_ids))
    if mode == "solve_only":
        return l_solve, None
    if ctx.reexam is None:
        raise NoReexamHead(f"mode {mode!r} needs a reexamining module")

    tree = bundle.tree
    q_g = ctx.reexam.quantity_from_ids(gold_ids, tree, source="gold")
    if mode == "psedual":
        eps = ctx.fusion.at(ctx.t) if eps is None else eps
    else:
        eps = 1.0
    if eps < 1.0:
        tau = ctx.gumbel.at(ctx.t) if tau is None else tau
        expr_logits = ad.slice_rows(out.step_logits, 0, out.expr_len)
        if isinstance(noise, str) and noise == "draw":
            noise = gumbel_noise_matrix(ctx.rng, out.expr_len, len(ctx.table))
        q_p = build_qp(expr_logits, tree, tau, noise, ctx.reexam)
        q = fuse(q_g, q_p, eps)
    else:
        q = q_g

    if not bundle.slot_positions:
        return l_solve, Tensor(np.zeros((1, 1), dtype=l_solve.dtype))
    m_enc = ctx.encoder.encode(bundle.masked_ids)
    slot_states = ad.gather_rows(m_enc.hidden, bundle.slot_positions)
    logits = ctx.reexam.head.scores(slot_states, q)
    l_infill = infill_loss(logits, bundle.labels)
    return l_solve, l_infill


def joint_step(ctx: TrainContext, records, mode: str) -> dict:
    """One optimizer step on a batch: L_total = L_solve + lam * L_infill."""
    if not records:
        raise ValueError("empty batch")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    solves = []
    infills = []
    for rec in records:
        l_s, l_i = record_losses(ctx, rec, mode)
        solves.append(l_s)
        if l_i is not None:
            infills.append(l_i)

    inv = 1.0 / len(records)
    l_solve = solves[0] if len(solves) == 1 else _sum(solves)
    l_solve = ad.scale(l_solve, inv) if len(solves) > 1 else l_solve
    if infills:
        l_infill = infills[0] if len(infills) == 1 else ad.scale(_sum(infills), inv)
        l_total = ad.add(l_solve, ad.scale(l_infill, ctx.lam))
        infill_val = l_infill.item()
    else:
        l_infill = None
        l_total = l_solve
        infill_val = 0.0

    ctx.adam.zero_grad()
    ad.backward(l_total)
    ctx.adam.step()
    ctx.t += 1
    return {"solve": l_solve.item(), "infill": infill_val, "total": l_total.item()}


def _sum(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return acc
