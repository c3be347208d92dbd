"""Reexamining module: expression encoders, quantity rows, number infilling.

During training the expression predicted (or given) for a problem is
encoded, the representation rows at its leaf positions form the quantity
matrix Q, and a bilinear pointer head scores each masked number slot of
the problem against Q's rows plus an explicit NULL class for numbers the
expression never uses.  Nothing here runs at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import expr
from .autodiff import Tensor
from .corpus import MwpRecord, make_infill_labels


class ReexamError(RuntimeError):
    pass


class NotADistribution(ReexamError):
    pass


class StructureMismatch(ReexamError):
    pass


class NoReexamHead(ReexamError):
    pass


@dataclass
class QuantityMatrix:
    """One representation row per expression leaf, in preorder."""

    rows: Tensor                    # [L, d_h]
    leaf_tokens: list[expr.Token]   # aligned with rows
    source: str                     # "gold" | "predicted" | "fused"

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_tokens)


def embed_expression_hard(token_ids, embed_table: Tensor) -> Tensor:
    """Embedding row per token id."""
    return ad.gather_rows(embed_table, token_ids)


def embed_expression_soft(prob_rows: Tensor, embed_table: Tensor) -> Tensor:
    """Probability-weighted average embedding per step.

    Each row must be a distribution over the decoder table; a one-hot row
    reproduces the hard embedding of the corresponding token exactly.
    """
    sums = prob_rows.data.sum(axis=1)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise NotADistribution(f"row sums {sums} are not 1")
    if prob_rows.shape[1] != embed_table.shape[0]:
        raise StructureMismatch(
            f"{prob_rows.shape[1]} classes vs {embed_table.shape[0]} embeddings")
    return ad.matmul(prob_rows, embed_table)


class ExpressionEncoderSeq:
    """Unidirectional GRU over the token embedding sequence."""

    name = "seq"

    def __init__(self, d_h, params, rng, prefix="xseq"):
        self.d_h = d_h
        self.gru = ad.init_gru(params, f"{prefix}.gru", d_h, d_h, rng)

    def encode(self, embeddings: Tensor, tree=None) -> Tensor:
        if embeddings.shape[0] == 0:
            raise ReexamError("cannot encode an empty expression")
        h0 = Tensor(np.zeros((1, self.d_h), dtype=embeddings.dtype))
        return ad.gru_sequence(embeddings, h0, self.gru)


def tree_neighbor_means(tree: expr.ExprTree) -> np.ndarray:
    """Row-normalized neighbor matrix of the tree (parent and children,
    both directions, self excluded); A[i, j] = 1/deg(i) for each neighbor.

    Memoized on the tree node, which is safe because trees are never
    mutated after parsing.
    """
    cached = getattr(tree, "_neighbor_means", None)
    if cached is not None:
        return cached
    nodes = tree.nodes_preorder()
    k = len(nodes)
    A = np.zeros((k, k), dtype=np.float32)
    for node in nodes:
        for child in (node.left, node.right):
            if child is not None:
                A[node.index, child.index] = 1.0
                A[child.index, node.index] = 1.0
    deg = A.sum(axis=1, keepdims=True)
    np.divide(A, deg, out=A, where=deg > 0)
    tree._neighbor_means = A
    return A


class ExpressionEncoderGcn:
    """Two graph-convolution layers over the expression tree.

    Node update: ReLU(h W_self + mean_over_neighbors(h_nbr) W_nbr + b),
    with neighbors being parent and children.  Aggregation is one matmul
    with the constant neighbor-mean matrix of the tree.
    """

    name = "gcn"

    def __init__(self, d_h, params, rng, prefix="xgcn", layers=2):
        self.d_h = d_h
        self.layers = []
        for i in range(layers):
            self.layers.append((
                params.add(f"{prefix}.l{i}.W_self", (d_h, d_h), rng),
                params.add(f"{prefix}.l{i}.W_nbr", (d_h, d_h), rng),
                params.zeros(f"{prefix}.l{i}.b", (1, d_h)),
            ))

    def encode(self, embeddings: Tensor, tree: expr.ExprTree) -> Tensor:
        if tree is None:
            raise StructureMismatch("GCN encoder needs the expression tree")
        if embeddings.shape[0] != tree.n_nodes():
            raise StructureMismatch(
                f"{embeddings.shape[0]} embeddings for {tree.n_nodes()} nodes")
        A = Tensor(tree_neighbor_means(tree).astype(embeddings.dtype))
        h = embeddings
        for W_self, W_nbr, b in self.layers:
            agg = ad.matmul(A, ad.matmul(h, W_nbr))
            h = ad.relu(ad.add(ad.add(ad.matmul(h, W_self), agg), b))
        return h


def extract_quantity_reprs(states: Tensor, tree: expr.ExprTree,
                           source: str) -> QuantityMatrix:
    """Rows of `states` at the tree's leaf positions, preorder."""
    leaves = expr.leaves_in_order(tree)
    positions = [pos for pos, _ in leaves]
    if positions and max(positions) >= states.shape[0]:
        raise StructureMismatch("states shorter than the expression")
    rows = ad.gather_rows(states, positions)
    return QuantityMatrix(rows, [tok for _, tok in leaves], source)


class InfillHead:
    """Bilinear slot-vs-leaf scorer with an explicit NULL class.

    score(slot i, leaf j) = h_i W q_j; the NULL column h_i w_null covers
    numbers the expression does not use.
    """

    def __init__(self, d_h, params, rng, prefix="infill"):
        self.W = params.add(f"{prefix}.W", (d_h, d_h), rng)
        self.w_null = params.add(f"{prefix}.w_null", (d_h, 1), rng)

    def scores(self, slot_states: Tensor, q: QuantityMatrix) -> Tensor:
        hw = ad.matmul(slot_states, self.W)
        leaf_scores = ad.matmul(hw, ad.transpose(q.rows))
        null_scores = ad.matmul(slot_states, self.w_null)
        return ad.concat_cols([leaf_scores, null_scores])


def infill_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over slots; NULL is the last class."""
    if logits.shape[0] != len(labels):
        raise StructureMismatch(f"{logits.shape[0]} slots vs {len(labels)} labels")
    if len(labels) == 0:
        return Tensor(np.zeros((1, 1), dtype=logits.dtype))
    null_class = logits.shape[1] - 1
    targets = [null_class if lab is None else lab for lab in labels]
    return ad.cross_entropy(logits, targets)


def infill_predict(logits: Tensor):
    """Argmax per slot; the NULL class decodes to None."""
    null_class = logits.shape[1] - 1
    out = []
    for row in logits.data:
        j = int(np.argmax(row))
        out.append(None if j == null_class else j)
    return out


def _leaf_value(token: expr.Token, bindings) -> float:
    if token.kind == "slot":
        return bindings[token.index]
    return token.value


def infill_metrics(predictions, records) -> dict:
    """Slot accuracy and perfect-match ratio under value-equality scoring.

    A slot is correct iff both prediction and label are NULL, or both
    point at leaves holding equal values (a commutative leaf swap between
    equal quantities is a perfect fill).  Problems without slots are
    excluded from both denominators.
    """
    n_slots = n_correct = 0
    n_problems = n_perfect = 0
    for preds, rec in zip(predictions, records):
        labels = make_infill_labels(rec)
        if not labels:
            continue
        if len(preds) != len(labels):
            raise StructureMismatch(
                f"{len(preds)} predictions for {len(labels)} slots in {rec.id}")
        leaves = expr.leaves_in_order(rec.gold_tree())
        bindings = rec.bindings()
        ok_all = True
        for p, lab in zip(preds, labels):
            if p is None or lab is None:
                ok = p is None and lab is None
            else:
                ok = (_leaf_value(leaves[p][1], bindings)
                      == _leaf_value(leaves[lab][1], bindings))
            n_slots += 1
            n_correct += ok
            ok_all &= ok
        n_problems += 1
        n_perfect += ok_all
    return {
        "acc": n_correct / n_slots if n_slots else 0.0,
        "pmr": n_perfect / n_problems if n_problems else 0.0,
    }


class ReexamModule:
    """Expression embedding table, expression encoder, and infill head."""

    def __init__(self, table, d_h, params, rng, encoder_kind="gcn", prefix="rx"):
        self.table = table
        self.d_h = d_h
        self.embed = params.add(f"{prefix}.embed", (len(table), d_h), rng)
        if encoder_kind == "seq":
            self.encoder = ExpressionEncoderSeq(d_h, params, rng, f"{prefix}.seq")
        elif encoder_kind == "gcn":
            self.encoder = ExpressionEncoderGcn(d_h, params, rng, f"{prefix}.gcn")
        else:
            raise ReexamError(f"unknown expression encoder {encoder_kind!r}")
        self.head = InfillHead(d_h, params, rng, f"{prefix}.head")

    def quantity_from_ids(self, token_ids, tree, source="gold") -> QuantityMatrix:
        E = embed_expression_hard(token_ids, self.embed)
        states = self.encoder.encode(E, tree)
        return extract_quantity_reprs(states, tree, source)

    def quantity_from_probs(self, prob_rows: Tensor, tree) -> QuantityMatrix:
        E = embed_expression_soft(prob_rows, self.embed)
        states = self.encoder.encode(E, tree)
        return extract_quantity_reprs(states, tree, "predicted")
