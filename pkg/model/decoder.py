"""
Bottom-up Beam Decoder
Leaf beam initialization, frontier construction over a fixed enumeration
order, tree scoring and top-K pruning with KEEP-balanced layers. Boosters
(case-based re-scorers) plug into every layer through `FrontierBooster`.
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from core.grammar import (
    NULL_TREE, SYMBOL_IDS, SYMBOLS, T_QUERY, OperatorVocab, QueryTree, balance_tree,
    collapse_keep, result_type, subtrees_by_height, to_sexpr, tree_type,
)
from model.autodiff import (
    Tensor, as_tensor, concat, getitem, log_softmax, matmul, no_grad, parameter,
    relu, stack, tsum, where,
)
from model.encoder import EncodedInput
from model.layers import Embedding, FeedForward, Module, MultiHeadAttention, TransformerStack
from utils.error_handler import ContractViolation, DimensionError

logger = logging.getLogger(__name__)


@lru_cache(maxsize=64)
def frontier_layout(beam_size: int, unary_ops: Tuple[int, ...],
                    binary_ops: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    (op ids, left indices, right indices) of every frontier slot.

    Unary block first, then binary; each sorted by op id, then child indices.
    Right index is -1 for unary slots.
    """
    k = beam_size
    ops, left, right = [], [], []
    for op in unary_ops:
        ops.extend([op] * k)
        left.extend(range(k))
        right.extend([-1] * k)
    grid_l, grid_r = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    for op in binary_ops:
        ops.extend([op] * (k * k))
        left.extend(grid_l.reshape(-1).tolist())
        right.extend(grid_r.reshape(-1).tolist())
    arrays = (np.asarray(ops, dtype=np.int64), np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64))
    for a in arrays:
        a.setflags(write=False)
    return arrays


def frontier_index(vocab: OperatorVocab, beam_size: int, op_id: int, left: int, right: int = -1) -> int:
    """Slot of (op, left, right) in the frontier enumeration"""
    k = beam_size
    if right < 0:
        return vocab.unary_ops.index(op_id) * k + left
    return len(vocab.unary_ops) * k + vocab.binary_ops.index(op_id) * k * k + left * k + right


@dataclass
class Beam:
    """K entries of one height; pads carry the null tree and score -inf"""
    trees: List[QueryTree]
    types: List[Optional[str]]
    z: Tensor
    zc: Tensor
    scores: np.ndarray
    probs: np.ndarray

    @property
    def size(self) -> int:
        return len(self.trees)

    @property
    def real(self) -> np.ndarray:
        return np.asarray([t is not NULL_TREE for t in self.trees])

    @property
    def root_ops(self) -> np.ndarray:
        return np.asarray([t.op_id for t in self.trees], dtype=np.int64)

    def index_of(self, tree: QueryTree) -> int:
        for idx, candidate in enumerate(self.trees):
            if candidate is not NULL_TREE and candidate == tree:
                return idx
        return -1


@dataclass
class Frontier:
    """
    Scored candidates of one decoding step.

    At the leaf step, candidates are schema elements: `ops` holds leaf kinds,
    `left` the element index, and `leaf_z`/`leaf_zc` their embeddings.
    """
    step: int
    ops: np.ndarray
    left: np.ndarray
    right: np.ndarray
    mask: np.ndarray
    scores: Tensor
    leaf_trees: Optional[List[QueryTree]] = None
    leaf_z: Optional[Tensor] = None
    leaf_zc: Optional[Tensor] = None

    @property
    def size(self) -> int:
        return len(self.ops)

    @property
    def is_leaf_step(self) -> bool:
        return self.leaf_trees is not None

    def tree(self, idx: int, beam: Optional[Beam]) -> QueryTree:
        if self.is_leaf_step:
            return self.leaf_trees[idx]
        op = SYMBOLS[int(self.ops[idx])]
        left = beam.trees[int(self.left[idx])]
        r = int(self.right[idx])
        return QueryTree(op, left, beam.trees[r] if r >= 0 else None)


@dataclass
class StepView:
    """What a booster sees at one decoding step"""
    encoded: EncodedInput
    step: int
    final: bool
    beam: Optional[Beam]
    frontier: Frontier
    log_p_theta: Tensor
    p_theta: np.ndarray
    gold_indices: List[int] = field(default_factory=list)


class FrontierBooster(Protocol):
    def rescore(self, view: StepView) -> np.ndarray:
        """Fused distribution over the frontier (same length as p_theta)"""
        ...


@dataclass
class DecodedTree:
    tree: QueryTree
    prob: float
    score: float


@dataclass
class BeamRun:
    beams: List[Beam]
    loss_terms: List[Tensor]
    trace: List[Dict[str, Any]]

    def ranked(self) -> List[DecodedTree]:
        final = self.beams[-1]
        out = [DecodedTree(collapse_keep(t), float(p), float(s))
               for t, p, s in zip(final.trees, final.probs, final.scores) if t is not NULL_TREE]
        return sorted(out, key=lambda d: -d.prob)


def top_k(p: np.ndarray, admissible: np.ndarray, k: int) -> List[int]:
    """Indices of the k best admissible slots; stable by (p desc, index asc)"""
    candidates = np.flatnonzero(admissible)
    if len(candidates) == 0:
        return []
    order = np.lexsort((candidates, -p[candidates]))
    return [int(i) for i in candidates[order[:k]]]


class SmbopDecoder(Module):
    """Tree embedding, grounding, frontier scoring and the layered beam loop"""

    def __init__(self, dim: int, heads: int, ff_dim: int, tree_blocks: int, rng: np.random.Generator,
                 vocab: Optional[OperatorVocab] = None):
        self.dim = dim
        self.vocab = vocab or OperatorVocab.default()
        self.vocab.validate()
        self.op_embedding = Embedding(len(SYMBOLS), dim, rng)
        self.tree_encoder = TransformerStack(tree_blocks, dim, heads, ff_dim, rng)
        self.cross_attention = MultiHeadAttention(dim, heads, rng)
        self.score_ff = FeedForward(4 * dim, ff_dim, dim, rng)
        self.leaf_ff = FeedForward(2 * dim, ff_dim, dim, rng)
        self.null_z = parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim))
        self.null_zc = parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim))

    # -- representations -------------------------------------------------

    def embed_tree(self, op_ids: Sequence[int], left_z: Tensor, right_z: Optional[Tensor]) -> Tensor:
        """z = TX([w_op, z_left, z_right or null]) read at position 0, for N trees at once"""
        n = len(op_ids)
        ops = self.op_embedding(op_ids)
        if right_z is None:
            right_z = self._repeat(self.null_z, n)
        return self.tree_encoder.readout([ops, left_z, right_z])

    def ground_tree(self, z: Tensor, encoded: EncodedInput) -> Tensor:
        """z' = cross-attention of each z over the utterance token vectors"""
        if z.shape[-1] != encoded.dim:
            raise DimensionError(f"tree dim {z.shape[-1]} vs encoder dim {encoded.dim}")
        return self.cross_attention(z, encoded.token_vecs)

    @staticmethod
    def _repeat(vec: Tensor, n: int) -> Tensor:
        return stack([vec] * n, axis=0)

    # -- scoring --------------------------------------------------------------

    def leaf_frontier(self, encoded: EncodedInput) -> Frontier:
        z = encoded.schema_vecs
        zc = self.ground_tree(z, encoded)
        kinds = np.asarray([SYMBOL_IDS[e.kind] for e in encoded.elements], dtype=np.int64)
        hidden = self.leaf_ff(concat([z, zc], axis=-1))
        scores = tsum(hidden * self.op_embedding(kinds), axis=-1)
        m = len(encoded.elements)
        return Frontier(step=0, ops=kinds, left=np.arange(m), right=-np.ones(m, dtype=np.int64),
                        mask=np.ones(m, dtype=bool), scores=scores,
                        leaf_trees=[e.leaf() for e in encoded.elements], leaf_z=z, leaf_zc=zc)

    def score_theta(self, op_id: int, left: Tuple[Tensor, Tensor],
                    right: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        """s = w_op . FF([z_l; z'_l; z_r; z'_r]) for one candidate"""
        rz, rzc = right if right is not None else (self.null_z, self.null_zc)
        features = concat([left[0], left[1], rz, rzc], axis=-1)
        return tsum(self.score_ff(features) * self.op_embedding.table[op_id])

    def admissibility(self, beam: Beam, final: bool, final_query_only: bool) -> np.ndarray:
        ops, left, right = frontier_layout(beam.size, self.vocab.unary_ops, self.vocab.binary_ops)
        mask = np.zeros(len(ops), dtype=bool)
        for i, (op, l, r) in enumerate(zip(ops, left, right)):
            lt = beam.types[l]
            rt = beam.types[r] if r >= 0 else None
            if lt is None or (r >= 0 and rt is None):
                continue
            out = result_type(SYMBOLS[op], lt, rt)
            if out is None or (final and final_query_only and out != T_QUERY):
                continue
            mask[i] = True
        return mask

    def frontier(self, beam: Beam, step: int, final: bool, final_query_only: bool) -> Frontier:
        """
        Score every frontier slot in one pass.

        The first FF layer is split into left and right halves so the K x K
        binary grid is a broadcast sum rather than K^2 separate calls.
        """
        k, d = beam.size, self.dim
        ops, left, right = frontier_layout(k, self.vocab.unary_ops, self.vocab.binary_ops)
        mask = self.admissibility(beam, final, final_query_only)

        inner = self.score_ff.inner
        w_left = getitem(inner.weight, slice(0, 2 * d))
        w_right = getitem(inner.weight, slice(2 * d, 4 * d))
        pair = concat([beam.z, beam.zc], axis=-1)
        a = matmul(pair, w_left)
        b = matmul(pair, w_right)
        null_b = matmul(concat([self.null_z, self.null_zc], axis=-1), w_right)

        pieces = []
        u = len(self.vocab.unary_ops)
        if u:
            hidden_u = self.score_ff.outer(relu(a + null_b + inner.bias))
            w_u = self.op_embedding(list(self.vocab.unary_ops))
            pieces.append(matmul(w_u, hidden_u.transpose()).reshape(u * k))
        nb = len(self.vocab.binary_ops)
        if nb:
            grid = a.reshape(k, 1, -1) + b.reshape(1, k, -1) + inner.bias
            hidden_b = self.score_ff.outer(relu(grid)).reshape(k * k, d)
            w_b = self.op_embedding(list(self.vocab.binary_ops))
            pieces.append(matmul(w_b, hidden_b.transpose()).reshape(nb * k * k))
        scores = where(mask, concat(pieces, axis=0), -np.inf)
        return Frontier(step=step, ops=ops, left=left, right=right, mask=mask, scores=scores)

    # -- beam loop -------------------------------------------------------------

    def _select_leaves(self, frontier: Frontier, chosen: List[int], p: np.ndarray, k: int) -> Beam:
        idx = np.asarray(chosen, dtype=np.int64)
        trees = [frontier.leaf_trees[i] for i in chosen]
        z = getitem(frontier.leaf_z, idx) if chosen else None
        zc = getitem(frontier.leaf_zc, idx) if chosen else None
        s = frontier.scores.data[idx] if chosen else np.zeros(0)
        return self._pad(trees, z, zc, s, p[idx] if chosen else np.zeros(0), k)

    def _select_nodes(self, beam: Beam, frontier: Frontier, chosen: List[int], p: np.ndarray,
                      encoded: EncodedInput, k: int) -> Beam:
        if not chosen:
            return self._pad([], None, None, np.zeros(0), np.zeros(0), k)
        idx = np.asarray(chosen, dtype=np.int64)
        ops = frontier.ops[idx]
        lefts = frontier.left[idx]
        rights = frontier.right[idx]
        left_z = getitem(beam.z, lefts)
        # unary rows take the null vector in the right slot
        right_rows = [getitem(beam.z, int(r)) if r >= 0 else self.null_z for r in rights]
        z = self.embed_tree(ops.tolist(), left_z, stack(right_rows, axis=0))
        zc = self.ground_tree(z, encoded)
        trees = [frontier.tree(int(i), beam) for i in chosen]
        return self._pad(trees, z, zc, frontier.scores.data[idx], p[idx], k)

    def _pad(self, trees: List[QueryTree], z: Optional[Tensor], zc: Optional[Tensor],
             scores: np.ndarray, probs: np.ndarray, k: int) -> Beam:
        missing = k - len(trees)
        if missing > 0:
            pad_z, pad_zc = self._repeat(self.null_z, missing), self._repeat(self.null_zc, missing)
            z = pad_z if z is None else concat([z, pad_z], axis=0)
            zc = pad_zc if zc is None else concat([zc, pad_zc], axis=0)
            trees = list(trees) + [NULL_TREE] * missing
            scores = np.concatenate([scores, np.full(missing, -np.inf)])
            probs = np.concatenate([probs, np.zeros(missing)])
        types = [None if t is NULL_TREE else tree_type(t) for t in trees]
        return Beam(trees=trees, types=types, z=z, zc=zc, scores=np.asarray(scores, dtype=np.float64),
                    probs=np.asarray(probs, dtype=np.float64))

    def gold_slots(self, frontier: Frontier, beam: Optional[Beam], gold_level: Sequence[QueryTree],
                   encoded: EncodedInput) -> List[int]:
        """Frontier slots of this height's gold subtrees; raises if one is unbuildable"""
        slots = []
        k = beam.size if beam is not None else 0
        for g in gold_level:
            if frontier.is_leaf_step:
                slot = encoded.element_index(g)
                if slot is None:
                    raise ContractViolation(f"gold leaf {to_sexpr(g)} is not a schema candidate")
            else:
                l = beam.index_of(g.left)
                r = beam.index_of(g.right) if g.right is not None else -1
                if l < 0 or (g.right is not None and r < 0):
                    raise ContractViolation(f"gold subtree {to_sexpr(g)} has a child missing from the beam")
                slot = frontier_index(self.vocab, k, g.op_id, l, r)
            if not frontier.mask[slot]:
                raise ContractViolation(f"gold subtree {to_sexpr(g)} is inadmissible at step {frontier.step}")
            slots.append(slot)
        return slots

    @staticmethod
    def force_gold(chosen: List[int], gold: Sequence[int], p: np.ndarray, k: int) -> List[int]:
        """Insert missing gold slots, evicting the lowest-ranked non-gold entries"""
        chosen = list(chosen)
        gold_set = set(gold)
        for slot in gold:
            if slot in chosen:
                continue
            if len(chosen) < k:
                chosen.append(slot)
                continue
            for pos in range(len(chosen) - 1, -1, -1):
                if chosen[pos] not in gold_set:
                    chosen[pos] = slot
                    break
            else:
                raise ContractViolation(f"{len(gold_set)} gold subtrees do not fit a beam of {k}")
        return sorted(chosen, key=lambda i: (-p[i], i))

    def run(self, encoded: EncodedInput, beam_size: int, max_height: int,
            booster: Optional[FrontierBooster] = None, gold: Optional[QueryTree] = None,
            collect_loss: bool = False, final_query_only: bool = True, trace: bool = False,
            theta_grad: bool = True) -> BeamRun:
        """
        Run the layered beam from leaves to height `max_height`.

        Args:
            gold: Unbalanced gold tree; enables teacher forcing
            collect_loss: Collect -log p_theta of gold slots per step
            theta_grad: When False the decoder's own computations are not recorded
        """
        k, steps = beam_size, max_height
        levels = None
        if gold is not None:
            levels = subtrees_by_height(balance_tree(gold, steps))
        record = nullcontext if theta_grad else no_grad
        run = BeamRun(beams=[], loss_terms=[], trace=[])
        beam: Optional[Beam] = None

        for step in range(steps + 1):
            final = step == steps
            with record():
                if step == 0:
                    frontier = self.leaf_frontier(encoded)
                else:
                    frontier = self.frontier(beam, step, final, final_query_only)
                log_p = log_softmax(frontier.scores, axis=-1)
            p_theta = np.exp(log_p.data)
            gold_slots = self.gold_slots(frontier, beam, levels[step], encoded) if levels is not None else []
            if collect_loss:
                for slot in gold_slots:
                    run.loss_terms.append(-getitem(log_p, slot))
            view = StepView(encoded, step, final, beam, frontier, log_p, p_theta, gold_slots)
            p = booster.rescore(view) if booster is not None else p_theta
            if len(p) != frontier.size:
                raise DimensionError(f"booster returned {len(p)} probabilities for {frontier.size} slots")
            chosen = top_k(p, frontier.mask, k)
            if gold_slots:
                chosen = self.force_gold(chosen, gold_slots, p, k)
            with record():
                if step == 0:
                    beam = self._select_leaves(frontier, chosen, p, k)
                else:
                    beam = self._select_nodes(beam, frontier, chosen, p, encoded, k)
            run.beams.append(beam)
            if trace:
                run.trace.append({
                    "step": step,
                    "frontier_size": frontier.size,
                    "trees": [to_sexpr(t) for t in beam.trees],
                    "s_theta": [_finite(s) for s in beam.scores],
                    "p": [float(x) for x in beam.probs],
                })
        return run

    def decode(self, encoded: EncodedInput, beam_size: int, max_height: int,
               booster: Optional[FrontierBooster] = None, final_query_only: bool = True,
               trace: bool = False) -> Tuple[List[DecodedTree], List[Dict[str, Any]]]:
        """Ranked KEEP-collapsed trees of the final beam (best first) and the optional trace"""
        with no_grad():
            run = self.run(encoded, beam_size, max_height, booster=booster,
                           final_query_only=final_query_only, trace=trace)
        return run.ranked(), run.trace

    def loss_theta(self, encoded: EncodedInput, gold: QueryTree, beam_size: int, max_height: int,
                   final_query_only: bool = True) -> Tensor:
        """Sum over steps of -log p_theta for every gold subtree of that height"""
        run = self.run(encoded, beam_size, max_height, gold=gold, collect_loss=True,
                       final_query_only=final_query_only)
        return _sum_terms(run.loss_terms)

    # -- gold trees ------------------------------------------------------------

    def encode_tree_nodes(self, encoded: EncodedInput, balanced: QueryTree) -> Dict[QueryTree, Tuple[Tensor, Tensor]]:
        """(z, z') for every distinct subtree of a balanced tree, bottom-up by height"""
        reps: Dict[QueryTree, Tuple[Tensor, Tensor]] = {}
        for height, level in enumerate(subtrees_by_height(balanced)):
            if not level:
                continue
            if height == 0:
                rows = []
                for leaf in level:
                    idx = encoded.element_index(leaf)
                    if idx is None:
                        raise ContractViolation(f"leaf {to_sexpr(leaf)} is not a schema element")
                    rows.append(idx)
                z = getitem(encoded.schema_vecs, np.asarray(rows, dtype=np.int64))
            else:
                left_z = stack([reps[t.left][0] for t in level], axis=0)
                right_z = stack([reps[t.right][0] if t.right is not None else self.null_z for t in level], axis=0)
                z = self.embed_tree([t.op_id for t in level], left_z, right_z)
            zc = self.ground_tree(z, encoded)
            for i, tree in enumerate(level):
                reps[tree] = (getitem(z, i), getitem(zc, i))
        return reps


def _finite(x: float) -> Optional[float]:
    return float(x) if np.isfinite(x) else None


def _sum_terms(terms: List[Tensor]) -> Tensor:
    if not terms:
        return as_tensor(0.0)
    return tsum(stack(terms, axis=0))
