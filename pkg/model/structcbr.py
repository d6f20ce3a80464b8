"""
Structured Case-Based Reasoning
Joint tree representations, the case memory, whole-tree and compositional
similarities, the logsumexp boost over a frontier and its fusion with the
decoder's distribution. The CBR parameters (phi) are disjoint from theta.
"""

import logging
import math
import threading
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.config_loader import ModelConfig
from core.grammar import (
    NULL, SYMBOL_IDS, SYMBOLS, QueryTree, balance_tree, enumerate_subtrees, parse_sexpr, to_sexpr,
)
from data.dataset_io import Corpus
from data.schema import Example
from model.autodiff import (
    Tensor, as_tensor, broadcast_to, concat, getitem, l2_distance, log_softmax, logsumexp,
    no_grad, parameter, stack, tsum, where,
)
from model.decoder import Frontier, SmbopDecoder, StepView, top_k
from model.encoder import EncodedInput
from model.layers import Embedding, Module, TransformerStack
from model.parser import TextToQueryParser
from utils.checkpoint import load_parameters, parameter_hash, read_checkpoint, save_parameters
from utils.error_handler import ContractViolation, DimensionError, HeightOverflowError
from utils.file_utils import hash_bytes

logger = logging.getLogger(__name__)

LOG_HALF = math.log(0.5)


class RepresentationCounter:
    """Counts joint-representation rows computed per decoding step"""

    def __init__(self):
        self._lock = threading.Lock()
        self.per_step: Dict[int, List[int]] = {}

    def add(self, step: int, rows: int) -> None:
        with self._lock:
            self.per_step.setdefault(step, []).append(int(rows))

    def reset(self) -> None:
        with self._lock:
            self.per_step = {}

    def mean_per_step(self, skip_leaf_step: bool = True) -> float:
        with self._lock:
            counts = [c for step, rows in self.per_step.items() if not (skip_leaf_step and step == 0)
                      for c in rows]
        return float(np.mean(counts)) if counts else 0.0

    def total(self) -> int:
        with self._lock:
            return int(sum(sum(rows) for rows in self.per_step.values()))


class CbrModule(Module):
    """
    G_phi(z, x) = TX_phi([z, z', w_op, pool(x)]) read at position 0.

    With a shared operator table, theta's embeddings are read as constants so
    no gradient reaches theta.
    """

    def __init__(self, decoder: SmbopDecoder, dim: int, heads: int, ff_dim: int, blocks: int,
                 rng: np.random.Generator, share_op_embedding: bool = True):
        self.dim = dim
        self.share_op_embedding = share_op_embedding
        self.transformer = TransformerStack(blocks, dim, heads, ff_dim, rng)
        self.null_rep = parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim))
        if not share_op_embedding:
            self.op_embedding = Embedding(len(SYMBOLS), dim, rng)
        self._theta_ops = decoder.op_embedding.table.data

    @classmethod
    def from_config(cls, decoder: SmbopDecoder, config: ModelConfig, seed: int) -> "CbrModule":
        rng = np.random.default_rng(seed)
        return cls(decoder, config.hidden_size, config.attention_heads, config.feedforward_dim,
                   config.cbr_blocks, rng, config.share_op_embedding)

    def op_vectors(self, op_ids: Sequence[int]) -> Tensor:
        ids = np.asarray(op_ids, dtype=np.int64)
        if self.share_op_embedding:
            return as_tensor(self._theta_ops[ids])
        return self.op_embedding(ids)

    def joint_rep(self, z: Tensor, zc: Tensor, op_ids: Sequence[int], pooled: Tensor) -> Tensor:
        """Joint representations of N trees, shape (N, d)"""
        n = len(op_ids)
        if z.shape != (n, self.dim) or zc.shape != (n, self.dim):
            raise DimensionError(f"joint_rep expects ({n}, {self.dim}) inputs, got {z.shape} and {zc.shape}")
        context = broadcast_to(pooled.reshape(1, self.dim), (n, self.dim))
        return self.transformer.readout([z, zc, self.op_vectors(op_ids), context])

    def snapshot(self, parser: TextToQueryParser) -> str:
        """Hash of both parameter banks; memories built under another snapshot are stale"""
        return hash_bytes(parser.parameter_hash().encode("ascii"),
                          parameter_hash(self.named_parameters()).encode("ascii"))

    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> str:
        header = {"share_op_embedding": self.share_op_embedding}
        header.update(meta or {})
        return save_parameters(path, self.named_parameters(), header)

    @classmethod
    def load(cls, path: str, decoder: SmbopDecoder, config: ModelConfig,
             producer: str = "train-cbr") -> "CbrModule":
        header = read_checkpoint(path, producer=producer).get("meta", {})
        share = bool(header.get("share_op_embedding", config.share_op_embedding))
        module = cls(decoder, config.hidden_size, config.attention_heads, config.feedforward_dim,
                     config.cbr_blocks, np.random.default_rng(0), share)
        load_parameters(path, module.named_parameters(), producer=producer)
        return module


# ---------------------------------------------------------------------------
# Case memory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MemoryEntry:
    """One node of a balanced case tree; fields index rows of the memory's rep table"""
    root_op: int
    subtree: QueryTree
    case_id: str
    utterance: str
    own: int
    left: int
    right: int = -1

    @property
    def is_binary(self) -> bool:
        return self.right >= 0


@dataclass
class OpTable:
    entries: List[int]
    own: Tensor
    left: Tensor
    right: Optional[Tensor]

    @property
    def count(self) -> int:
        return len(self.entries)


@dataclass
class CaseBundle:
    """Representations of one case's nodes before they are pooled into a memory"""
    case_id: str
    utterance: str
    nodes: List[QueryTree]
    reps: Tensor
    rows: Dict[QueryTree, int]
    order: List[QueryTree]


class CaseMemory:
    """Entries of all case subtrees grouped by root operator; read-only after build"""

    def __init__(self, entries: List[MemoryEntry], reps: Optional[Tensor], snapshot: str):
        self.entries = entries
        self.reps = reps
        self.snapshot = snapshot
        self.built = True
        self.tables: Dict[int, OpTable] = {}
        by_op: Dict[int, List[int]] = {}
        for idx, entry in enumerate(entries):
            by_op.setdefault(entry.root_op, []).append(idx)
        for op, idxs in sorted(by_op.items()):
            chosen = [entries[i] for i in idxs]
            own = getitem(reps, np.asarray([e.own for e in chosen], dtype=np.int64))
            left = getitem(reps, np.asarray([e.left for e in chosen], dtype=np.int64))
            right = None
            if chosen[0].is_binary:
                right = getitem(reps, np.asarray([e.right for e in chosen], dtype=np.int64))
            self.tables[op] = OpTable(idxs, own, left, right)

    def __len__(self) -> int:
        return len(self.entries)

    def table(self, op_id: int) -> Optional[OpTable]:
        return self.tables.get(int(op_id))

    def entry_vectors(self, idx: int) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        entry = self.entries[idx]
        data = self.reps.data
        return data[entry.own], data[entry.left], data[entry.right] if entry.is_binary else None

    def ensure_fresh(self, snapshot: str) -> None:
        if snapshot != self.snapshot:
            raise ContractViolation("case memory was built under different parameters; rebuild it")

    @classmethod
    def from_bundles(cls, bundles: Sequence[CaseBundle], snapshot: str) -> "CaseMemory":
        entries: List[MemoryEntry] = []
        tables: List[Tensor] = []
        offset = 0
        for bundle in bundles:
            rows = bundle.rows
            for node in bundle.order:
                own = offset + rows[node]
                if node.is_leaf:
                    left, right = own, -1
                else:
                    left = offset + rows[node.left]
                    right = offset + rows[node.right] if node.right is not None else -1
                entries.append(MemoryEntry(node.op_id, node, bundle.case_id, bundle.utterance, own, left, right))
            tables.append(bundle.reps)
            offset += bundle.reps.shape[0]
        reps = concat(tables, axis=0) if tables else None
        return cls(entries, reps, snapshot)

    def to_dict(self) -> Dict[str, Any]:
        data = self.reps.data if self.reps is not None else np.zeros((0, 0))
        return {
            "snapshot": self.snapshot,
            "reps": [[float(x) for x in row] for row in data],
            "entries": [{
                "root_op": SYMBOLS[e.root_op],
                "subtree": to_sexpr(e.subtree),
                "case_id": e.case_id,
                "utterance": e.utterance,
                "own": e.own,
                "left": e.left,
                "right": e.right,
            } for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], snapshot: str) -> "CaseMemory":
        if data.get("snapshot") != snapshot:
            raise ContractViolation("stored case memory does not match the current parameter snapshot")
        entries = [MemoryEntry(SYMBOL_IDS[e["root_op"]], parse_sexpr(e["subtree"]), e["case_id"],
                               e["utterance"], int(e["own"]), int(e["left"]), int(e["right"]))
                   for e in data.get("entries", [])]
        reps = as_tensor(np.asarray(data["reps"], dtype=np.float64)) if entries else None
        return cls(entries, reps, snapshot)


def case_bundle(cbr: CbrModule, parser: TextToQueryParser, example: Example,
                encoded: EncodedInput) -> CaseBundle:
    """
    Joint reps of every distinct node of a case's balanced gold tree.

    Theta-side embeddings are computed without recording; G_phi is recorded
    when gradients are enabled.
    """
    try:
        balanced = balance_tree(example.gold, parser.config.max_height)
    except HeightOverflowError as e:
        raise HeightOverflowError(f"case {example.example_id} rejected: {e.message}")
    with no_grad():
        node_reps = parser.decoder.encode_tree_nodes(encoded, balanced)
    nodes = list(node_reps)
    z = stack([node_reps[n][0] for n in nodes], axis=0)
    zc = stack([node_reps[n][1] for n in nodes], axis=0)
    reps = cbr.joint_rep(z, zc, [n.op_id for n in nodes], encoded.pooled)
    return CaseBundle(example.example_id, example.utterance, nodes, reps,
                      {n: i for i, n in enumerate(nodes)}, enumerate_subtrees(balanced))


def encode_cases(parser: TextToQueryParser, cases: Sequence[Example],
                 corpus: Corpus) -> List[EncodedInput]:
    with no_grad():
        return [parser.encode(ex, corpus, include_gold=True) for ex in cases]


def build_memory(cbr: CbrModule, parser: TextToQueryParser, cases: Sequence[Example],
                 corpus: Corpus) -> CaseMemory:
    """One entry per node of every balanced case tree; no parameter updates"""
    snapshot = cbr.snapshot(parser)
    with no_grad():
        encoded = encode_cases(parser, cases, corpus)
        bundles = [case_bundle(cbr, parser, ex, enc) for ex, enc in zip(cases, encoded)]
    memory = CaseMemory.from_bundles(bundles, snapshot)
    logger.info(f"Built case memory: {len(cases)} cases, {len(memory)} entries")
    return memory


# ---------------------------------------------------------------------------
# Similarities and scoring
# ---------------------------------------------------------------------------

def sim_whole(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"sim_whole: {a.shape} vs {b.shape}")
    return -float(np.linalg.norm(a - b))


def sim_comp(op_id: int, left_rep: np.ndarray, right_rep: Optional[np.ndarray],
             memory: CaseMemory, entry_idx: int) -> float:
    """Sum of child similarities; a unary candidate drops the right term"""
    entry = memory.entries[entry_idx]
    if entry.root_op != op_id:
        raise ContractViolation(f"compositional similarity between {SYMBOLS[op_id]} and {SYMBOLS[entry.root_op]}")
    _, e_left, e_right = memory.entry_vectors(entry_idx)
    score = sim_whole(left_rep, e_left)
    if entry.is_binary:
        if right_rep is None:
            raise ContractViolation(f"binary entry {SYMBOLS[op_id]} compared without a right child")
        score += sim_whole(right_rep, e_right)
    return score


@dataclass
class PhiScores:
    s_phi: Tensor
    log_p_phi: Tensor
    p_phi: Optional[np.ndarray]

    @property
    def absent(self) -> bool:
        return self.p_phi is None


def _pairwise(reps: Tensor, table: Tensor) -> Tensor:
    """(R, n) l2 distances between rows of reps and rows of a memory table"""
    r, d = reps.shape
    n = table.shape[0]
    return l2_distance(reps.reshape(r, 1, d), table.reshape(1, n, d), axis=-1)


def _leaf_step_scores(reps: Tensor, frontier: Frontier, memory: CaseMemory) -> Tensor:
    m = frontier.size
    pieces = []
    order = []
    for kind in sorted(set(int(k) for k in frontier.ops)):
        rows = np.flatnonzero(frontier.ops == kind)
        table = memory.table(kind)
        order.extend(rows.tolist())
        if table is None:
            pieces.append(as_tensor(np.full(len(rows), -np.inf)))
            continue
        dist = _pairwise(getitem(reps, rows), table.left)
        pieces.append(logsumexp(-dist, axis=-1))
    gathered = concat(pieces, axis=0)
    inverse = np.empty(m, dtype=np.int64)
    inverse[np.asarray(order, dtype=np.int64)] = np.arange(m)
    return getitem(gathered, inverse)


def _node_step_scores(child_reps: Tensor, decoder: SmbopDecoder, memory: CaseMemory, k: int) -> Tensor:
    """s_phi over the frontier enumeration: unary block then binary block"""
    pieces = []
    for op in decoder.vocab.unary_ops:
        table = memory.table(op)
        if table is None or table.right is not None:
            pieces.append(as_tensor(np.full(k, -np.inf)))
            continue
        dist = _pairwise(child_reps, table.left)
        pieces.append(logsumexp(-dist, axis=-1))
    for op in decoder.vocab.binary_ops:
        table = memory.table(op)
        if table is None or table.right is None:
            pieces.append(as_tensor(np.full(k * k, -np.inf)))
            continue
        n = table.count
        d_left = _pairwise(child_reps, table.left)
        d_right = _pairwise(child_reps, table.right)
        grid = -(d_left.reshape(k, 1, n) + d_right.reshape(1, k, n))
        pieces.append(logsumexp(grid, axis=-1).reshape(k * k))
    return concat(pieces, axis=0)


def score_phi(cbr: CbrModule, decoder: SmbopDecoder, view: StepView, memory: CaseMemory,
              counter: Optional[RepresentationCounter] = None) -> PhiScores:
    """
    s_phi(z) = logsumexp over same-op entries of the compositional similarity.

    Child joint reps are computed once per beam row (plus the null row), then
    reused across the whole frontier. Masked slots and ops absent from memory
    get -inf; if every slot is masked p_phi is absent.
    """
    frontier = view.frontier
    pooled = view.encoded.pooled
    if len(memory) == 0:
        s = as_tensor(np.full(frontier.size, -np.inf))
        return PhiScores(s, s, None)
    if frontier.is_leaf_step:
        reps = cbr.joint_rep(frontier.leaf_z, frontier.leaf_zc, frontier.ops.tolist(), pooled)
        if counter is not None:
            counter.add(view.step, frontier.size)
        s = _leaf_step_scores(reps, frontier, memory)
    else:
        beam = view.beam
        real = beam.real
        ops = [op if ok else SYMBOL_IDS[NULL] for op, ok in zip(beam.root_ops.tolist(), real)]
        reps = cbr.joint_rep(beam.z, beam.zc, ops, pooled)
        rows = [getitem(reps, i) if ok else cbr.null_rep for i, ok in enumerate(real)]
        if counter is not None:
            counter.add(view.step, beam.size + 1)
        s = _node_step_scores(stack(rows, axis=0), decoder, memory, beam.size)
    s = where(frontier.mask, s, -np.inf)
    log_p = log_softmax(s, axis=-1)
    p = np.exp(log_p.data)
    if not np.any(np.isfinite(s.data)):
        return PhiScores(s, log_p, None)
    return PhiScores(s, log_p, p)


def fuse(p_theta: np.ndarray, p_phi: Optional[np.ndarray]) -> np.ndarray:
    """p = (p_theta + p_phi) / 2, or p_theta when p_phi is absent"""
    p_theta = np.asarray(p_theta, dtype=np.float64)
    if p_phi is None:
        return p_theta
    p_phi = np.asarray(p_phi, dtype=np.float64)
    if p_phi.shape != p_theta.shape:
        raise DimensionError(f"fuse: p_theta {p_theta.shape} vs p_phi {p_phi.shape}")
    return 0.5 * (p_theta + p_phi)


def fused_log_prob(log_p_theta: Tensor, log_p_phi: Tensor, slot: int) -> Tensor:
    """log((p_theta + p_phi) / 2) at one slot"""
    pair = stack([getitem(log_p_theta, slot), getitem(log_p_phi, slot)], axis=0)
    return logsumexp(pair, axis=0) + LOG_HALF


# ---------------------------------------------------------------------------
# Boosters
# ---------------------------------------------------------------------------

class StructCbrBooster:
    """Frontier re-scorer over a fixed case memory (inference)"""

    def __init__(self, cbr: CbrModule, decoder: SmbopDecoder, memory: CaseMemory,
                 boost_leaves: bool = True, counter: Optional[RepresentationCounter] = None):
        self.cbr = cbr
        self.decoder = decoder
        self.memory = memory
        self.boost_leaves = boost_leaves
        self.counter = counter or RepresentationCounter()

    def scores(self, view: StepView) -> PhiScores:
        return score_phi(self.cbr, self.decoder, view, self.memory, self.counter)

    def rescore(self, view: StepView) -> np.ndarray:
        if view.frontier.is_leaf_step and not self.boost_leaves:
            return view.p_theta
        with no_grad():
            phi = self.scores(view)
        return fuse(view.p_theta, phi.p_phi)


class PhiTrainingBooster(StructCbrBooster):
    """Records -log p_phi(gold) - log p(gold) at every step while fusing like inference"""

    def __init__(self, cbr: CbrModule, decoder: SmbopDecoder, memory: CaseMemory, boost_leaves: bool = True):
        super().__init__(cbr, decoder, memory, boost_leaves)
        self.loss_terms: List[Tensor] = []
        self.skipped_terms = 0

    def rescore(self, view: StepView) -> np.ndarray:
        if view.frontier.is_leaf_step and not self.boost_leaves:
            return view.p_theta
        phi = self.scores(view)
        if phi.absent:
            return view.p_theta
        log_p_theta = view.log_p_theta.detach()
        for slot in view.gold_indices:
            if not np.isfinite(phi.log_p_phi.data[slot]):
                # op absent from the in-batch memory: no phi-dependent term
                self.skipped_terms += 1
                continue
            self.loss_terms.append(-getitem(phi.log_p_phi, slot) - fused_log_prob(log_p_theta, phi.log_p_phi, slot))
        return fuse(view.p_theta, phi.p_phi)


class WholeTreeBooster:
    """
    Whole-tree similarity over a frontier pruned to the top `prune_factor * K`
    slots by s_theta; each kept candidate gets its own joint rep.
    """

    def __init__(self, cbr: CbrModule, decoder: SmbopDecoder, memory: CaseMemory, beam_size: int,
                 prune_factor: int = 5, counter: Optional[RepresentationCounter] = None):
        self.cbr = cbr
        self.decoder = decoder
        self.memory = memory
        self.keep = prune_factor * beam_size
        self.counter = counter or RepresentationCounter()

    def _candidate_reps(self, view: StepView, slots: List[int]) -> Tuple[Tensor, Tensor]:
        frontier = view.frontier
        idx = np.asarray(slots, dtype=np.int64)
        if frontier.is_leaf_step:
            return getitem(frontier.leaf_z, idx), getitem(frontier.leaf_zc, idx)
        beam = view.beam
        left_z = getitem(beam.z, frontier.left[idx])
        right_rows = [getitem(beam.z, int(r)) if r >= 0 else self.decoder.null_z for r in frontier.right[idx]]
        z = self.decoder.embed_tree(frontier.ops[idx].tolist(), left_z, stack(right_rows, axis=0))
        return z, self.decoder.ground_tree(z, view.encoded)

    def scores(self, view: StepView) -> np.ndarray:
        frontier = view.frontier
        s = np.full(frontier.size, -np.inf)
        if len(self.memory) == 0:
            return s
        slots = top_k(view.frontier.scores.data, frontier.mask, self.keep)
        if not slots:
            return s
        z, zc = self._candidate_reps(view, slots)
        ops = frontier.ops[np.asarray(slots, dtype=np.int64)]
        reps = self.cbr.joint_rep(z, zc, ops.tolist(), view.encoded.pooled)
        self.counter.add(view.step, len(slots))
        for op in sorted(set(ops.tolist())):
            table = self.memory.table(op)
            if table is None:
                continue
            rows = np.flatnonzero(ops == op)
            dist = _pairwise(getitem(reps, rows), table.own)
            values = logsumexp(-dist, axis=-1).data
            for row, value in zip(rows, values):
                s[slots[int(row)]] = value
        return s

    def rescore(self, view: StepView) -> np.ndarray:
        with no_grad():
            s = self.scores(view)
        if not np.any(np.isfinite(s)):
            return view.p_theta
        p_phi = np.exp(log_softmax(as_tensor(s)).data)
        return fuse(view.p_theta, p_phi)


# ---------------------------------------------------------------------------
# Training and adaptation
# ---------------------------------------------------------------------------

def loss_phi(cbr: CbrModule, parser: TextToQueryParser, group: Sequence[Example],
             corpus: Corpus) -> Tuple[Tensor, int]:
    """
    Sum of -log p_phi - log p over gold subtrees for one same-schema group.

    Each member decodes against an in-batch memory of the other members.
    Returns the loss and the number of members that contributed.
    """
    if len(group) < 2:
        for ex in group:
            logger.warning(f"{ex.example_id}: no same-schema cases in its group, skipped")
        return as_tensor(0.0), 0
    encoded = encode_cases(parser, group, corpus)
    snapshot = "in-batch"
    bundles = [case_bundle(cbr, parser, ex, enc) for ex, enc in zip(group, encoded)]
    terms: List[Tensor] = []
    for i, example in enumerate(group):
        memory = CaseMemory.from_bundles(bundles[:i] + bundles[i + 1:], snapshot)
        booster = PhiTrainingBooster(cbr, parser.decoder, memory, parser.config.boost_leaves)
        parser.decoder.run(encoded[i], parser.config.beam_size, parser.config.max_height, booster=booster,
                           gold=example.gold, final_query_only=parser.config.final_query_only,
                           theta_grad=False)
        terms.extend(booster.loss_terms)
    if not terms:
        return as_tensor(0.0), len(group)
    return tsum(stack(terms, axis=0)), len(group)


def adapt(cbr: CbrModule, parser: TextToQueryParser, cases: Sequence[Example], corpus: Corpus,
          memory: Optional[CaseMemory] = None) -> StructCbrBooster:
    """Build (or reuse) the case memory and return the inference booster; no parameter updates"""
    if memory is None:
        memory = build_memory(cbr, parser, cases, corpus)
    else:
        memory.ensure_fresh(cbr.snapshot(parser))
    return StructCbrBooster(cbr, parser.decoder, memory, parser.config.boost_leaves)


def parameter_overhead(cbr: CbrModule, parser: TextToQueryParser) -> float:
    """|phi| / |theta|"""
    return cbr.num_parameters() / max(1, parser.num_parameters())
