"""
Generalization Through Memorization
Untrained kNN lookup: keys are child-subtree embeddings of case gold nodes
under the frozen decoder, values are the parent operators. Retrieved mass
is interpolated with the decoder's frontier distribution.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from core.grammar import SYMBOL_IDS, SYMBOLS, balance_tree, enumerate_subtrees
from data.dataset_io import Corpus
from data.schema import Example
from model.autodiff import concat, no_grad
from model.decoder import SmbopDecoder, StepView
from model.parser import TextToQueryParser
from utils.error_handler import ContractViolation, DimensionError

logger = logging.getLogger(__name__)


@dataclass
class GtmMemory:
    """keys (N, 4d) = [z_l; z'_l; z_r; z'_r], values = parent operator ids"""
    keys: np.ndarray
    values: np.ndarray
    case_ids: List[str] = field(default_factory=list)
    snapshot: str = ""

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.int64)
        if len(self.keys) != len(self.values):
            raise DimensionError(f"{len(self.keys)} keys vs {len(self.values)} values")

    def __len__(self) -> int:
        return len(self.values)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "snapshot": self.snapshot,
            "keys": [[float(x) for x in row] for row in self.keys],
            "values": [SYMBOLS[int(v)] for v in self.values],
            "case_ids": list(self.case_ids),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], snapshot: str) -> "GtmMemory":
        if data.get("snapshot") != snapshot:
            raise ContractViolation("stored GTM memory does not match the current parameter snapshot")
        keys = np.asarray(data["keys"], dtype=np.float64).reshape(len(data["values"]), -1)
        return cls(keys, [SYMBOL_IDS[v] for v in data["values"]], list(data["case_ids"]), snapshot)


def gtm_build(parser: TextToQueryParser, cases: Sequence[Example], corpus: Corpus) -> GtmMemory:
    """One record per internal node of every balanced case tree"""
    decoder = parser.decoder
    dim = decoder.dim
    null_pair = np.concatenate([decoder.null_z.data, decoder.null_zc.data])
    keys: List[np.ndarray] = []
    values: List[int] = []
    case_ids: List[str] = []
    with no_grad():
        for example in cases:
            encoded = parser.encode(example, corpus, include_gold=True)
            balanced = balance_tree(example.gold, parser.config.max_height)
            reps = decoder.encode_tree_nodes(encoded, balanced)
            for node in enumerate_subtrees(balanced):
                if node.is_leaf:
                    continue
                lz, lzc = reps[node.left]
                left = np.concatenate([lz.data, lzc.data])
                if node.right is not None:
                    rz, rzc = reps[node.right]
                    right = np.concatenate([rz.data, rzc.data])
                else:
                    right = null_pair
                keys.append(np.concatenate([left, right]))
                values.append(node.op_id)
                case_ids.append(example.example_id)
    memory = GtmMemory(np.asarray(keys).reshape(len(keys), 4 * dim), values, case_ids, parser.parameter_hash())
    logger.info(f"Built GTM memory: {len(cases)} cases, {len(memory)} records")
    return memory


def _squared(rows: np.ndarray, keys: np.ndarray) -> np.ndarray:
    diff = rows[:, None, :] - keys[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _neighbour_mass(dist_sq: np.ndarray, values: np.ndarray, ops: Sequence[int], k: int,
                    tau: float) -> Dict[int, np.ndarray]:
    """
    Per op, the kernel mass exp(-d / tau) of the k nearest records whose value is that op.

    dist_sq has shape (..., N); neighbours are chosen by (distance, record index).
    """
    n = dist_sq.shape[-1]
    k = min(k, n)
    order = np.argsort(dist_sq, axis=-1, kind="stable")[..., :k]
    nearest = np.take_along_axis(dist_sq, order, axis=-1)
    weights = np.exp(-np.sqrt(np.maximum(nearest, 0.0)) / tau)
    labels = values[order]
    return {op: np.sum(np.where(labels == op, weights, 0.0), axis=-1) for op in ops}


def knn_distribution(view: StepView, decoder: SmbopDecoder, memory: GtmMemory, k: int,
                     tau: float) -> Optional[np.ndarray]:
    """p_knn over the frontier, or None when no admissible slot receives mass"""
    frontier = view.frontier
    if frontier.is_leaf_step or len(memory) == 0:
        return None
    beam = view.beam
    size = beam.size
    half = memory.keys.shape[1] // 2
    pairs = concat([beam.z, beam.zc], axis=-1).data
    if pairs.shape[1] != half:
        raise DimensionError(f"GTM keys have width {2 * half}, beam pairs {2 * pairs.shape[1]}")
    null_pair = np.concatenate([decoder.null_z.data, decoder.null_zc.data])[None, :]
    d_left = _squared(pairs, memory.keys[:, :half])
    d_right = _squared(np.concatenate([pairs, null_pair], axis=0), memory.keys[:, half:])

    pieces = []
    unary = decoder.vocab.unary_ops
    if unary:
        mass = _neighbour_mass(d_left + d_right[size][None, :], memory.values, unary, k, tau)
        pieces.extend(mass[op] for op in unary)
    binary = decoder.vocab.binary_ops
    if binary:
        grid = d_left[:, None, :] + d_right[None, :size, :]
        mass = _neighbour_mass(grid, memory.values, binary, k, tau)
        pieces.extend(mass[op].reshape(size * size) for op in binary)
    scores = np.concatenate(pieces) * frontier.mask
    total = scores.sum()
    if total <= 0:
        return None
    return scores / total


def gtm_score(view: StepView, decoder: SmbopDecoder, memory: GtmMemory, k: int, tau: float,
              lam: float) -> np.ndarray:
    """p = (1 - lambda) p_theta + lambda p_knn; p_theta when there is no kNN mass"""
    if lam == 0.0:
        return view.p_theta
    p_knn = knn_distribution(view, decoder, memory, k, tau)
    if p_knn is None:
        return view.p_theta
    return (1.0 - lam) * view.p_theta + lam * p_knn


class GtmBooster:
    def __init__(self, decoder: SmbopDecoder, memory: GtmMemory, k: int = 8, tau: float = 1.0, lam: float = 0.3):
        self.decoder = decoder
        self.memory = memory
        self.k = k
        self.tau = tau
        self.lam = lam

    def rescore(self, view: StepView) -> np.ndarray:
        return gtm_score(view, self.decoder, self.memory, self.k, self.tau, self.lam)
