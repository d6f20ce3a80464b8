"""
Synthetic Corpus Generator
Builds schemas, small databases and (utterance, gold tree) examples from the
schema families. Every query pattern is tried in every schema's pool; each
kept example type-checks, fits the decoder's height and beam, and executes.
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core.grammar import (
    T_QUERY, QueryTree, balance_tree, column_leaf, node, subtrees_by_height,
    table_leaf, tree_type, value_leaf,
)
from data.executor import execute
from data.families import (
    CHILD_NAMES, CONCEPTS, FAMILIES, PARENT_NAMES, Family, build_schema, name_pool,
)
from data.schema import Database, Example, Schema
from utils.error_handler import ConfigError, DatasetIntegrityError, ExecutionError, HeightOverflowError

logger = logging.getLogger(__name__)

Built = Optional[Tuple[QueryTree, str]]


@dataclass
class CorpusSettings:
    train_schemas: int = 12
    heldout_schemas: int = 3
    train_examples: int = 60
    heldout_examples: int = 90
    parent_rows: int = 6
    child_rows: int = 16
    lexicon_shift: Sequence[float] = (0.5, 0.7, 0.9)
    train_synonym_rate: float = 0.0
    dev_fraction: float = 0.1
    beam_size: int = 8
    max_height: int = 6

    @classmethod
    def from_config(cls, config) -> "CorpusSettings":
        shift = config.get("CORPUS.LEXICON_SHIFT", [0.5, 0.7, 0.9])
        if not isinstance(shift, (list, tuple)):
            shift = [shift]
        return cls(
            train_schemas=config.get("CORPUS.TRAIN_SCHEMAS", 12),
            heldout_schemas=config.get("CORPUS.HELDOUT_SCHEMAS", 3),
            train_examples=config.get("CORPUS.TRAIN_EXAMPLES_PER_SCHEMA", 60),
            heldout_examples=config.get("CORPUS.HELDOUT_EXAMPLES_PER_SCHEMA", 90),
            parent_rows=config.get("CORPUS.PARENT_ROWS", 6),
            child_rows=config.get("CORPUS.CHILD_ROWS", 16),
            lexicon_shift=tuple(float(s) for s in shift),
            train_synonym_rate=config.get("CORPUS.TRAIN_SYNONYM_RATE", 0.0),
            dev_fraction=config.get("CORPUS.DEV_FRACTION", 0.1),
            beam_size=config.get("DECODER.BEAM_SIZE", 8),
            max_height=config.get("DECODER.MAX_HEIGHT", 6),
        )

    def shift_for(self, heldout_index: int) -> float:
        if not self.lexicon_shift:
            return 0.0
        return self.lexicon_shift[min(heldout_index, len(self.lexicon_shift) - 1)]


@dataclass
class GeneratedCorpus:
    schemas: Dict[str, Schema]
    databases: Dict[str, Database]
    examples: List[Example]


# ---------------------------------------------------------------------------
# Databases
# ---------------------------------------------------------------------------

def _concept_value(concept_name: str, rng: np.random.Generator) -> Any:
    concept = CONCEPTS[concept_name]
    if concept.pool:
        return str(concept.pool[int(rng.integers(len(concept.pool)))])
    return int(rng.integers(concept.low, concept.high + 1))


def build_database(schema: Schema, family: Family, parent_rows: int, child_rows: int,
                   rng: np.random.Generator) -> Database:
    parent_names = name_pool(PARENT_NAMES, parent_rows)
    child_names = name_pool(CHILD_NAMES, child_rows)
    p_pick = rng.permutation(len(parent_names))[:parent_rows]
    c_pick = rng.permutation(len(child_names))[:child_rows]
    parents = []
    for i, idx in enumerate(p_pick, 1):
        parents.append({
            "id": i,
            "name": parent_names[int(idx)],
            family.p_num: _concept_value(family.p_num, rng),
            family.p_cat: _concept_value(family.p_cat, rng),
        })
    children = []
    for i, idx in enumerate(c_pick, 1):
        children.append({
            "id": i,
            "name": child_names[int(idx)],
            family.c_num1: _concept_value(family.c_num1, rng),
            family.c_num2: _concept_value(family.c_num2, rng),
            family.c_cat: _concept_value(family.c_cat, rng),
            family.fk_column: int(rng.integers(1, parent_rows + 1)),
        })
    return Database(schema=schema, rows={family.parent: parents, family.child: children})


# ---------------------------------------------------------------------------
# Query patterns
# ---------------------------------------------------------------------------

class PatternContext:
    """Element handles and wording helpers for one schema"""

    def __init__(self, schema: Schema, family: Family, db: Database,
                 rng: np.random.Generator, shift: float):
        self.schema = schema
        self.family = family
        self.db = db
        self.rng = rng
        self.shift = shift
        self.P, self.C = family.parent, family.child
        self.c_id = f"{self.C}.id"
        self.c_name = f"{self.C}.name"
        self.c_n1 = f"{self.C}.{family.c_num1}"
        self.c_n2 = f"{self.C}.{family.c_num2}"
        self.c_cat = f"{self.C}.{family.c_cat}"
        self.p_name = f"{self.P}.name"
        self.p_num = f"{self.P}.{family.p_num}"
        self.p_cat = f"{self.P}.{family.p_cat}"

    def say(self, element: str) -> str:
        """Wording for a schema element; synonyms are used at the shift rate"""
        lex = self.schema.lexicon[element]
        if lex["synonyms"] and self.rng.random() < self.shift:
            return self._choice(lex["synonyms"])
        return self._choice(lex["aliases"])

    def value(self, column: str) -> Any:
        values = self.db.column_values(column)
        return values[int(self.rng.integers(len(values)))] if values else None

    def distinct_values(self, column: str, count: int) -> Optional[List[Any]]:
        values = sorted(set(self.db.column_values(column)), key=str)
        if len(values) < count:
            return None
        picks = self.rng.permutation(len(values))[:count]
        return [values[int(i)] for i in picks]

    def template(self, options: Sequence[str], **slots) -> str:
        return self._choice(options).format(**slots)

    def _choice(self, options: Sequence[str]) -> str:
        return str(options[int(self.rng.integers(len(options)))])


def tab(name: str) -> QueryTree:
    return table_leaf(name)


def col(name: str) -> QueryTree:
    return column_leaf(name)


def _filter(ctx: PatternContext, op: str, words: Sequence[str]) -> Built:
    v = ctx.value(ctx.c_n1)
    tree = node("project", col(ctx.c_name), node("select", node(op, col(ctx.c_n1), value_leaf(v)), tab(ctx.C)))
    return tree, ctx.template(words, t=ctx.say(ctx.C), c=ctx.say(ctx.c_n1), v=v)


def p_list(ctx):
    tree = node("project", col(ctx.c_name), tab(ctx.C))
    return tree, ctx.template(["list the {n} of all {t}", "show every {t} {n}", "what are the {n} of the {t}"],
                              n=ctx.say(ctx.c_name), t=ctx.say(ctx.C))


def p_filter_gt(ctx):
    return _filter(ctx, ">", ["which {t} have {c} greater than {v}", "names of {t} with {c} above {v}"])


def p_filter_ge(ctx):
    return _filter(ctx, ">=", ["which {t} have {c} of at least {v}", "names of {t} with {c} {v} or more"])


def p_filter_lt(ctx):
    return _filter(ctx, "<", ["which {t} have {c} less than {v}", "names of {t} with {c} below {v}"])


def p_filter_le(ctx):
    return _filter(ctx, "<=", ["which {t} have {c} of at most {v}", "names of {t} with {c} {v} or less"])


def p_filter_eq(ctx):
    v = ctx.value(ctx.c_cat)
    tree = node("project", col(ctx.c_name), node("select", node("=", col(ctx.c_cat), value_leaf(v)), tab(ctx.C)))
    return tree, ctx.template(["which {t} have {c} {v}", "names of {t} whose {c} is {v}"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_cat), v=v)


def p_filter_ne(ctx):
    v = ctx.value(ctx.c_cat)
    tree = node("project", col(ctx.c_name), node("select", node("!=", col(ctx.c_cat), value_leaf(v)), tab(ctx.C)))
    return tree, ctx.template(["which {t} have {c} other than {v}", "names of {t} whose {c} is not {v}"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_cat), v=v)


def p_lookup(ctx):
    v = ctx.value(ctx.c_name)
    tree = node("project", col(ctx.c_n2), node("select", node("=", col(ctx.c_name), value_leaf(v)), tab(ctx.C)))
    return tree, ctx.template(["what is the {c} of {v}", "show the {c} of the {t} called {v}"],
                              c=ctx.say(ctx.c_n2), t=ctx.say(ctx.C), v=v)


def p_and(ctx):
    v1, v2 = ctx.value(ctx.c_n1), ctx.value(ctx.c_cat)
    pred = node("and", node(">", col(ctx.c_n1), value_leaf(v1)), node("=", col(ctx.c_cat), value_leaf(v2)))
    tree = node("project", col(ctx.c_name), node("select", pred, tab(ctx.C)))
    return tree, ctx.template(["which {t} have {a} greater than {v1} and {b} {v2}",
                               "names of {t} with {a} above {v1} and {b} {v2}"],
                              t=ctx.say(ctx.C), a=ctx.say(ctx.c_n1), b=ctx.say(ctx.c_cat), v1=v1, v2=v2)


def p_count(ctx):
    tree = node("project", node("count", col(ctx.c_id)), tab(ctx.C))
    return tree, ctx.template(["how many {t} are there", "count the {t}", "what is the number of {t}"],
                              t=ctx.say(ctx.C))


def _agg(ctx, op: str, words: Sequence[str]) -> Built:
    tree = node("project", node(op, col(ctx.c_n2)), tab(ctx.C))
    return tree, ctx.template(words, t=ctx.say(ctx.C), c=ctx.say(ctx.c_n2))


def p_agg_sum(ctx):
    return _agg(ctx, "sum", ["what is the total {c} of all {t}", "sum of {c} over all {t}"])


def p_agg_min(ctx):
    return _agg(ctx, "min", ["what is the minimum {c} of all {t}", "lowest {c} among {t}"])


def p_agg_max(ctx):
    return _agg(ctx, "max", ["what is the maximum {c} of all {t}", "highest {c} among {t}"])


def p_agg_avg(ctx):
    return _agg(ctx, "avg", ["what is the average {c} of all {t}", "mean {c} of {t}"])


def p_agg_filter(ctx):
    v = ctx.value(ctx.c_cat)
    tree = node("project", node("avg", col(ctx.c_n1)),
                node("select", node("=", col(ctx.c_cat), value_leaf(v)), tab(ctx.C)))
    return tree, ctx.template(["what is the average {a} of {t} whose {b} is {v}",
                               "mean {a} of {t} with {b} {v}"],
                              t=ctx.say(ctx.C), a=ctx.say(ctx.c_n1), b=ctx.say(ctx.c_cat), v=v)


def p_group_count(ctx):
    tree = node("project", node("count", col(ctx.c_id)), node("groupby", col(ctx.c_cat), tab(ctx.C)))
    return tree, ctx.template(["how many {t} are there for each {c}", "count {t} per {c}"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_cat))


def p_group_agg(ctx):
    tree = node("project", node("max", col(ctx.c_n1)), node("groupby", col(ctx.c_cat), tab(ctx.C)))
    return tree, ctx.template(["what is the highest {a} of {t} for each {b}", "maximum {a} per {b} of {t}"],
                              t=ctx.say(ctx.C), a=ctx.say(ctx.c_n1), b=ctx.say(ctx.c_cat))


def _arg_group(ctx, order: str, words: Sequence[str]) -> Built:
    grouped = node("project", node("count", col(ctx.c_id)), node("groupby", col(ctx.c_cat), tab(ctx.C)))
    tree = node("limit1", node(order, grouped))
    return tree, ctx.template(words, t=ctx.say(ctx.C), c=ctx.say(ctx.c_cat))


def p_argmax_group(ctx):
    return _arg_group(ctx, "order_desc", ["which {c} has the most {t}", "the {c} with the largest number of {t}"])


def p_argmin_group(ctx):
    return _arg_group(ctx, "order_asc", ["which {c} has the fewest {t}", "the {c} with the smallest number of {t}"])


def p_sorted_asc(ctx):
    tree = node("order_asc", node("project", col(ctx.c_n1), tab(ctx.C)))
    return tree, ctx.template(["list the {c} of all {t} in ascending order", "{c} of {t} sorted from low to high"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_n1))


def p_sorted_desc(ctx):
    tree = node("order_desc", node("project", col(ctx.c_n1), tab(ctx.C)))
    return tree, ctx.template(["list the {c} of all {t} in descending order", "{c} of {t} sorted from high to low"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_n1))


def p_join_filter(ctx):
    v = ctx.value(ctx.c_n1)
    tree = node("project", col(ctx.p_name),
                node("select", node(">", col(ctx.c_n1), value_leaf(v)), node("join", tab(ctx.P), tab(ctx.C))))
    return tree, ctx.template(["names of {p} that have {t} with {c} above {v}",
                               "which {p} have {t} whose {c} is greater than {v}"],
                              p=ctx.say(ctx.P), t=ctx.say(ctx.C), c=ctx.say(ctx.c_n1), v=v)


def p_join_parent_filter(ctx):
    v = ctx.value(ctx.p_cat)
    tree = node("project", col(ctx.c_name),
                node("select", node("=", col(ctx.p_cat), value_leaf(v)), node("join", tab(ctx.P), tab(ctx.C))))
    return tree, ctx.template(["names of {t} in {p} whose {c} is {v}", "which {t} belong to {p} with {c} {v}"],
                              p=ctx.say(ctx.P), t=ctx.say(ctx.C), c=ctx.say(ctx.p_cat), v=v)


def p_join_group(ctx):
    tree = node("project", node("count", col(ctx.c_id)),
                node("groupby", col(ctx.p_name), node("join", tab(ctx.P), tab(ctx.C))))
    return tree, ctx.template(["how many {t} does each {p} have", "count {t} for every {p}"],
                              p=ctx.say(ctx.P), t=ctx.say(ctx.C))


def p_distinct(ctx):
    tree = node("distinct", node("project", col(ctx.c_cat), tab(ctx.C)))
    return tree, ctx.template(["list the distinct {c} of {t}", "what different {c} do {t} have"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_cat))


def _cat_filter(ctx, v) -> QueryTree:
    return node("project", col(ctx.c_name), node("select", node("=", col(ctx.c_cat), value_leaf(v)), tab(ctx.C)))


def p_union(ctx):
    values = ctx.distinct_values(ctx.c_cat, 2)
    if values is None:
        return None
    v1, v2 = values
    tree = node("union", _cat_filter(ctx, v1), _cat_filter(ctx, v2))
    return tree, ctx.template(["names of {t} whose {c} is {v1} or {v2}", "which {t} have {c} {v1} or {c} {v2}"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_cat), v1=v1, v2=v2)


def p_intersect(ctx):
    v1, v2 = ctx.value(ctx.c_cat), ctx.value(ctx.c_n1)
    right = node("project", col(ctx.c_name), node("select", node(">", col(ctx.c_n1), value_leaf(v2)), tab(ctx.C)))
    tree = node("intersect", _cat_filter(ctx, v1), right)
    return tree, ctx.template(["names of {t} with {a} {v1} that also have {b} above {v2}",
                               "which {t} have {a} {v1} and also {b} greater than {v2}"],
                              t=ctx.say(ctx.C), a=ctx.say(ctx.c_cat), b=ctx.say(ctx.c_n1), v1=v1, v2=v2)


def p_except(ctx):
    v = ctx.value(ctx.c_cat)
    tree = node("except", node("project", col(ctx.c_name), tab(ctx.C)), _cat_filter(ctx, v))
    return tree, ctx.template(["names of {t} except those whose {c} is {v}", "all {t} but the ones with {c} {v}"],
                              t=ctx.say(ctx.C), c=ctx.say(ctx.c_cat), v=v)


def p_parent_filter(ctx):
    v = ctx.value(ctx.p_num)
    tree = node("project", col(ctx.p_name), node("select", node("<", col(ctx.p_num), value_leaf(v)), tab(ctx.P)))
    return tree, ctx.template(["which {p} have {c} below {v}", "names of {p} with {c} less than {v}"],
                              p=ctx.say(ctx.P), c=ctx.say(ctx.p_num), v=v)


PATTERNS: Dict[str, Callable[[PatternContext], Built]] = {
    "list": p_list,
    "filter_gt": p_filter_gt,
    "filter_ge": p_filter_ge,
    "filter_lt": p_filter_lt,
    "filter_le": p_filter_le,
    "filter_eq": p_filter_eq,
    "filter_ne": p_filter_ne,
    "lookup": p_lookup,
    "and": p_and,
    "count": p_count,
    "agg_sum": p_agg_sum,
    "agg_min": p_agg_min,
    "agg_max": p_agg_max,
    "agg_avg": p_agg_avg,
    "agg_filter": p_agg_filter,
    "group_count": p_group_count,
    "group_agg": p_group_agg,
    "argmax_group": p_argmax_group,
    "argmin_group": p_argmin_group,
    "sorted_asc": p_sorted_asc,
    "sorted_desc": p_sorted_desc,
    "join_filter": p_join_filter,
    "join_parent_filter": p_join_parent_filter,
    "join_group": p_join_group,
    "distinct": p_distinct,
    "union": p_union,
    "intersect": p_intersect,
    "except": p_except,
    "parent_filter": p_parent_filter,
}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _admissible(tree: QueryTree, db: Database, settings: CorpusSettings) -> Optional[str]:
    """None if the gold tree is usable, otherwise the reason it is not"""
    if tree_type(tree) != T_QUERY:
        return "does not type-check as a query"
    try:
        balanced = balance_tree(tree, settings.max_height)
    except HeightOverflowError:
        return f"height {tree.height} exceeds {settings.max_height}"
    widest = max(len(level) for level in subtrees_by_height(balanced))
    if widest > settings.beam_size:
        return f"needs {widest} subtrees at one height, beam holds {settings.beam_size}"
    try:
        execute(tree, db)
    except ExecutionError as e:
        return f"fails to execute: {e.message}"
    return None


def _generate_examples(ctx: PatternContext, count: int, split: str,
                       settings: CorpusSettings) -> List[Example]:
    names = list(PATTERNS)
    examples: List[Example] = []
    skipped = set()
    order: List[str] = []
    attempts = 0
    while len(examples) < count:
        if not order:
            order = [names[int(i)] for i in ctx.rng.permutation(len(names))]
        name = order.pop(0)
        attempts += 1
        if attempts > count * len(names) * 2:
            raise DatasetIntegrityError(f"{ctx.schema.schema_id}: no query pattern is satisfiable")
        if name in skipped:
            continue
        built = PATTERNS[name](ctx)
        reason = "unsatisfiable" if built is None else _admissible(built[0], ctx.db, settings)
        if reason is not None:
            logger.warning(f"{ctx.schema.schema_id}: skipping pattern {name} ({reason})")
            skipped.add(name)
            continue
        tree, text = built
        examples.append(Example(
            example_id=f"{ctx.schema.schema_id}-{len(examples):03d}",
            schema_id=ctx.schema.schema_id,
            utterance=" ".join(str(text).lower().split()),
            gold=tree,
            split=split,
            pattern=name,
        ))
    return examples


def generate_corpus(settings: CorpusSettings, seed: int, show_progress: bool = False) -> GeneratedCorpus:
    """
    Generate schemas, databases and examples.

    Args:
        settings: Corpus sizes and decoder limits
        seed: Generation seed; each schema draws from its own derived stream

    Returns:
        GeneratedCorpus, deterministic under seed
    """
    total = settings.train_schemas + settings.heldout_schemas
    if settings.train_schemas < 1 or settings.heldout_schemas < 1:
        raise ConfigError("corpus needs at least one train and one held-out schema")
    if total > len(FAMILIES):
        raise ConfigError(f"only {len(FAMILIES)} schema families exist, {total} requested")

    families = FAMILIES[:settings.train_schemas] + FAMILIES[len(FAMILIES) - settings.heldout_schemas:]
    schemas: Dict[str, Schema] = {}
    databases: Dict[str, Database] = {}
    examples: List[Example] = []

    for index, family in enumerate(tqdm(families, desc="Generating schemas", disable=not show_progress)):
        heldout = index >= settings.train_schemas
        shift = settings.shift_for(index - settings.train_schemas) if heldout else settings.train_synonym_rate
        rng = np.random.default_rng([seed, index])
        schema = build_schema(family, heldout=heldout, lexicon_shift=shift)
        db = build_database(schema, family, settings.parent_rows, settings.child_rows, rng)
        ctx = PatternContext(schema, family, db, rng, shift)
        count = settings.heldout_examples if heldout else settings.train_examples
        pool = _generate_examples(ctx, count, "heldout" if heldout else "train", settings)
        if not heldout:
            n_dev = int(round(settings.dev_fraction * len(pool)))
            dev_ids = {int(i) for i in rng.permutation(len(pool))[:n_dev]}
            pool = [replace(ex, split="dev") if i in dev_ids else ex for i, ex in enumerate(pool)]
        schemas[schema.schema_id] = schema
        databases[schema.schema_id] = db
        examples.extend(pool)
        logger.info(f"{schema.schema_id}: {len(pool)} examples (held-out={heldout}, shift={shift:.2f})")

    return GeneratedCorpus(schemas=schemas, databases=databases, examples=examples)
