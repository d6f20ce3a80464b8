"""
Experiment Pipeline
Orchestrates the commands: data generation, training of the parser, the
case module and the baselines, adaptation + evaluation, the similarity
ablation, the timing study, the case-count sweep and the final report.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from baselines.concat_cbr import ConcatCbrParser
from baselines.gtm import GtmBooster, GtmMemory, gtm_build
from baselines.retriever import RetrievalIndex, SentenceEncoder
from core.config_loader import ConfigLoader, ModelConfig
from core.grammar import collapse_keep
from core.metrics import (ExampleScore, MICRO, check_monotonic, delta_table, em, ex, per_schema_em,
                          score_example, scores_frame, summarize)
from core.reporting import summarize_reports, write_report
from core.training import (finetune, train_base, train_cbr, train_concatcbr,
                           train_retriever)
from data.dataset_io import (Corpus, Prediction, SplitSpec, corpus_hash, load_corpus, load_split, make_splits,
                             save_corpus, save_predictions, save_split)
from data.generator import CorpusSettings, generate_corpus
from data.schema import Example
from model.autodiff import no_grad
from model.decoder import DecodedTree
from model.optim import applied_updates
from model.parser import TextToQueryParser, build_vocabulary
from model.structcbr import (CaseMemory, CbrModule, RepresentationCounter, StructCbrBooster, WholeTreeBooster,
                             adapt, build_memory, parameter_overhead)
from utils.cache_manager import ArtifactCache, case_set_hash
from utils.checkpoint import RunManifest, require_file
from utils.error_handler import ConfigError, ContractViolation
from utils.file_utils import generate_content_hash, read_json, write_json, write_lines
from utils.logger import get_structured_logger

logger = logging.getLogger(__name__)

METHODS = ("base", "structcbr", "gtm", "concatcbr")

DecodeFn = Callable[[Example], Tuple[List[DecodedTree], List[Dict[str, Any]]]]


@dataclass(frozen=True)
class RunPaths:
    """File layout of one output directory"""
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def splits(self) -> Path:
        return self.root / "data" / "splits"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def theta(self) -> Path:
        return self.checkpoints / "theta.json"

    @property
    def vocab(self) -> Path:
        return self.checkpoints / "vocab.json"

    @property
    def phi(self) -> Path:
        return self.checkpoints / "phi.json"

    @property
    def retriever(self) -> Path:
        return self.checkpoints / "retriever.json"

    @property
    def concat_theta(self) -> Path:
        return self.checkpoints / "concat_theta.json"

    @property
    def retrieval_index(self) -> Path:
        return self.checkpoints / "retrieval_index.json"

    @property
    def cache(self) -> Path:
        return self.root / "cache"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions"

    @property
    def traces(self) -> Path:
        return self.root / "traces"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


class ExperimentPipeline:
    """One instance per command invocation; state lives on disk under the output directory"""

    def __init__(self, config: ConfigLoader, show_progress: bool = True):
        self.config = config
        self.paths = RunPaths(config.output_dir)
        self.show_progress = show_progress
        self.manifest = RunManifest(str(self.paths.manifest))
        self.manifest.set("config_hash", config.config_hash())
        self.manifest.set("artifact_version", _artifact_version())
        self.manifest.set("seeds", dict(config.get("SEEDS", {})))
        self.workers = max(1, int(config.get("SYSTEM.MAX_WORKERS", 4)))
        self.log_every = int(config.get("SYSTEM.LOG_EVERY", 50))
        self._corpus: Optional[Corpus] = None

    # -- logging helpers ------------------------------------------------------------

    def _event(self, message: str, **extra) -> None:
        structured = get_structured_logger()
        if structured is not None:
            structured.info(message, extra=extra or None)
        else:
            logger.info(message)

    @staticmethod
    def _banner(title: str) -> None:
        logger.info("=" * 60)
        logger.info(title)
        logger.info("=" * 60)

    # -- artifacts ----------------------------------------------------------------

    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.paths.data, producer="gen-data")
        return self._corpus

    def load_parser(self) -> TextToQueryParser:
        require_file(self.paths.theta, producer="train-base")
        return TextToQueryParser.load(self.paths.theta, self.paths.vocab, producer="train-base")

    def load_cbr(self, parser: TextToQueryParser) -> CbrModule:
        require_file(self.paths.phi, producer="train-cbr")
        return CbrModule.load(str(self.paths.phi), parser.decoder, parser.config, producer="train-cbr")

    def load_concat(self) -> ConcatCbrParser:
        for path in (self.paths.concat_theta, self.paths.retriever, self.paths.retrieval_index):
            require_file(path, producer="train-baselines")
        parser = TextToQueryParser.load(self.paths.concat_theta, self.paths.vocab, producer="train-baselines")
        retriever = SentenceEncoder.load(str(self.paths.retriever), parser.vocab, producer="train-baselines")
        index = RetrievalIndex.from_dict(read_json(self.paths.retrieval_index, producer="train-baselines"))
        return ConcatCbrParser(parser, retriever, index, int(self.config.get("RETRIEVER.TOP_R", 5)))

    def split_specs(self, split: Optional[int] = None) -> List[SplitSpec]:
        count = int(self.config.get("SPLITS.NUM_SPLITS", 3))
        if split is not None:
            if not 0 <= split < count:
                raise ConfigError(f"--split must be in [0, {count}), got {split}")
            return [load_split(self.paths.splits, split)]
        return [load_split(self.paths.splits, n) for n in range(count)]

    def _checkpoint_hashes(self) -> Dict[str, str]:
        paths = {"theta": self.paths.theta, "phi": self.paths.phi, "concat_theta": self.paths.concat_theta,
                 "retriever": self.paths.retriever}
        return {name: generate_content_hash(path) for name, path in paths.items() if path.exists()}

    # -- gen-data -----------------------------------------------------------------

    def gen_data(self) -> Dict[str, Any]:
        self._banner("[Phase 1] Generating synthetic corpus")
        start = time.perf_counter()
        settings = CorpusSettings.from_config(self.config)
        generated = generate_corpus(settings, self.config.seed("CORPUS"), show_progress=self.show_progress)
        digest = save_corpus(self.paths.data, generated.schemas, generated.databases, generated.examples)
        self._corpus = None
        corpus = self.corpus()
        specs = make_splits(corpus, int(self.config.get("SPLITS.CASES_PER_SCHEMA", 30)),
                            int(self.config.get("SPLITS.NUM_SPLITS", 3)), self.config.seed("SPLITS"))
        for spec in specs:
            save_split(self.paths.splits, spec)
        seconds = time.perf_counter() - start
        self.manifest.set("corpus_hash", digest)
        counts = {"schemas": len(corpus.schemas), "examples": len(corpus.examples),
                  "train": len(corpus.by_split("train")), "dev": len(corpus.by_split("dev")),
                  "heldout": len(corpus.by_split("heldout"))}
        self.manifest.mark_phase("gen-data", seconds, 0, {"corpus_hash": digest, **counts})
        self._event("Corpus generated", phase="gen-data", seconds=round(seconds, 3), corpus_hash=digest, **counts)
        return counts

    # -- train-base ---------------------------------------------------------------

    def train_base(self) -> Dict[str, Any]:
        self._banner("[Phase 2] Training base parser")
        corpus = self.corpus()
        self.manifest.set("corpus_hash", corpus_hash(self.paths.data))
        model_config = ModelConfig.from_loader(self.config)
        parser = TextToQueryParser(build_vocabulary(corpus), model_config, self.config.seed("INIT"),
                                   self.config.seed("VALUES"))
        result = train_base(parser, corpus, corpus.by_split("train"),
                            steps=int(self.config.get("TRAINING.STEPS")),
                            batch_size=int(self.config.get("TRAINING.BATCH_SIZE")),
                            lr=float(self.config.get("TRAINING.LEARNING_RATE")),
                            seed=self.config.seed("TRAIN_BASE"),
                            grad_clip=self.config.get("TRAINING.GRAD_CLIP"),
                            log_every=self.log_every, show_progress=self.show_progress)
        digest = parser.save(self.paths.theta, self.paths.vocab, {"phase": "train-base"})
        self.manifest.record_parameters("theta", str(self.paths.theta), digest)

        dev = self.evaluate_dev(parser, corpus)
        self.manifest.mark_phase("train-base", result.seconds, result.updates, {**result.to_dict(), "dev": dev})
        self._event("Base parser trained", phase="train-base", param_hash=digest, updates=result.updates,
                    seconds=round(result.seconds, 3), final_loss=result.final_loss, **dev)
        return {"param_hash": digest, **result.to_dict(), "dev": dev}

    def evaluate_dev(self, parser: TextToQueryParser, corpus: Corpus) -> Dict[str, Any]:
        """In-domain dev EM/EX and how often the gold tree is ranked first"""
        dev = corpus.by_split("dev")
        if not dev:
            logger.warning("No dev examples; skipping in-domain evaluation")
            return {"dev_count": 0}
        decode = self._base_decoder(parser, corpus, trace=False)
        rows = []
        for example, (ranked, _) in zip(dev, self._decode_all(decode, dev, "dev")):
            db = corpus.databases[example.schema_id]
            top = ranked[0].tree if ranked else None
            rows.append({
                "EM": em(top, example.gold) if top is not None else 0,
                "EX": ex(top, example.gold, db) if top is not None else 0,
                "gold_top1": int(top is not None and collapse_keep(top) == collapse_keep(example.gold)),
            })
        frame = pd.DataFrame(rows)
        out = {"dev_count": len(dev), "dev_EM": float(frame["EM"].mean() * 100),
               "dev_EX": float(frame["EX"].mean() * 100), "dev_gold_top1": float(frame["gold_top1"].mean() * 100)}
        logger.info(f"Dev: EM {out['dev_EM']:.1f} EX {out['dev_EX']:.1f} gold@1 {out['dev_gold_top1']:.1f}")
        if out["dev_gold_top1"] <= 50.0:
            logger.warning("Gold is ranked first for at most half of the dev examples")
        return out

    # -- train-cbr ----------------------------------------------------------------

    def train_cbr(self) -> Dict[str, Any]:
        self._banner("[Phase 3] Training case module (parser frozen)")
        corpus = self.corpus()
        parser = self.load_parser()
        theta_before = generate_content_hash(self.paths.theta)
        cbr = CbrModule.from_config(parser.decoder, parser.config, self.config.seed("INIT") + 1)
        result = train_cbr(cbr, parser, corpus, corpus.by_split("train"),
                           steps=int(self.config.get("CBR.STEPS")),
                           batch_size=int(self.config.get("CBR.BATCH_SIZE")),
                           group_size=int(self.config.get("CBR.CASES_PER_GROUP")),
                           lr=float(self.config.get("CBR.LEARNING_RATE")),
                           seed=self.config.seed("TRAIN_CBR"),
                           grad_clip=self.config.get("TRAINING.GRAD_CLIP"),
                           log_every=self.log_every, show_progress=self.show_progress)
        if generate_content_hash(self.paths.theta) != theta_before:
            raise ContractViolation("theta checkpoint changed during case-module training")
        digest = cbr.save(str(self.paths.phi), {"phase": "train-cbr", "theta_hash": parser.parameter_hash()})
        self.manifest.record_parameters("phi", str(self.paths.phi), digest)
        overhead = parameter_overhead(cbr, parser)
        self.manifest.mark_phase("train-cbr", result.seconds, result.updates,
                                 {**result.to_dict(), "parameter_overhead": overhead})
        self._event("Case module trained", phase="train-cbr", param_hash=digest, updates=result.updates,
                    parameter_overhead=round(overhead, 4), final_loss=result.final_loss)
        return {"param_hash": digest, "parameter_overhead": overhead, **result.to_dict()}

    # -- train-baselines ----------------------------------------------------------

    def train_baselines(self) -> Dict[str, Any]:
        self._banner("[Phase 4] Training retriever and ConcatCBR")
        corpus = self.corpus()
        parser = self.load_parser()
        train = corpus.by_split("train")

        retriever = SentenceEncoder(parser.vocab, int(self.config.get("RETRIEVER.HIDDEN_SIZE", 64)),
                                    np.random.default_rng(self.config.seed("RETRIEVER")))
        r_result = train_retriever(retriever, train, steps=int(self.config.get("RETRIEVER.STEPS")),
                                   batch_size=int(self.config.get("RETRIEVER.BATCH_SIZE")),
                                   partners=int(self.config.get("RETRIEVER.PARTNERS")),
                                   lr=float(self.config.get("RETRIEVER.LEARNING_RATE")),
                                   seed=self.config.seed("RETRIEVER"), log_every=self.log_every,
                                   show_progress=self.show_progress)
        r_digest = retriever.save(str(self.paths.retriever), {"phase": "train-baselines"})
        index = RetrievalIndex.build(retriever, train)
        write_json(index.to_dict(), self.paths.retrieval_index, indent=None)
        self.manifest.record_parameters("retriever", str(self.paths.retriever), r_digest)
        self.manifest.mark_phase("train-retriever", r_result.seconds, r_result.updates, r_result.to_dict())

        concat = ConcatCbrParser(parser.copy(), retriever, index, int(self.config.get("RETRIEVER.TOP_R", 5)))
        c_result = train_concatcbr(concat, corpus, train, steps=int(self.config.get("CONCAT.STEPS")),
                                   batch_size=int(self.config.get("CONCAT.BATCH_SIZE")),
                                   lr=float(self.config.get("CONCAT.LEARNING_RATE")),
                                   seed=self.config.seed("CONCAT"),
                                   grad_clip=self.config.get("TRAINING.GRAD_CLIP"),
                                   log_every=self.log_every, show_progress=self.show_progress)
        c_digest = concat.parser.save(self.paths.concat_theta, self.paths.vocab, {"phase": "train-baselines"})
        self.manifest.record_parameters("concat_theta", str(self.paths.concat_theta), c_digest)
        self.manifest.mark_phase("train-concatcbr", c_result.seconds, c_result.updates, c_result.to_dict())
        self._event("Baselines trained", phase="train-baselines", retriever_hash=r_digest, concat_hash=c_digest,
                    retriever_updates=r_result.updates, concat_updates=c_result.updates)
        return {"retriever_hash": r_digest, "concat_hash": c_digest}

    # -- adaptation -----------------------------------------------------------------

    def _base_decoder(self, parser: TextToQueryParser, corpus: Corpus, booster=None,
                      trace: Optional[bool] = None) -> DecodeFn:
        trace = bool(self.config.get("DECODER.TRACE", False)) if trace is None else trace

        def decode(example: Example):
            with no_grad():
                encoded = parser.encode(example, corpus)
            return parser.decode(encoded, booster=booster, trace=trace)
        return decode

    def case_memory(self, cbr: CbrModule, parser: TextToQueryParser, cases: Sequence[Example],
                    corpus: Corpus, cache: Optional[ArtifactCache]) -> CaseMemory:
        snapshot = cbr.snapshot(parser)
        cases_hash = case_set_hash(ex.example_id for ex in cases)
        if cache is not None:
            stored = cache.get("case-memory", snapshot, cases_hash)
            if stored is not None:
                return CaseMemory.from_dict(stored, snapshot)
        memory = build_memory(cbr, parser, cases, corpus)
        if cache is not None:
            cache.put("case-memory", snapshot, cases_hash, memory.to_dict())
        return memory

    def gtm_memory(self, parser: TextToQueryParser, cases: Sequence[Example], corpus: Corpus,
                   cache: Optional[ArtifactCache]) -> GtmMemory:
        snapshot = parser.parameter_hash()
        cases_hash = case_set_hash(ex.example_id for ex in cases)
        if cache is not None:
            stored = cache.get("gtm-memory", snapshot, cases_hash)
            if stored is not None:
                return GtmMemory.from_dict(stored, snapshot)
        memory = gtm_build(parser, cases, corpus)
        if cache is not None:
            cache.put("gtm-memory", snapshot, cases_hash, memory.to_dict())
        return memory

    def adapted_decoder(self, method: str, models: Dict[str, Any], cases: Sequence[Example], corpus: Corpus,
                        cache: Optional[ArtifactCache] = None) -> DecodeFn:
        """Adaptation state for one held-out schema; never updates parameters"""
        parser = models["parser"]
        if method == "base":
            return self._base_decoder(parser, corpus)
        if method == "structcbr":
            cbr = models["cbr"]
            booster = adapt(cbr, parser, cases, corpus, self.case_memory(cbr, parser, cases, corpus, cache))
            return self._base_decoder(parser, corpus, booster)
        if method == "gtm":
            booster = GtmBooster(parser.decoder, self.gtm_memory(parser, cases, corpus, cache),
                                 k=int(self.config.get("GTM.K")), tau=float(self.config.get("GTM.TAU")),
                                 lam=float(self.config.get("GTM.LAMBDA")))
            return self._base_decoder(parser, corpus, booster)
        if method == "concatcbr":
            concat = models["concat"].adapted(cases)
            return lambda example: (concat.decode(example, corpus), [])
        raise ConfigError(f"Unknown method {method!r}; expected one of {', '.join(METHODS)}")

    def _decode_all(self, decode: DecodeFn, examples: Sequence[Example], desc: str):
        """Decode in a thread pool; results come back in input order"""
        if self.workers == 1 or len(examples) < 2:
            return [decode(e) for e in tqdm(examples, desc=desc, disable=not self.show_progress, leave=False)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(tqdm(pool.map(decode, examples), total=len(examples), desc=desc,
                             disable=not self.show_progress, leave=False))

    def _load_models(self, methods: Sequence[str]) -> Dict[str, Any]:
        models: Dict[str, Any] = {"parser": self.load_parser()}
        if "structcbr" in methods:
            models["cbr"] = self.load_cbr(models["parser"])
        if "concatcbr" in methods:
            models["concat"] = self.load_concat()
        return models

    def evaluate_split(self, method: str, spec: SplitSpec, models: Dict[str, Any], corpus: Corpus,
                       cache: Optional[ArtifactCache] = None, save: bool = True) -> List[ExampleScore]:
        scores: List[ExampleScore] = []
        predictions: List[Prediction] = []
        traces: List[str] = []
        for schema_id in spec.heldout_schemas:
            cases = [corpus.example(i) for i in spec.cases[schema_id]]
            tests = [corpus.example(i) for i in spec.test[schema_id]]
            decode = self.adapted_decoder(method, models, cases, corpus, cache)
            db = corpus.databases[schema_id]
            outputs = self._decode_all(decode, tests, f"{method}/{schema_id}/split{spec.split}")
            for example, (ranked, trace) in zip(tests, outputs):
                beam = [d.tree for d in ranked]
                scores.append(score_example(example.example_id, schema_id, spec.split, method, beam,
                                            example.gold, db))
                predictions.append(Prediction(example.example_id, schema_id, beam, [d.prob for d in ranked]))
                if trace:
                    traces.append(json.dumps({"id": example.example_id, "method": method, "steps": trace}))
        if save:
            save_predictions(self.paths.predictions / f"{method}_split{spec.split}.jsonl", predictions)
            if traces:
                write_lines(traces, self.paths.traces / f"{method}_split{spec.split}.jsonl")
        return scores

    def adapt_eval(self, method: str = "structcbr", split: Optional[int] = None) -> Dict[str, Any]:
        """
        Evaluate `method` (or `all`) against the base parser on held-out schemas.

        Base rows are absolute, method rows are deltas over base.
        """
        methods = list(METHODS) if method == "all" else ["base"] + ([method] if method != "base" else [])
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"Unknown method {m!r}; expected one of {', '.join(METHODS)} or all")
        self._banner(f"[Phase 5] Adapt and evaluate: {', '.join(methods)}")
        corpus = self.corpus()
        specs = self.split_specs(split)
        models = self._load_models(methods)
        cache = ArtifactCache(str(self.paths.cache))
        before = self._checkpoint_hashes()
        theta_hash = models["parser"].parameter_hash()

        all_scores: List[ExampleScore] = []
        total_updates = 0
        for m in methods:
            start = time.perf_counter()
            updates_before = applied_updates()
            for spec in specs:
                all_scores.extend(self.evaluate_split(m, spec, models, corpus, cache))
            seconds = time.perf_counter() - start
            updates = applied_updates() - updates_before
            total_updates += updates
            self.manifest.mark_phase(f"adapt-eval:{m}", seconds, updates, {"splits": [s.split for s in specs]})

        if total_updates:
            raise ContractViolation(f"adapt-eval applied {total_updates} parameter updates")
        if models["parser"].parameter_hash() != theta_hash or self._checkpoint_hashes() != before:
            raise ContractViolation("adapt-eval modified model parameters or checkpoint files")

        frame = scores_frame(all_scores)
        check_monotonic(frame)
        summary = summarize(frame)
        deltas = delta_table(summary)
        facts = {"methods": ", ".join(methods), "splits": ", ".join(str(s.split) for s in specs),
                 "gradient_updates": total_updates, "cache": str(cache.stats()), "checkpoints_unchanged": True}
        # schema difficulty varies with the lexicon shift
        facts["base_em_by_schema"] = {k: round(v, 2) for k, v in per_schema_em(frame, "base").items()}
        if "cbr" in models:
            facts["parameter_overhead_pct"] = round(100 * parameter_overhead(models["cbr"], models["parser"]), 3)
        name = f"adapt_eval_{method}" + (f"_split{split}" if split is not None else "")
        paths = write_report(self.paths.reports, name, "Adaptation results (EM/EX/BEM/BEX, %)",
                             {"Base absolute, methods as deltas": deltas, "Per split": summary},
                             extra=facts)
        self.manifest.add_report(str(paths["json"]))
        micro = deltas[deltas["schema_id"] == MICRO].set_index("method")["EM"].to_dict()
        self._event("Adaptation evaluated", phase="adapt-eval", methods=methods, micro_em=micro,
                    examples=len(frame))
        return {"report": str(paths["md"]), "micro_em": micro}

    # -- ablate-similarity ----------------------------------------------------------

    def ablate_similarity(self, split: Optional[int] = None) -> Dict[str, Any]:
        """Compositional scoring over the whole frontier vs whole-tree scoring of a pruned frontier"""
        self._banner("[Phase 6] Similarity ablation")
        corpus = self.corpus()
        models = self._load_models(["structcbr"])
        parser, cbr = models["parser"], models["cbr"]
        cache = ArtifactCache(str(self.paths.cache))
        k = parser.config.beam_size
        prune = int(self.config.get("ABLATION.PRUNE_FACTOR", 5))
        counters = {"compositional": RepresentationCounter(), "whole-tree": RepresentationCounter()}
        scores: List[ExampleScore] = []
        start, updates_before = time.perf_counter(), applied_updates()
        for spec in self.split_specs(split):
            for schema_id in spec.heldout_schemas:
                cases = [corpus.example(i) for i in spec.cases[schema_id]]
                tests = [corpus.example(i) for i in spec.test[schema_id]]
                memory = self.case_memory(cbr, parser, cases, corpus, cache)
                boosters = {
                    "compositional": StructCbrBooster(cbr, parser.decoder, memory, parser.config.boost_leaves,
                                                      counters["compositional"]),
                    "whole-tree": WholeTreeBooster(cbr, parser.decoder, memory, k, prune, counters["whole-tree"]),
                }
                db = corpus.databases[schema_id]
                for name, booster in boosters.items():
                    decode = self._base_decoder(parser, corpus, booster, trace=False)
                    outputs = self._decode_all(decode, tests, f"{name}/{schema_id}")
                    for example, (ranked, _) in zip(tests, outputs):
                        scores.append(score_example(example.example_id, schema_id, spec.split, name,
                                                    [d.tree for d in ranked], example.gold, db))
        seconds, updates = time.perf_counter() - start, applied_updates() - updates_before
        summary = summarize(scores_frame(scores))
        table = summary[summary["split"] == "mean"][["method", "schema_id", "count", "EM", "EX"]]
        per_step = {name: c.mean_per_step() for name, c in counters.items()}
        ratio = per_step["whole-tree"] / per_step["compositional"] if per_step["compositional"] else None
        facts = {
            "reps_per_step_compositional": round(per_step["compositional"], 3),
            "reps_per_step_whole_tree": round(per_step["whole-tree"], 3),
            "observed_ratio": round(ratio, 3) if ratio is not None else None,
            "predicted_ratio": round(prune * k / (k + 1), 3),
            "gradient_updates": updates,
        }
        name = "ablate_similarity" + (f"_split{split}" if split is not None else "")
        paths = write_report(self.paths.reports, name, "Similarity ablation (EM %, mean over splits)",
                             {"EM by schema": table.reset_index(drop=True)}, extra=facts)
        self.manifest.add_report(str(paths["json"]))
        self.manifest.mark_phase("ablate-similarity", seconds, updates, facts)
        self._event("Similarity ablation done", phase="ablate-similarity", **facts)
        return {"report": str(paths["md"]), **facts}

    # -- timing -------------------------------------------------------------------

    def timing(self, split: Optional[int] = None, epochs: Optional[Sequence[int]] = None) -> Dict[str, Any]:
        """Adaptation wall-clock vs finetuning theta on the cases, with EM and update counts"""
        self._banner("[Phase 7] Adaptation vs finetuning")
        corpus = self.corpus()
        models = self._load_models(["structcbr"])
        parser, cbr = models["parser"], models["cbr"]
        epochs = list(epochs or self.config.get("FINETUNE.EPOCHS", [1, 2, 5, 10, 20]))
        batch = int(self.config.get("FINETUNE.BATCH_SIZE", 8))
        lr = float(self.config.get("FINETUNE.LEARNING_RATE", 1e-3))
        seed = self.config.seed("FINETUNE")
        theta_before = generate_content_hash(self.paths.theta)

        rows: List[Dict[str, Any]] = []
        decode_seconds = {"base": 0.0, "structcbr": 0.0}
        decoded = 0
        for spec in self.split_specs(split):
            for schema_id in spec.heldout_schemas:
                cases = [corpus.example(i) for i in spec.cases[schema_id]]
                tests = [corpus.example(i) for i in spec.test[schema_id]]
                db = corpus.databases[schema_id]

                start = time.perf_counter()
                memory = build_memory(cbr, parser, cases, corpus)
                booster = adapt(cbr, parser, cases, corpus, memory)
                adapt_seconds = time.perf_counter() - start

                arms: List[Tuple[str, int, float, int, TextToQueryParser, Any]] = [
                    ("base", 0, 0.0, 0, parser, None),
                    ("structcbr", 0, adapt_seconds, 0, parser, booster),
                ]
                for e in epochs:
                    tuned = parser.copy()
                    result = finetune(tuned, corpus, cases, e, batch, lr, seed)
                    arms.append(("finetune", e, result.seconds, result.updates, tuned, None))

                for method, e, seconds, updates, model, arm_booster in arms:
                    decode = self._base_decoder(model, corpus, arm_booster, trace=False)
                    start = time.perf_counter()
                    # sequential so per-example decode time is comparable across arms
                    outputs = [decode(t) for t in tests]
                    elapsed = time.perf_counter() - start
                    if method in decode_seconds:
                        decode_seconds[method] += elapsed
                    hits = [em(ranked[0].tree, t.gold) if ranked else 0 for t, (ranked, _) in zip(tests, outputs)]
                    rows.append({"split": spec.split, "schema_id": schema_id, "method": method, "epochs": e,
                                 "seconds": seconds, "updates": updates, "hits": sum(hits), "tests": len(tests)})
                decoded += len(tests)

        if generate_content_hash(self.paths.theta) != theta_before:
            raise ContractViolation("theta checkpoint changed during the timing study")

        frame = pd.DataFrame(rows)
        table = _timing_table(frame)
        per_example = {m: s / decoded if decoded else 0.0 for m, s in decode_seconds.items()}
        slowdown = per_example["structcbr"] / per_example["base"] if per_example["base"] else None
        adapt_s = float(table.loc[table["method"] == "structcbr", "seconds"].iloc[0]) if not table.empty else 0.0
        one_epoch = table[(table["method"] == "finetune") & (table["epochs"] == min(epochs))]
        speedup = float(one_epoch["seconds"].iloc[0]) / adapt_s if adapt_s > 0 and not one_epoch.empty else None
        facts = {
            "decode_seconds_per_example_base": round(per_example["base"], 5),
            "decode_seconds_per_example_structcbr": round(per_example["structcbr"], 5),
            "inference_slowdown": round(slowdown, 3) if slowdown else None,
            "finetune_vs_adapt_speedup": round(speedup, 2) if speedup else None,
            "structcbr_gradient_updates": 0,
        }
        name = "timing" + (f"_split{split}" if split is not None else "")
        paths = write_report(self.paths.reports, name, "Adaptation time vs finetuning",
                             {"Time, updates and EM": table}, extra=facts,
                             notes=["Seconds are mean wall-clock per held-out schema; EM is pooled over tests."])
        self.manifest.add_report(str(paths["json"]))
        self.manifest.mark_phase("timing", float(frame["seconds"].sum()) if rows else 0.0,
                                 int(frame["updates"].sum()) if rows else 0, facts)
        self._event("Timing study done", phase="timing", **facts)
        return {"report": str(paths["md"]), **facts}

    # -- case-sweep ---------------------------------------------------------------

    def case_sweep(self, counts: Optional[Sequence[int]] = None,
                   methods: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """EM gain over base per method and per number of cases, averaged over splits"""
        self._banner("[Phase 8] Case-count sweep")
        corpus = self.corpus()
        counts = list(counts or self.config.get("SWEEP.CASE_COUNTS", [10, 20, 30]))
        methods = list(methods or self.config.get("SWEEP.METHODS", ["structcbr", "gtm"]))
        models = self._load_models(methods)
        cache = ArtifactCache(str(self.paths.cache))
        rows = []
        start, updates_before = time.perf_counter(), applied_updates()
        for spec in self.split_specs():
            if max(counts) > spec.cases_per_schema:
                raise ConfigError(f"sweep count {max(counts)} exceeds the {spec.cases_per_schema} cases per split")
            base = scores_frame(self.evaluate_split("base", spec, models, corpus, cache, save=False))
            base_em = base["EM"].mean() * 100.0
            for count in counts:
                limited = spec.limited(count)
                for method in methods:
                    frame = scores_frame(self.evaluate_split(method, limited, models, corpus, cache, save=False))
                    rows.append({"split": spec.split, "cases": count, "method": method,
                                 "EM": frame["EM"].mean() * 100.0, "gain": frame["EM"].mean() * 100.0 - base_em})
        seconds, updates = time.perf_counter() - start, applied_updates() - updates_before
        frame = pd.DataFrame(rows)
        table = frame.groupby(["method", "cases"], sort=True).agg(EM=("EM", "mean"), gain=("gain", "mean"),
                                                                  splits=("split", "nunique")).reset_index()
        paths = write_report(self.paths.reports, "case_sweep", "EM gain over base by number of cases",
                             {"Mean over splits": table, "Per split": frame},
                             notes=["Gains at small case counts are noisy at this scale."])
        self.manifest.add_report(str(paths["json"]))
        self.manifest.mark_phase("case-sweep", seconds, updates, {"counts": counts, "methods": methods})
        self._event("Case sweep done", phase="case-sweep", counts=counts, methods=methods)
        return {"report": str(paths["md"]), "table": table.to_dict(orient="records")}

    # -- report -------------------------------------------------------------------

    def report(self) -> Dict[str, Any]:
        self._banner("[Phase 9] Run summary")
        paths = summarize_reports(self.paths.reports, self.manifest.data)
        self.manifest.add_report(str(paths["md"]))
        self._event("Summary written", phase="report", markdown=str(paths["md"]), workbook=str(paths["xlsx"]))
        return {k: str(v) for k, v in paths.items()}


def _timing_table(frame: pd.DataFrame) -> pd.DataFrame:
    """One row per arm: mean seconds per schema, updates per schema, pooled EM and relative gain"""
    if frame.empty:
        return pd.DataFrame(columns=["method", "epochs", "seconds", "updates", "EM", "relative_gain_pct"])
    grouped = frame.groupby(["method", "epochs"], sort=False).agg(
        seconds=("seconds", "mean"), updates=("updates", "mean"), hits=("hits", "sum"), tests=("tests", "sum"))
    grouped["EM"] = grouped["hits"] / grouped["tests"] * 100.0
    table = grouped.reset_index()[["method", "epochs", "seconds", "updates", "EM"]]
    base_em = float(table.loc[table["method"] == "base", "EM"].iloc[0])
    cbr_gain = float(table.loc[table["method"] == "structcbr", "EM"].iloc[0]) - base_em

    def relative(row):
        if row["method"] != "finetune":
            return None
        gain = row["EM"] - base_em
        return round(100.0 * cbr_gain / gain, 1) if gain != 0 else None

    table["relative_gain_pct"] = table.apply(relative, axis=1)
    table["updates"] = table["updates"].round().astype(int)
    return table.round({"seconds": 4, "EM": 2})


def _artifact_version() -> str:
    path = Path(__file__).resolve().parent.parent / "version.txt"
    try:
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        return lines[0].split(":", 1)[-1].strip() if lines else "unknown"
    except OSError:
        return "unknown"
