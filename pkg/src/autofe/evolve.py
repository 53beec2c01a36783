"""Outer search: seed a random population, co-train the feature optimizer,
then alternate gradient-optimized exploitation with random exploration until
the evaluation budget is spent, and greedily select a final feature set.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dsl
from .data import Dataset
from .dsl import ParseTree, Vocabulary
from .evaluator import (
    BudgetExhausted,
    BudgetTracker,
    EvalCache,
    EvalRecord,
    evaluate_baseline,
    evaluate_feature,
    evaluate_joint,
)
from .forest import LearnerConfig
from .model import FeatureOptimizer, LatentStepConfig, TrainConfig

__all__ = [
    "Candidate",
    "Population",
    "SearchConfig",
    "SearchEngine",
    "run_search",
    "run_random_baseline",
]


@dataclass(frozen=True)
class Candidate:
    tree: ParseTree
    canonical: str
    record: EvalRecord


class Population:
    """Canonical-keyed candidate set; members are never removed."""

    def __init__(self):
        self._members: dict[str, Candidate] = {}

    def __len__(self):
        return len(self._members)

    def __contains__(self, key: str) -> bool:
        return key in self._members

    def add(self, candidate: Candidate):
        if candidate.canonical in self._members:
            raise ValueError(f"duplicate canonical key {candidate.canonical!r}")
        self._members[candidate.canonical] = candidate

    def members(self) -> list[Candidate]:
        return list(self._members.values())

    def keys(self) -> set[str]:
        return set(self._members)

    def ranked(self) -> list[Candidate]:
        """Loss ascending; canonical key breaks ties deterministically."""
        return sorted(self._members.values(), key=lambda c: (c.record.loss, c.canonical))

    def best(self) -> Candidate:
        return self.ranked()[0]


def default_exploit_width(raw_feature_count: int, population_size: int) -> int:
    return max(2, min(2 * math.ceil(raw_feature_count / 2), population_size))


@dataclass
class SearchConfig:
    max_order: int = 5
    population_size: int = 512
    budget: int = 4096
    folds: int = 5
    train_epochs: int = 400
    fine_tune_epochs: int = 100
    exploit_width: Optional[int] = None  # default: raw feature count rounded even
    selection_width: Optional[int] = None  # default: raw feature count
    selection_scan_limit: int = 64
    hidden_size: int = 64
    embed_size: int = 32
    latent: LatentStepConfig = field(default_factory=LatentStepConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    workers: int = 1

    def __post_init__(self):
        if self.budget < self.population_size:
            raise ValueError("budget must cover at least the initial population")
        if self.exploit_width is not None and (self.exploit_width < 2 or self.exploit_width % 2):
            raise ValueError("exploit_width must be even and >= 2")


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


# named sub-streams of the run seed
STREAM_SAMPLING = 0
STREAM_LEARNER = 1
STREAM_OPTIMIZER = 4
# key 2 is used inside FeatureOptimizer init, key 3 by fold assignment


class SearchEngine:
    """One search run over a dataset; holds all shared mutable state."""

    def __init__(
        self,
        dataset: Dataset,
        config: SearchConfig,
        learner: LearnerConfig,
        seed: int = 0,
    ):
        self.dataset = dataset
        self.config = config
        self.learner = learner
        self.seed = seed
        self.registry = dsl.default_registry()
        self.vocab = Vocabulary.build(dataset.feature_names, self.registry)
        self.cache = EvalCache()
        self.budget = BudgetTracker(config.budget)
        self.population = Population()
        self.invalid_keys: set[str] = set()
        self.rng_sampling = _stream(seed, STREAM_SAMPLING)
        self.rng_optimizer = _stream(seed, STREAM_OPTIMIZER)
        self.model = FeatureOptimizer(
            self.vocab, config.hidden_size, config.embed_size, seed=seed
        )
        self.iterations: list[dict] = []
        self.loss_history = []
        self.base_record = evaluate_baseline(dataset, learner, config.folds, seed)

    # -- evaluation helpers -----------------------------------------------

    def _evaluate(self, tree: ParseTree) -> Optional[EvalRecord]:
        return evaluate_feature(
            tree, self.dataset, self.learner, self.cache, self.budget,
            self.config.folds, self.seed,
        )

    def _evaluate_many(self, trees: Sequence[ParseTree]) -> list[Optional[EvalRecord]]:
        """Evaluate a batch; parallel only when the budget cannot run out
        mid-batch, so results are independent of worker count."""
        if self.config.workers > 1 and self.budget.remaining >= len(trees):
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(self._evaluate, trees))
        out: list[Optional[EvalRecord]] = []
        for tree in trees:
            out.append(self._evaluate(tree))
        return out

    def _admit(self, tree: ParseTree, record: Optional[EvalRecord]) -> bool:
        key = dsl.canonical_key(tree, self.dataset.feature_names)
        if record is None:
            self.invalid_keys.add(key)
            return False
        if key not in self.population:
            self.population.add(Candidate(tree, key, record))
        return True

    def _sample_distinct(self, extra_seen: set[str]) -> Optional[ParseTree]:
        seen = self.population.keys() | self.invalid_keys | extra_seen
        return dsl.sample_distinct_tree(
            self.dataset.n_features,
            self.config.max_order,
            self.rng_sampling,
            self.dataset.feature_names,
            seen,
            self.registry,
        )

    # -- phases ------------------------------------------------------------

    def initialize(self):
        """Evaluate canonically-distinct random trees until the population is
        full (invalid draws are replaced)."""
        names = self.dataset.feature_names
        while len(self.population) < self.config.population_size:
            want = self.config.population_size - len(self.population)
            batch: list[ParseTree] = []
            batch_keys: set[str] = set()
            while len(batch) < want:
                tree = self._sample_distinct(batch_keys)
                if tree is None:
                    raise RuntimeError("feature space exhausted before population filled")
                batch.append(tree)
                batch_keys.add(dsl.canonical_key(tree, names))
            for tree, record in zip(batch, self._evaluate_many(batch)):
                self._admit(tree, record)

    def _normalized_scores(self) -> dict[str, float]:
        """Min-max normalize losses over everything evaluated so far."""
        members = self.population.members()
        losses = np.array([c.record.loss for c in members])
        lo, hi = losses.min(), losses.max()
        if hi == lo:
            return {c.canonical: 0.5 for c in members}
        return {c.canonical: float((c.record.loss - lo) / (hi - lo)) for c in members}

    def build_corpus(self) -> list[tuple[list[int], float]]:
        scores = self._normalized_scores()
        names = self.dataset.feature_names
        corpus = []
        for cand in self.population.ranked():
            s = scores[cand.canonical]
            for tokens in dsl.enumerate_equivalents(
                cand.tree, names, self.config.train.augment_limit
            ):
                corpus.append((self.vocab.encode(tokens), s))
        return corpus

    def train_optimizer(self, epochs: int):
        history = self.model.train(
            self.build_corpus(), self.config.train, self.rng_optimizer, epochs=epochs
        )
        self.loss_history.extend(history)

    def exploit_width(self) -> int:
        if self.config.exploit_width is not None:
            return self.config.exploit_width
        return default_exploit_width(self.dataset.n_features, self.config.population_size)

    def evolve_step(self) -> dict:
        """One evolution round: optimize top-d, explore d/2 random, evaluate,
        insert, fine-tune.  Returns a report entry for the iteration."""
        names = self.dataset.feature_names
        d = self.exploit_width()
        half = d // 2
        flags: list[str] = []
        spent_before = self.budget.spent

        ranked = self.population.ranked()[:d]
        pending: set[str] = set()
        optimized: list[ParseTree] = []
        for cand in ranked:
            if len(optimized) >= half:
                break
            new_tree = self.model.optimize_feature(
                cand.tree, names, self.registry, self.config.max_order, self.config.latent
            )
            if new_tree is None:
                continue
            key = dsl.canonical_key(new_tree, names)
            if key in self.population or key in self.invalid_keys or key in pending:
                continue
            optimized.append(new_tree)
            pending.add(key)
        if len(optimized) < half:
            flags.append("exploitation_shortfall")

        added_optimized = 0
        added_random = 0
        exhausted = False
        try:
            for tree, record in zip(optimized, self._evaluate_many(optimized)):
                if self._admit(tree, record):
                    added_optimized += 1
            # exploration: keep drawing until d/2 valid additions
            while added_random < half:
                tree = self._sample_distinct(set())
                if tree is None:
                    flags.append("exploration_exhausted")
                    break
                if self._admit(tree, self._evaluate(tree)):
                    added_random += 1
        except BudgetExhausted:
            exhausted = True
            flags.append("budget_exhausted")

        if not exhausted and self.budget.remaining == 0:
            exhausted = True
        if added_optimized < half and "exploitation_shortfall" not in flags and not exhausted:
            flags.append("exploitation_shortfall")

        if not exhausted:
            self.train_optimizer(self.config.fine_tune_epochs)

        entry = {
            "added_optimized": added_optimized,
            "added_random": added_random,
            "evaluations": self.budget.spent - spent_before,
            "spent": self.budget.spent,
            "population": len(self.population),
            "flags": flags,
        }
        self.iterations.append(entry)
        return entry

    def select_final_features(self) -> tuple[list[Candidate], EvalRecord]:
        """Greedy forward selection of a joint feature set (budget-exempt)."""
        width = self.config.selection_width
        if width is None:
            width = self.dataset.n_features
        chosen: list[Candidate] = []
        current = self.base_record
        if width == 0 or not len(self.population):
            return chosen, current
        ranked = self.population.ranked()[: self.config.selection_scan_limit]
        while len(chosen) < width:
            picked = None
            for cand in ranked:
                if any(c.canonical == cand.canonical for c in chosen):
                    continue
                rec = evaluate_joint(
                    [c.tree for c in chosen] + [cand.tree],
                    self.dataset, self.learner, self.config.folds, self.seed,
                )
                if rec is not None and rec.metric > current.metric:
                    picked = (cand, rec)
                    break
            if picked is None:
                break
            chosen.append(picked[0])
            current = picked[1]
        return chosen, current

    # -- the full run -------------------------------------------------------

    def run(self) -> dict:
        t0 = time.monotonic()
        self.initialize()
        t_init = time.monotonic()
        self.train_optimizer(self.config.train_epochs)
        t_train = time.monotonic()
        while self.budget.remaining > 0:
            entry = self.evolve_step()
            if entry["evaluations"] == 0 and "budget_exhausted" not in entry["flags"]:
                entry["flags"].append("stagnation")
                break
        t_evolve = time.monotonic()
        chosen, joint = self.select_final_features()
        t_select = time.monotonic()
        report = self.build_report(chosen, joint)
        report["timing"] = {
            "initialize_s": t_init - t0,
            "train_s": t_train - t_init,
            "evolve_s": t_evolve - t_train,
            "select_s": t_select - t_evolve,
            "total_s": time.monotonic() - t0,
        }
        return report

    def build_report(self, chosen: list[Candidate], joint: EvalRecord) -> dict:
        names = self.dataset.feature_names
        candidates = [
            {
                "postorder": " ".join(dsl.to_postorder(c.tree, names)),
                "canonical": c.canonical,
                "infix": dsl.to_infix(c.tree, names),
                "order": dsl.order(c.tree),
                "metric": c.record.metric,
                "loss": c.record.loss,
            }
            for c in sorted(self.population.members(), key=lambda c: c.canonical)
        ]
        best = self.population.best() if len(self.population) else None
        return {
            "config": {
                "max_order": self.config.max_order,
                "population_size": self.config.population_size,
                "budget": self.config.budget,
                "folds": self.config.folds,
                "train_epochs": self.config.train_epochs,
                "fine_tune_epochs": self.config.fine_tune_epochs,
                "exploit_width": self.exploit_width(),
                "selection_width": self.config.selection_width,
                "selection_scan_limit": self.config.selection_scan_limit,
                "hidden_size": self.config.hidden_size,
                "embed_size": self.config.embed_size,
                "latent_step_size": self.config.latent.step_size,
                "latent_max_steps": self.config.latent.max_steps,
                "workers": self.config.workers,
                "learner": {
                    "kind": self.learner.kind,
                    "n_trees": self.learner.n_trees,
                    "max_depth": self.learner.max_depth,
                    "min_samples_leaf": self.learner.min_samples_leaf,
                    "seed": self.learner.seed,
                },
                "seed": self.seed,
                "task": self.dataset.task.value,
                "target": self.dataset.target_name,
                "dropped_rows": self.dataset.dropped_rows,
            },
            "base": {"metric": self.base_record.metric, "folds": list(self.base_record.fold_metrics)},
            "budget": {"cap": self.budget.cap, "spent": self.budget.spent},
            "iterations": self.iterations,
            "candidates": candidates,
            "best_single": None
            if best is None
            else {
                "postorder": " ".join(dsl.to_postorder(best.tree, names)),
                "infix": dsl.to_infix(best.tree, names),
                "order": dsl.order(best.tree),
                "metric": best.record.metric,
            },
            "selected": {
                "features": [" ".join(dsl.to_postorder(c.tree, names)) for c in chosen],
                "infix": [dsl.to_infix(c.tree, names) for c in chosen],
                "joint_metric": joint.metric,
            },
        }


def run_random_baseline(
    dataset: Dataset,
    config: Optional[SearchConfig] = None,
    learner: Optional[LearnerConfig] = None,
    seed: int = 0,
) -> tuple[dict, "SearchEngine"]:
    """Reference point for the search: spend the whole evaluation budget on
    random distinct features (no optimizer), then select exactly as usual."""
    config = config or SearchConfig()
    flat = SearchConfig(
        max_order=config.max_order,
        population_size=config.budget,
        budget=config.budget,
        folds=config.folds,
        selection_width=config.selection_width,
        selection_scan_limit=config.selection_scan_limit,
        hidden_size=config.hidden_size,
        embed_size=config.embed_size,
        workers=config.workers,
    )
    engine = SearchEngine(dataset, flat, learner or LearnerConfig(), seed)
    t0 = time.monotonic()
    try:
        engine.initialize()
    except RuntimeError:
        pass  # space smaller than the budget: everything reachable was scored
    chosen, joint = engine.select_final_features()
    report = engine.build_report(chosen, joint)
    report["timing"] = {"total_s": time.monotonic() - t0}
    return report, engine


def run_search(
    dataset: Dataset,
    config: Optional[SearchConfig] = None,
    learner: Optional[LearnerConfig] = None,
    seed: int = 0,
) -> tuple[dict, SearchEngine]:
    engine = SearchEngine(
        dataset, config or SearchConfig(), learner or LearnerConfig(), seed
    )
    report = engine.run()
    return report, engine
