"""Automated feature engineering by gradient-guided search over composed
transformation trees."""

from .data import Dataset, Task, from_arrays, load_csv
from .dsl import (
    Apply,
    Leaf,
    ParseTree,
    Transformation,
    TransformationRegistry,
    Vocabulary,
    canonical_key,
    default_registry,
    order,
    parse_postorder,
    to_infix,
    to_postorder,
)
from .evaluator import BudgetTracker, EvalCache, EvalRecord, evaluate_feature
from .evolve import SearchConfig, SearchEngine, run_random_baseline, run_search
from .forest import LearnerConfig
from .model import FeatureOptimizer, LatentStepConfig, TrainConfig

__version__ = "0.1.0"
