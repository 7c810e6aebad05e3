"""Per-rater label distributions from in-context rater histories, with aggregation and scoring."""
from .schema import LabelSchema, SchemaConfig, PRESETS
from .data import Dataset, load_dataset, save_dataset, dataset_stats, rater_history
from .prompts import PromptTemplate, PRESET_TEMPLATES, build_prompt
from .backend import HTTPBackend, MockBackend, BackendConfig, ContinuationQuery, ContinuationResult, make_backend
from .labels import LabelDistribution, LabelTree, compute_distribution, label_tree_for, tree_for_template
from .decisions import aggregate, decide
from .metrics import manhattan, wasserstein_1d, wilcoxon_signed_rank, rank_clusters, mean_ci

__all__ = [
    "LabelSchema", "SchemaConfig", "PRESETS", "Dataset", "load_dataset", "save_dataset", "dataset_stats",
    "rater_history", "PromptTemplate", "PRESET_TEMPLATES", "build_prompt", "HTTPBackend", "MockBackend",
    "BackendConfig", "ContinuationQuery", "ContinuationResult", "make_backend", "LabelDistribution",
    "LabelTree", "compute_distribution", "label_tree_for", "tree_for_template", "aggregate", "decide",
    "manhattan", "wasserstein_1d", "wilcoxon_signed_rank", "rank_clusters", "mean_ci",
]
