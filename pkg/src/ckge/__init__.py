"""Continual knowledge graph embedding with incremental low-rank adapters."""
from .adapters import (AdapterStore, EmbeddingView, LoRAFactor, LoRAGroup, allocate_ranks,
                       compose, create_group, freeze_group, max_rank, trainable_parameter_count)
from .dataset import DatasetSpec, build_growing_dataset, load_snapshots, synthetic_growing_kg, write_dataset
from .evaluation import EvalReport, evaluate, rank_query
from .kg import GrowingKG, Snapshot, SnapshotDelta, Triple, compute_delta, neighbors_in
from .layering import LayerPlan, build_layer_plan, degree_centrality, sort_new_entities
from .scoring import get_scorer, score, score_against_all_heads, score_against_all_tails
from .training import (FASTKGE, NO_GL, NO_INCLORA, RunReport, TrainingConfig, TrainStats,
                       margin_loss, run_continual, sample_negative, train_snapshot)

__version__ = "0.1.0"
