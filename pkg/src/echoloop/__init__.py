"""Echo-chamber Markov analysis and counterfactually adjusted
collaborative filtering."""

from .causal import (
    CounterfactualBundle,
    CounterfactualEdit,
    adjusted_recommend,
    adjusted_score,
    assign_weights,
    generate_counterfactuals,
    least_similar_items,
)
from .engine import (
    EmbeddingModel,
    Grouping,
    InteractionHistory,
    group_items,
    recommend,
    score,
    similarity,
    train,
)
from .evaluation import (
    InterestMatrix,
    content_diversity,
    diversity_change,
    mmr_rerank,
    ranking_metrics,
    simulate_satisfaction,
    synth_interest_matrix,
)
from .markov import (
    AbsorbingDecomposition,
    GroupState,
    TrajectoryEnsemble,
    TransitionModel,
    build_type1,
    build_type2,
    build_type3,
    decompose_absorbing,
    k_step,
    simulate,
)

__version__ = "0.1.0"
