"""Block-diagonal empirical-Fisher pruning with optimal weight updates."""

from .fisher import FisherInverseEstimator, estimator_memory_bytes
from .pruner import Mask, SparsitySchedule, gmp_step, oberts_step, sparsity_at
from .recipe import Recipe, compile_timeline, load_recipe, parse_recipe, shipped_recipe
from .saliency import GroupSpec, optimal_update, prune_step, score_groups

__version__ = "0.1.0"

__all__ = [
    "FisherInverseEstimator", "estimator_memory_bytes",
    "Mask", "SparsitySchedule", "gmp_step", "oberts_step", "sparsity_at",
    "Recipe", "compile_timeline", "load_recipe", "parse_recipe", "shipped_recipe",
    "GroupSpec", "optimal_update", "prune_step", "score_groups",
]
