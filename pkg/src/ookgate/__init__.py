"""Statistical gating of RAG queries against a corpus's knowledge boundary.

Online: score each query's retrieved neighbours, compare against an empirical
null built from in-knowledge queries, reject when ``p <= alpha``.
Offline: two-sample KS test of a batch of queries against the same null.
"""

__version__ = "0.1.0"

from .calibration import (
    Calibration,
    GateDecision,
    Provenance,
    build_calibration,
    critical_value,
    ecdf_eval,
    fisher_combine,
    gate_batch,
    gate_query,
    load_calibration,
    p_value,
    per_rank_p_values,
    save_calibration,
    score_queries,
    simes_combine,
)
from .drift import DriftDecision, drift_test, ks_p_asymptotic, ks_statistic, ks_threshold
from .metrics import EvalReport, LabeledScores, auprc, auroc, balanced_eval, detection_error_rate, tpr_at_fpr
from .statistics import StatisticKind, compute_score
from .vecstore import CorpusIndex, NeighborList, SimilarityMetric, build_index, knn_search, similarity

__all__ = [name for name in dir() if not name.startswith("_")]
