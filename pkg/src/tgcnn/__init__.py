"""Temporal-graph CNN risk prediction pipeline for coded clinical event sequences."""

from .cohort import (CohortSplit, Demographics, EventRecord, GeneratorConfig,
                     MatchPair, PatientHistory, apply_inclusion_criteria,
                     apply_time_window, generate_synthetic_cohort, ingest_cohort,
                     make_cv_folds, match_case_control, split_cohort)
from .graph_builder import (CodeVocabulary, TemporalGraphTensor, build_tensor,
                            build_vocabulary, elapsed_months,
                            extend_vocabulary_with_prescriptions)
from .metrics import (BootstrapSummary, CalibrationCurve, MetricsReport,
                      Prediction, Recalibrator, auprc, auroc, bootstrap_metrics,
                      calibration_curve, calibration_slope_intercept,
                      recalibrate_apply, recalibrate_fit, stratified_evaluation)
from .model import (ModelConfig, TGCNNParameters, ablation_config, compute_loss,
                    cross_validate, forward, graph_regulariser, predict,
                    random_search, sparse_conv3d, time_transform, train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
