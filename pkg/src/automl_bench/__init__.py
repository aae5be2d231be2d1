"""Desk-scale AutoML benchmark: analytical op counting, morphism NAS, TPE HPO,
primary-replica scheduling and cumulative-OPS scoring."""

from .graph import (ArchitectureGraph, LayerKind, LayerSpec, TensorShape, build_resnet50, canonical_digest,
                    infer_shapes, parameter_count)
from .harness import (BenchmarkRun, ClusterConfig, CommandExecutor, SimulatedExecutor, StopDecision, Trial,
                      TrialStatus, early_stop_decision, run_benchmark, simulated_run_epoch)
from .hpo import HpoObservation, HyperParams, predict_warmup_error, suggest
from .morph import HistoryRecord, MorphAction, MorphKind, acquisition_score, apply_morph, propose_candidates
from .opcount import (IMAGENET, DatasetDescriptor, OpCount, OpWeights, count_image_bp, count_image_fp,
                      count_layer_bp, count_layer_fp, count_training_epoch, count_validation_epoch)
from .runlog import LogEvent, RunLog
from .scoring import ScoreSeries, compute_score_series, emit_report, regulated_score

__version__ = "0.1.0"
