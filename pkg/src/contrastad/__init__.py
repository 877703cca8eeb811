"""Few-shot anomaly detection for grayscale images.

Stage 1 fine-tunes an attention-augmented residual feature extractor with
contrastive + feature-adversarial self-supervision on synthesized
healthy/pseudo-defective image pairs; stage 2 builds a coreset memory bank
from the few healthy shots and scores queries by reweighted
nearest-neighbor distance.
"""

from .bank import (AnomalyMap, Decision, MemoryBank, Scorer, build_bank,
                   calibrate_tau, covering_radius, decide, greedy_coreset,
                   score_image, score_vectors, verify_traceability)
from .exceptions import (ConfigurationError, ContrastADError, DataError,
                         DefectVanished, FingerprintMismatch, ForegroundNotFound,
                         NumericalError)
from .extractor import (AttentionState, ExtractorConfig, FeatureExtractor,
                        PatchFeatureGrid, WeightSet, aggregate_layers,
                        attention_heatmap, build_extractor, extract_features,
                        initial_weights)
from .harness import (ExperimentConfig, MetricsReport, auroc, run_experiment,
                      split_few_shot, sweep_ablation)
from .losses import (AnchorParams, ContrastiveDistances, SfaParams, TritanhParams,
                     anchor_loss, koleo_loss, masked_distances, sfa_loss,
                     ssl_loss, total_loss, tritanh_loss)
from .phantom import phantom_brain, phantom_pool, phantom_test_set
from .synth import (AugmentConfig, DefectSpec, PairedDataset, augment_normal,
                    bezier_hull, build_pair_dataset, generate_defect, locate_brain)
from .trainer import EpochStats, TrainConfig, mask_to_grid, sample_triple, train_stage1

__version__ = "0.1.0"
