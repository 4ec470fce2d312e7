"""Vertical federated continual learning with evolving class prototypes."""

from .config import Ablations, DataConfig, ExperimentConfig
from .continual import (FisherInfo, FreezePolicy, LossWeights, build_freeze_mask, compose_loss,
                        compute_threshold, estimate_fisher)
from .data import (TaskDescriptor, TaskSchedule, VerticalDataset, generate_synthetic, load_csv,
                   make_cil_schedule, make_fil_schedule, partition_vertically)
from .experiment import compare_runs, run_experiment
from .nn import DenseNet, GradientSet, backward, forward, sgd_step, softmax_cross_entropy
from .protocol import (ActiveParty, Orchestrator, PassiveParty, RoundMessage, TaskMetrics, active_step,
                       aggregate_embeddings, passive_backward, passive_forward)
from .prototypes import (GlobalPrototypeList, Prototype, PrototypeBatch, cosine_sim, evolve_class_prototype,
                         fuse_feature_prototype, generate_prototypes, make_prototype_batch, update_global_list)

__version__ = "0.1.0"
