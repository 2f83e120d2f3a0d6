"""Desk-scale laboratory for mixtures of adaptation modules.

A small numpy transformer encoder with a frozen backbone, bottleneck and
low-rank adaptation modules, stochastic routing over a mixture of modules,
consistency-regularized training, and weight-merging for inference — plus
the config/checkpoint/CLI plumbing to run seeded experiments end to end.
"""

__version__ = "0.1.0"

from .adapters import (AdapterModule, LoraModule, adapter_forward, init_adapter,
                       init_lora, lora_forward)
from .backbone import (BackboneConfig, BackboneModel, backbone_checksum,
                       backbone_param_count, build_backbone,
                       count_adaptation_params, encoder_forward, freeze_backbone)
from .config import RunConfig, load_run_config, run_config_from_entries
from .checkpoint import (Checkpoint, checkpoint_from_run, instantiate,
                         load_checkpoint, merge_checkpoint, save_checkpoint)
from .data import (LabeledExample, Vocab, batch_iter, build_vocab, load_tsv,
                   save_tsv, synthetic_task, synthetic_vocab)
from .errors import (CheckpointError, ConfigError, DataError, PeftLabError,
                     RoutingError, ShapeError, TrainingError)
from .mixture import (MixtureSite, RoutingSelection, build_sites,
                      ensemble_predict, merge_site, merge_sites,
                      mixture_forward, routed_forward, select_routing,
                      site_parameters)
from .tensor import (GradTape, Tensor, backward, cross_entropy,
                     finite_diff_check, kl_divergence, matmul_calls,
                     reset_matmul_calls, softmax)
from .training import (TrainConfig, TrainState, consistency_loss, evaluate,
                       init_optimizer, lr_at, train_loop, train_step,
                       write_metrics_csv)

__all__ = [name for name in dir() if not name.startswith("_")]
