"""Memory-augmented encoder laboratory.

A small float64 tensor library with reverse-mode autodiff, a transformer
encoder built on it, four strategies for fusing a frozen general encoder's
per-layer representations into a trainable domain encoder, the logit-sum
and ensemble baselines, synthetic Markov-chain corpora that make forgetting
measurable, and the training/evaluation harnesses around all of it.
"""

from .autodiff import IGNORE_INDEX, Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ClassificationTask, DomainSpec, MaskedBatch, Vocab,
                   batch_encode, default_domain_specs, gen_classification_task,
                   gen_domain_corpus, mask_tokens, split_corpus)
from .encoder import (EncoderActivations, EncoderConfig, EncoderModel,
                      MemoryCache)
from .errors import (CheckpointError, ConfigError, DataError,
                     DegenerateRowError, DivergenceError, EmptyLossError,
                     GradientCheckError, OptimizerError, ShapeError)
from .fusion import (FusionSpec, build_memory_chunked, build_memory_gated,
                     build_memory_single, cross_attention_fuse,
                     gate_attention_fuse, memory_attention, plan_fusion)
from .model import (LogitsFusionModel, MemoryAugmentedModel, ensemble_predict,
                    fusion_added_trainable, param_census)
from .optim import AdamState, ParamStore, adam_step
from .training import (EvalReport, TrainConfig, adapt, equal_interval_pairs,
                       eval_mlm_loss, finetune_classify, grad_check,
                       layer_sweep, mlm_grad_check, pretrain_mlm,
                       quarter_layers, sweep_fused)

__version__ = "0.1.0"
