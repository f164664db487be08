"""Variance-guided channel pruning and quantization-aware fine-tuning for
small convolutional classifiers, on plain numpy."""

from .batchnorm import BNParams, BatchStats, bn_forward_infer, bn_forward_train, fold_bn, init_bn
from .data import (DataBundle, Dataset, bundle_from_datasets, iter_batches,
                   load_cifar_binary, make_synthetic, split_validation)
from .engine import backward_graph, evaluate, forward_graph, loss_and_grads, run_inference
from .graph import (AffineParams, GraphError, LayerSpec, ModelGraph, ModelFormatError,
                    copy_graph, count_macs, dynamic_range_report, fold_bn_graph,
                    infer_shapes, load_model, param_count, save_model)
from .models import build, build_ds_convnet, build_residual_net, build_small_convnet
from .pruning import (PruneCandidate, PruneReport, apply_pfq, channel_constancy_report,
                      compute_bias_correction, prune_channels, scan_candidates)
from .quantization import (QuantConfig, QuantPoint, insert_quant_points, quantize,
                           quantize_backward, set_quant_enabled, update_activation_range)
from .tensor_ops import (ConvParams, DepthwiseConvParams, affine_forward, conv2d_forward,
                         depthwise_conv2d_forward, global_avg_pool_forward, relu_forward,
                         relu6_forward, softmax_cross_entropy)
from .training import (EarlyStopPolicy, EpochMetrics, LRSchedule, OptimizerState,
                       TrainingDiverged, lr_at, metrics_to_csv, sgd_step, train_epochs)
from .workflow import WorkflowConfig, WorkflowResult, run_single_stage_baseline, run_workflow

__version__ = "0.1.0"
