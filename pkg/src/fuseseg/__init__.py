"""fuseseg: a small CPU deep-learning library and experiment harness for
weighted skip-fusion in residual U-Nets."""

from .errors import (CheckpointError, ConfigError, DataError, ScheduleError,
                     ShapeError, TrainingError)
from .fusion import (FusionSite, FusionSpec, absorb_weight,
                     dynamic_channel_weight, fuse_add, fuse_concat, gate,
                     gated_concat, gff_fuse, weighted_concat)
from .metrics import MetricsReport, confusion_matrix, metrics_from_confusion
from .models import (BottleneckConfig, FusedUNet, FusedUNetConfig, ResUNet,
                     ResUNetConfig, build_bottleneck, build_fused_unet,
                     build_res_unet, classify_fusion_sites, flops_count,
                     param_count)
from .ops import (batch_norm2d, bilinear_resize, bilinear_upsample, conv2d,
                  cross_entropy, relu, sigmoid)
from .optim import SGDMomentum, poly_lr
from .tensor import (Parameter, Tape, Tensor, add, backward, concat_channels,
                     create, from_array, mul_elementwise, mul_scalar, record,
                     tsum)
from .train import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"
