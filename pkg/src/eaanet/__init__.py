"""EAA-Net: edge-attention multi-task segmentation on a small numpy autodiff core."""

from .data import SliceTriplet, Volume, gen_synthetic_volume, load_volume, make_triplets, save_volume
from .losses import LossBundle, total_loss
from .metrics import MetricsReport, evaluate_volume
from .model import EAANet, EAAOutputs, NetworkConfig
from .tensor import Tensor, backward
from .trainer import TrainConfig, evaluate, lr_schedule, train

__version__ = "0.1.0"
