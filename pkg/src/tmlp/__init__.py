"""Tailed MLPs: coordinate networks whose every hidden layer carries an output tail.

The cumulative tail outputs ``y_1 .. y_k`` form a coarse-to-fine level-of-detail
family, and a model serialised layer by layer can be decoded from any prefix.
"""

from .errors import (
    ConfigError,
    ConsistencyError,
    FormatError,
    IntegrityError,
    OptimizerError,
    OracleError,
    ShapeError,
    TmlpError,
    TrainingError,
    UnderflowError,
)
from .lod import LodLevel, MetricReport, eval_lod, psnr, render_grid, ssim
from .model import Architecture, ModelConfig, ModelParams, backward, forward, init_siren, predict, truncate
from .stream import decode_prefix, encode, read_container, write_container
from .training import TrainConfig, image_train_config, probe_retrain_heads, sdf_train_config, train

__version__ = "0.1.0"
