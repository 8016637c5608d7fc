"""Guided depth completion: bilateral preprocessing, attention fusion with a
point-cloud global feature, and multi-kernel spatial propagation over a
six-scale cascade."""
from .errors import (ConfigurationError, DegenerateInputError, EmptyInputError, FormatError, GACNetError,
                     TrainingError)
from .geometry import CameraIntrinsics, back_project, normalize_point_cloud, sample_point_cloud
from .losses import MetricReport, compute_metrics, loss_weights, multiscale_loss, upsample_bilinear
from .pyramid import GACNet, NetworkConfig

__version__ = "0.1.0"
