"""Metric relative pose between two images from learned 3D keypoint matches.

Each image yields a grid of keypoints with a metric depth and a descriptor.
Matches are sampled from a soft assignment, a differentiable RANSAC over
3D-3D Kabsch fits scores pose hypotheses, and training minimizes the
expected reprojection error of a virtual point grid.
"""

from .correspondence import correspondence_model, sample_indices, set_log_prob
from .errors import (
    ConfigError,
    DegenerateConfigurationError,
    DivergenceError,
    DomainError,
    EmptyDistributionError,
    GenerationError,
    IllConditionedGradientError,
    InsufficientDataError,
    MetricPoseError,
    NoHypothesisError,
    ShapeError,
)
from .evaluation import Estimate, EvalReport, auc_precision_curve, evaluate, vcre_precision
from .geometry import DTYPE, Intrinsics, Pose, backproject, project, transform
from .kabsch import KabschResult, kabsch, kabsch_batched, kabsch_vjp
from .keypoints import KeypointMaps
from .objective import (
    CurriculumSchedule,
    NullHypothesisConfig,
    curriculum_select,
    expected_set_loss,
    reinforce_gradients,
    vcre,
    virtual_grid,
)
from .ransac import PoseEstimate, RansacConfig, estimate_pose, soft_inlier_count

__version__ = "0.1.0"
