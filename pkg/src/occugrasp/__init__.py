"""Occupancy-uncertainty estimation and uncertainty-weighted grasp ranking.

Pipeline: backproject uncertain depth into world-frame Gaussian points, fuse
them into a Gaussian-mixture occupancy field, regress the field with a sparse
variational GP, combine positional and predictive uncertainty by sigma-point
cubature, and divide grasp confidences by the resulting occupancy variance.
"""

from .camera import (DepthImage, GaussianPoint3, PinholeIntrinsics, PoseEstimate,
                     backproject, backproject_frame, to_world)
from .cubature import (CubatureRule, OccupancyUncertainty, fuse, fuse_batch,
                       make_rule, sigma_points)
from .field import (FusedOccupancyField, FusionResult, build_field, filter_outliers)
from .grasping import (GraspCandidate, RankedGrasps, load_candidates, reweight,
                       save_candidates, stub_scorer)
from .svgp import (PredictiveUncertainty, SvgpModel, TrainConfig, TrainingReport,
                   make_training_set, predict, train)

__version__ = "0.1.0"
