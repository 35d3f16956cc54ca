"""CPU localization of cameras in feature-embedded Gaussian splat scenes.

The pipeline: render colors, features and depth from a Gaussian scene
(:mod:`renderer`), distill per-Gaussian colors and descriptors from posed
images (:mod:`distill`), estimate a coarse pose from descriptor matches with
PnP inside RANSAC (:mod:`coarse_pose`), then refine it by minimizing a
photometric warp loss (:mod:`refinement`).
"""

from .errors import (BehindCameraError, DimensionMismatchError, DivergenceError, InsufficientDataError,
                     InvalidDepthError, InvalidInputError, NoOverlapError, ParseError, RansacFailureError,
                     SolverFailureError, SplatLocError)
from .geometry import CameraIntrinsics, Pose, Quaternion
from .renderer import Gaussian, RenderOutput, Scene, render
from .distill import TrainConfig, TrainView, train
from .descriptors import FileProvider, SyntheticProvider
from .coarse_pose import RansacConfig, localize_coarse, match, ransac_pnp, solve_pnp
from .refinement import LocalizeConfig, RefineConfig, localize, refine_feature, refine_warp, warp, warp_loss

__version__ = "0.1.0"
