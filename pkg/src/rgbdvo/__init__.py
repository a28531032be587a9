"""RGB-D visual odometry from uncertainty-weighted points and planes."""

from .backprojection import (DepthImage, NoiseModel, backproject,
                             backproject_with_cov, backprojection_cov,
                             depth_sigma)
from .dataset import (SequenceManifest, TrajectoryEstimate, load_depth_png,
                      load_sequence, read_trajectory, relative_pose_error,
                      write_trajectory)
from .features import (FeatureConfig, Keypoint, detect_and_describe,
                       inject_ground_truth)
from .geometry import (CameraIntrinsics, PlaneHessian, PlaneMinimal,
                       Point3WithCov, PoseSE3, se3_apply, se3_exp, se3_log,
                       transform_plane)
from .matching import (MatchConfig, PlaneMatch, PointMatch, match_planes,
                       match_points, plane_to_plane_distance,
                       projection_overlap)
from .pipeline import Frame, RunConfig, run_odometry_frames, run_synthetic
from .planes import (OrganizedCloud, PlaneExtractionConfig, PlaneSegment,
                     extract_planes, fit_plane_wls, ransac_filter,
                     segment_planes, to_hessian)
from .solver import (SolverConfig, SolverReport, decayed_velocity,
                     plane_residual, point_residual, residual_weights,
                     solve_pose)
from .synthetic import (BoundedPlane, SyntheticScene, make_fixture,
                        monte_carlo_cov, render_depth)

__version__ = "0.1.0"
