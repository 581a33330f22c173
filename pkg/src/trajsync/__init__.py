"""Multi-sensor time synchronization, trajectory tools and cascaded pose
graph optimization."""

from .clocksync import ClockMap, HullBuilder, build_bridge_map, build_hull_map, eval_map, to_gnss_time
from .geom import Pose, StampedPose, Trajectory, so3_exp, so3_log
from .kinematics import Extrinsics, RadarScan, angular_rate_central_diff, ego_velocity_gnc, lever_arm_velocity
from .pgo import AbsPoseEdge, AbsPosEdge, PoseGraph, RelPoseEdge, RobustLoss, cascaded_pgo
from .reversal import MessageStream, reverse_stream
from .trajops import ate_rmse, average_trajectories, deviation_stats, recall_at_k
from .xcorr import CorrelationConfig, TimedVec3Series, run_correlation

__version__ = "0.1.0"
