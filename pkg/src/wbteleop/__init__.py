"""Whole-body humanoid teleoperation stack.

Human pose streams are retargeted onto a humanoid joint configuration,
packed into versioned command vectors, shipped over a small binary bus,
tracked by a PD simulator, recorded into episode files, and replayed into a
chunked policy runner.  Each concern lives in its own module; the CLI wires
them into runnable pipelines.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    LinkPose,
    RobotModel,
    bundled_model_path,
    forward_kinematics,
    jacobian,
    load_model,
)
from .retarget import (  # noqa: F401
    GraspCommand,
    HumanPoseFrame,
    Retargeter,
    RetargetResult,
    retarget_frame,
)
from .command import (  # noqa: F401
    CommandSession,
    CommandVector,
    LayoutDescriptor,
    NormalizationStats,
    ProprioState,
    flatten,
    unflatten,
)
from .sim import SimState, TrackerSim, tracking_metric  # noqa: F401
from .motion import generate_motion, read_pose_file, write_pose_file  # noqa: F401
from .recorder import (  # noqa: F401
    EpisodeWriter,
    filter_idle,
    read_episode,
    recover_episode,
    segment,
    split_episodes,
)
from .policy import (  # noqa: F401
    ChunkScheduler,
    EchoPolicyServer,
    HistoryBuffer,
    PolicyClient,
    PolicyRunner,
)
from .pipeline import TeleopReport, run_teleop  # noqa: F401
