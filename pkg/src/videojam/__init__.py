"""Joint appearance-motion flow matching on synthetic videos.

Train a tiny video diffusion transformer to predict both pixel and
optical-flow velocities from one shared representation, sample with
guided Euler integration, and probe what the motion objective changed.
"""

from .flowfield import (
    DEFAULT_SIGMA,
    FlowField,
    decode_flow_rgb,
    encode_flow_rgb,
    endpoint_error,
    estimate_flow_blockmatch,
    flow_cap,
    normalize_flow,
    pad_flow,
)
from .flowmatch import (
    TimestepSchedule,
    VelocityTarget,
    euler_sample,
    fm_loss,
    interpolate,
    make_schedule,
    velocity_target,
)
from .formats import FormatError, load_checkpoint_file, load_tensor, save_checkpoint_file, save_tensor
from .guidance import BranchSet, GuidanceConfig, cfg, gate_motion_guidance, inner_guidance, ip2p_guidance
from .jamdit import JamDiT, ModelConfig, Prediction, extend_joint, init_base, patchify, unpatchify
from .probes import (
    MetricsReport,
    ProbeCurve,
    coherence_report,
    dynamic_degree,
    flow_consistency_error,
    motion_smoothness,
    sdedit_probe,
    shuffle_loss_probe,
)
from .synthdata import (
    DatasetConfig,
    SceneSpec,
    analytic_flow,
    build_dataset,
    class_id_for,
    load_dataset,
    render_video,
    shuffle_frames,
)
from .trainer import (
    DropoutDecision,
    TrainConfig,
    grad_check,
    load_checkpoint,
    sample_dropout,
    save_checkpoint,
    train,
    train_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
