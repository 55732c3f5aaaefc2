"""Structure-preserving real-image editing on rectified-flow MM-DiT backends."""

from .attention import (
    FeatureCache,
    JointAttentionBlocks,
    TopKIndexSet,
    adapt_i2i_sa,
    adapt_i2t_ca,
    build_injected_row_blocks,
    capture_features,
    decompose_joint_attention,
    recompose_joint_attention,
    topk_rows,
)
from .backend import Backend, HookEvent, HookPoint, capture, override
from .bench import (
    BenchCase,
    MetricReport,
    iou,
    load_manifest,
    pca_project,
    psnr_masked,
    run_benchmark,
    sweep_command,
)
from .core import (
    EditConfig,
    LatentGrid,
    TokenMapping,
    TokenSequence,
    build_token_mapping,
    load_config,
)
from .errors import ReflexEditError, ReflexEditWarning
from .flow import (
    TimestepSchedule,
    Trajectory,
    euler_invert,
    euler_sample,
    noised_invert,
    reconstruct_from_step,
    reconstruction_sweep,
)
from .maskblend import (
    EditMask,
    SaliencyMap,
    blend_latents,
    gaussian_smooth,
    otsu_threshold,
    word_saliency,
)
from .pipeline import (
    EditRequest,
    EditResult,
    InjectionSchedule,
    RunReport,
    build_schedule,
    extract_mid_step,
    generate_with_injection,
    reflex_edit,
)
from .tensorio import read_tensor, write_tensor
from .toy_backend import BackendSpec, ToyBackend, build_backend, flux_like_spec

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendSpec",
    "BenchCase",
    "EditConfig",
    "EditMask",
    "EditRequest",
    "EditResult",
    "FeatureCache",
    "HookEvent",
    "HookPoint",
    "InjectionSchedule",
    "JointAttentionBlocks",
    "LatentGrid",
    "MetricReport",
    "ReflexEditError",
    "ReflexEditWarning",
    "RunReport",
    "SaliencyMap",
    "TimestepSchedule",
    "TokenMapping",
    "TokenSequence",
    "TopKIndexSet",
    "ToyBackend",
    "Trajectory",
    "adapt_i2i_sa",
    "adapt_i2t_ca",
    "blend_latents",
    "build_backend",
    "build_injected_row_blocks",
    "build_schedule",
    "build_token_mapping",
    "capture",
    "capture_features",
    "decompose_joint_attention",
    "euler_invert",
    "euler_sample",
    "extract_mid_step",
    "flux_like_spec",
    "gaussian_smooth",
    "generate_with_injection",
    "iou",
    "load_config",
    "load_manifest",
    "noised_invert",
    "otsu_threshold",
    "override",
    "pca_project",
    "psnr_masked",
    "read_tensor",
    "reconstruct_from_step",
    "reconstruction_sweep",
    "recompose_joint_attention",
    "reflex_edit",
    "run_benchmark",
    "sweep_command",
    "topk_rows",
    "word_saliency",
    "write_tensor",
]
