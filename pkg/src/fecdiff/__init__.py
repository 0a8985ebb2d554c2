"""Diffusion inversion-and-sampling toolkit with trajectory correction.

DDIM inversion plus four sampling strategies (direct, negative-prompt
baseline, reference-path / desired-noise / KV-injection correction), a toy
attention denoiser with an analytic Gaussian oracle, reconstruction
metrics, and an experiment harness.
"""

from .denoiser import (
    AttentionTrace,
    DenoiserConfig,
    GaussianDenoiser,
    KVCache,
    LayerRange,
    NonFiniteError,
    PromptEmbedding,
    ToyDenoiser,
    embed_prompt,
    predict_noise,
    predict_noise_capture,
    predict_noise_inject,
    predict_noise_inject_v_only,
)
from .editing import EditMask, EditRequest, derive_mask, run_edit
from .harness import (
    ExperimentConfig,
    SweepReport,
    check_batch_invariance,
    generate_synthetic_latent,
    report_timing,
    run_ablation_v_only,
    run_sweep,
)
from .metrics import MetricsReport, latent_loss, psnr, ssim, trajectory_loss_curve
from .sampling import (
    CaptureOptions,
    FixedMaskProvider,
    GuidanceContext,
    Trajectory,
    ZeroMaskProvider,
    cfg_combine,
    ddim_invert_step,
    ddim_step,
    desired_noise,
    desired_uncond,
    invert,
    sample_direct,
    sample_fec_kv_reuse,
    sample_fec_noise,
    sample_fec_ref,
    sample_neg_prompt_baseline,
)
from .schedule import NoiseSchedule, TimestepPlan, add_noise, build_schedule, timestep_plan

__version__ = "0.1.0"
