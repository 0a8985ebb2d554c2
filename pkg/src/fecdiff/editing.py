"""Minimal native editing pipeline: prompt swap, blend-word masks,
layer-range KV injection, and locality reporting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import AttentionTrace, LayerRange, PromptEmbedding, embed_prompt
from .metrics import latent_loss, trajectory_loss_curve
from .sampling import (
    CaptureOptions,
    FixedMaskProvider,
    GuidanceContext,
    ZeroMaskProvider,
    invert,
    sample_fec_kv_reuse,
    sample_fec_noise,
    sample_fec_ref,
)
from .schedule import NoiseSchedule, TimestepPlan

MASK_THRESHOLD = 0.3

EDIT_METHODS = ("fec-ref", "fec-noise", "fec-kv-reuse")


@dataclass
class EditMask:
    """Binary spatial mask over the latent grid (1 = region to edit)."""

    values: np.ndarray
    provenance: str = "user-supplied"
    degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        self.values = v


@dataclass(frozen=True)
class EditRequest:
    source_prompt: str
    edit_prompt: str
    method: str
    blend_word: str | None = None
    layer_range: LayerRange | None = None
    guidance: float = 7.5

    def __post_init__(self):
        if self.method not in EDIT_METHODS:
            raise ValueError(f"unknown edit method {self.method!r}; expected one of {EDIT_METHODS}")
        if self.blend_word is not None and self.blend_word not in self.edit_prompt.split():
            raise ValueError(f"blend word {self.blend_word!r} does not occur in the edit prompt")


def _nearest_resize(m: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = m.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return m[np.ix_(rows, cols)]


def derive_mask(
    trace: AttentionTrace,
    blend_word: str,
    embedding: PromptEmbedding,
    t: int,
    spatial_shape: tuple[int, int] | None = None,
    threshold: float = MASK_THRESHOLD,
) -> EditMask:
    """Binary mask from the blend word's averaged cross-attention map.

    The map is averaged over heads and layers, resized (nearest neighbor)
    to the latent grid, min-max normalized and thresholded. A constant map
    cannot be normalized; it yields an all-zero mask flagged degenerate,
    the conservative "reconstruct everything" choice.
    """
    idx = embedding.word_index(blend_word)
    m = trace.token_map(t, idx)
    if spatial_shape is not None and m.shape != tuple(spatial_shape):
        m = _nearest_resize(m, tuple(spatial_shape))
    lo, hi = m.min(), m.max()
    if hi == lo:
        return EditMask(np.zeros_like(m), provenance="attention-derived", degenerate=True)
    m = (m - lo) / (hi - lo)
    return EditMask((m >= threshold).astype(np.float64), provenance="attention-derived")


class AttentionMaskProvider:
    """Per-step masks from the live conditional cross-attention maps.

    ``spatial_shape`` is the latent grid the mask must blend against; maps
    recorded on a coarser attention grid are resized to it.
    """

    needs_trace = True

    def __init__(
        self,
        blend_word: str,
        threshold: float = MASK_THRESHOLD,
        spatial_shape: tuple[int, int] | None = None,
    ):
        self.blend_word = blend_word
        self.threshold = threshold
        self.spatial_shape = spatial_shape
        self.derived: dict[int, EditMask] = {}

    def mask(self, t, trace, embedding):
        em = derive_mask(
            trace, self.blend_word, embedding, t,
            spatial_shape=self.spatial_shape, threshold=self.threshold,
        )
        self.derived[t] = em
        return em.values


@dataclass
class EditReport:
    method: str
    reconstructed: bool
    per_step_losses: list[tuple[int, float]] = field(default_factory=list)
    locality: dict[str, float] | None = None
    mask_degenerate_steps: list[int] = field(default_factory=list)


def _locality(
    output: np.ndarray, reconstruction: np.ndarray, mask: np.ndarray
) -> dict[str, float]:
    """Region-restricted latent distances between an edit and the
    reconstruction (mask zero-region = the part an edit must preserve)."""
    keep = mask == 0.0
    edit = ~keep
    diff = (output - reconstruction) ** 2
    out = {
        "outside_mask_mse": float(diff[:, keep].mean()) if keep.any() else 0.0,
        "inside_mask_mse": float(diff[:, edit].mean()) if edit.any() else 0.0,
    }
    return out


def run_edit(
    net,
    sched: NoiseSchedule,
    plan: TimestepPlan,
    z0: np.ndarray,
    req: EditRequest,
    embed_seed: int = 0,
    user_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, EditReport]:
    """Invert with the source prompt, then run the method's edit sampler.

    Identical source and edit prompts degenerate to the method's
    reconstruct mode. The report carries per-step losses against the
    reference trajectory and, for masked fec-noise edits, the locality
    metric against the method's own reconstruction.
    """
    cond = embed_prompt(req.source_prompt, embed_seed)
    null = embed_prompt("", embed_seed)
    ctx = GuidanceContext(scale=req.guidance, cond=cond, uncond=null)
    edit_ctx = GuidanceContext(
        scale=req.guidance, cond=embed_prompt(req.edit_prompt, embed_seed), uncond=null
    )
    reconstruct = req.edit_prompt == req.source_prompt
    mode = "reconstruct" if reconstruct else "edit"
    needs_kv = req.method == "fec-kv-reuse"

    res = invert(net, z0, ctx, plan, sched, CaptureOptions(kv=needs_kv))
    traj = res.trajectory
    record: dict[int, np.ndarray] = {}
    report = EditReport(method=req.method, reconstructed=reconstruct)

    if req.method == "fec-ref":
        out = sample_fec_ref(
            net, traj, ctx, plan, sched, mode=mode, edit_ctx=edit_ctx, record=record, route="edit"
        )
    elif req.method == "fec-noise":
        if user_mask is not None:
            provider = FixedMaskProvider(user_mask)
        elif req.blend_word is not None and not reconstruct:
            provider = AttentionMaskProvider(
                req.blend_word, spatial_shape=net.config.latent_shape[1:]
            )
        else:
            provider = ZeroMaskProvider()
        out = sample_fec_noise(
            net, traj, ctx, plan, sched, provider, mode=mode, edit_ctx=edit_ctx,
            record=record, route="edit",
        )
        if isinstance(provider, AttentionMaskProvider):
            report.mask_degenerate_steps = sorted(
                t for t, m in provider.derived.items() if m.degenerate
            )
        if not reconstruct:
            recon = sample_fec_noise(net, traj, ctx, plan, sched, mode="reconstruct", route="edit")
            if user_mask is not None:
                report.locality = _locality(out, recon, np.asarray(user_mask, dtype=np.float64))
            else:
                report.locality = {"reconstruction_mse": latent_loss(out, recon)}
    else:
        layers = req.layer_range or LayerRange(0, net.config.layer_count)
        out = sample_fec_kv_reuse(
            net, traj[plan.timesteps[0]], res.kv_cache, ctx, plan, sched, layers,
            cache_uncond=res.kv_cache_uncond,
            edit_ctx=None if reconstruct else edit_ctx, record=record, route="edit",
        )

    report.per_step_losses = trajectory_loss_curve(record, traj)
    return out, report
