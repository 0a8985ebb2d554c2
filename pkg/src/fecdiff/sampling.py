"""DDIM stepping, classifier-free guidance, inversion, and the samplers.

Samplers: direct descent, negative-prompt baseline, reference-path
correction (fec-ref), desired-noise correction (fec-noise), and cached
key/value injection (fec-kv-reuse, plus its V-only ablation variant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import (
    AttentionTrace,
    KVCache,
    LayerRange,
    NonFiniteError,
    PromptEmbedding,
    predict_noise,
    predict_noise_capture,
    predict_noise_inject,
    predict_noise_inject_v_only,
)
from .schedule import NoiseSchedule, TimestepPlan


@dataclass(frozen=True)
class GuidanceContext:
    """Guidance scale plus conditional / unconditional embeddings."""

    scale: float
    cond: PromptEmbedding
    uncond: PromptEmbedding

    def __post_init__(self):
        if not np.isfinite(self.scale):
            raise ValueError("guidance scale must be finite")
        if self.cond.tokens.shape != self.uncond.tokens.shape:
            raise ValueError("cond/uncond embedding shapes must match")


@dataclass
class Trajectory:
    """Ordered inversion latents keyed by timestep (plan plus 0 and T)."""

    latents: dict[int, np.ndarray]
    timesteps: tuple[int, ...]
    guidance: float
    seed: int | None = None

    def __getitem__(self, t: int) -> np.ndarray:
        try:
            return self.latents[t]
        except KeyError:
            raise KeyError(f"trajectory has no latent at t={t}") from None

    def covers(self, plan: TimestepPlan) -> bool:
        return all(t in self.latents for t in plan.timesteps) and 0 in self.latents


@dataclass
class CaptureOptions:
    """What to record during inversion.

    ``aligned`` chooses the two-pass KV scheme: after each inversion step
    produces z_t, one extra evaluation at (z_t, t) records K/V, so cached
    entries match exactly what the sampler presents when its latent equals
    z_t. With ``aligned=False`` K/V are recorded from the inversion
    evaluation itself (latent z_{t_prev}, timestep t).
    """

    kv: bool = False
    trace: bool = False
    aligned: bool = True
    overwrite: bool = False


@dataclass
class InvertResult:
    """Inversion outputs: the latent path plus optional capture artifacts.

    K/V are recorded once per classifier-free-guidance branch, because the
    sampler evaluates the network separately under the conditional and the
    unconditional embedding and each evaluation produces its own K/V.
    Injecting one branch's cache into the other corrupts the cond/uncond
    difference that guidance amplifies.
    """

    trajectory: Trajectory
    kv_cache: KVCache | None = None
    kv_cache_uncond: KVCache | None = None
    trace: AttentionTrace | None = None


def cfg_combine(eps_c: np.ndarray, eps_u: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: scale * eps_c + (1 - scale) * eps_u.

    Computed as eps_u + scale * (eps_c - eps_u) so that identical inputs
    pass through bit-exactly; scale 1 returns eps_c exactly.
    """
    if eps_c.shape != eps_u.shape:
        raise ValueError(f"shape mismatch: {eps_c.shape} vs {eps_u.shape}")
    if scale == 1.0:
        return eps_c.copy()
    return eps_u + scale * (eps_c - eps_u)


def _check_step(t: int, t_prev: int):
    if t <= t_prev:
        raise ValueError(f"need t > t_prev, got t={t}, t_prev={t_prev}")
    if t_prev < 0:
        raise ValueError(f"t_prev must be >= 0, got {t_prev}")


def ddim_step(
    z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> np.ndarray:
    """One deterministic DDIM descent step from t to t_prev."""
    _check_step(t, t_prev)
    if z_t.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z_t.shape} vs {eps.shape}")
    ab_t, ab_p = sched.ab(t), sched.ab(t_prev)
    z0_pred = (z_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * z0_pred + np.sqrt(1.0 - ab_p) * eps


def ddim_invert_step(
    z_prev: np.ndarray, eps: np.ndarray, t_prev: int, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """One inversion step from t_prev up to t (algebraic inverse of ddim_step)."""
    _check_step(t, t_prev)
    if z_prev.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z_prev.shape} vs {eps.shape}")
    ab_t, ab_p = sched.ab(t), sched.ab(t_prev)
    z0_pred = (z_prev - np.sqrt(1.0 - ab_p) * eps) / np.sqrt(ab_p)
    return np.sqrt(ab_t) * z0_pred + np.sqrt(1.0 - ab_t) * eps


def desired_noise(
    z_tilde_t: np.ndarray, z_target_prev: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> np.ndarray:
    """The unique eps so that ddim_step(z_tilde_t, eps, t, t_prev) hits the target."""
    _check_step(t, t_prev)
    if z_tilde_t.shape != z_target_prev.shape:
        raise ValueError(f"shape mismatch: {z_tilde_t.shape} vs {z_target_prev.shape}")
    ab_t, ab_p = sched.ab(t), sched.ab(t_prev)
    a = np.sqrt(ab_p / ab_t)
    b = np.sqrt(1.0 - ab_p) - np.sqrt(ab_p * (1.0 - ab_t) / ab_t)
    if b == 0.0:
        raise ZeroDivisionError(f"degenerate schedule step t={t} -> t_prev={t_prev}")
    return (z_target_prev - a * z_tilde_t) / b


def desired_uncond(eps_t: np.ndarray, eps_c: np.ndarray, scale: float) -> np.ndarray:
    """Unconditional noise making cfg_combine(eps_c, result, scale) == eps_t."""
    if scale == 1.0:
        raise ValueError("degenerate guidance: scale = 1 leaves no unconditional weight")
    if eps_t.shape != eps_c.shape:
        raise ValueError(f"shape mismatch: {eps_t.shape} vs {eps_c.shape}")
    return (eps_t - scale * eps_c) / (1.0 - scale)


def guided_noise(net, z, t, ctx: GuidanceContext, *, route="other") -> np.ndarray:
    eps_c = predict_noise(net, z, t, ctx.cond, route=route)
    eps_u = predict_noise(net, z, t, ctx.uncond, route=route)
    return cfg_combine(eps_c, eps_u, ctx.scale)


def _finite(z: np.ndarray, t: int, stage: str) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NonFiniteError(f"non-finite latent during {stage} at t={t}")
    return z


def invert(
    net,
    z0: np.ndarray,
    ctx: GuidanceContext,
    plan: TimestepPlan,
    sched: NoiseSchedule,
    capture: CaptureOptions | None = None,
    seed: int | None = None,
) -> InvertResult:
    """Run DDIM inversion up the plan, recording every latent.

    With KV capture on, each step is followed by aligned evaluations at
    (z_t, t) purely to record K/V (and cross-attention maps when
    requested): one under the conditional embedding and one under the
    unconditional embedding, filling one cache per guidance branch.
    """
    capture = capture or CaptureOptions()
    z0 = np.asarray(z0, dtype=np.float64)
    _finite(z0, 0, "inversion")
    cache = KVCache() if capture.kv else None
    cache_u = KVCache() if capture.kv else None
    trace = AttentionTrace() if capture.trace else None
    latents: dict[int, np.ndarray] = {0: z0.copy()}
    z = z0
    for t_prev, t in plan.inversion_pairs():
        eps = guided_noise(net, z, t, ctx, route="inversion")
        z = _finite(ddim_invert_step(z, eps, t_prev, t, sched), t, "inversion")
        latents[t] = z.copy()
        if cache is not None or (trace is not None and capture.aligned):
            target = cache if cache is not None else KVCache()
            # The capture latent matches what the sampler will present at
            # this timestep when aligned; otherwise re-run the inversion
            # evaluation so capture stays observation-only either way.
            z_cap = z if capture.aligned else latents[t_prev]
            predict_noise_capture(
                net, z_cap, t, ctx.cond, target, trace,
                overwrite=capture.overwrite, route="capture",
            )
            if cache_u is not None:
                predict_noise_capture(
                    net, z_cap, t, ctx.uncond, cache_u,
                    overwrite=capture.overwrite, route="capture",
                )
    traj = Trajectory(
        latents=latents, timesteps=tuple(plan.timesteps), guidance=ctx.scale, seed=seed
    )
    return InvertResult(trajectory=traj, kv_cache=cache, kv_cache_uncond=cache_u, trace=trace)


def sample_direct(
    net,
    traj_start: np.ndarray,
    ctx: GuidanceContext,
    plan: TimestepPlan,
    sched: NoiseSchedule,
    *,
    record: dict[int, np.ndarray] | None = None,
    route: str = "reconstruction",
) -> np.ndarray:
    """Plain guided DDIM descent from the inversion endpoint."""
    z = np.asarray(traj_start, dtype=np.float64)
    if record is not None:
        record[plan.timesteps[0]] = z.copy()
    for t, t_prev in plan.sampling_pairs():
        eps = guided_noise(net, z, t, ctx, route=route)
        z = _finite(ddim_step(z, eps, t, t_prev, sched), t_prev, "sampling")
        if record is not None:
            record[t_prev] = z.copy()
    return z


def sample_neg_prompt_baseline(
    net, traj_start, ctx: GuidanceContext, plan, sched, *, record=None, route="reconstruction"
) -> np.ndarray:
    """Direct sampling with the unconditional embedding set to the prompt."""
    neg_ctx = GuidanceContext(scale=ctx.scale, cond=ctx.cond, uncond=ctx.cond)
    return sample_direct(net, traj_start, neg_ctx, plan, sched, record=record, route=route)


def sample_fec_ref(
    net,
    traj: Trajectory,
    ctx: GuidanceContext,
    plan: TimestepPlan,
    sched: NoiseSchedule,
    mode: str = "reconstruct",
    edit_ctx: GuidanceContext | None = None,
    *,
    record: dict[int, np.ndarray] | None = None,
    route: str = "reconstruction",
) -> np.ndarray:
    """Reference-path sampler: overwrite each step with the inversion latent.

    Reconstruct mode assigns the saved latent at every step and therefore
    returns the encoded source exactly. Edit mode runs the plain guided
    descent under the edit prompt; the reference path stays available to
    downstream consumers via ``traj``.
    """
    if not traj.covers(plan):
        raise ValueError("trajectory does not cover the timestep plan")
    if mode == "reconstruct":
        z = traj[plan.timesteps[0]]
        if record is not None:
            record[plan.timesteps[0]] = z.copy()
        for _, t_prev in plan.sampling_pairs():
            z = traj[t_prev]
            if record is not None:
                record[t_prev] = z.copy()
        return z.copy()
    if mode == "edit":
        use_ctx = edit_ctx if edit_ctx is not None else ctx
        return sample_direct(
            net, traj[plan.timesteps[0]], use_ctx, plan, sched, record=record, route=route
        )
    raise ValueError(f"unknown mode {mode!r}")


class ZeroMaskProvider:
    """All-zero masks: every position takes the desired noise."""

    needs_trace = False

    def mask(self, t, trace, embedding):
        return None


class FixedMaskProvider:
    """One user-supplied mask applied at every step."""

    needs_trace = False

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.min() < 0.0 or mask.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        self._mask = mask

    def mask(self, t, trace, embedding):
        return self._mask


def sample_fec_noise(
    net,
    traj: Trajectory,
    ctx: GuidanceContext,
    plan: TimestepPlan,
    sched: NoiseSchedule,
    mask_provider=None,
    mode: str = "reconstruct",
    edit_ctx: GuidanceContext | None = None,
    *,
    record: dict[int, np.ndarray] | None = None,
    route: str = "reconstruction",
) -> np.ndarray:
    """Desired-noise sampler.

    Each step derives the unconditional noise that would land exactly on
    the saved inversion latent, then blends it with the live unconditional
    prediction under the step mask (reconstruct mode forces the mask to
    zero, so the step takes pure desired noise). With guidance scale 1 the
    unconditional derivation is singular and blending happens on total
    noise instead, preserving exactness in unmasked regions.
    """
    if mode not in ("reconstruct", "edit"):
        raise ValueError(f"unknown mode {mode!r}")
    if not traj.covers(plan):
        raise ValueError("trajectory does not cover the timestep plan")
    use_ctx = edit_ctx if (mode == "edit" and edit_ctx is not None) else ctx
    scale = use_ctx.scale
    if mode == "reconstruct" or mask_provider is None:
        mask_provider = ZeroMaskProvider()

    z = traj[plan.timesteps[0]].copy()
    if record is not None:
        record[plan.timesteps[0]] = z.copy()
    for t, t_prev in plan.sampling_pairs():
        trace = AttentionTrace() if getattr(mask_provider, "needs_trace", False) else None
        eps_c = net.predict(z, t, use_ctx.cond, trace_to=trace, route=route)
        eps_des = desired_noise(z, traj[t_prev], t, t_prev, sched)
        m = mask_provider.mask(t, trace, use_ctx.cond)
        if m is None:
            m = 0.0
        live = not np.isscalar(m) or m != 0.0
        if scale == 1.0:
            # Singular Eq.-13 case: blend total noise so unmasked regions
            # still receive exactly the desired noise.
            if live:
                eps_u_live = net.predict(z, t, use_ctx.uncond, route=route)
                eps_live = cfg_combine(eps_c, eps_u_live, scale)
                eps = m * eps_live + (1.0 - m) * eps_des
            else:
                eps = eps_des
        else:
            eps_u_des = desired_uncond(eps_des, eps_c, scale)
            if live:
                eps_u_live = net.predict(z, t, use_ctx.uncond, route=route)
                eps_u = m * eps_u_live + (1.0 - m) * eps_u_des
            else:
                eps_u = eps_u_des
            eps = cfg_combine(eps_c, eps_u, scale)
        z = _finite(ddim_step(z, eps, t, t_prev, sched), t_prev, "fec-noise sampling")
        if record is not None:
            record[t_prev] = z.copy()
    return z


def sample_fec_kv_reuse(
    net,
    traj_start: np.ndarray,
    cache: KVCache,
    ctx: GuidanceContext,
    plan: TimestepPlan,
    sched: NoiseSchedule,
    layers: LayerRange | None = None,
    edit_ctx: GuidanceContext | None = None,
    *,
    cache_uncond: KVCache | None = None,
    v_only: bool = False,
    record: dict[int, np.ndarray] | None = None,
    route: str = "reconstruction",
) -> np.ndarray:
    """Guided descent with cached self-attention K/V injected at each step.

    Each guidance branch injects from its own cache: ``cache`` feeds the
    conditional evaluation and ``cache_uncond`` the unconditional one
    (falling back to ``cache`` when omitted). Reconstruction uses the
    source prompt over the full layer range; edits substitute the edit
    prompt while keeping injection. ``v_only`` runs the ablation that
    reuses V while keeping K live.
    """
    if layers is None:
        layers = LayerRange(0, net.config.layer_count)
    inject = predict_noise_inject_v_only if v_only else predict_noise_inject
    use_ctx = edit_ctx if edit_ctx is not None else ctx
    cache_u = cache_uncond if cache_uncond is not None else cache
    for t in plan.timesteps:
        if not (cache.has_timestep(t) and cache_u.has_timestep(t)):
            raise KeyError(f"KV cache has no entries at planned timestep t={t}")
    z = np.asarray(traj_start, dtype=np.float64)
    if record is not None:
        record[plan.timesteps[0]] = z.copy()
    for t, t_prev in plan.sampling_pairs():
        eps_c = inject(net, z, t, use_ctx.cond, cache, layers, route=route)
        eps_u = inject(net, z, t, use_ctx.uncond, cache_u, layers, route=route)
        eps = cfg_combine(eps_c, eps_u, use_ctx.scale)
        z = _finite(ddim_step(z, eps, t, t_prev, sched), t_prev, "fec-kv-reuse sampling")
        if record is not None:
            record[t_prev] = z.copy()
    return z
