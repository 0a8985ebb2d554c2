import numpy as np
import pytest

from fecdiff.denoiser import AttentionTrace, LayerRange, embed_prompt
from fecdiff.editing import (
    AttentionMaskProvider,
    EditRequest,
    derive_mask,
    run_edit,
)
from fecdiff.harness import generate_synthetic_latent, reconstruct_once
from fecdiff.metrics import latent_loss


def test_edit_request_validation():
    with pytest.raises(ValueError):
        EditRequest("a cat", "a dog", method="direct")
    with pytest.raises(ValueError):
        EditRequest("a cat", "a dog", method="fec-noise", blend_word="bird")
    EditRequest("a cat", "a dog", method="fec-noise", blend_word="dog")


def _trace_with_map(t, grid, col):
    """One-layer trace whose token column is the given flat map."""
    trace = AttentionTrace(grid_shape=grid, n_tokens=8)
    weights = np.full((grid[0] * grid[1], 8), 1e-3)
    weights[:, 1] = col
    trace.store(t, 0, weights)
    return trace


def test_derive_mask_thresholds_known_map():
    emb = embed_prompt("a dog", 0)
    col = np.zeros(16)
    col[5] = 1.0
    col[6] = 0.4
    col[7] = 0.2
    trace = _trace_with_map(100, (4, 4), col)
    mask = derive_mask(trace, "dog", emb, 100)
    # Min-max normalization leaves the column unchanged here (min 0, max 1),
    # so positions at or above the 0.3 threshold become ones.
    expected = np.zeros((4, 4))
    expected.flat[5] = 1.0
    expected.flat[6] = 1.0
    assert np.array_equal(mask.values, expected)
    assert mask.provenance == "attention-derived"
    assert not mask.degenerate


def test_derive_mask_resizes_to_latent_grid():
    emb = embed_prompt("a dog", 0)
    col = np.zeros(16)
    col[0] = 1.0
    trace = _trace_with_map(100, (4, 4), col)
    mask = derive_mask(trace, "dog", emb, 100, spatial_shape=(8, 8))
    assert mask.values.shape == (8, 8)
    # Nearest-neighbor upsampling spreads the hot cell over a 2x2 block.
    assert mask.values[:2, :2].sum() == 4.0
    assert mask.values.sum() == 4.0


def test_derive_mask_degenerate_constant_map():
    emb = embed_prompt("a dog", 0)
    trace = _trace_with_map(100, (4, 4), np.full(16, 0.25))
    mask = derive_mask(trace, "dog", emb, 100)
    assert mask.degenerate
    assert not mask.values.any()


def test_attention_mask_provider_records_steps(net, cond):
    z = np.random.default_rng(0).standard_normal(net.config.latent_shape)
    trace = AttentionTrace()
    net.predict(z, 500, cond, trace_to=trace)
    provider = AttentionMaskProvider("cat", spatial_shape=net.config.latent_shape[1:])
    m = provider.mask(500, trace, cond)
    assert m.shape == net.config.latent_shape[1:]
    assert 500 in provider.derived


def test_identical_prompt_edit_degenerates_to_reconstruction(net, sched, plan10):
    z0 = generate_synthetic_latent(0, "blocks")
    for method, check in (
        ("fec-ref", lambda out: out.tobytes() == z0.tobytes()),
        ("fec-noise", lambda out: latent_loss(z0, out) < 1e-12),
    ):
        req = EditRequest("a cat on a mat", "a cat on a mat", method)
        out, report = run_edit(net, sched, plan10, z0, req)
        assert report.reconstructed
        assert check(out)


def test_identical_prompt_kv_edit_matches_reconstruction(net, sched, plan10):
    z0 = generate_synthetic_latent(0, "blocks")
    req = EditRequest("a cat on a mat", "a cat on a mat", "fec-kv-reuse")
    out, report = run_edit(net, sched, plan10, z0, req)
    recon, _ = reconstruct_once(
        net, sched, plan10, z0, "fec-kv-reuse", "a cat on a mat", 7.5, 7.5
    )
    assert report.reconstructed
    assert out.tobytes() == recon.tobytes()


def test_box_mask_edit_locality(net, sched, plan10):
    z0 = generate_synthetic_latent(1, "blocks")
    mask = np.zeros((16, 16))
    mask[4:12, 4:12] = 1.0
    req = EditRequest("a cat on a mat", "a dog on a mat", "fec-noise")
    out, report = run_edit(net, sched, plan10, z0, req, user_mask=mask)
    assert report.locality["outside_mask_mse"] < 1e-10
    assert report.locality["inside_mask_mse"] > report.locality["outside_mask_mse"]


def test_blend_word_edit_reports_locality(net, sched, plan10):
    z0 = generate_synthetic_latent(1, "gaussian")
    req = EditRequest("a cat on a mat", "a dog on a mat", "fec-noise", blend_word="dog")
    out, report = run_edit(net, sched, plan10, z0, req)
    assert not report.reconstructed
    assert "reconstruction_mse" in report.locality
    assert report.per_step_losses[0][0] == plan10.timesteps[0]


def test_kv_edit_layer_range_changes_output(net, sched, plan10):
    z0 = generate_synthetic_latent(2, "gaussian")
    full = EditRequest("a cat on a mat", "a dog on a mat", "fec-kv-reuse",
                       layer_range=LayerRange(0, net.layer_count))
    half = EditRequest("a cat on a mat", "a dog on a mat", "fec-kv-reuse",
                       layer_range=LayerRange(0, net.layer_count // 2))
    out_full, _ = run_edit(net, sched, plan10, z0, full)
    out_half, _ = run_edit(net, sched, plan10, z0, half)
    assert not np.array_equal(out_full, out_half)
