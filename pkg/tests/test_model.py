import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import random_grid, random_item
from midi2drum.model import diffusion
from midi2drum.model.network import PRESETS, ConditionBundle, DiTConfig, DrumDiT, batch_loss
from midi2drum.signals import LATENT_DIM, frames_for_duration
from midi2drum.tensor_nn import grad_check_params

GRAD_TOL = 1e-4


def _loss_fn(model, items, seed=0):
    rng = np.random.default_rng(seed)
    z0s = [z for z, _ in items]
    bundles = [b for _, b in items]
    zts, vts = [], []
    for z0, b in zip(z0s, bundles):
        zt, v = diffusion.forward_diffusion(z0, rng.normal(size=z0.shape), b.t)
        zts.append(zt)
        vts.append(v)
    batch = model.collate(zts, bundles)
    v_target = np.zeros_like(batch.z)
    for i, v in enumerate(vts):
        v_target[i, : len(v)] = v
    return lambda: batch_loss(model.params, model.config, batch, v_target)


def mixed_items(rng):
    """Two timelines of different length, one blanked reference, one cropped reference."""
    return [
        random_item(rng, bpm=240.0, ref_frames=9),
        random_item(rng, bpm=200.0, blank=True),
    ]


def test_full_tiny_model_gradients_every_coordinate():
    rng = np.random.default_rng(0)
    model = DrumDiT.create(PRESETS["tiny"], seed=1)
    report = grad_check_params(_loss_fn(model, mixed_items(rng)), model.params)
    assert max(report.values()) <= GRAD_TOL, sorted(report.items(), key=lambda kv: -kv[1])[:3]


def test_toy_model_gradients_sampled_coordinates():
    rng = np.random.default_rng(1)
    model = DrumDiT.create(PRESETS["toy"], seed=2)
    report = grad_check_params(
        _loss_fn(model, mixed_items(rng)), model.params, max_coords=2, rng=np.random.default_rng(3)
    )
    assert set(report) == set(model.params.params)
    assert max(report.values()) <= GRAD_TOL


def test_presets():
    toy = PRESETS["toy"]
    assert (toy.layers, toy.d_model, toy.heads) == (4, 64, 4)
    full = PRESETS["full"]
    assert (full.layers, full.d_model, full.heads) == (24, 1536, 24)
    with pytest.raises(ValueError):
        DiTConfig(d_model=10, heads=3)


def test_forward_shape_and_padding_invariance():
    rng = np.random.default_rng(4)
    model = DrumDiT.create(PRESETS["tiny"], seed=0)
    (z_a, b_a), (z_b, b_b) = random_item(rng, bpm=240.0), random_item(rng, bpm=180.0)
    alone = model.forward(z_a, b_a)
    assert alone.shape == z_a.shape
    together = model.predict_many([z_a, z_b], [b_a, b_b])
    np.testing.assert_allclose(together[0], alone, atol=1e-10)
    np.testing.assert_allclose(together[1], model.forward(z_b, b_b), atol=1e-10)


def test_blank_reference_uses_null_and_changes_output():
    rng = np.random.default_rng(5)
    model = DrumDiT.create(PRESETS["tiny"], seed=0)
    z, b = random_item(rng)
    assert not np.allclose(model.forward(z, b), model.forward(z, b.blanked()))
    # the null row is a parameter: changing it changes only the blanked output
    before = model.forward(z, b)
    model.params["null_ref"].data += 1.0
    np.testing.assert_allclose(model.forward(z, b), before, atol=1e-12)


def test_timeline_mismatch_rejected():
    rng = np.random.default_rng(6)
    model = DrumDiT.create(PRESETS["tiny"], seed=0)
    z, b = random_item(rng)
    with pytest.raises(ValueError, match="timeline"):
        model.forward(z[:-1], b)


def test_empty_reference_rejected_and_grid_too_long():
    rng = np.random.default_rng(7)
    g = random_grid(rng)
    with pytest.raises(ValueError):
        ConditionBundle.from_grids(g, g, np.zeros((0, LATENT_DIM)))
    model = DrumDiT.create(PRESETS["tiny"], seed=0)
    long = random_grid(rng, res=32)
    with pytest.raises(ValueError):
        model.content_encode(long.steps, long.steps, None)


def test_content_encode_and_global_tokens_shapes():
    rng = np.random.default_rng(8)
    model = DrumDiT.create(PRESETS["tiny"], seed=0)
    g = random_grid(rng)
    feats = model.content_encode(g.steps, g.steps, rng.normal(size=(5, LATENT_DIM)))
    assert feats.shape == (32, 8)
    tok = model.global_tokens(0.5, 2.0, 16)
    assert tok.shape == (3, 8)
    assert not np.allclose(tok[0], model.global_tokens(0.1, 2.0, 16)[0])
    with pytest.raises(ValueError):
        model.global_tokens(1.5, 2.0, 16)


def test_sample_is_deterministic_and_guidance_calls():
    rng = np.random.default_rng(9)
    model = DrumDiT.create(PRESETS["tiny"], seed=0)
    _, b = random_item(rng)
    a1 = model.sample(b, steps=3, seed=11)
    a2 = model.sample(b, steps=3, seed=11)
    assert np.array_equal(a1, a2)
    assert a1.shape == (frames_for_duration(b.duration_seconds), LATENT_DIM)
    assert not np.array_equal(a1, model.sample(b, steps=3, seed=12))
    assert not np.array_equal(a1, model.sample(b, steps=3, seed=11, guidance_scale=3.0))


# --------------------------------------------------------------------------
# Diffusion identities


def test_schedule_on_unit_circle():
    t = np.linspace(0, 1, 1001)
    a, s = diffusion.noise_schedule(t)
    assert np.max(np.abs(a**2 + s**2 - 1)) <= 1e-12
    assert diffusion.noise_schedule(0.0) == (1.0, 0.0)
    assert diffusion.noise_schedule(1.0) == (0.0, 1.0)
    assert diffusion.noise_schedule(0.5)[0] == pytest.approx(np.sqrt(0.5))
    with pytest.raises(ValueError):
        diffusion.noise_schedule(1.1)


def test_v_parameterization_recovers_data():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(1000):
        z0, z1, t = rng.normal(size=8), rng.normal(size=8), rng.random()
        zt, v = diffusion.forward_diffusion(z0, z1, t)
        x0, eps = diffusion.v_to_x0_eps(zt, v, t)
        worst = max(worst, np.abs(x0 - z0).max(), np.abs(eps - z1).max())
    assert worst <= 1e-6


def test_cfg_combine_endpoints():
    c, u = np.array([1.0, 2.0]), np.array([0.0, 1.0])
    assert np.array_equal(diffusion.cfg_combine(c, u, 1.0), c)
    assert np.array_equal(diffusion.cfg_combine(c, u, 0.0), u)
    assert np.array_equal(diffusion.cfg_combine(c, u, 2.0), [2.0, 3.0])


def oracle_v(z0):
    def predict(z, t, blank):
        a, s = diffusion.noise_schedule(t)
        eps = (z - a * z0) / s
        return a * eps - s * z0

    return predict


@pytest.mark.parametrize("sampler", diffusion.SAMPLERS)
@pytest.mark.parametrize("steps", [1, 10, 50])
def test_oracle_sampler_recovers_data(sampler, steps):
    z0 = np.random.default_rng(11).normal(size=(7, 4))
    out = diffusion.sample(oracle_v(z0), z0.shape, steps=steps, sampler=sampler, seed=3)
    assert np.abs(out - z0).max() <= 1e-5


def test_guidance_with_identical_branches_is_identity():
    z0 = np.random.default_rng(12).normal(size=(5, 3))
    out = diffusion.sample(oracle_v(z0), z0.shape, steps=8, guidance_scale=4.0, seed=1)
    assert np.abs(out - z0).max() <= 1e-5


def test_unconditional_branch_only_used_with_guidance():
    calls = []

    def predict(z, t, blank):
        calls.append(blank)
        return np.zeros_like(z)

    diffusion.sample(predict, (2, 2), steps=4)
    assert calls == [False] * 4
    calls.clear()
    diffusion.sample(predict, (2, 2), steps=4, guidance_scale=2.0)
    assert calls == [False, True] * 4


def test_sampler_argument_errors():
    with pytest.raises(ValueError):
        diffusion.sample(oracle_v(np.zeros(2)), (2,), steps=0)
    with pytest.raises(ValueError):
        diffusion.sample(oracle_v(np.zeros(2)), (2,), sampler="euler")


def test_v_loss():
    assert diffusion.v_loss(np.ones(4), np.zeros(4)) == 1.0
    with pytest.raises(ValueError):
        diffusion.v_loss(np.ones(4), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_forward_diffusion_preserves_unit_variance_pairs(t, seed):
    rng = np.random.default_rng(seed)
    z0, z1 = rng.normal(size=16), rng.normal(size=16)
    zt, v = diffusion.forward_diffusion(z0, z1, t)
    # (z_t, v) is a rotation of (z0, z1)
    np.testing.assert_allclose(zt**2 + v**2, z0**2 + z1**2, rtol=1e-9, atol=1e-12)
