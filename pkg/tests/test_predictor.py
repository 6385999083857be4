"""Gated recurrent predictor: shapes, gate algebra, determinism, goldens.

Golden arrays live in tests/data/predictor_golden.npz (see make_golden.py);
they freeze the behavior of the seed-42 toy model on a fixed image fixture.
"""

from pathlib import Path

import numpy as np
import pytest

from gatedslam.predictor import (
    GatedRecurrentPredictor,
    LatentState,
    ModelConfig,
    init_weights,
    load_weights,
    save_weights,
    sinusoidal_encoding,
)

GOLDEN = np.load(Path(__file__).parent / "data" / "predictor_golden.npz")


@pytest.fixture(scope="module")
def model():
    return GatedRecurrentPredictor(ModelConfig(seed=42))


@pytest.fixture(scope="module")
def images():
    return GOLDEN["images"]


# ------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(height=30)  # not divisible by patch
    with pytest.raises(ValueError):
        ModelConfig(dim=30)  # not divisible by heads
    with pytest.raises(ValueError):
        ModelConfig(blocks=0)
    assert ModelConfig(height=32, width=32, patch=8).tokens == 16


# ------------------------------------------------------------------- encode


def test_encode_token_shape():
    m = GatedRecurrentPredictor(ModelConfig(height=32, width=32, patch=8, dim=16, heads=4))
    toks = m.encode(np.zeros((32, 32, 3)))
    assert toks.shape == (16, 16)


def test_encode_zero_image_is_bias_plus_positional(model):
    toks = model.encode(np.zeros((32, 32, 3)))
    expected = model.weights["patch_bias"] + sinusoidal_encoding(model.cfg.tokens, model.cfg.dim)
    assert np.array_equal(toks, expected)


def test_encode_deterministic(model, images):
    a = model.encode(images[0])
    b = model.encode(images[0])
    assert np.array_equal(a, b)


def test_encode_shape_mismatch(model):
    with pytest.raises(ValueError):
        model.encode(np.zeros((16, 32, 3)))


# -------------------------------------------------------------------- gates


def test_gate_outputs_in_open_interval(model, images):
    toks = model.encode(images[0])
    state = model.initial_state()
    for gate in (model.reset_gate, model.update_gate):
        g = gate(state.tokens, toks)
        assert g.shape == state.tokens.shape
        assert (g > 0).all() and (g < 1).all()


def test_gate_zero_weights_give_half(images):
    cfg = ModelConfig(seed=1)
    w = init_weights(cfg)
    for k in list(w):
        if k.startswith("reset_"):
            w[k] = np.zeros_like(w[k])
    m = GatedRecurrentPredictor(cfg, w)
    g = m.reset_gate(m.initial_state().tokens, m.encode(images[0]))
    assert np.array_equal(g, np.full_like(g, 0.5))


def test_apply_reset_algebra(model):
    state = model.initial_state().tokens
    assert np.array_equal(model.apply_reset(np.ones_like(state), state), state)
    assert np.array_equal(model.apply_reset(np.zeros_like(state), state),
                          np.zeros_like(state))
    # hand-multiplied 2x2 fixture
    r = np.array([[0.5, 2.0], [1.0, 0.0]])
    m = np.array([[4.0, 3.0], [-2.0, 7.0]])
    assert np.array_equal(model.apply_reset(r, m), [[2.0, 6.0], [-2.0, 0.0]])


def test_gated_update_extremes(model):
    rng = np.random.default_rng(0)
    prev = rng.normal(size=(model.cfg.state_tokens, model.cfg.dim))
    prop = rng.normal(size=prev.shape)
    assert np.array_equal(model.gated_update(np.zeros_like(prev), prop, prev), prev)
    assert np.array_equal(model.gated_update(np.ones_like(prev), prop, prev), prop)
    np.testing.assert_allclose(model.gated_update(np.full_like(prev, 0.5), prop, prev),
                               0.5 * (prop + prev))


def test_permutation_equivariance(model):
    # apply_reset/gated_update are element-wise, so a row permutation applied
    # to all operands commutes with them.
    rng = np.random.default_rng(1)
    s = model.cfg.state_tokens
    perm = rng.permutation(s)
    prev = rng.normal(size=(s, model.cfg.dim))
    prop = rng.normal(size=prev.shape)
    gate = rng.random(prev.shape)
    direct = model.gated_update(gate, prop, prev)
    permuted = model.gated_update(gate[perm], prop[perm], prev[perm])
    assert np.array_equal(permuted[np.argsort(perm)], direct)


# ------------------------------------------------------------------- decode


def test_decode_shapes_and_determinism(model, images):
    toks = model.encode(images[0])
    state = model.initial_state().tokens
    z = model.weights["pose_token"]
    m1, z1, t1 = model.decode(state, z, toks)
    m2, z2, t2 = model.decode(state, z, toks)
    assert m1.shape == state.shape and z1.shape == z.shape and t1.shape == toks.shape
    assert np.array_equal(m1, m2) and np.array_equal(z1, z2) and np.array_equal(t1, t2)


# -------------------------------------------------------------------- heads


def test_heads_contracts(model, images):
    toks = model.encode(images[0])
    state = model.initial_state()
    _, z, tok_out = model.decode(state.tokens, model.weights["pose_token"], toks)
    pts, conf = model.head_self(tok_out)
    assert pts.points.shape == (32, 32, 3)
    assert (conf.values > 1.0).all()
    wpts, wconf = model.head_world(tok_out, z)
    assert wpts.points.shape == (32, 32, 3)
    assert (wconf.values > 1.0).all()
    pose = model.head_pose(z)
    assert abs(pose.rotation.norm() - 1.0) < 1e-12


# --------------------------------------------------------------------- step


def test_step_deterministic(model, images):
    s0 = model.initial_state()
    s1a, pred_a = model.step(s0, images[0])
    s1b, pred_b = model.step(s0, images[0])
    assert np.array_equal(s1a.tokens, s1b.tokens)
    assert np.array_equal(pred_a.points_world.points, pred_b.points_world.points)
    assert pred_a.pose.matrix().tolist() == pred_b.pose.matrix().tolist()
    assert s1a.frame_count == 1


def test_step_changes_state_unless_update_zero(model, images):
    s0 = model.initial_state()
    s1, _ = model.step(s0, images[0])
    assert not np.array_equal(s1.tokens, s0.tokens)
    frozen, _ = model.step(s0, images[0], update_override=0.0)
    assert np.array_equal(frozen.tokens, s0.tokens)


def test_step_update_one_takes_proposal(model, images):
    s0 = model.initial_state()
    toks = model.encode(images[0])
    reset = model.reset_gate(s0.tokens, toks)
    proposed, _, _ = model.decode(model.apply_reset(reset, s0.tokens),
                                  model.weights["pose_token"], toks)
    s1, _ = model.step(s0, images[0], update_override=1.0)
    assert np.array_equal(s1.tokens, proposed)


def test_initial_state_reset_bit_exact(model, images):
    before = model.initial_state()
    model.step(before, images[0])
    after = model.initial_state()
    assert np.array_equal(before.tokens, after.tokens)
    assert np.array_equal(after.tokens, model.weights["state_init"])


# ------------------------------------------------------------------ goldens


def test_golden_gates_and_decode(model):
    toks = model.encode(GOLDEN["images"][0])
    state = model.initial_state()
    np.testing.assert_allclose(toks, GOLDEN["tokens0"], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(model.reset_gate(state.tokens, toks), GOLDEN["reset0"],
                               rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(model.update_gate(state.tokens, toks), GOLDEN["update0"],
                               rtol=1e-12, atol=1e-15)
    damped = model.apply_reset(GOLDEN["reset0"], state.tokens)
    mem, z, tok = model.decode(damped, model.weights["pose_token"], toks)
    np.testing.assert_allclose(mem, GOLDEN["mem0"], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(z, GOLDEN["z0"], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(tok, GOLDEN["tok0"], rtol=1e-12, atol=1e-15)


def test_golden_four_frame_sequence(model, images):
    state = model.initial_state()
    for i, img in enumerate(images):
        state, pred = model.step(state, img)
        np.testing.assert_allclose(state.tokens, GOLDEN["states"][i], rtol=1e-12, atol=1e-15)
        q, t = pred.pose.rotation, pred.pose.translation
        np.testing.assert_allclose([q.w, q.x, q.y, q.z, t[0], t[1], t[2]],
                                   GOLDEN["poses"][i], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(pred.points_self.points, GOLDEN["pts_self"][i],
                                   rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(pred.conf_self.values, GOLDEN["conf_self"][i],
                                   rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(pred.points_world.points, GOLDEN["pts_world"][i],
                                   rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(pred.conf_world.values, GOLDEN["conf_world"][i],
                                   rtol=1e-12, atol=1e-15)


# ------------------------------------------------------------------ weights


def test_weight_snapshot_round_trip(tmp_path, model, images):
    path = tmp_path / "weights.bin"
    save_weights(path, model.weights)
    loaded = load_weights(path)
    assert set(loaded) == set(model.weights)
    for k in model.weights:
        assert np.array_equal(loaded[k], model.weights[k])
    clone = GatedRecurrentPredictor(model.cfg, loaded)
    s_ref, pred_ref = model.step(model.initial_state(), images[0])
    s_new, pred_new = clone.step(clone.initial_state(), images[0])
    assert np.array_equal(s_ref.tokens, s_new.tokens)
    assert np.array_equal(pred_ref.points_world.points, pred_new.points_world.points)


def test_weight_dict_validation():
    cfg = ModelConfig()
    w = init_weights(cfg)
    del w["pose_token"]
    with pytest.raises(ValueError):
        GatedRecurrentPredictor(cfg, w)
