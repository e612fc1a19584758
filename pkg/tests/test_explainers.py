"""Explainer math against straight-line oracles and hand-computed cases."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xbench import (
    AttentionStack,
    CaptureBundle,
    HeadFusion,
    RolloutConfig,
    SaliencyMap,
    SaliencyMethod,
    attention_rollout,
    augment_attention,
    grad_cam,
    gradient_attention_rollout,
    normalize_map,
    rollout_vector,
)
from xbench.adapters import WindowLayout
from xbench.explainers import (
    grad_cam_map,
    merge_flow_matrix,
    save_overlay_png,
    save_saliency_png,
    scatter_windows,
    windowed_rollout_vector,
)

from oracles import (
    grad_cam_oracle,
    random_stochastic_layer,
    rollout_oracle,
)


def make_stack(layers, num_special=1, grid=None):
    tokens = layers[0].shape[-1]
    grid = grid or (1, tokens - num_special)
    return AttentionStack(layers=list(layers), num_special_tokens=num_special, token_grid=grid)


def make_bundle(stack, grads, target_class=0, channels=2):
    rows, cols = stack.token_grid
    rng = np.random.default_rng(0)
    probs = np.full(4, 0.25)
    return CaptureBundle(
        attentions=stack,
        attention_grads=list(grads),
        target_activations=rng.normal(size=(channels, rows, cols)),
        target_grads=rng.normal(size=(channels, rows, cols)),
        target_class=target_class,
        probs=probs,
    )


# -- augment_attention ---------------------------------------------------------

@pytest.mark.parametrize("weight", [0.0, 0.3, 0.5, 1.0])
def test_augment_identity_is_fixed_point(weight):
    eye = np.eye(5)
    np.testing.assert_array_equal(augment_attention(eye, weight), eye)


def test_augment_uniform_two_tokens_hand_value():
    uniform = np.full((2, 2), 0.5)
    expected = np.array([[0.75, 0.25], [0.25, 0.75]])
    np.testing.assert_allclose(augment_attention(uniform, 0.5), expected, atol=1e-15)


def test_augment_weight_zero_returns_input():
    rng = np.random.default_rng(0)
    a = random_stochastic_layer(rng, 1, 6)[0]
    np.testing.assert_allclose(augment_attention(a, 0.0), a, atol=1e-15)


def test_augment_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        augment_attention(np.ones((2, 3)), 0.5)


def test_augment_preserves_row_stochasticity():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(2, 10))
        a = random_stochastic_layer(rng, 1, n)[0]
        w = float(rng.uniform(0.0, 1.0))
        out = augment_attention(a, w)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert (out >= 0).all()


# -- attention rollout ----------------------------------------------------------

def test_rollout_identity_stack_gives_zero_map():
    eye = np.eye(5)[None]  # one head
    stack = make_stack([eye.copy(), eye.copy()], num_special=1, grid=(2, 2))
    smap = attention_rollout(stack)
    assert smap.method is SaliencyMethod.ROLLOUT
    np.testing.assert_array_equal(smap.values, np.zeros((224, 224), np.float32))


def test_rollout_uniform_layer_gives_zero_map():
    uniform = np.full((1, 5, 5), 0.2)
    stack = make_stack([uniform], num_special=1, grid=(2, 2))
    smap = attention_rollout(stack)
    np.testing.assert_array_equal(smap.values, np.zeros((224, 224), np.float32))


def test_rollout_two_layers_matches_chain_oracle():
    rng = np.random.default_rng(7)
    layers = [random_stochastic_layer(rng, 3, 4) for _ in range(2)]
    stack = make_stack(layers, num_special=1)
    got = rollout_vector(stack, RolloutConfig())
    expected = rollout_oracle(layers, residual_weight=0.5, fusion="mean", num_special=1)
    np.testing.assert_allclose(got, expected, atol=1e-6)


@pytest.mark.parametrize("fusion", list(HeadFusion))
def test_rollout_head_fusions_match_oracle(fusion):
    rng = np.random.default_rng(hash(fusion.value) % 2**32)
    layers = [random_stochastic_layer(rng, 4, 6) for _ in range(3)]
    stack = make_stack(layers, num_special=1)
    got = rollout_vector(stack, RolloutConfig(head_fusion=fusion, residual_weight=0.4))
    expected = rollout_oracle(layers, residual_weight=0.4, fusion=fusion.value, num_special=1)
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_rollout_token_mismatch_rejected():
    rng = np.random.default_rng(1)
    stack = make_stack([random_stochastic_layer(rng, 2, 5), random_stochastic_layer(rng, 2, 6)])
    with pytest.raises(ValueError, match="token-count mismatch"):
        rollout_vector(stack, RolloutConfig())


def test_rollout_empty_stack_rejected():
    stack = AttentionStack(layers=[], num_special_tokens=1, token_grid=(1, 1))
    with pytest.raises(ValueError, match="empty"):
        rollout_vector(stack, RolloutConfig())


def test_rollout_grid_size_must_match_tokens():
    rng = np.random.default_rng(2)
    stack = make_stack([random_stochastic_layer(rng, 2, 5)], num_special=1, grid=(3, 3))
    with pytest.raises(ValueError, match="grid"):
        attention_rollout(stack)


# -- gradient attention rollout ---------------------------------------------------

def test_grad_rollout_unit_gradients_equal_plain_rollout():
    rng = np.random.default_rng(3)
    for _ in range(5):
        layers = [random_stochastic_layer(rng, 2, 5) for _ in range(3)]
        stack = make_stack(layers, num_special=1, grid=(2, 2))
        grads = [np.ones_like(l) for l in layers]
        bundle = make_bundle(stack, grads)
        plain = attention_rollout(stack, RolloutConfig())
        graded = gradient_attention_rollout(bundle, RolloutConfig(discard_ratio=0.0))
        assert np.array_equal(plain.values, graded.values)


def test_grad_rollout_all_negative_gradients_zero_map():
    rng = np.random.default_rng(4)
    layers = [random_stochastic_layer(rng, 2, 5) for _ in range(2)]
    stack = make_stack(layers, num_special=1, grid=(2, 2))
    grads = [-np.ones_like(l) for l in layers]
    smap = gradient_attention_rollout(make_bundle(stack, grads), RolloutConfig())
    np.testing.assert_array_equal(smap.values, np.zeros((224, 224), np.float32))


@pytest.mark.parametrize("discard", [0.0, 0.25])
def test_grad_rollout_matches_straight_line_oracle(discard):
    rng = np.random.default_rng(5)
    layers = [random_stochastic_layer(rng, 2, 4) for _ in range(2)]
    grads = [rng.normal(size=l.shape) for l in layers]
    stack = make_stack(layers, num_special=1)
    cfg = RolloutConfig(discard_ratio=discard)
    got = rollout_vector(stack, cfg, grads=grads)
    expected = rollout_oracle(
        layers, residual_weight=0.5, fusion="mean", num_special=1,
        grads=grads, discard_ratio=discard,
    )
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_grad_rollout_shape_incongruence_rejected():
    rng = np.random.default_rng(6)
    layers = [random_stochastic_layer(rng, 2, 4)]
    stack = make_stack(layers, num_special=1)
    with pytest.raises(ValueError):
        rollout_vector(stack, RolloutConfig(), grads=[])


def test_grad_rollout_default_discard_is_aggressive():
    bundle_cfg = RolloutConfig(discard_ratio=0.9)
    from xbench.explainers import GRAD_ROLLOUT_CONFIG
    assert GRAD_ROLLOUT_CONFIG == bundle_cfg


# -- grad-cam ----------------------------------------------------------------------

def test_grad_cam_zero_gradients_zero_map():
    rng = np.random.default_rng(8)
    stack = make_stack([random_stochastic_layer(rng, 1, 5)], num_special=1, grid=(2, 2))
    bundle = make_bundle(stack, [np.zeros_like(stack.layers[0])])
    bundle.target_grads = np.zeros_like(bundle.target_grads)
    smap = grad_cam(bundle)
    np.testing.assert_array_equal(smap.values, np.zeros((224, 224), np.float32))


def test_grad_cam_constant_positive_field_normalizes_to_zero():
    acts = np.ones((1, 3, 3))
    grads = np.full((1, 3, 3), 0.7)  # positive mean weight, constant map
    raw = grad_cam_map(acts, grads)
    np.testing.assert_allclose(raw, 0.7, atol=1e-12)
    np.testing.assert_array_equal(normalize_map(raw), np.zeros((3, 3)))


def test_grad_cam_matches_oracle_pre_upsample():
    rng = np.random.default_rng(9)
    acts = rng.normal(size=(8, 7, 7))
    grads = rng.normal(size=(8, 7, 7))
    np.testing.assert_allclose(grad_cam_map(acts, grads), grad_cam_oracle(acts, grads), atol=1e-6)


def test_grad_cam_requires_congruent_shapes():
    with pytest.raises(ValueError):
        grad_cam_map(np.zeros((2, 3, 3)), np.zeros((2, 4, 4)))


def test_grad_cam_is_non_negative_pre_normalization():
    rng = np.random.default_rng(10)
    for _ in range(25):
        raw = grad_cam_map(rng.normal(size=(4, 5, 5)), rng.normal(size=(4, 5, 5)))
        assert raw.min() >= 0.0


# -- normalize_map -------------------------------------------------------------------

def test_normalize_map_hand_example():
    raw = np.array([[0.0, 2.0], [4.0, 8.0]])
    np.testing.assert_allclose(normalize_map(raw), [[0.0, 0.25], [0.5, 1.0]], atol=1e-15)


def test_normalize_map_constant_input_gives_zeros():
    np.testing.assert_array_equal(normalize_map(np.full((3, 3), 5.0)), np.zeros((3, 3)))


def test_normalize_map_idempotent_on_normalized_input():
    raw = np.array([[0.0, 0.25], [0.75, 1.0]])
    np.testing.assert_array_equal(normalize_map(raw), raw)


def test_normalize_map_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        normalize_map(np.array([[0.0, np.nan]]))
    with pytest.raises(ValueError, match="finite"):
        normalize_map(np.array([[0.0, np.inf]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=36))
def test_normalize_map_range_property(values):
    side = int(np.sqrt(len(values)))
    raw = np.array(values[: side * side]).reshape(side, side)
    out = normalize_map(raw)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.max() in (0.0, 1.0)


# -- saliency map invariants -----------------------------------------------------------

def test_saliency_map_validation():
    with pytest.raises(ValueError, match="outside"):
        SaliencyMap(np.array([[0.0, 1.5]]), SaliencyMethod.ROLLOUT)
    with pytest.raises(ValueError, match="peak"):
        SaliencyMap(np.array([[0.0, 0.5]]), SaliencyMethod.ROLLOUT)
    with pytest.raises(ValueError, match="2-D"):
        SaliencyMap(np.zeros(4), SaliencyMethod.ROLLOUT)
    ok = SaliencyMap(np.array([[0.0, 1.0]]), SaliencyMethod.GRAD_CAM, target_class=3)
    assert ok.values.dtype == np.float32


def test_rollout_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(discard_ratio=1.0)
    with pytest.raises(ValueError):
        RolloutConfig(residual_weight=1.5)


# -- windowed (Swin) fallback -----------------------------------------------------------

def test_scatter_windows_is_row_stochastic_partition():
    rng = np.random.default_rng(11)
    layout = WindowLayout(grid=(4, 4), window_size=2, shift=1)
    fused = rng.uniform(0.1, 1.0, size=(4, 4, 4))
    fused = fused / fused.sum(axis=-1, keepdims=True)
    full = scatter_windows(fused, layout)
    assert full.shape == (16, 16)
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)
    # every row holds exactly one window row: 4 nonzero entries
    assert (np.count_nonzero(full, axis=1) == 4).all()


def test_scatter_windows_positions_hand_checked():
    # grid 2x2, window 2, no shift: the single window covers the whole grid.
    layout = WindowLayout(grid=(2, 2), window_size=2, shift=0)
    fused = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    np.testing.assert_array_equal(scatter_windows(fused, layout), fused[0])


def test_merge_flow_matrix_parents():
    flow = merge_flow_matrix((4, 4), (2, 2))
    assert flow.shape == (16, 4)
    np.testing.assert_allclose(flow.sum(axis=1), 1.0)
    # fine token (row 1, col 2) -> flat 6 feeds coarse (0, 1) -> flat 1
    assert flow[6, 1] == 1.0
    with pytest.raises(ValueError, match="merge"):
        merge_flow_matrix((4, 4), (3, 3))


def test_windowed_rollout_matches_dense_oracle():
    """One windowed layer must equal: scatter -> augment -> column means."""
    rng = np.random.default_rng(12)
    layout = WindowLayout(grid=(4, 4), window_size=2, shift=1)
    layer = random_stochastic_layer(rng, 2, 4).reshape(1, 2, 4, 4).repeat(4, axis=0)
    layer = rng.uniform(0.1, 1.0, size=(4, 2, 4, 4))
    layer = layer / layer.sum(axis=-1, keepdims=True)
    stack = AttentionStack(
        layers=[layer], num_special_tokens=0, token_grid=(4, 4), windows=[layout],
    )
    got = windowed_rollout_vector(stack, RolloutConfig())

    fused = layer.mean(axis=1)
    full = scatter_windows(fused, layout)
    blended = 0.5 * np.eye(16) + 0.5 * full
    blended = blended / blended.sum(axis=1, keepdims=True)
    expected = blended.mean(axis=0)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_windowed_rollout_chains_across_merge():
    rng = np.random.default_rng(13)
    fine = WindowLayout(grid=(4, 4), window_size=2, shift=0)
    coarse = WindowLayout(grid=(2, 2), window_size=2, shift=0)
    layer1 = rng.uniform(0.1, 1.0, size=(4, 1, 4, 4))
    layer1 = layer1 / layer1.sum(axis=-1, keepdims=True)
    layer2 = rng.uniform(0.1, 1.0, size=(1, 1, 4, 4))
    layer2 = layer2 / layer2.sum(axis=-1, keepdims=True)
    stack = AttentionStack(
        layers=[layer1, layer2], num_special_tokens=0, token_grid=(2, 2),
        windows=[fine, coarse],
    )
    got = windowed_rollout_vector(stack, RolloutConfig())
    assert got.shape == (4,)

    def aug(m):
        b = 0.5 * np.eye(m.shape[0]) + 0.5 * m
        return b / b.sum(axis=1, keepdims=True)

    chain = aug(scatter_windows(layer1.mean(axis=1), fine))
    chain = chain @ merge_flow_matrix((4, 4), (2, 2))
    chain = chain @ aug(scatter_windows(layer2.mean(axis=1), coarse))
    np.testing.assert_allclose(got, chain.mean(axis=0), atol=1e-12)

    smap = attention_rollout(stack)
    assert smap.approximate
    assert smap.values.shape == (224, 224)


def test_mixed_global_and_windowed_stack_rejected():
    rng = np.random.default_rng(14)
    layout = WindowLayout(grid=(2, 2), window_size=2, shift=0)
    layer_w = rng.uniform(0.1, 1.0, size=(1, 1, 4, 4))
    layer_w = layer_w / layer_w.sum(axis=-1, keepdims=True)
    stack = AttentionStack(
        layers=[layer_w, random_stochastic_layer(rng, 1, 4)],
        num_special_tokens=0, token_grid=(2, 2), windows=[layout, None],
    )
    with pytest.raises(ValueError, match="mixed"):
        windowed_rollout_vector(stack, RolloutConfig())


# -- export -------------------------------------------------------------------------

def test_saliency_png_roundtrip(tmp_path, rng):
    values = normalize_map(rng.uniform(size=(224, 224)))
    smap = SaliencyMap(values, SaliencyMethod.GRAD_CAM, target_class=2)
    path = save_saliency_png(smap, tmp_path / "map.png", config_note="steps=50")
    from PIL import Image

    restored = np.asarray(Image.open(path), dtype=np.float64) / 65535.0
    np.testing.assert_allclose(restored, smap.values, atol=1.0 / 65535)
    sidecar = (tmp_path / "map.txt").read_text()
    assert "method: grad_cam" in sidecar
    assert "target_class: 2" in sidecar
    assert "config: steps=50" in sidecar


def test_overlay_png_written(tmp_path, rng):
    values = normalize_map(rng.uniform(size=(224, 224)))
    smap = SaliencyMap(values, SaliencyMethod.ROLLOUT)
    pixels = rng.normal(size=(3, 224, 224)).astype(np.float32)
    path = save_overlay_png(smap, pixels, tmp_path / "overlay.png")
    from PIL import Image

    img = Image.open(path)
    assert img.size == (224, 224)
    assert img.mode == "RGB"
