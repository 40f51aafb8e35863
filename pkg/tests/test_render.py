import numpy as np
import pytest
from PIL import Image

from vlx.render import RenderSpec, default_spec, grid, heat_layer, render_heatmap, save_overlay


def test_zero_map_is_white_under_symmetric_max():
    heat = heat_layer(np.zeros((3, 3)), RenderSpec())
    assert np.array_equal(heat, np.ones((3, 3, 3)))


def test_diverging_endpoints():
    img = render_heatmap(np.array([[-2.0, 2.0]]), None, RenderSpec(alpha=1.0))
    assert img[0, 0].tolist() == [0, 0, 255]
    assert img[0, 1].tolist() == [255, 0, 0]


def test_constant_minmax_is_mid_color():
    spec = RenderSpec("magnitude", 1.0, "minmax")
    img = render_heatmap(np.full((4, 4), 3.0), None, spec)
    assert len({tuple(p) for p in img.reshape(-1, 3)}) == 1


def test_overlay_blend():
    base = np.full((2, 2), 0.5)
    img = render_heatmap(np.zeros((2, 2)), base, RenderSpec(alpha=0.25))
    # white heat over mid-gray
    assert np.all(img == round((0.25 + 0.75 * 0.5) * 255))


def test_alpha_zero_shows_base_only():
    base = np.linspace(0, 1, 16).reshape(4, 4)
    img = render_heatmap(np.random.default_rng(0).normal(size=(4, 4)), base, RenderSpec(alpha=0.0))
    assert np.array_equal(img[..., 0], np.rint(base * 255).astype(np.uint8))


def test_spec_validation():
    with pytest.raises(ValueError):
        RenderSpec(alpha=1.5)
    with pytest.raises(ValueError):
        RenderSpec("diverging", 0.5, "minmax")
    with pytest.raises(ValueError):
        RenderSpec("rainbow")


def test_shape_mismatch():
    with pytest.raises(ValueError):
        render_heatmap(np.zeros((4, 4)), np.zeros((3, 3)))


def test_defaults_per_method():
    assert default_spec("occlusion").colormap == "magnitude"
    assert default_spec("ig").colormap == "diverging"


def test_grid_layout():
    a = np.zeros((2, 2, 3), np.uint8)
    g = grid([[a, a], [a]], pad=1)
    assert g.shape == (7, 7, 3)
    assert g[0, 0].tolist() == [255, 255, 255]
    assert g[1, 1].tolist() == [0, 0, 0]
    assert g[4, 4].tolist() == [255, 255, 255]  # missing tile stays padding


def test_save_overlay_png(tmp_path):
    path = tmp_path / "o.png"
    save_overlay(path, np.eye(4), np.zeros((4, 4)), upscale=2)
    with Image.open(path) as im:
        assert im.mode == "RGB" and im.size == (8, 8)
