import numpy as np
import pytest

from ssa_nowcast.errors import ConfigurationError, DataError
from ssa_nowcast.models import HeatmapRequest, Mode, Precision, SampleWindow
from ssa_nowcast.nn.unet import build
from ssa_nowcast.services.explain_service import (ExplainService, composite, explain_sweep, grad_cam,
                                                  heatmap_filename, normalize_heatmap, read_pgm, render_pgm)


@pytest.fixture
def window(six_out):
    rng = np.random.default_rng(6)
    return SampleWindow(inputs=rng.random((1, 12, 32, 32)), targets=rng.random((1, 6, 32, 32)), horizon=six_out)


def test_sweep_covers_every_layer_at_input_resolution(tiny_config, window):
    model = build(tiny_config)
    heatmaps = explain_sweep(model, window)
    assert len(heatmaps) == 24
    for heatmap in heatmaps:
        assert heatmap.values.shape == (32, 32)
        assert heatmap.values.min() >= 0.0 and heatmap.values.max() <= 1.0
    sources = {h.layer: h.source_resolution for h in heatmaps}
    assert sources["encoder.level1.block"] == (32, 32)
    assert sources["encoder.level5.attention"] == (2, 2)
    assert sources["decoder.level4.block"] == (32, 32)


def test_sweep_leaves_parameters_and_prediction_alone(tiny_config, window):
    model = build(tiny_config)
    before = model(window.inputs, Mode.EVAL)
    explain_sweep(model, window)
    assert all(not p.grad.any() for p in model.parameters())
    assert np.array_equal(model(window.inputs, Mode.EVAL), before)


def test_target_scale_does_not_change_heatmap(tiny_config, window):
    model = build(tiny_config, Precision.HIGH)
    base = grad_cam(model, window, "encoder.level3.block.conv1")
    scaled = grad_cam(model, window, "encoder.level3.block.conv1", scale=4.0)
    assert np.array_equal(base.values, scaled.values)


def test_single_layer_matches_sweep(tiny_config, window):
    model = build(tiny_config, Precision.HIGH)
    sweep = {h.layer: h for h in explain_sweep(model, window)}
    single = grad_cam(model, window, "decoder.level2.block")
    assert np.allclose(single.values, sweep["decoder.level2.block"].values)


def test_unknown_layer_lists_available_layers(tiny_config, window):
    with pytest.raises(ConfigurationError, match="encoder.level1.attention"):
        grad_cam(build(tiny_config), window, "encoder.level9.block")


def test_frame_index_out_of_range(tiny_config, window):
    with pytest.raises(ConfigurationError, match="frame index"):
        grad_cam(build(tiny_config), window, "encoder.level1.block", frame_index=6)


def test_heatmap_filenames():
    assert heatmap_filename("encoder.level3.block.conv1") == "conv1.encoder3.pgm"
    assert heatmap_filename("encoder.level1.attention") == "attention.encoder1.pgm"
    assert heatmap_filename("decoder.level2.block") == "block.decoder2.pgm"


def test_pgm_round_trip(tmp_path):
    image = np.array([[0.0, 0.5, 1.0], [1.0, 2.0, -1.0]])
    path = render_pgm(image, tmp_path / "x.pgm")
    assert path.read_bytes().startswith(b"P5\n3 2\n255\n")
    assert read_pgm(path).tolist() == [[0, 128, 255], [255, 255, 0]]


def test_composite_layout():
    panels = [np.zeros((4, 3)), np.full((4, 5), 0.5)]
    image = composite(panels)
    assert image.shape == (4, 3 + 2 + 5)
    assert np.all(image[:, 3:5] == 1.0)
    with pytest.raises(ConfigurationError):
        composite([np.zeros((4, 3)), np.zeros((5, 3))])


def test_service_writes_one_file_per_layer(tmp_path, tiny_config, window):
    written = ExplainService(build(tiny_config), tmp_path).run(window, with_composite=True)
    assert len(written) == 24
    assert len(list(tmp_path.glob("*.pgm"))) == 24
    assert read_pgm(written["encoder.level2.block.conv2"]).shape == (32, 4 * 32 + 3 * 2)


def test_request_selects_window_and_layers(tmp_path, tiny_config, window):
    request = HeatmapRequest(window_index=1, layers=["encoder.level1.attention", "decoder.level4.block"],
                             frame_index=2)
    other = SampleWindow(inputs=window.inputs[:, ::-1].copy(), targets=window.targets, horizon=window.horizon)
    model = build(tiny_config)
    written = ExplainService(model, tmp_path).handle(request, [window, other])
    assert sorted(p.name for p in written.values()) == ["attention.encoder1.pgm", "block.decoder4.pgm"]
    expected = grad_cam(model, other, "decoder.level4.block", frame_index=2)
    stored = read_pgm(written["decoder.level4.block"])
    assert np.array_equal(stored, np.round(expected.values * 255).astype(np.uint8))


def test_request_window_out_of_range(tmp_path, tiny_config, window):
    with pytest.raises(DataError, match="window index 3"):
        ExplainService(build(tiny_config), tmp_path).handle(HeatmapRequest(window_index=3), [window])


def test_flat_maps_are_flagged():
    ones, flagged = normalize_heatmap(np.full((4, 4), 0.3))
    assert flagged and np.all(ones == 1.0)
    zeros, flagged = normalize_heatmap(np.zeros((4, 4)))
    assert flagged and np.all(zeros == 0.0)
    values, flagged = normalize_heatmap(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert not flagged
    assert values.tolist() == [[0.0, 0.5], [0.25, 1.0]]
