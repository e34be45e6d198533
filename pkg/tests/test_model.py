import numpy as np
import pytest

from mdnet import model as M
from mdnet import tensor as T
from mdnet.tensor import Tensor
from mdnet.model import CheckpointError, ConvSpec, ModelConfig


REDUCED = ModelConfig(descriptor_dim=8, num_detectors=2,
                      backbone=(ConvSpec(3, 8, 1), ConvSpec(3, 8, 1), ConvSpec(3, 8, 2)))


def _image(rng, h=48, w=48):
    return Tensor(rng.random((3, h, w)))


class TestForward:
    def test_descriptor_unit_norm(self, rng):
        weights = M.init_weights(REDUCED, seed=0)
        maps = M.forward(_image(rng), weights)
        norms = np.linalg.norm(maps.descriptors.data, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_heatmap_open_unit_range(self, rng):
        weights = M.init_weights(REDUCED, seed=1)
        maps = M.forward(_image(rng), weights)
        assert np.all(maps.heatmaps.data > 0)
        assert np.all(maps.heatmaps.data < 1)
        assert maps.heatmaps.data.shape == (2, 48, 48)

    def test_spatial_size_preserved(self, rng):
        weights = M.init_weights(REDUCED, seed=2)
        maps = M.forward(_image(rng, 33, 41), weights)
        assert maps.features.data.shape == (8, 33, 41)

    def test_deterministic(self, rng):
        weights = M.init_weights(REDUCED, seed=3)
        img = _image(rng)
        a = M.forward(img, weights)
        b = M.forward(img, weights)
        assert np.array_equal(a.features.data, b.features.data)
        assert np.array_equal(a.descriptors.data, b.descriptors.data)
        assert np.array_equal(a.heatmaps.data, b.heatmaps.data)

    def test_wrong_channel_count_rejected(self, rng):
        weights = M.init_weights(REDUCED, seed=0)
        with pytest.raises(ValueError, match=r"\(3, H, W\)"):
            M.forward(Tensor(rng.random((1, 48, 48))), weights)

    def test_too_small_input_rejected(self, rng):
        weights = M.init_weights(REDUCED, seed=0)
        small = REDUCED.min_input_size - 1
        with pytest.raises(ValueError, match="receptive field"):
            M.forward(Tensor(rng.random((3, small, small))), weights)

    def test_translation_covariance(self, rng):
        # fully convolutional with same padding: interior responses shift
        # with the input once the receptive-field border is excluded; holds
        # exactly only without cross-spatial normalization
        cfg = ModelConfig(descriptor_dim=48, num_detectors=2,
                          backbone=M.DESK_BACKBONE, normalization="none")
        weights = M.init_weights(cfg, seed=4)
        big = rng.random((3, 140, 140))
        s = 3
        crop = 100
        i1 = Tensor(big[:, :crop, :crop])
        i2 = Tensor(big[:, s:s + crop, s:s + crop])
        out1 = M.forward(i1, weights)
        out2 = M.forward(i2, weights)
        m = weights.config.min_input_size // 2 + s
        for a, b in ((out1.features.data, out2.features.data),
                     (out1.descriptors.data, out2.descriptors.data),
                     (out1.heatmaps.data, out2.heatmaps.data)):
            inner_a = a[:, m + s:crop - m, m + s:crop - m]
            inner_b = b[:, m:crop - m - s, m:crop - m - s]
            assert np.max(np.abs(inner_a - inner_b)) < 1e-5

    def test_detector_count_change_leaves_backbone_outputs_unchanged(self, rng):
        weights2 = M.init_weights(REDUCED, seed=5)
        weights4 = M.reinit_detector_head(weights2, 4, seed=99)
        img = _image(rng)
        a = M.forward(img, weights2)
        b = M.forward(img, weights4)
        assert np.array_equal(a.features.data, b.features.data)
        assert np.array_equal(a.descriptors.data, b.descriptors.data)
        assert b.heatmaps.data.shape[0] == 4

    def test_forward_batch_matches_single(self, rng):
        weights = M.init_weights(REDUCED, seed=6)
        imgs = rng.random((2, 3, 32, 32))
        batch = M.forward_batch(Tensor(imgs), weights)
        for i in range(2):
            single = M.forward(Tensor(imgs[i]), weights)
            np.testing.assert_allclose(batch.descriptors.data[i],
                                       single.descriptors.data, atol=1e-12)


class TestParameterCount:
    def test_detector_head_alone(self):
        cfg = ModelConfig(descriptor_dim=128, num_detectors=2,
                          backbone=(ConvSpec(3, 128, 1),))
        weights = M.init_weights(cfg, seed=0)
        head = weights.head_weight.data.size + weights.head_bias.data.size
        assert head == 2 * 128 * 1 * 1 + 2 == 258

    def test_default_config_under_budget(self):
        weights = M.init_weights(ModelConfig(), seed=0)
        assert M.count_parameters(weights) < 500_000

    def test_reduced_config_hand_computed(self):
        weights = M.init_weights(REDUCED, seed=0)
        # conv: (216+8) + (576+8) + (576+8), head: 2*8 + 2
        assert M.count_parameters(weights) == 216 + 8 + 576 + 8 + 576 + 8 + 18

    def test_config_validation(self):
        with pytest.raises(ValueError, match="descriptor_dim"):
            ModelConfig(descriptor_dim=1)
        with pytest.raises(ValueError, match="num_detectors"):
            ModelConfig(num_detectors=0)
        with pytest.raises(ValueError, match="last backbone layer"):
            ModelConfig(descriptor_dim=64,
                        backbone=(ConvSpec(3, 32, 1),))

    def test_min_input_size_from_layer_list(self):
        assert REDUCED.min_input_size == 1 + 2 + 2 + 4
        assert ModelConfig().min_input_size == 1 + 2 * (1 + 1 + 1 + 2 + 2 + 4 + 4 + 4)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        weights = M.init_weights(REDUCED, seed=7)
        path = tmp_path / "model.mdnw"
        M.save_weights(weights, path)
        loaded = M.load_weights(path)
        for a, b in zip(weights.parameters(), loaded.parameters()):
            assert np.array_equal(a.data, b.data)
        # byte-identical re-serialization
        path2 = tmp_path / "again.mdnw"
        M.save_weights(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_float32_round_trip(self, tmp_path):
        weights = M.init_weights(REDUCED, seed=8, dtype=np.float32)
        path = tmp_path / "model.mdnw"
        M.save_weights(weights, path)
        loaded = M.load_weights(path)
        assert loaded.conv_weights[0].data.dtype == np.float32
        for a, b in zip(weights.parameters(), loaded.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.mdnw"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            M.load_weights(path)

    def test_truncated_rejected(self, tmp_path):
        weights = M.init_weights(REDUCED, seed=9)
        path = tmp_path / "model.mdnw"
        M.save_weights(weights, path)
        blob = path.read_bytes()
        (tmp_path / "cut.mdnw").write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            M.load_weights(tmp_path / "cut.mdnw")

    def test_header_is_self_describing(self, tmp_path):
        cfg = REDUCED
        weights = M.reinit_detector_head(M.init_weights(cfg, seed=10), 4, seed=11)
        path = tmp_path / "n4.mdnw"
        M.save_weights(weights, path)
        loaded = M.load_weights(path)
        assert loaded.config.num_detectors == 4
        assert loaded.config.descriptor_dim == cfg.descriptor_dim
        assert loaded.config.backbone == cfg.backbone
