import numpy as np
import pytest

from aadom.augment import LabeledBatch
from aadom.errors import (
    CorruptCheckpoint,
    DivergedLoss,
    EmptyDataset,
    InputTooSmall,
    InvalidConfig,
)
from aadom.net.checkpoint import load_checkpoint, save_checkpoint
from aadom.net.gradcheck import LAYER_KINDS, gradient_check
from aadom.net.layers import InvertedResidual, softmax, softmax_cross_entropy
from aadom.net.model import ModelConfig, build_model
from aadom.net.train import train


@pytest.fixture(scope="module")
def small_model():
    return build_model(ModelConfig(num_classes=4, width_mult=0.25), seed=0)


def _x(b=2, t=38, seed=0, mels=128):
    return np.random.default_rng(seed).standard_normal((b, 1, mels, t)).astype(np.float32)


class TestBuild:
    def test_output_width(self):
        m = build_model(ModelConfig(num_classes=4, width_mult=1.0), 0)
        assert m.forward(_x(1)).shape == (1, 4)

    def test_same_seed_same_params(self):
        a = build_model(ModelConfig(3, 0.25), 11).state()
        b = build_model(ModelConfig(3, 0.25), 11).state()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = build_model(ModelConfig(3, 0.25), 12).state()
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_width_quarter_first_conv(self, small_model):
        w = small_model.features.layers[0].layers[0].params["weight"]
        assert w.shape[0] == 16

    def test_min_channels(self):
        assert ModelConfig(3, 0.01).channels(64) == 8

    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            build_model(ModelConfig(num_classes=1), 0)
        with pytest.raises(InvalidConfig):
            build_model(ModelConfig(num_classes=3, width_mult=1.5), 0)

    def test_he_init_scale(self):
        m = build_model(ModelConfig(3, 1.0), 0)
        w = m.features.layers[1].layers[0].params["weight"]  # 64 -> 64, 3x3
        fan_in = w[0].size
        assert w.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.05)


class TestForward:
    def test_rows_sum_to_one(self, small_model):
        p = small_model.forward(_x(5, seed=3) * 10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_duplicates_identical(self, small_model):
        x = _x(1)
        p = small_model.forward(np.concatenate([x, x, x]))
        np.testing.assert_array_equal(p[0], p[1])
        np.testing.assert_array_equal(p[0], p[2])

    def test_zero_padding_changes_output(self, small_model):
        x = _x(1, 39)
        padded = np.concatenate([x, np.zeros((1, 1, 128, 25), np.float32)], axis=3)
        assert not np.allclose(small_model.logits(x), small_model.logits(padded), atol=1e-6)

    def test_time_tiling_invariant(self, small_model):
        x = _x(2, 40, seed=4)
        tiled = np.concatenate([x, x], axis=3)
        np.testing.assert_allclose(small_model.forward(tiled), small_model.forward(x), atol=1e-5)

    def test_too_few_frames(self, small_model):
        with pytest.raises(InputTooSmall):
            small_model.forward(_x(1, 31))
        with pytest.raises(InputTooSmall):
            small_model.forward(np.zeros((1, 1, 64, 40)))

    def test_dropout_train_only(self, small_model):
        x = _x(2)
        a = small_model.logits(x, train=True, rng=np.random.default_rng(0))
        b = small_model.logits(x, train=True, rng=np.random.default_rng(1))
        assert not np.allclose(a, b)

    def test_softmax_stable(self):
        p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
        np.testing.assert_allclose(p.sum(), 1.0)
        assert np.all(np.isfinite(p))

    def test_penultimate_embedding(self):
        m = build_model(ModelConfig(3, 0.25, embedding="penultimate"), 0)
        e = m.embed(_x(3)[:, :, :, :])
        assert e.shape == (3, m.embedding_dim) == (3, 256)


class TestBottleneck:
    def test_residual_identity_when_projection_zero(self):
        rng = np.random.default_rng(0)
        block = InvertedResidual(8, 8, 1, 4, rng, np.float64)
        assert block.residual
        proj = block.body.layers[-1]
        proj.layers[0].params["weight"][:] = 0
        x = rng.standard_normal((2, 6, 5, 8))
        np.testing.assert_array_equal(block.forward(x), x)

    def test_no_residual_on_stride_or_width_change(self):
        rng = np.random.default_rng(0)
        assert not InvertedResidual(8, 8, 2, 2, rng).residual
        assert not InvertedResidual(8, 16, 1, 2, rng).residual


class TestGradients:
    @pytest.mark.parametrize("kind", [k for k in LAYER_KINDS if k != "model"])
    def test_layer(self, kind):
        tol = 1e-5 if kind == "softmax_ce" else 1e-4
        assert gradient_check(kind, seed=1) < tol

    def test_dense_8x4(self):
        assert gradient_check("dense", shape=(5, 8), seed=2) < 1e-4

    def test_depthwise_3x3(self):
        assert gradient_check("depthwise", shape=(2, 7, 6, 3), seed=3) < 1e-4

    @pytest.mark.slow
    def test_whole_model(self):
        # ReLU6 kinks make a few probes noisy; per-layer checks carry the 1e-4 bar
        assert gradient_check("model", seed=0) < 1e-2

    def test_soft_label_ce(self):
        z = np.array([[2.0, 0.0, -1.0]])
        t = np.array([[0.5, 0.5, 0.0]])
        loss, g = softmax_cross_entropy(z, t)
        p = np.exp(z) / np.exp(z).sum()
        assert loss == pytest.approx(-(0.5 * np.log(p[0, 0]) + 0.5 * np.log(p[0, 1])))
        np.testing.assert_allclose(g, p - t)


def _toy(n=48, seed=0, frames=38):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 128, frames)).astype(np.float32)
    y = np.arange(n) % 2
    x[y == 1, 40:60] += 1.5
    return LabeledBatch(x, np.eye(2)[y]), y


class TestTraining:
    def test_separable_toy(self):
        data, y = _toy()
        m = build_model(ModelConfig(2, 0.25), 0)
        log = train(m, data, 20, lr=1e-4, batch_size=16)
        assert log.final_accuracy >= 0.95
        assert len(log.epochs) == 20
        assert log.to_csv().splitlines()[0] == "epoch,loss,accuracy"

    def test_zero_lr(self):
        data, _ = _toy(16)
        m = build_model(ModelConfig(2, 0.25), 0)
        before = {n: o.params[k].copy() for n, o, k in m.parameters()}
        train(m, data, 1, lr=0.0, batch_size=8)
        assert all(np.array_equal(before[n], o.params[k]) for n, o, k in m.parameters())

    def test_deterministic(self):
        data, _ = _toy(16)
        runs = []
        for _ in range(2):
            m = build_model(ModelConfig(2, 0.25), 5)
            train(m, data, 2, lr=1e-3, batch_size=8, seed=9, use_specaug=True, use_mixup=True)
            runs.append(m.state())
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])

    def test_nan_rolls_back(self):
        data, _ = _toy(16)
        m = build_model(ModelConfig(2, 0.25), 0)
        train(m, data, 1, lr=1e-3, batch_size=8)
        before = {k: v.copy() for k, v in m.state().items()}
        bad = LabeledBatch(np.full_like(data.specs, np.nan), data.labels)
        with pytest.raises(DivergedLoss):
            train(m, bad, 1, batch_size=8)
        after = m.state()
        assert all(np.array_equal(before[k], after[k], equal_nan=True) for k in before)

    def test_single_class(self):
        x = np.zeros((4, 128, 38), np.float32)
        with pytest.raises(EmptyDataset):
            train(build_model(ModelConfig(2, 0.25), 0), LabeledBatch(x, np.eye(2)[[0] * 4]), 1)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        data, _ = _toy(16)
        m = build_model(ModelConfig(2, 0.25), 0)
        train(m, data, 1, lr=1e-3, batch_size=8)
        save_checkpoint(m, tmp_path / "m.aadm")
        m2 = load_checkpoint(tmp_path / "m.aadm")
        x = _x(3, seed=7)
        np.testing.assert_array_equal(m.forward(x), m2.forward(x))
        assert m2.adam_step == m.adam_step
        for k in m.adam_m:
            np.testing.assert_array_equal(m.adam_m[k], m2.adam_m[k])
            np.testing.assert_array_equal(m.adam_v[k], m2.adam_v[k])
        assert (tmp_path / "m.aadm").read_bytes()[:4] == b"AADM"

    def test_wrong_magic(self, tmp_path):
        m = build_model(ModelConfig(2, 0.25), 0)
        save_checkpoint(m, tmp_path / "m.aadm")
        raw = (tmp_path / "m.aadm").read_bytes()
        (tmp_path / "bad.aadm").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "bad.aadm")

    def test_flipped_byte_and_truncation(self, tmp_path):
        m = build_model(ModelConfig(2, 0.25), 0)
        save_checkpoint(m, tmp_path / "m.aadm")
        raw = bytearray((tmp_path / "m.aadm").read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        (tmp_path / "flip.aadm").write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "flip.aadm")
        (tmp_path / "cut.aadm").write_bytes(bytes(raw[:100]))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "cut.aadm")
