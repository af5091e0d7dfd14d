import numpy as np
import pytest

from gadfit import data as D
from gadfit import extractor as E
from gadfit.errors import ConfigurationError, DimensionError, FormatError


def test_default_config_spatial_sizes():
    model = E.build_extractor(seed=0)
    images = np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)
    feats = model.forward_levels(images)
    assert [lf.level for lf in feats] == [1, 2, 3, 4]
    assert [lf.data.shape[2] for lf in feats] == [32, 16, 8, 4]
    assert [lf.data.shape[1] for lf in feats] == [16, 32, 64, 128]


def test_zero_weights_and_shift_give_zero_outputs():
    model = E.build_extractor(channels=(4, 6), seed=0)
    for lv in model.levels:
        lv.w.data[:] = 0.0
        lv.shift.data[:] = 0.0
    images = np.random.default_rng(1).random((2, 3, 16, 16)).astype(np.float32)
    for lf in model.forward_levels(images):
        np.testing.assert_array_equal(lf.data, 0.0)


def test_forward_deterministic():
    model = E.build_extractor(channels=(4, 6), seed=7)
    images = np.random.default_rng(2).random((3, 3, 16, 16)).astype(np.float32)
    a = [lf.data.copy() for lf in model.forward_levels(images)]
    b = [lf.data.copy() for lf in model.forward_levels(images)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_indivisible_size_raises():
    model = E.build_extractor(channels=(4, 6, 8), seed=0)
    with pytest.raises(DimensionError):
        model.forward_levels(np.zeros((1, 3, 20, 20), dtype=np.float32))


def test_batch_independence_with_frozen_statistics():
    # equality up to GEMM reassociation: BLAS blocks differently per batch size
    model = E.build_extractor(channels=(4, 6), seed=3)
    model.freeze_statistics()
    images = np.random.default_rng(3).random((4, 3, 16, 16)).astype(np.float32)
    batched = model.forward_levels(images)
    for i in range(4):
        single = model.forward_levels(images[i : i + 1])
        for lb, ls in zip(batched, single):
            np.testing.assert_allclose(lb.data[i : i + 1], ls.data, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# pretraining


def test_pretrain_zero_epochs_keeps_initial_weights():
    model = E.build_extractor(channels=(4, 6), seed=5)
    before = model.copy_weights()
    images = np.random.default_rng(4).random((8, 3, 16, 16)).astype(np.float32)
    labels = np.array([0, 1] * 4)
    model, report = E.pretrain_classifier(model, images, labels, epochs=0, seed=0)
    for a, b in zip(before, model.copy_weights()):
        np.testing.assert_array_equal(a, b)
    assert model.frozen


def test_pretrain_single_class_rejected():
    model = E.build_extractor(channels=(4,), seed=5)
    images = np.zeros((4, 3, 16, 16), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        E.pretrain_classifier(model, images, np.zeros(4, dtype=np.int64), epochs=1)


def test_pretrain_deterministic():
    images, labels = D.stack_labeled(
        D.generate_corpus(num_categories=2, train_per_category=8, test_per_category=2, size=16, seed=9, levels=2)
    )

    def run():
        model = E.build_extractor(channels=(4, 6), seed=5)
        model, _ = E.pretrain_classifier(model, images, labels, epochs=2, lr=1e-3, seed=11, batch_size=4)
        return model.copy_weights()

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_pretrain_reaches_high_holdout_accuracy():
    corpus = D.generate_corpus(num_categories=4, train_per_category=24, test_per_category=2, size=32, seed=21)
    images, labels = D.stack_labeled(corpus)
    model = E.build_extractor(channels=(8, 12, 16, 24), seed=2)
    model, report = E.pretrain_classifier(model, images, labels, epochs=20, lr=3e-3, seed=13, batch_size=16)
    assert report.holdout_accuracy > 0.9


def test_statistics_frozen_during_finetuning():
    from gadfit import training as TR

    corpus = D.generate_corpus(num_categories=1, train_per_category=12, test_per_category=2, size=16, seed=5, levels=2)
    images, labels = D.stack_labeled(
        D.generate_corpus(num_categories=2, train_per_category=6, test_per_category=2, size=16, seed=6, levels=2)
    )
    model = E.build_extractor(channels=(4, 6), seed=5)
    model, _ = E.pretrain_classifier(model, images, labels, epochs=2, lr=1e-3, seed=0, batch_size=4)
    stats_before = model.norm_statistics()
    cfg = TR.TrainConfig(max_epochs=3, stopping="fixed_epochs", batch_size=4, seed=1)
    model, _, _ = TR.finetune(model, cfg, corpus.categories["cat00"].train)
    for (m0, v0), (m1, v1) in zip(stats_before, model.norm_statistics()):
        np.testing.assert_array_equal(m0, m1)
        np.testing.assert_array_equal(v0, v1)


# ---------------------------------------------------------------------------
# weight files


def _small_model():
    model = E.build_extractor(channels=(4, 6), seed=17)
    model.freeze_statistics()
    return model


def test_weight_roundtrip_bitwise(tmp_path):
    model = _small_model()
    path = tmp_path / "model.gadw"
    E.save_weights(model, path)
    restored, gaussians = E.load_weights(path)
    assert gaussians is None
    assert restored.channels == model.channels
    assert restored.frozen == model.frozen
    for a, b in zip(model.copy_weights(), restored.copy_weights()):
        np.testing.assert_array_equal(a, b)
    for (m0, v0), (m1, v1) in zip(model.norm_statistics(), restored.norm_statistics()):
        np.testing.assert_array_equal(m0, m1)
        np.testing.assert_array_equal(v0, v1)


def test_weight_roundtrip_with_gaussians(tmp_path):
    from gadfit import gaussian as G

    model = _small_model()
    images = np.random.default_rng(6).random((6, 3, 16, 16)).astype(np.float32)
    gm = G.fit_gaussian(model.forward_levels(images), "tied")
    path = tmp_path / "model.gadw"
    E.save_weights(model, path, gaussians=gm)
    _, restored = E.load_weights(path)
    assert restored is not None
    for idx in gm.levels:
        np.testing.assert_array_equal(gm.level(idx).mean, restored.level(idx).mean)
        np.testing.assert_array_equal(gm.level(idx).cholesky, restored.level(idx).cholesky)


def test_corrupted_magic_rejected(tmp_path):
    model = _small_model()
    path = tmp_path / "model.gadw"
    E.save_weights(model, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        E.load_weights(path)


def test_truncated_file_rejected(tmp_path):
    model = _small_model()
    path = tmp_path / "model.gadw"
    E.save_weights(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        E.load_weights(path)


def test_channel_mismatch_rejected(tmp_path):
    model = _small_model()
    path = tmp_path / "model.gadw"
    E.save_weights(model, path)
    with pytest.raises(DimensionError):
        E.load_weights(path, expected_channels=(16, 32))
