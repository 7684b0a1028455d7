import numpy as np
import pytest

from comet.data import (
    BadMagicError,
    DimOverflowError,
    FeatureDataset,
    GeneratorConfig,
    TruncatedFileError,
    generate,
    inject_anomalies,
    load_features,
    nominal_fence_radius,
    save_features,
)


def small_cfg(**overrides):
    defaults = dict(d=4, n_train=60, n_test=20, n_clusters=2, seed=3)
    defaults.update(overrides)
    return GeneratorConfig(**defaults)


class TestFeatureDataset:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            FeatureDataset(np.array([[np.nan]]), np.array([0]))

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            FeatureDataset(np.ones((2, 2)), np.array([0, 7]))

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            FeatureDataset(np.ones((1, 1)), np.array([0]), contamination_rate=0.6)

    def test_arrays_read_only(self):
        ds = FeatureDataset(np.ones((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            ds.features[0, 0] = 5.0


class TestGenerate:
    def test_zero_rate_has_no_anomalies(self):
        train, _ = generate(small_cfg(contamination_rate=0.0))
        assert int((train.eval_labels == 1).sum()) == 0

    def test_exact_floor_contamination(self):
        train, _ = generate(small_cfg(n_train=200, contamination_rate=0.10))
        assert int((train.eval_labels == 1).sum()) == 20

    def test_floor_policy_rounds_down(self):
        train, _ = generate(small_cfg(n_train=70, contamination_rate=0.0299))
        # floor(0.0299 * 70) = 2
        assert int((train.eval_labels == 1).sum()) == 2

    def test_deterministic_per_seed(self):
        a_train, a_test = generate(small_cfg(contamination_rate=0.1))
        b_train, b_test = generate(small_cfg(contamination_rate=0.1))
        assert np.array_equal(a_train.features, b_train.features)
        assert np.array_equal(a_test.features, b_test.features)
        assert np.array_equal(a_train.eval_labels, b_train.eval_labels)

    def test_test_set_is_half_anomalous(self):
        _, test = generate(small_cfg(n_test=50))
        assert int((test.eval_labels == 1).sum()) == 25

    def test_train_test_disjoint(self):
        train, test = generate(small_cfg())
        train_rows = {row.tobytes() for row in train.features}
        assert not any(row.tobytes() in train_rows for row in test.features)

    @pytest.mark.parametrize("kind", ["gaussian-blobs", "ring", "grid-texture"])
    @pytest.mark.parametrize("anomaly", ["uniform-outlier", "shifted-cluster", "local-deformation"])
    def test_all_generator_combinations(self, kind, anomaly):
        train, test = generate(small_cfg(kind=kind, anomaly_kind=anomaly, contamination_rate=0.1))
        assert train.n == 60 and test.n == 20
        assert np.all(np.isfinite(train.features))


class TestInjectAnomalies:
    def test_zero_rate_identity(self):
        train, _ = generate(small_cfg())
        out = inject_anomalies(train, 0.0, "uniform-outlier", seed=5)
        assert np.array_equal(out.features, train.features)
        assert np.array_equal(out.eval_labels, train.eval_labels)

    def test_exact_replacement_count(self):
        train, _ = generate(small_cfg(n_train=100))
        out = inject_anomalies(train, 0.05, "uniform-outlier", seed=5)
        changed = np.any(out.features != train.features, axis=1)
        assert int(changed.sum()) == 5
        assert int((out.eval_labels == 1).sum()) == 5
        # deterministic per seed
        again = inject_anomalies(train, 0.05, "uniform-outlier", seed=5)
        assert np.array_equal(out.features, again.features)

    def test_original_untouched(self):
        train, _ = generate(small_cfg())
        snapshot = train.features.copy()
        inject_anomalies(train, 0.2, "shifted-cluster", seed=1)
        assert np.array_equal(train.features, snapshot)

    def test_uniform_outliers_beyond_nominal_fence(self):
        # Mahalanobis audit against the generator's true cluster geometry.
        train, _ = generate(small_cfg(d=8, n_train=150))
        out = inject_anomalies(train, 0.2, "uniform-outlier", seed=9)
        centers = np.asarray(out.provenance["centers"])
        std = float(out.provenance["cluster_std"])
        anomalies = out.features[out.eval_labels == 1].astype(np.float64)
        distances = np.linalg.norm(anomalies[:, None, :] - centers[None], axis=2) / std
        fence = nominal_fence_radius(8)
        assert np.all(distances.min(axis=1) > fence)

    def test_invalid_rate_rejected(self):
        train, _ = generate(small_cfg())
        with pytest.raises(ValueError):
            inject_anomalies(train, 0.7, "uniform-outlier", seed=0)

    def test_unknown_kind_rejected(self):
        train, _ = generate(small_cfg())
        with pytest.raises(ValueError):
            inject_anomalies(train, 0.1, "meteor-strike", seed=0)


class TestFeatureFiles:
    def test_round_trip_bitwise(self, tmp_path):
        train, _ = generate(small_cfg(contamination_rate=0.1))
        path = tmp_path / "ds.cmft"
        save_features(train, path)
        back = load_features(path)
        assert np.array_equal(train.features, back.features)
        assert np.array_equal(train.eval_labels, back.eval_labels)

    def test_constructed_fixture_parses(self, tmp_path):
        # 13-byte header + 2*3 float32 payload + 2 label bytes
        import struct

        payload = struct.pack("<4sBII", b"CMFT", 1, 2, 3)
        payload += np.arange(6, dtype="<f4").tobytes()
        payload += bytes([0, 1])
        path = tmp_path / "fixture.cmft"
        path.write_bytes(payload)
        ds = load_features(path)
        assert ds.n == 2 and ds.dim == 3
        assert np.array_equal(ds.features, np.arange(6, dtype=np.float32).reshape(2, 3))
        assert list(ds.eval_labels) == [0, 1]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cmft"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(BadMagicError) as excinfo:
            load_features(path)
        assert excinfo.value.code == "bad_magic"

    def test_bad_version_is_bad_magic(self, tmp_path):
        import struct

        path = tmp_path / "ver.cmft"
        path.write_bytes(struct.pack("<4sBII", b"CMFT", 9, 1, 1) + bytes(5))
        with pytest.raises(BadMagicError):
            load_features(path)

    def test_truncated_payload(self, tmp_path):
        train, _ = generate(small_cfg())
        path = tmp_path / "trunc.cmft"
        save_features(train, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(TruncatedFileError) as excinfo:
            load_features(path)
        assert excinfo.value.code == "truncated"

    def test_trailing_bytes_rejected(self, tmp_path):
        train, _ = generate(small_cfg())
        path = tmp_path / "extra.cmft"
        save_features(train, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(TruncatedFileError):
            load_features(path)

    def test_dim_overflow(self, tmp_path):
        import struct

        path = tmp_path / "huge.cmft"
        path.write_bytes(struct.pack("<4sBII", b"CMFT", 1, 2**31 - 1, 2**31 - 1))
        with pytest.raises(DimOverflowError) as excinfo:
            load_features(path)
        assert excinfo.value.code == "dim_overflow"

    def test_distinct_error_codes(self):
        codes = {BadMagicError.code, TruncatedFileError.code, DimOverflowError.code}
        assert len(codes) == 3
