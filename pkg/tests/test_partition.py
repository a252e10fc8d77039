from __future__ import annotations

import numpy as np
import pytest

from fedshare.distributions import emd_to_global, global_distribution, system_emd
from fedshare.errors import IdxCountMismatch, IdxMagicError, IdxParseError, IdxTruncatedError, PartitionInfeasible
from fedshare.fl import TrainConfig, train_centralized
from fedshare.partition import (
    Dataset,
    bits_per_sample,
    load_idx,
    manifest,
    partition_dirichlet,
    partition_iid,
    partition_pathological,
    profiles_of,
    synth_dataset,
    write_idx,
)


@pytest.fixture(scope="module")
def ten_class():
    return synth_dataset(10, 600, 4, seed=3)


def assert_exhaustive(parts, n):
    idx = np.concatenate([p.source_index for p in parts])
    assert np.array_equal(np.sort(idx), np.arange(n))


class TestPathological:
    def test_ninety_five_single_class(self, ten_class):
        parts = partition_pathological(ten_class, 100, 95, seed=0)
        one_hot = [p for p in parts if np.count_nonzero(p.label_histogram()) == 1]
        assert len(one_hot) == 95
        assert all(np.count_nonzero(parts[k].label_histogram()) == 1 for k in range(95))
        assert [int(np.argmax(parts[k].label_histogram())) for k in range(12)] == [k % 10 for k in range(12)]
        assert_exhaustive(parts, len(ten_class))

    def test_no_single_is_near_iid(self):
        data = synth_dataset(10, 1000, 2, seed=0)
        worst = 0.0
        for seed in range(20):
            profiles = profiles_of(partition_pathological(data, 20, 0, seed))
            worst = max(worst, system_emd(profiles, global_distribution(profiles)))
        assert worst < 0.2

    def test_single_client_holds_everything(self, ten_class):
        (only,) = partition_pathological(ten_class, 1, 0, seed=0)
        assert only.n_k == len(ten_class)
        assert np.array_equal(only.label_histogram(), ten_class.class_counts())

    def test_all_single_class_emd(self):
        data = synth_dataset(5, 40, 2, seed=1)
        profiles = profiles_of(partition_pathological(data, 10, 10, seed=2))
        g = np.full(5, 0.2)
        for p in profiles:
            assert emd_to_global(p.dist, g) == pytest.approx(2 * 4 / 5, abs=1e-15)

    def test_deterministic(self, ten_class):
        a = partition_pathological(ten_class, 30, 25, seed=9)
        b = partition_pathological(ten_class, 30, 25, seed=9)
        assert all(np.array_equal(x.source_index, y.source_index) for x, y in zip(a, b))

    def test_infeasible(self):
        data = synth_dataset(3, 10, 2, seed=0)
        with pytest.raises(PartitionInfeasible):
            partition_pathological(data, 3, 3, seed=0, samples_per_client=20)

    def test_bad_arguments(self, ten_class):
        with pytest.raises(ValueError):
            partition_pathological(ten_class, 5, 6, seed=0)


class TestDirichlet:
    def test_huge_alpha_is_iid(self):
        data = synth_dataset(10, 1000, 2, seed=0)
        profiles = profiles_of(partition_dirichlet(data, 10, 1e6, seed=1))
        assert system_emd(profiles, global_distribution(profiles)) < 0.05

    def test_smaller_alpha_more_skew(self, ten_class):
        def med(alpha):
            vals = []
            for s in range(20):
                profiles = profiles_of(partition_dirichlet(ten_class, 20, alpha, seed=s))
                vals.append(system_emd(profiles, global_distribution(profiles)))
            return np.median(vals)

        assert med(0.1) > med(10.0)

    def test_single_client(self, ten_class):
        (only,) = partition_dirichlet(ten_class, 1, 0.1, seed=0)
        assert np.array_equal(only.label_histogram(), ten_class.class_counts())

    def test_exhaustive(self, ten_class):
        assert_exhaustive(partition_dirichlet(ten_class, 17, 0.3, seed=4), len(ten_class))

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_alpha_must_be_positive(self, ten_class, alpha):
        with pytest.raises(ValueError):
            partition_dirichlet(ten_class, 4, alpha, seed=0)


def test_iid_exhaustive(ten_class):
    assert_exhaustive(partition_iid(ten_class, 7, seed=0), len(ten_class))


class TestSynth:
    def test_balance(self):
        d = synth_dataset(3, 100, 5, seed=0)
        assert len(d) == 300
        assert d.class_counts().tolist() == [100, 100, 100]

    def test_deterministic(self):
        a, b = synth_dataset(4, 10, 3, seed=7), synth_dataset(4, 10, 3, seed=7)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_learnable(self):
        d = synth_dataset(10, 200, 20, seed=0)
        _, acc = train_centralized(d, TrainConfig(seed=0), d, epochs=50)
        assert acc >= 0.95

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            synth_dataset(0, 10, 2, seed=0)


class TestBitsPerSample:
    def test_mnist(self):
        assert bits_per_sample(784, 8, 4) == 6276

    def test_minimal(self):
        assert bits_per_sample(1, 1, 1) == 2

    def test_zero_dim(self):
        with pytest.raises(ValueError):
            bits_per_sample(0)


class TestIdx:
    def _write(self, tmp_path, n_img=3, n_lab=3):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(n_img, 4, 5), dtype=np.uint8)
        labs = rng.integers(0, 10, size=n_lab, dtype=np.uint8)
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        write_idx(imgs, labs, ip, lp)
        return imgs, labs, ip, lp

    def test_round_trip(self, tmp_path):
        imgs, labs, ip, lp = self._write(tmp_path)
        d = load_idx(ip, lp)
        assert d.features.shape == (3, 20)
        np.testing.assert_array_equal(d.features, imgs.reshape(3, -1) / 255.0)
        np.testing.assert_array_equal(d.labels, labs)
        assert d.features.min() >= 0 and d.features.max() <= 1

    def test_header_is_big_endian(self, tmp_path):
        _, _, ip, _ = self._write(tmp_path)
        assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03"

    def test_empty_file(self, tmp_path):
        _, _, ip, lp = self._write(tmp_path)
        ip.write_bytes(b"")
        with pytest.raises(IdxTruncatedError):
            load_idx(ip, lp)

    def test_bad_magic(self, tmp_path):
        _, _, ip, lp = self._write(tmp_path)
        with pytest.raises(IdxMagicError):
            load_idx(lp, lp)

    def test_truncated_payload(self, tmp_path):
        _, _, ip, lp = self._write(tmp_path)
        ip.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(IdxTruncatedError):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        _, _, ip, lp = self._write(tmp_path, n_img=2, n_lab=1)
        with pytest.raises(IdxCountMismatch):
            load_idx(ip, lp)

    def test_errors_share_a_base(self):
        assert issubclass(IdxCountMismatch, IdxParseError) and issubclass(IdxMagicError, IdxParseError)


def test_manifest(ten_class):
    parts = partition_pathological(ten_class, 10, 5, seed=0)
    m = manifest(parts)
    assert [r["client_id"] for r in m] == list(range(10))
    assert all(sum(r["label_histogram"]) == r["n_k"] for r in m)
    assert sum(r["n_k"] for r in m) == len(ten_class)


def test_profile_matches_samples(ten_class):
    for p in partition_dirichlet(ten_class, 5, 0.5, seed=0):
        prof = p.profile()
        np.testing.assert_array_equal(prof.dist.probs, p.label_histogram() / p.n_k)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), 3)
