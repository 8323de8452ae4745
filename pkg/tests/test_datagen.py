import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgnn.datagen import (
    Dataset,
    DatasetFormatError,
    MalformedHeaderError,
    Mismatch,
    ShapeMismatchError,
    SimulatorConfig,
    TargetSpec,
    TaskSpec,
    TruncatedFileError,
    export_csv,
    generate_dataset,
    lds_params_task,
    load_dataset,
    model_class_task,
    perturb_lds_matrix,
    save_dataset,
    sir_forecast_task,
    split_dataset,
    split_indices,
)
from sgnn.simcore import ObservationSpec, PriorSpec, compartmental_batch


def _assert_same(a: Dataset, b: Dataset):
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.targets, b.targets)
    assert np.array_equal(a.thetas, b.thetas, equal_nan=True)
    assert np.array_equal(a.tags, b.tags)
    assert a.theta_names == b.theta_names


class TestTasks:
    def test_identity_lds_example(self):
        # narrowest possible box around alpha = beta = 1
        hi = np.nextafter(1.0, 2.0)
        task = TaskSpec(SimulatorConfig("LDS", 10), PriorSpec(("alpha", "beta"), (1.0, 1.0), (hi, hi)))
        ds = generate_dataset(task, 1, 0)
        assert ds.inputs.shape == (1, 20)
        assert np.allclose(ds.inputs, 1.0, rtol=0, atol=1e-13)

    def test_lds_shapes(self):
        ds = generate_dataset(lds_params_task(), 5, 0)
        assert ds.inputs.shape == (5, 20) and ds.targets.shape == (5, 2)
        assert np.array_equal(ds.targets, ds.thetas)

    def test_forecast_window_validation(self):
        with pytest.raises(ValueError):
            sir_forecast_task(steps=20, input_len=15, horizon=10)
        with pytest.raises(ValueError):
            TaskSpec(SimulatorConfig("SIR", 10, ObservationSpec(0.0, (1,))), PriorSpec(("b", "g"), (0.1, 0.05), (0.5, 0.2)),
                     TargetSpec("model_class"))
        with pytest.raises(ValueError):
            TaskSpec(SimulatorConfig("SIR", 10, ObservationSpec(0.0, (1,))), PriorSpec(("b", "g"), (0.1, 0.05), (0.5, 0.2)),
                     mismatch=Mismatch(0.1, 0))
        with pytest.raises(ValueError):
            SimulatorConfig("ODE")
        with pytest.raises(ValueError):
            TargetSpec("ranking")

    def test_forecast_consistency(self):
        ds = generate_dataset(sir_forecast_task(noise=0.0), 20, 3)
        series = np.concatenate([ds.inputs, ds.targets], axis=1)
        clean = compartmental_batch("SIR", ds.thetas, 49)[:, :, 1]
        assert np.array_equal(series, clean)

    def test_noisy_inputs_clean_targets(self):
        ds = generate_dataset(sir_forecast_task(), 20, 3)
        clean = compartmental_batch("SIR", ds.thetas, 49)[:, :, 1]
        assert np.array_equal(ds.targets, clean[:, 40:])
        assert not np.array_equal(ds.inputs, clean[:, :40])

    @given(st.integers(1, 61))
    def test_model_class_balanced(self, n):
        ds = generate_dataset(model_class_task(steps=10), n, 1)
        counts = np.bincount(ds.labels, minlength=2)
        assert abs(int(counts[0]) - int(counts[1])) <= 1
        assert np.all(ds.targets.sum(axis=1) == 1)

    def test_model_class_theta_padding(self):
        ds = generate_dataset(model_class_task(steps=10), 4, 0)
        sir = ds.labels == 0
        assert np.all(np.isnan(ds.thetas[sir, 2]))
        assert not np.any(np.isnan(ds.thetas[~sir]))
        assert ds[0].model_tag == "SIR" and len(ds[0].theta) == 2
        assert ds[1].model_tag == "SEIR" and len(ds[1].theta) == 3

    def test_digest_tracks_config(self):
        assert lds_params_task(0.1).digest() == lds_params_task(0.1).digest()
        assert lds_params_task(0.1).digest() != lds_params_task(0.2).digest()


class TestDeterminism:
    def test_same_seed_same_bytes(self):
        a = generate_dataset(sir_forecast_task(), 30, 9)
        b = generate_dataset(sir_forecast_task(), 30, 9)
        _assert_same(a, b)

    def test_different_seed_differs(self):
        a = generate_dataset(lds_params_task(), 5, 1)
        b = generate_dataset(lds_params_task(), 5, 2)
        assert not np.array_equal(a.inputs, b.inputs)

    @given(st.permutations(list(range(12))))
    def test_order_independence(self, perm):
        task = model_class_task(steps=15)
        ref = generate_dataset(task, 12, 4)
        got = generate_dataset(task, 12, 4, indices=perm)
        assert np.array_equal(got.inputs, ref.inputs[perm])
        assert np.array_equal(got.targets, ref.targets[perm])


class TestPerturbation:
    a0 = np.array([[0.9, 0.0], [0.0, 0.8]])

    def test_zero_delta(self):
        assert np.array_equal(perturb_lds_matrix(self.a0, 0.0, 3), self.a0)

    @given(st.floats(0, 10), st.integers(0, 2**32))
    def test_frobenius_norm(self, delta, seed):
        out = perturb_lds_matrix(self.a0, delta, seed)
        assert abs(np.linalg.norm(out - self.a0) - delta) <= 1e-12 * max(1.0, delta)

    def test_direction_shared_across_delta(self):
        d1 = perturb_lds_matrix(self.a0, 0.1, 5) - self.a0
        d2 = perturb_lds_matrix(self.a0, 0.2, 5) - self.a0
        assert np.allclose(d2, 2 * d1, atol=1e-15)

    def test_negative_delta(self):
        with pytest.raises(ValueError):
            perturb_lds_matrix(self.a0, -0.1, 0)


class TestSplit:
    def test_paper_sizes(self):
        tr, te = split_indices(60_000, 0.8, 0)
        assert (len(tr), len(te)) == (48_000, 12_000)

    def test_two_items(self):
        ds = generate_dataset(lds_params_task(), 2, 0)
        tr, te = split_dataset(ds, 0.5, 0)
        assert (len(tr), len(te)) == (1, 1)

    @given(st.integers(2, 500), st.floats(0.05, 0.95), st.integers(0, 100))
    def test_partition(self, n, frac, seed):
        try:
            tr, te = split_indices(n, frac, seed)
        except ValueError:
            return  # fraction rounds to an empty side
        assert len(np.intersect1d(tr, te)) == 0
        assert np.array_equal(np.union1d(tr, te), np.arange(n))

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.2])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            split_indices(10, frac, 0)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(lds_params_task(), 100, 2)
        got = load_dataset(save_dataset(ds, tmp_path / "lds.bin"))
        _assert_same(ds, got)
        assert got.manifest["task_digest"] == ds.manifest["task_digest"]

    def test_model_class_round_trip(self, tmp_path):
        ds = generate_dataset(model_class_task(steps=20), 11, 2)
        path = save_dataset(ds, tmp_path / "mc.bin")
        got = load_dataset(path)
        _assert_same(ds, got)

    def test_checksum_recorded(self, tmp_path):
        ds = generate_dataset(lds_params_task(), 10, 2)
        path = save_dataset(ds, tmp_path / "a.bin")
        manifest = json.loads((tmp_path / "a.bin.json").read_text())
        assert manifest["sha256"] == hashlib.sha256(path.read_bytes()).hexdigest()

    def test_little_endian_payload(self, tmp_path):
        ds = generate_dataset(lds_params_task(), 3, 2)
        blob = save_dataset(ds, tmp_path / "a.bin").read_bytes()
        first = np.frombuffer(blob, "<f8", 1, offset=26)[0]
        assert first == ds.inputs[0, 0]

    def test_wrong_magic(self, tmp_path):
        path = save_dataset(generate_dataset(lds_params_task(), 3, 2), tmp_path / "a.bin")
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(MalformedHeaderError):
            load_dataset(path)

    def test_truncated(self, tmp_path):
        path = save_dataset(generate_dataset(lds_params_task(), 3, 2), tmp_path / "a.bin")
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(TruncatedFileError):
            load_dataset(path)

    def test_trailing_bytes(self, tmp_path):
        path = save_dataset(generate_dataset(lds_params_task(), 3, 2), tmp_path / "a.bin")
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ShapeMismatchError):
            load_dataset(path)

    def test_corrupted_payload(self, tmp_path):
        path = save_dataset(generate_dataset(lds_params_task(), 3, 2), tmp_path / "a.bin")
        blob = bytearray(path.read_bytes())
        blob[40] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_csv_export(self, tmp_path):
        ds = generate_dataset(model_class_task(steps=10), 4, 0)
        lines = export_csv(ds, tmp_path / "a.csv").read_text().splitlines()
        assert len(lines) == 5
        header = lines[0].split(",")
        assert header[-1] == "model_tag" and "y0" in header and "y1" not in header

    def test_shape_checks(self):
        with pytest.raises(ShapeMismatchError):
            Dataset(np.zeros((2, 3)), np.zeros((3, 1)), np.zeros((2, 1)), np.zeros(2), ("a",))
        with pytest.raises(ShapeMismatchError):
            Dataset(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 2)), np.zeros(2), ("a",))
