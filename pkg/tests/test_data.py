import numpy as np
import pytest

from switching_idm.data import (
    Dataset,
    Standardizer,
    Trajectory,
    downsample,
    downsample_dataset,
    filter_min_duration,
    fit_standardizer,
    load_schema,
    load_trajectories,
    save_metadata,
    save_trajectories,
)
from switching_idm.errors import DataError, InvalidArgumentError, SchemaError


def make_traj(traj_id="t0", n=10, dt=0.2, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack(
        [
            rng.uniform(1.0, 30.0, size=n),
            rng.uniform(-5.0, 5.0, size=n),
            rng.uniform(2.0, 60.0, size=n),
        ]
    )
    y = rng.normal(0.0, 1.0, size=n)
    return Trajectory(traj_id=traj_id, dt=dt, x=x, y=y)


class TestTrajectoryValidation:
    def test_properties(self):
        traj = make_traj(n=25, dt=0.2)
        assert traj.length == 25
        assert traj.duration == pytest.approx(5.0)

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda x, y: (x[:, [0, 1]], y),  # wrong width
            lambda x, y: (x[:1], y[:1]),  # too short
            lambda x, y: (x, y[:-1]),  # length mismatch
        ],
    )
    def test_malformed_arrays(self, mutate):
        traj = make_traj()
        x, y = mutate(traj.x.copy(), traj.y.copy())
        with pytest.raises(DataError):
            Trajectory(traj_id="bad", dt=0.2, x=x, y=y)

    def test_value_checks(self):
        traj = make_traj()
        x = traj.x.copy()
        x[3, 0] = -1.0
        with pytest.raises(DataError):
            Trajectory(traj_id="bad", dt=0.2, x=x, y=traj.y)
        x = traj.x.copy()
        x[3, 2] = 0.0
        with pytest.raises(DataError):
            Trajectory(traj_id="bad", dt=0.2, x=x, y=traj.y)
        y = traj.y.copy()
        y[0] = np.nan
        with pytest.raises(DataError):
            Trajectory(traj_id="bad", dt=0.2, x=traj.x, y=y)
        with pytest.raises(DataError):
            Trajectory(traj_id="bad", dt=0.0, x=traj.x, y=traj.y)


class TestDataset:
    def test_pooled_views_and_offsets(self):
        trajs = [make_traj("a", n=5, seed=1), make_traj("b", n=7, seed=2)]
        ds = Dataset(trajectories=tuple(trajs))
        assert ds.n_steps == 12
        np.testing.assert_array_equal(ds.offsets(), [0, 5, 12])
        np.testing.assert_array_equal(ds.pooled_x()[5:], trajs[1].x)
        np.testing.assert_array_equal(ds.pooled_y()[:5], trajs[0].y)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            Dataset(trajectories=())


class TestCsvRoundtrip:
    def test_save_load_identity(self, tmp_path):
        ds = Dataset(
            trajectories=(make_traj("a", n=8, seed=3), make_traj("b", n=6, seed=4))
        )
        path = tmp_path / "data.csv"
        save_trajectories(ds, path)
        loaded = load_trajectories(path)
        assert len(loaded.trajectories) == 2
        for orig, back in zip(ds.trajectories, loaded.trajectories):
            assert back.traj_id == orig.traj_id
            assert back.dt == pytest.approx(orig.dt, rel=1e-10)
            np.testing.assert_allclose(back.x, orig.x, rtol=1e-11)
            np.testing.assert_allclose(back.y, orig.y, rtol=1e-11)

    def test_leader_speed_column_mapped_to_dv(self, tmp_path):
        path = tmp_path / "foreign.csv"
        path.write_text(
            "traj_id,t,v,v_lead,s,a\n"
            "x,0.0,10.0,8.0,20.0,0.1\n"
            "x,0.2,10.5,8.0,19.6,0.2\n"
        )
        ds = load_trajectories(path)
        np.testing.assert_allclose(ds.trajectories[0].x[:, 1], [2.0, 2.5])

    def test_schema_mapping_file(self, tmp_path):
        schema_path = tmp_path / "schema.txt"
        schema_path.write_text(
            "# foreign export\ntraj_id=vehicle\nv=speed\nv_lead=lead_speed\n"
        )
        schema = load_schema(schema_path)
        assert schema["traj_id"] == "vehicle"
        assert schema["v"] == "speed"
        assert schema["s"] == "s"  # untouched keys keep canonical names
        data_path = tmp_path / "foreign.csv"
        data_path.write_text(
            "vehicle,t,speed,lead_speed,s,a\n"
            "x,0.0,10.0,8.0,20.0,0.1\n"
            "x,0.2,10.5,8.5,19.6,0.2\n"
        )
        ds = load_trajectories(data_path, schema=schema)
        np.testing.assert_allclose(ds.trajectories[0].x[:, 1], [2.0, 2.0])

    def test_schema_syntax_error(self, tmp_path):
        path = tmp_path / "schema.txt"
        path.write_text("traj_id vehicle\n")
        with pytest.raises(SchemaError):
            load_schema(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("traj_id,t,v,s\nx,0.0,1.0,2.0\nx,0.2,1.0,2.0\n")
        with pytest.raises(SchemaError):
            load_trajectories(path)

    def test_row_located_errors(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "traj_id,t,v,dv,s,a\n"
            "x,0.0,10.0,0.0,20.0,0.1\n"
            "x,0.2,10.0,0.0,-1.0,0.1\n"
        )
        with pytest.raises(DataError, match="row 3"):
            load_trajectories(path)

    def test_non_monotone_time(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "traj_id,t,v,dv,s,a\n"
            "x,0.2,10.0,0.0,20.0,0.1\n"
            "x,0.0,10.0,0.0,20.0,0.1\n"
        )
        with pytest.raises(DataError, match="non-monotone"):
            load_trajectories(path)

    def test_irregular_sampling(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "traj_id,t,v,dv,s,a\n"
            "x,0.0,10.0,0.0,20.0,0.1\n"
            "x,0.2,10.0,0.0,20.0,0.1\n"
            "x,0.5,10.0,0.0,20.0,0.1\n"
        )
        with pytest.raises(DataError, match="not constant"):
            load_trajectories(path)

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_trajectories("/nonexistent/data.csv")


class TestMetadata:
    def test_written_fields(self, tmp_path):
        import json

        ds = fit_standardizer(Dataset(trajectories=(make_traj(n=20),)))
        path = tmp_path / "meta.json"
        save_metadata(ds, path, extra={"seed": 5})
        meta = json.loads(path.read_text())
        assert meta["dt"] == pytest.approx(0.2)
        assert meta["n_trajectories"] == 1
        assert meta["n_steps"] == 20
        assert meta["seed"] == 5
        back = Standardizer.from_dict(meta["standardizer"])
        np.testing.assert_allclose(back.mean, ds.standardizer.mean)


class TestDownsample:
    def test_keeps_every_kth_and_stretches_dt(self):
        traj = make_traj(n=11, dt=0.1)
        out = downsample(traj, 5)
        assert out.dt == pytest.approx(0.5)
        np.testing.assert_array_equal(out.x, traj.x[::5])
        np.testing.assert_array_equal(out.y, traj.y[::5])

    def test_factor_one_is_identity(self):
        traj = make_traj()
        assert downsample(traj, 1) is traj

    def test_invalid_factor(self):
        traj = make_traj(n=4)
        with pytest.raises(InvalidArgumentError):
            downsample(traj, 0)
        with pytest.raises(InvalidArgumentError):
            downsample(traj, 10)

    def test_dataset_variant_drops_standardizer(self):
        ds = fit_standardizer(Dataset(trajectories=(make_traj(n=20),)))
        out = downsample_dataset(ds, 2)
        assert out.standardizer is None


class TestFilterMinDuration:
    def test_drops_short(self):
        ds = Dataset(
            trajectories=(make_traj("short", n=10, dt=0.2), make_traj("long", n=300, dt=0.2))
        )
        kept = filter_min_duration(ds, min_duration=50.0)
        assert [t.traj_id for t in kept.trajectories] == ["long"]

    def test_all_dropped_raises(self):
        ds = Dataset(trajectories=(make_traj(n=10),))
        with pytest.raises(DataError):
            filter_min_duration(ds, min_duration=1e6)


class TestStandardizer:
    def test_pooled_population_moments(self):
        ds = Dataset(
            trajectories=(make_traj("a", n=40, seed=6), make_traj("b", n=25, seed=7))
        )
        ds = fit_standardizer(ds)
        pooled = ds.pooled_x()
        np.testing.assert_allclose(ds.standardizer.mean, pooled.mean(axis=0))
        np.testing.assert_allclose(ds.standardizer.std, pooled.std(axis=0))
        z = ds.standardizer.standardize(pooled)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)

    def test_roundtrip_bijection(self):
        std = Standardizer(mean=np.array([1.0, -2.0, 3.0]), std=np.array([2.0, 0.5, 4.0]))
        rng = np.random.default_rng(8)
        x = rng.standard_normal((30, 3))
        np.testing.assert_allclose(std.destandardize(std.standardize(x)), x, atol=1e-12)

    def test_constant_feature_rejected(self):
        x = np.column_stack([np.full(10, 5.0), np.zeros(10), np.linspace(2, 3, 10)])
        ds = Dataset(
            trajectories=(Trajectory(traj_id="c", dt=0.2, x=x, y=np.zeros(10)),)
        )
        with pytest.raises(DataError, match="constant"):
            fit_standardizer(ds)

    def test_nonpositive_std_rejected(self):
        with pytest.raises(DataError):
            Standardizer(mean=np.zeros(3), std=np.array([1.0, 0.0, 1.0]))
