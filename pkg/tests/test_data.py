import logging
import math

import numpy as np
import pytest
import yaml

from fedccp.data import (ClientRecipe, CsvSchema, Dataset, ScenarioSpec, builtin_scenario, clients_from_csv,
                         generate_client_splits, generate_scenario, load_csv, load_csv_rows, load_scenario_file,
                         sample_client, split, standardize_splits)
from fedccp.errors import ConfigError, IngestionError
from fedccp.numerics import substream


def test_noiseless_linear_client_is_closed_form():
    recipe = ClientRecipe(shift=[1.5, -2.0], scale=0.0, response="linear", noise_scale=0.0)
    spec = ScenarioSpec("flat", 2, [recipe, recipe], n_train=4, n_calib=2, n_test=2)
    for train, calib, test in generate_client_splits(spec):
        for ds in (train, calib, test):
            np.testing.assert_array_equal(ds.x, np.tile([1.5, -2.0], (ds.n, 1)))
            np.testing.assert_array_equal(ds.y, np.full(ds.n, 1.5))


def test_homogeneous_clients_share_a_mean():
    splits = generate_client_splits(builtin_scenario("homogeneous", K=3, n_train=4000, seed=2))
    ys = [tr.y for tr, _, _ in splits]
    for a in ys:
        for b in ys:
            se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
            assert abs(a.mean() - b.mean()) <= 3 * se


def test_heteroscedastic_bin_std():
    recipe = ClientRecipe(response="linear", noise_scale=0.1, hetero=1.0, hetero_profile="abs")
    ds = sample_client(recipe, 1, 200_000, substream(0, "data"))
    x1 = ds.x[:, 0]
    resid = ds.y - x1
    in_bin = (np.abs(x1) >= 0.9) & (np.abs(x1) <= 1.1)
    assert abs(resid[in_bin].std() - 1.1) <= 0.15 * 1.1


def test_laplace_noise_has_unit_variance():
    recipe = ClientRecipe(response="linear", noise="laplace", noise_scale=1.0)
    ds = sample_client(recipe, 1, 100_000, substream(1, "data"))
    assert (ds.y - ds.x[:, 0]).std() == pytest.approx(1.0, abs=0.02)


def test_unknown_recipe_tag():
    with pytest.raises(ConfigError):
        generate_scenario(ScenarioSpec("bad", 1, [ClientRecipe(response="cubic")]))
    with pytest.raises(ConfigError):
        builtin_scenario("nope")


def test_generation_is_reproducible():
    spec = builtin_scenario("response-shift", seed=9)
    a = generate_client_splits(spec)
    b = generate_client_splits(spec)
    for sa, sb in zip(a, b):
        for da, db in zip(sa, sb):
            assert da.x.tobytes() == db.x.tobytes() and da.y.tobytes() == db.y.tobytes()


def test_scenario_clients_are_standardized_on_train():
    clients = generate_scenario(builtin_scenario("covariate-shift", K=3, seed=1))
    for c in clients:
        assert np.abs(c.train.x.mean(axis=0)).max() <= 1e-10
        assert abs(c.train.x.std() - 1) <= 1e-6
        assert abs(c.train.y.mean()) <= 1e-10


def test_scenario_file_round_trip(tmp_path):
    spec = builtin_scenario("heteroscedastic-shift", K=2, d=2, seed=4)
    (tmp_path / "s.yaml").write_text(yaml.safe_dump(spec.to_dict()))
    back = load_scenario_file(tmp_path / "s.yaml")
    assert back == spec


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_csv_three_rows(tmp_path):
    path = write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    ds = load_csv(path, CsvSchema(["a", "b"], "y"), standardize=False)
    np.testing.assert_array_equal(ds.x, [[1, 2], [4, 5], [7, 8]])
    np.testing.assert_array_equal(ds.y, [3, 6, 9])
    assert ds.feature_names == ["a", "b"] and ds.dropped == 0


def test_csv_blank_target_dropped(tmp_path, caplog):
    path = write(tmp_path, "a,y\n1,3\n2,\n3,5\n")
    with caplog.at_level(logging.WARNING):
        ds, _ = load_csv_rows(path, CsvSchema(["a"], "y"))
    assert ds.n == 2 and ds.dropped == 1
    assert "dropped 1" in caplog.text


def test_csv_non_numeric_and_delimiter(tmp_path):
    path = write(tmp_path, "1;x;2\n2;3;4\n5;6;n/a\n")
    ds, _ = load_csv_rows(path, CsvSchema(["0", "1"], "2", delimiter=";", header=False))
    np.testing.assert_array_equal(ds.x, [[2, 3]])
    assert ds.dropped == 2
    assert np.all(np.isfinite(ds.x))


def test_csv_missing_column(tmp_path):
    path = write(tmp_path, "a,y\n1,2\n")
    with pytest.raises(IngestionError, match="'b'"):
        load_csv(path, CsvSchema(["a", "b"], "y"))


def test_csv_no_usable_rows(tmp_path):
    path = write(tmp_path, "a,y\n1,\n2,zz\n")
    with pytest.raises(IngestionError):
        load_csv(path, CsvSchema(["a"], "y"))


def test_csv_standardization(tmp_path):
    rng = substream(0, "data")
    rows = "\n".join(",".join(repr(float(v)) for v in row) for row in rng.normal(3, 2, (50, 3)))
    ds = load_csv(write(tmp_path, "a,b,y\n" + rows + "\n"), CsvSchema(["a", "b"], "y"))
    assert np.abs(ds.x.mean(axis=0)).max() <= 1e-10
    assert np.abs(ds.x.std(axis=0) - 1).max() <= 1e-6


def test_schema_file_and_client_partition(tmp_path):
    rng = substream(1, "data")
    lines = ["site,f1,target"]
    for i in range(60):
        lines.append(f"{'AB'[i % 2]},{rng.normal()!r},{rng.normal()!r}")
    write(tmp_path, "\n".join(lines) + "\n", "data.csv")
    write(tmp_path, "features: [f1]\ntarget: target\nclient_column: site\npath: data.csv\n", "schema.yaml")
    schema = CsvSchema.from_file(tmp_path / "schema.yaml")
    clients = clients_from_csv(schema, (0.5, 0.25, 0.25), seed=3)
    assert [c.id for c in clients] == [0, 1]
    assert all(c.train.n == 15 and c.calib.n == 8 and c.test.n == 7 for c in clients)


def test_split_sizes_and_determinism():
    ds = Dataset(np.arange(10.0).reshape(10, 1), np.arange(10.0))
    a = split(ds, (0.5, 0.3, 0.2), substream(0, "split"))
    b = split(ds, (0.5, 0.3, 0.2), substream(0, "split"))
    assert [p.n for p in a] == [5, 3, 2]
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.y, pb.y)
    assert sorted(np.concatenate([p.y for p in a])) == list(np.arange(10.0))


def test_split_rejects_empty_part():
    ds = Dataset(np.zeros((3, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        split(ds, (0.9, 0.05, 0.05), substream(0, "split"))
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.5, 0.5), substream(0, "split"))


def test_standardization_uses_train_only():
    rng = substream(2, "data")
    train = Dataset(rng.normal(1, 3, (100, 2)), rng.normal(5, 2, 100))
    calib = Dataset(rng.normal(-4, 1, (40, 2)), rng.normal(0, 1, 40))
    test = Dataset(rng.normal(9, 5, (40, 2)), rng.normal(0, 1, 40))
    s_train, s_calib, s_test = standardize_splits(train, calib, test)
    mu, sd = train.x.mean(axis=0), train.x.std(axis=0)
    # recompute from raw values with train moments only
    np.testing.assert_allclose(s_calib.x, (calib.x - mu) / sd, rtol=1e-12)
    np.testing.assert_allclose(s_test.x, (test.x - mu) / sd, rtol=1e-12)
    np.testing.assert_allclose(s_test.y, (test.y - train.y.mean()) / train.y.std(), rtol=1e-12)
    assert np.abs(s_train.x.mean(axis=0)).max() <= 1e-10
    assert np.abs(s_calib.x.mean(axis=0)).max() > 0.5
