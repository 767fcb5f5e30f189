import csv
import json

import numpy as np
import pytest

from expredit import apps, datagen
from expredit.networks import ModelBundle, architecture


@pytest.fixture(scope="module")
def trained(tiny_run):
    return tiny_run[0]


@pytest.fixture(scope="module")
def test_set(tiny_run):
    return tiny_run[2][2]


def pixels(dataset, n=None):
    return np.stack([im.pixels for im in dataset[:n]])


def test_untrained_bundle_rejected(test_set):
    bundle = ModelBundle(architecture("tiny"))
    with pytest.raises(apps.UntrainedBundleError):
        apps.edit_expression(bundle, pixels(test_set, 1))
    with pytest.raises(apps.UntrainedBundleError):
        apps.generate_random(bundle, 0, 2, np.random.default_rng(0))
    bundle.stage = 3
    with pytest.raises(apps.UntrainedBundleError, match="classifier"):
        apps.transfer_expression(bundle, pixels(test_set, 1), pixels(test_set, 1))


def test_edit_grid_layout(trained, test_set, tmp_path):
    grid = apps.edit_expression(trained, pixels(test_set, 2))
    K = trained.spec.K
    assert grid.shape == (K + 1, 2)
    assert grid.row_captions[0] == "input"
    np.testing.assert_array_equal(grid.cells[0][1], test_set[1].pixels)
    assert all(np.abs(c).max() <= 1 for row in grid.cells for c in row)
    path = grid.save(tmp_path / "edit.png")
    side = json.loads(path.with_suffix(".json").read_text())
    assert side["shape"] == [K + 1, 2] and len(side["rows"]) == K + 1


def test_edit_is_deterministic(trained, test_set):
    a = apps.edit_expression(trained, pixels(test_set, 1)).compose()
    b = apps.edit_expression(trained, pixels(test_set, 1)).compose()
    np.testing.assert_array_equal(a, b)


def test_sweep_has_d_plus_one_columns(trained, test_set):
    grid = apps.intensity_sweep(trained, pixels(test_set, 3), 0)
    assert grid.shape == (3, trained.spec.d + 1)
    assert grid.col_captions[-1] == "neutral"
    with pytest.raises(IndexError):
        apps.intensity_sweep(trained, pixels(test_set, 1), trained.spec.K)


def test_sweep_order_calibration(trained, test_set):
    order = apps.calibrate_sweep_order(trained, pixels(test_set, 4))
    d = trained.spec.d
    assert set(order) == {str(k) for k in range(trained.spec.K)}
    assert all(sorted(v) == list(range(d)) for v in order.values())
    assert apps.sweep_levels(trained, 1) == order["1"]
    saved = trained.meta.pop("sweep_order")
    assert apps.sweep_levels(trained, 1) == list(range(d))
    trained.meta["sweep_order"] = saved


def test_infer_codes_structure(trained, test_set):
    labels, codes = apps.infer_codes(trained, pixels(test_set))
    blocks = trained.layout.blocks(codes)
    K = trained.spec.K
    assert labels.shape == (len(test_set),) and set(labels) <= set(range(K))
    for i, k in enumerate(labels):
        assert np.all((blocks[i, k] >= 0) & (blocks[i, k] <= 1))
        for j in range(K):
            if j != k:
                np.testing.assert_array_equal(blocks[i, j], -blocks[i, k])


def test_transfer_shapes(trained, test_set):
    a, b = pixels(test_set, 3), pixels(test_set[3:], 3)
    out = apps.transfer_expression(trained, a, b)
    assert out.shape == a.shape
    single = apps.transfer_expression(trained, a[0], b[0])
    np.testing.assert_allclose(single, out[0], atol=1e-6)


def test_generate_random_reproducible(trained):
    a = apps.generate_random(trained, 2, 5, np.random.default_rng(1))
    b = apps.generate_random(trained, 2, 5, np.random.default_rng(1))
    c = apps.generate_random(trained, 2, 5, np.random.default_rng(2))
    res = trained.spec.resolution
    assert a.shape == (5, res, res, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    grid = apps.generate_subjects(trained, 4, np.random.default_rng(0))
    assert grid.shape == (trained.spec.K, 4)


def test_augmentation_table(tiny_run, tmp_path):
    bundle, _, (train, _, test) = tiny_run
    table = apps.augmentation_experiment(bundle, train, test, counts=(0, 10), epochs=1, batch_size=8)
    assert [row["synthetic_images"] for row in table] == [0, 10]
    assert all(0.0 <= row["accuracy"] <= 1.0 for row in table)
    path = apps.write_table_csv(table, tmp_path / "aug.csv")
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 and set(rows[0]) == set(table[0])


def test_retrieval_excludes_query_identity(trained, test_set):
    q = test_set[0]
    result = apps.retrieve(q, test_set, "c", k=3, bundle=trained, exclude_identity=True, query_index=0)
    assert len(result.ranked) == 3
    assert all(test_set[i].identity_id != q.identity_id for i in result.ranked)
    assert result.distances == sorted(result.distances)


def test_label_space_retrieval_is_perfect(test_set):
    assert apps.retrieval_accuracy(None, test_set, "y") == 1.0
    assert 0.0 <= apps.retrieval_accuracy(None, test_set, "x") <= 1.0


def test_pixel_retrieval_oracle(test_set):
    # brute-force nearest neighbour over other identities
    q = test_set[0]
    others = [i for i, im in enumerate(test_set) if im.identity_id != q.identity_id]
    dists = [np.linalg.norm(test_set[i].pixels.astype(np.float64) - q.pixels) for i in others]
    expected = others[int(np.argmin(dists))]
    got = apps.retrieve(q, test_set, "x", k=1, exclude_identity=True).ranked[0]
    assert got == expected


def test_retrieval_errors(trained, test_set):
    with pytest.raises(ValueError):
        apps.retrieve(test_set[0], [], "x")
    with pytest.raises(ValueError):
        apps.retrieve(test_set[0], test_set, "q")
    with pytest.raises(ValueError):
        apps.retrieve(test_set[0], [test_set[0]], "x", exclude_identity=True)


def test_feature_export(trained, test_set, tmp_path):
    records = apps.export_features(trained, test_set)
    assert len(records) == len(test_set)
    assert records[0]["g"].shape == (trained.spec.n_z,)
    assert records[0]["c"].shape == (trained.spec.K * trained.spec.d,)
    path = apps.write_features_csv(records, tmp_path / "f.csv", apps.checkpoint_id(trained))
    rows = list(csv.reader(open(path)))
    assert len(rows) == len(test_set) + 1
    assert len(rows[1]) == 3 + trained.spec.n_z + trained.spec.K * trained.spec.d
    assert float(rows[1][3]) == records[0]["g"][0]


def test_grid_validation():
    cell = np.zeros((4, 4, 3), np.float32)
    with pytest.raises(ValueError):
        apps.ImageGrid([[cell]], ["a", "b"], ["c"])
    with pytest.raises(ValueError):
        apps.ImageGrid([[cell, np.zeros((2, 2, 3))]], ["a"], ["c", "d"])
    assert apps.ImageGrid([[cell, cell]], ["a"], ["c", "d"]).compose(pad=1).shape == (6, 11, 3)


def test_datagen_class_names_cover_presets(trained):
    assert len(datagen.CLASS_NAMES) >= trained.spec.K
