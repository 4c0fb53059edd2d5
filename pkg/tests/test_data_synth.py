import json

import numpy as np
import pytest

from deltafl.data_synth import (ClientDataset, DatasetFormatError, SynthConfig, generate, load,
                                save)
from deltafl.dp_core import make_rng

SMALL = dict(n_train=12, n_val=3, n_test=3, samples_per_client=40)


def small(**kw):
    return SynthConfig(**{**SMALL, **kw})


def test_feature_layout():
    ds = generate(small())
    x = np.vstack([c.features for c in ds.train]).astype(np.float64)
    assert x.shape[1] == 20
    informative, redundant, noise = x[:, :15], x[:, 15:17], x[:, 17:]
    coef, *_ = np.linalg.lstsq(informative, redundant, rcond=None)
    assert np.abs(informative @ coef - redundant).max() < 1e-4
    # pure noise columns: unit variance, uncorrelated with the informative block
    assert np.allclose(noise.var(axis=0), 1.0, atol=0.15)
    _, res, *_ = np.linalg.lstsq(np.c_[informative, np.ones(len(x))], noise, rcond=None)
    assert np.all(res / len(x) > 0.8)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_classes=1).validate()
    with pytest.raises(ValueError):
        SynthConfig(input_dim=10).validate()
    with pytest.raises(ValueError):
        SynthConfig(dirichlet_alpha_eval=0).validate()
    with pytest.raises(ValueError, match="unknown"):
        SynthConfig.from_dict({"n_clases": 3})


def test_large_alpha_gives_uniform_labels():
    cfg = small(dirichlet_alpha_train=1e6, samples_per_client=2000, n_train=5, n_val=0, n_test=0)
    for c in generate(cfg).train:
        counts = np.bincount(c.labels, minlength=10)
        p = 0.1
        se = np.sqrt(c.n_samples * p * (1 - p))
        assert np.all(np.abs(counts - c.n_samples * p) <= 3.5 * se)


def test_seed_determinism():
    a, b = generate(small()), generate(small())
    for ca, cb in zip(a.train + a.test, b.train + b.test):
        assert ca.features.tobytes() == cb.features.tobytes()
        assert ca.labels.tobytes() == cb.labels.tobytes()
    other = generate(small(seed=7))
    assert other.train[0].features.tobytes() != a.train[0].features.tobytes()


def test_client_ids_disjoint_and_weights():
    ds = generate(small())
    ids = [c.client_id for s in ("train", "val", "test") for c in ds.split(s)]
    assert len(set(ids)) == len(ids)
    assert sum(c.weight for c in ds.train) == pytest.approx(1.0)


def test_round_trip(tmp_path):
    ds = generate(small())
    save(ds, tmp_path / "d")
    back = load(tmp_path / "d")
    assert back.config == ds.config
    for split in ("train", "val", "test"):
        for a, b in zip(ds.split(split), back.split(split)):
            assert a.client_id == b.client_id
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.labels, b.labels)
            assert a.weight == pytest.approx(b.weight)


def write_fixture(root):
    """Two hand-built clients: 2 samples x 3 features and 1 sample x 3 features."""
    cfg = {"n_classes": 2, "input_dim": 3, "n_informative": 2, "n_redundant": 0,
           "class_sep": 1.0, "n_train": 2, "n_val": 0, "n_test": 0, "samples_per_client": 2,
           "dirichlet_alpha_train": 1.0, "dirichlet_alpha_eval": 1.0, "seed": 0}
    meta = {"format_version": 1, "config": cfg,
            "splits": {"train": [{"id": 0, "n_samples": 2, "n_features": 3},
                                 {"id": 1, "n_samples": 1, "n_features": 3}],
                       "val": [], "test": []}}
    folder = root / "clients" / "train"
    folder.mkdir(parents=True)
    (root / "meta.json").write_text(json.dumps(meta))
    # little-endian float32 1.0 = 00 00 80 3f, 2.0 = 00 00 00 40, 0.5 = 00 00 00 3f
    one, two, half = b"\x00\x00\x80\x3f", b"\x00\x00\x00\x40", b"\x00\x00\x00\x3f"
    zero = b"\x00" * 4
    (folder / "0.feat").write_bytes(one + two + zero + half + half + half)
    (folder / "0.lab").write_bytes(b"\x01\x00\x00\x00" + zero)
    (folder / "1.feat").write_bytes(two + two + two)
    (folder / "1.lab").write_bytes(b"\x01\x00\x00\x00")
    return folder


def test_load_hand_written_fixture(tmp_path):
    write_fixture(tmp_path)
    ds = load(tmp_path)
    c0, c1 = ds.train
    np.testing.assert_array_equal(c0.features, [[1, 2, 0], [0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(c0.labels, [1, 0])
    np.testing.assert_array_equal(c1.features, [[2, 2, 2]])
    assert c0.weight == pytest.approx(2 / 3) and c1.weight == pytest.approx(1 / 3)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load(tmp_path / "nowhere")
    folder = write_fixture(tmp_path)
    (folder / "1.lab").unlink()
    with pytest.raises(FileNotFoundError):
        load(tmp_path)


def test_truncated_file_reports_offset(tmp_path):
    folder = write_fixture(tmp_path)
    (folder / "0.feat").write_bytes(b"\x00" * 10)
    with pytest.raises(DatasetFormatError) as info:
        load(tmp_path)
    assert info.value.offset == 10 and "0.feat" in info.value.path


def test_bad_label_reports_offset(tmp_path):
    folder = write_fixture(tmp_path)
    (folder / "0.lab").write_bytes(b"\x01\x00\x00\x00\x07\x00\x00\x00")
    with pytest.raises(DatasetFormatError) as info:
        load(tmp_path)
    assert info.value.offset == 4


def test_corrupt_json_reports_offset(tmp_path):
    write_fixture(tmp_path)
    (tmp_path / "meta.json").write_text('{"format_version": 1, "config": [}')
    with pytest.raises(DatasetFormatError) as info:
        load(tmp_path)
    assert info.value.offset == 33


def test_client_dataset_shape_check():
    with pytest.raises(ValueError):
        ClientDataset(0, np.zeros((3, 2), np.float32), np.zeros(2, np.int32))


def test_class_conditional_sameness():
    cfg = SynthConfig(n_train=200, n_val=0, n_test=200, samples_per_client=50)
    ds = generate(cfg)
    # the same Gaussian per class in both splits even though label mixes differ
    xa = np.vstack([c.features for c in ds.train])[:, :15]
    ya = np.concatenate([c.labels for c in ds.train])
    xb = np.vstack([c.features for c in ds.test])[:, :15]
    yb = np.concatenate([c.labels for c in ds.test])
    for k in range(cfg.n_classes):
        na, nb = np.sum(ya == k), np.sum(yb == k)
        if min(na, nb) < 50:
            continue
        diff = xa[ya == k].mean(axis=0) - xb[yb == k].mean(axis=0)
        assert np.all(np.abs(diff) <= 4.5 * np.sqrt(1 / na + 1 / nb))


def mean_tv(clients, K):
    hists = np.array([np.bincount(c.labels, minlength=K) / c.n_samples for c in clients])
    tv = [0.5 * np.abs(hists[i] - hists[j]).sum()
          for i in range(len(hists)) for j in range(i + 1, len(hists))]
    return float(np.mean(tv))


def test_label_shift_stronger_for_small_alpha():
    for seed in range(5):
        base = dict(n_train=30, n_val=0, n_test=0, samples_per_client=100, seed=seed)
        mild = generate(SynthConfig(**base, dirichlet_alpha_train=0.5))
        sharp = generate(SynthConfig(**base, dirichlet_alpha_train=0.01))
        assert mean_tv(sharp.train, 10) > mean_tv(mild.train, 10)


def test_explicit_rng_overrides_seed():
    a = generate(small(), make_rng(99))
    b = generate(small(), make_rng(99))
    assert a.train[3].features.tobytes() == b.train[3].features.tobytes()
