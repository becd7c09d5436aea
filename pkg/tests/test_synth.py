import numpy as np
import pytest
from scipy import stats

from hyperfusion.synth import (
    REG_LINES,
    SynthTaskSpec,
    attribute_blind_gap,
    generate,
    load_dataset,
    oracle_predict,
    read_images,
    save_dataset,
    write_images,
)
from hyperfusion.training import stratified_kfold


def _reg(n=2000, noise=0.1, seed=0):
    return generate(SynthTaskSpec(kind="cond-regression", n=n, noise=noise, image_size=16, seed=seed))


def _cls(n=2000, seed=0, **kw):
    return generate(SynthTaskSpec(kind="cond-classification", n=n, image_size=16, seed=seed, **kw))


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthTaskSpec(kind="cond-classification", missing_rate=0.6)
    with pytest.raises(ValueError):
        SynthTaskSpec(kind="cond-regression", noise=-1)
    with pytest.raises(ValueError):
        SynthTaskSpec(kind="cond-classification", n_classes=4)
    with pytest.raises(ValueError):
        SynthTaskSpec(kind="other")


def test_regression_targets_follow_the_lines():
    ds = _reg(noise=0.0)
    s, a = ds.latents["s"], ds.latents["a"]
    for attr, (m, b) in REG_LINES.items():
        sel = a == attr
        np.testing.assert_allclose(ds.targets[sel], m * s[sel] + b, rtol=0, atol=1e-12)
    assert {r["sex"] for r in ds.rows} == {"M", "F"}


def test_zero_noise_joint_oracle_is_exact():
    _, err = oracle_predict(_reg(noise=0.0), "joint")
    assert err == pytest.approx(0.0, abs=1e-12)


def test_blind_gap_integration_vs_closed_form():
    # at sigma=0 the image-only residual is |2s - 1| for uniform s: mean 1/2
    assert attribute_blind_gap(0.0) == 0.5
    assert attribute_blind_gap(1e-9) == pytest.approx(0.5, abs=1e-6)
    # a Monte-Carlo estimate of E|2s - 1 + noise| agrees with the quadrature
    rng = np.random.default_rng(0)
    s = rng.uniform(size=400_000)
    mc = np.abs(2 * s - 1 + rng.normal(0, 0.1, s.size)).mean()
    assert attribute_blind_gap(0.1) == pytest.approx(mc, abs=3e-3)


def test_image_only_oracle_matches_gap():
    ds = _reg(n=20_000, noise=0.1)
    _, err = oracle_predict(ds, "image-only")
    assert err == pytest.approx(attribute_blind_gap(0.1), rel=0.02)
    assert ds.metadata["blind_gap"] == attribute_blind_gap(0.1)


def test_attribute_balance():
    n = 4000
    a = _reg(n=n).latents["a"]
    assert abs(a.sum() - n / 2) <= 3 * np.sqrt(n / 4)


def test_regression_oracle_ordering():
    ds = _reg()
    joint = oracle_predict(ds, "joint")[1]
    assert joint <= oracle_predict(ds, "image-only")[1]
    assert joint <= oracle_predict(ds, "tabular-only")[1]


def test_image_carries_the_latent():
    ds = _reg(noise=0.0)
    # the disk's mean intensity is proportional to s
    r = np.corrcoef(ds.images.reshape(len(ds), -1).mean(axis=1), ds.latents["s"])[0, 1]
    assert r > 0.95


def test_classification_oracles():
    ds = _cls()
    meta = ds.metadata
    assert meta["oracle_joint"]["accuracy"] == 1.0
    assert meta["oracle_image-only"]["accuracy"] < meta["oracle_joint"]["accuracy"] - 0.1
    assert meta["oracle_tabular-only"]["accuracy"] <= meta["oracle_joint"]["accuracy"]
    # neither modality alone reaches 0.8 of the joint accuracy
    for mode in ("image-only", "tabular-only"):
        assert meta[f"oracle_{mode}"]["accuracy"] < 0.8 * meta["oracle_joint"]["accuracy"]


def test_oracle_ordering_with_missing_values():
    ds = _cls(missing_rate=0.3, seed=3)
    joint = oracle_predict(ds, "joint")[1]["accuracy"]
    assert joint < 1.0
    for mode in ("image-only", "tabular-only"):
        assert oracle_predict(ds, mode)[1]["accuracy"] <= joint


def test_missing_rate_masks_v1_only():
    ds = _cls(missing_rate=0.2, seed=1)
    masked = np.array([r["v1"] is None for r in ds.rows])
    assert abs(masked.mean() - 0.2) < 0.03
    assert np.array_equal(masked, ds.latents["v1_masked"].astype(bool))
    assert all(r["v2"] is not None for r in ds.rows)


def test_class_proportions():
    ds = _cls(n=1000, class_proportions=(17, 35, 48))
    np.testing.assert_array_equal(np.bincount(ds.targets), [170, 350, 480])
    assert ds.metadata["oracle_joint"]["accuracy"] == 1.0


def test_binary_task():
    ds = _cls(n=500, n_classes=2)
    assert set(np.unique(ds.targets)) == {0, 1}
    assert ds.metadata["oracle_image-only"]["accuracy"] < 0.7


def test_oracle_needs_metadata():
    ds = _cls(n=50)
    ds.metadata = {}
    with pytest.raises(ValueError, match="metadata"):
        oracle_predict(ds)


def test_regeneration_is_identical(tmp_path):
    for kind in ("cond-regression", "cond-classification"):
        spec = SynthTaskSpec(kind=kind, n=40, image_size=16, seed=7)
        save_dataset(generate(spec), tmp_path / "a")
        save_dataset(generate(spec), tmp_path / "b")
        for name in ("images.bin", "tabular.csv", "targets.csv", "latents.csv", "schema.json", "metadata.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_round_trip(tmp_path):
    ds = _cls(n=60, missing_rate=0.2)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.targets, ds.targets)
    assert back.rows == ds.rows
    assert back.schema == ds.schema
    for k in ds.latents:
        np.testing.assert_array_equal(back.latents[k], ds.latents[k])


def test_image_container_header(tmp_path):
    imgs = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    write_images(tmp_path / "x.bin", imgs)
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == b"HFIMG\x00\x00\x00"
    assert len(raw) == 30 + imgs.nbytes
    assert np.array_equal(read_images(tmp_path / "x.bin"), imgs)
    (tmp_path / "y.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_images(tmp_path / "y.bin")


def test_splits_preserve_joint_distribution():
    ds = _cls(n=1000, seed=2)
    keys = ds.strata()
    plan = stratified_kfold(keys, 5, seed=0)
    uniq = np.unique(keys)
    glob = np.array([(keys == u).mean() for u in uniq])
    for f in range(5):
        sel = keys[plan.folds == f]
        frac = np.array([(sel == u).mean() for u in uniq])
        assert np.abs(frac - glob).max() < 0.05
        table = np.array([[(sel == u).sum() for u in uniq], [(keys == u).sum() - (sel == u).sum() for u in uniq]])
        assert stats.chi2_contingency(table)[1] > 0.5
