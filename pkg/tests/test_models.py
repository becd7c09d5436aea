import numpy as np
import pytest

from hyperfusion import tensor as T
from hyperfusion.cli import grad_check_variant
from hyperfusion.hypernet import HyperLayer
from hyperfusion.models import (
    VARIANTS,
    ModelSpec,
    ModeError,
    audit_partitions,
    build_conditioning_baselines,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

D = 6
TASKS = ("regression", "classification")


def _spec(task, variant, **kw):
    kw = {"n_classes": 3, "image_shape": (16, 16), "tabular_width": D, **kw}
    return ModelSpec(task=task, variant=variant, **kw)


def _batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 16, 16)), rng.standard_normal((n, D))


def _ready(task, variant, seed=0, **kw):
    model = build_model(_spec(task, variant, seed=seed, **kw))
    model.init_from_data(np.random.default_rng(99).standard_normal((64, D)))
    return model.eval()


def test_spec_validation():
    with pytest.raises(ValueError, match="variant"):
        _spec("classification", "transformer")
    with pytest.raises(ValueError, match="hyperlayer"):
        _spec("classification", "concat", hyperlayers=("fc1",))
    with pytest.raises(ValueError):
        _spec("classification", "image", n_classes=5)


def test_regression_hyperfusion_has_four_hyperlayers():
    model = build_model(_spec("regression", "hyperfusion"))
    assert [h.name for h in model.hyperlayers()] == ["linear1", "linear2", "linear3", "final"]


def test_classification_hyperfusion_generates_last_downsample():
    model = build_model(_spec("classification", "hyperfusion"))
    assert [h.name for h in model.hyperlayers()] == ["block4.downsample"]
    assert isinstance(model.layers["block4.downsample"], HyperLayer)
    assert not isinstance(model.layers["block3.downsample"], HyperLayer)


@pytest.mark.parametrize("n_classes", [2, 3])
def test_classification_head_width(n_classes):
    model = build_model(ModelSpec(task="classification", variant="concat", n_classes=n_classes,
                                  image_shape=(16, 16), tabular_width=D)).eval()
    images, tab = _batch()
    P = model(images, tab).data
    assert P.shape == (4, n_classes)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("task", TASKS)
@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_outputs(task, variant):
    model = _ready(task, variant)
    images, tab = _batch()
    out = model(images, tab).data
    if task == "classification":
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    else:
        assert out.shape == (4,) and np.isfinite(out).all()


def test_mode_must_be_set():
    model = build_model(_spec("classification", "image"))
    images, tab = _batch()
    with pytest.raises(ModeError):
        model(images, tab)


def test_shape_errors():
    model = _ready("classification", "image")
    images, tab = _batch()
    with pytest.raises(T.ShapeError):
        model(images, tab[:3])
    with pytest.raises(T.ShapeError):
        model(images, tab[:, :4])
    with pytest.raises(T.ShapeError):
        model(images[:, :8, :8], tab)


@pytest.mark.parametrize("task", TASKS)
def test_image_only_ignores_tabular(task):
    model = _ready(task, "image")
    images, tab = _batch()
    a = model(images, tab).data
    b = model(images, tab + np.random.default_rng(1).standard_normal(tab.shape)).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("task", TASKS)
def test_tabular_only_ignores_image(task):
    model = _ready(task, "tabular")
    images, tab = _batch()
    assert np.array_equal(model(images, tab).data, model(images * 3 + 1, tab).data)


@pytest.mark.parametrize("task", TASKS)
@pytest.mark.parametrize("variant", ["concat", "film", "daft", "hyperfusion"])
def test_fusion_variants_use_tabular(task, variant):
    model = _ready(task, variant)
    images, tab = _batch()
    a = model(images, tab).data
    b = model(images, tab + 1.0).data
    assert not np.allclose(a, b)


def test_concat_joins_second_to_last_linear_layer():
    reg = build_model(_spec("regression", "concat"))
    # linear widths (32, 16, 8) then final: the third of four layers takes T
    assert reg.layers["linear3"].in_features == 16 + D
    assert reg.layers["linear2"].in_features == 32
    assert reg.layers["final"].in_features == 8
    cls = build_model(_spec("classification", "concat"))
    assert cls.layers["fc1"].in_features == 32 + D
    assert cls.layers["fc2"].in_features == 16


@pytest.mark.parametrize("task", TASKS)
def test_identity_modulation_matches_image_only(task):
    film = build_conditioning_baselines(_spec(task, "film", seed=3))
    image = build_model(_spec(task, "image", seed=3))
    image.load_state_dict({k: v for k, v in film.state_dict().items() if not k.startswith("film.")})
    film.eval()
    image.eval()
    c = film.conditioner.widths[-1] // 2
    film.film_override = (np.ones(c), np.zeros(c))
    images, tab = _batch()
    assert np.array_equal(film(images, tab).data, image(images, tab).data)


@pytest.mark.parametrize("task", TASKS)
def test_daft_generator_input_width(task):
    model = build_conditioning_baselines(_spec(task, "daft"))
    channels = model.spec.channels[-1]
    assert model.conditioner.widths[0] == D + channels
    assert build_conditioning_baselines(_spec(task, "film")).conditioner.widths[0] == D


def test_baselines_reject_other_variants():
    with pytest.raises(ValueError):
        build_conditioning_baselines(_spec("classification", "concat"))


def test_film_parameters_depend_on_tabular():
    model = _ready("classification", "film")
    rng = np.random.default_rng(4)
    feats = T.Tensor(rng.standard_normal((2, 32, 2, 2)))
    tab = rng.standard_normal((2, D))
    g, b = model.film_params(feats, tab)
    assert not np.array_equal(g.data[0], g.data[1]) and not np.array_equal(b.data[0], b.data[1])
    before = model._modulate(feats, tab).data
    after = model._modulate(feats, tab + 0.5).data
    assert not np.allclose(before, after)


@pytest.mark.parametrize("task", TASKS)
@pytest.mark.parametrize("variant", VARIANTS)
def test_partition_audit_clean(task, variant):
    model = build_model(_spec(task, variant))
    assert audit_partitions(model) == []
    names = {p.partition for p in model.parameters()}
    assert "theta_H" not in names
    if variant == "hyperfusion":
        assert "phi" in names


@pytest.mark.parametrize("task", TASKS)
@pytest.mark.parametrize("variant", VARIANTS)
def test_end_to_end_grad_check(task, variant):
    assert grad_check_variant(variant, task, seed=1, max_entries=6) < 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
def test_builds_are_bit_identical(variant):
    a = build_model(_spec("classification", variant, seed=5)).state_dict()
    b = build_model(_spec("classification", variant, seed=5)).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(_spec("classification", variant, seed=6)).state_dict()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("task", TASKS)
@pytest.mark.parametrize("variant", ["image", "film", "hyperfusion"])
def test_checkpoint_round_trip(tmp_path, task, variant):
    model = _ready(task, variant)
    images, tab = _batch()
    save_checkpoint(tmp_path / "m.hfz", model, {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "m.hfz")
    assert extra == {"note": "x"}
    assert back.spec == model.spec
    assert np.array_equal(back(images, tab).data, model(images, tab).data)
    save_checkpoint(tmp_path / "n.hfz", back, {"note": "x"})
    assert (tmp_path / "m.hfz").read_bytes() == (tmp_path / "n.hfz").read_bytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    import zipfile

    with zipfile.ZipFile(tmp_path / "x.hfz", "w") as zf:
        zf.writestr("manifest.json", '{"format": "other"}')
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.hfz")


def test_predict_batches_match_single_pass():
    model = _ready("classification", "hyperfusion")
    images, tab = _batch(n=10)
    full = model(images, tab).data
    np.testing.assert_allclose(model.predict(images, tab, batch_size=3), full, rtol=0, atol=1e-12)


def test_train_mode_dropout_is_stochastic_and_eval_is_not():
    model = _ready("classification", "image")
    images, tab = _batch()
    model.train()
    a = model(images, tab).data
    b = model(images, tab).data
    assert not np.array_equal(a, b)
    model.eval()
    assert np.array_equal(model(images, tab).data, model(images, tab).data)
