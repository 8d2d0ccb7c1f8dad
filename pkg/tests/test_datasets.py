import numpy as np
import pytest
from PIL import Image

from contextshot.datasets import (
    AugmentParams,
    LabeledImageSet,
    load_image_folder,
    preprocess,
    save_image_folder,
    split_classes,
)
from contextshot.errors import CapacityError, StructureError, ValidationError
from contextshot.seeding import make_rng
from contextshot.shapes import GRAMMAR_CAPACITY, ShapesSpec, class_attributes, generate_shapes


def write_folder_tree(root, classes, per_class, size=12):
    rng = np.random.default_rng(0)
    for name in classes:
        d = root / name
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i}.png")


# ---------------------------------------------------------------- folder load


def test_load_folder_counts(tmp_path):
    write_folder_tree(tmp_path, ["cats", "dogs"], per_class=3)
    ds = load_image_folder(tmp_path, (12, 12))
    assert ds.n_items == 6
    assert ds.n_classes == 2
    assert ds.class_names == ("cats", "dogs")
    assert ds.pixels.shape == (6, 12, 12, 3)
    assert 0.0 <= ds.pixels.min() and ds.pixels.max() <= 1.0


def test_load_folder_empty_root(tmp_path):
    with pytest.raises(StructureError):
        load_image_folder(tmp_path, (8, 8))


def test_load_folder_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_folder(tmp_path / "nope", (8, 8))


def test_load_folder_deterministic(tmp_path):
    write_folder_tree(tmp_path, ["b", "a", "c"], per_class=2)
    ds1 = load_image_folder(tmp_path, (12, 12))
    ds2 = load_image_folder(tmp_path, (12, 12))
    assert ds1.class_names == ("a", "b", "c")
    assert ds1.image_ids == ds2.image_ids
    assert np.array_equal(ds1.pixels, ds2.pixels)


def test_load_folder_skips_undecodable(tmp_path):
    write_folder_tree(tmp_path, ["ok"], per_class=2)
    (tmp_path / "ok" / "junk.png").write_bytes(b"not a png")
    ds = load_image_folder(tmp_path, (12, 12))
    assert ds.n_items == 2


def test_load_folder_class_all_undecodable(tmp_path):
    write_folder_tree(tmp_path, ["ok"], per_class=2)
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "junk.png").write_bytes(b"not a png")
    with pytest.raises(StructureError):
        load_image_folder(tmp_path, (12, 12))


def test_folder_roundtrip_via_save(tmp_path, micro_shapes):
    save_image_folder(micro_shapes, tmp_path)
    loaded = load_image_folder(tmp_path, micro_shapes.image_size)
    assert loaded.n_items == micro_shapes.n_items
    assert loaded.class_names == micro_shapes.class_names
    # 8-bit quantization on the way out
    assert np.abs(loaded.pixels - micro_shapes.pixels).max() < 1.0 / 255.0


# ------------------------------------------------------------------- shapes


def test_generate_shapes_counts():
    ds = generate_shapes(ShapesSpec(n_classes=30, per_class=100, image_size=(16, 16)), seed=5)
    assert ds.n_items == 3000
    assert ds.n_classes == 30
    assert all(int(c) == 100 for c in ds.class_item_counts())


def test_generate_shapes_bit_identical():
    spec = ShapesSpec(n_classes=5, per_class=3, image_size=(24, 24))
    a = generate_shapes(spec, seed=9)
    b = generate_shapes(spec, seed=9)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.image_ids == b.image_ids


def test_generate_shapes_seed_changes_pixels():
    spec = ShapesSpec(n_classes=3, per_class=2, image_size=(24, 24))
    a = generate_shapes(spec, seed=1)
    b = generate_shapes(spec, seed=2)
    assert not np.array_equal(a.pixels, b.pixels)


def test_generate_shapes_degenerate_inputs():
    with pytest.raises(ValidationError):
        ShapesSpec(n_classes=3, per_class=0)
    with pytest.raises(CapacityError):
        ShapesSpec(n_classes=GRAMMAR_CAPACITY + 1, per_class=1)


def test_class_attributes_unique():
    tuples = {class_attributes(c) for c in range(GRAMMAR_CAPACITY)}
    assert len(tuples) == GRAMMAR_CAPACITY


# -------------------------------------------------------------------- splits


def test_split_classes_partition(tiny_shapes):
    train, val = split_classes(tiny_shapes, holdout_classes=4, seed=3)
    assert train.n_classes == 8
    assert val.n_classes == 4
    assert set(train.class_names) | set(val.class_names) == set(tiny_shapes.class_names)
    assert set(train.class_names) & set(val.class_names) == set()


def test_split_classes_paper_scale_counts():
    ds = generate_shapes(ShapesSpec(n_classes=21, per_class=1, image_size=(8, 8)), seed=0)
    train, val = split_classes(ds, holdout_classes=19, seed=0)
    assert train.n_classes == 2
    assert val.n_classes == 19


def test_split_classes_deterministic(tiny_shapes):
    a = split_classes(tiny_shapes, 4, seed=42)
    b = split_classes(tiny_shapes, 4, seed=42)
    assert a[0].class_names == b[0].class_names
    assert a[1].class_names == b[1].class_names


def test_split_classes_validation(tiny_shapes):
    with pytest.raises(ValidationError):
        split_classes(tiny_shapes, tiny_shapes.n_classes, seed=0)
    with pytest.raises(ValidationError):
        split_classes(tiny_shapes, 0, seed=0)


def test_split_classes_property_many_seeds(tiny_shapes):
    for seed in range(10):
        for holdout in (1, 5, 11):
            train, val = split_classes(tiny_shapes, holdout, seed=seed)
            assert set(train.class_names).isdisjoint(val.class_names)
            assert set(train.class_names) | set(val.class_names) == set(tiny_shapes.class_names)


# ---------------------------------------------------------------- preprocess


def test_preprocess_identity_params():
    rng = np.random.default_rng(0)
    img = rng.random((10, 10, 3), dtype=np.float32)
    params = AugmentParams(
        blur_sigma_range=(0.0, 0.0), sharpness_factor_range=(1.0, 1.0),
        apply_probability=1.0, target_size=(10, 10),
    )
    out = preprocess(img, params, "train", make_rng(1))
    assert np.allclose(out, img, atol=1e-6)


def test_preprocess_eval_mode_deterministic():
    rng = np.random.default_rng(1)
    img = rng.random((12, 12, 3), dtype=np.float32)
    params = AugmentParams(target_size=(8, 8))
    a = preprocess(img, params, "eval")
    b = preprocess(img, params, "eval")
    assert np.array_equal(a, b)
    assert a.shape == (8, 8, 3)


def test_preprocess_train_mode_deterministic_given_stream():
    rng = np.random.default_rng(2)
    img = rng.random((12, 12, 3), dtype=np.float32)
    params = AugmentParams(target_size=(12, 12), apply_probability=1.0)
    a = preprocess(img, params, "train", make_rng(7))
    b = preprocess(img, params, "train", make_rng(7))
    assert np.array_equal(a, b)


def test_preprocess_train_mode_actually_perturbs():
    rng = np.random.default_rng(3)
    img = rng.random((12, 12, 3), dtype=np.float32)
    params = AugmentParams(target_size=(12, 12), apply_probability=1.0, blur_sigma_range=(1.0, 1.5))
    out = preprocess(img, params, "train", make_rng(8))
    assert not np.allclose(out, img, atol=1e-4)


def test_preprocess_range_and_shape_property():
    params = AugmentParams(target_size=(9, 9), apply_probability=1.0)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(6, 20)), int(rng.integers(6, 20))
        img = rng.random((h, w, 3), dtype=np.float32)
        out = preprocess(img, params, "train", make_rng(seed, "p"))
        assert out.shape == (9, 9, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_preprocess_bad_mode_and_params():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(ValidationError):
        preprocess(img, AugmentParams(target_size=(8, 8)), "test")
    with pytest.raises(ValidationError):
        preprocess(img, AugmentParams(target_size=(8, 8)), "train")  # missing rng
    with pytest.raises(ValidationError):
        AugmentParams(blur_kernel=2)
    with pytest.raises(ValidationError):
        AugmentParams(blur_sigma_range=(2.0, 1.0))
    with pytest.raises(ValidationError):
        AugmentParams(apply_probability=1.5)


# ------------------------------------------------------------------ validity


def test_labeled_image_set_invariants():
    with pytest.raises(ValidationError):
        LabeledImageSet(
            pixels=np.zeros((2, 4, 4, 3), dtype=np.float32),
            class_ids=np.array([0, 2]),  # gap at 1
            class_names=("a", "b", "c"),
            image_ids=("x", "y"),
        )
    with pytest.raises(ValidationError):
        LabeledImageSet(
            pixels=np.full((1, 4, 4, 3), 1.5, dtype=np.float32),
            class_ids=np.array([0]),
            class_names=("a",),
            image_ids=("x",),
        )
