import hashlib
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from semiseg.data import (
    CLASS_NAMES,
    DataError,
    SyntheticShapesConfig,
    class_histogram,
    draw_label_sets,
    encode_multi_hot,
    ensure_empty_dir,
    from_uint8,
    generate_synthetic_dataset,
    label_set_of,
    load_batch,
    load_split,
    read_image_png,
    read_manifest,
    read_mask_png,
    render_sample,
    sample_conditioning,
    sample_noise,
    samples,
    to_uint8,
    write_image_png,
)

SMALL = SyntheticShapesConfig(image_size=16, n_labeled=6, n_unlabeled=5, n_weak=8, n_test=4, rng_seed=3)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes")
    generate_synthetic_dataset(SMALL, out)
    return out


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generation_is_byte_identical(dataset, tmp_path):
    generate_synthetic_dataset(SMALL, tmp_path)
    assert tree_digest(tmp_path) == tree_digest(dataset)


def test_manifest_splits_and_files(dataset):
    m = read_manifest(dataset)
    counts = Counter(e.split for e in m.entries)
    assert counts == {"labeled": 6, "unlabeled": 5, "weak": 8, "test": 4}
    assert len({e.id for e in m.entries}) == len(m.entries)
    for e in m.entries:
        assert m.path(e.image_path).exists()
        assert (e.mask_path is not None) == (e.split in ("labeled", "test"))
        assert (e.label_set is not None) == (e.split == "weak")
        if e.mask_path:
            assert m.path(e.mask_path).exists()


def test_no_supervision_leakage(dataset):
    m = read_manifest(dataset)
    unl = load_split(m, "unlabeled")
    assert unl.masks is None and unl.label_sets is None
    for s in samples(m, "unlabeled"):
        assert s.mask is None and s.label_set is None
    # the weak split exposes label sets but never masks
    weak = load_split(m, "weak")
    assert weak.masks is None and len(weak.label_sets) == 8
    assert load_split(m, "weak").as_unlabeled().label_sets is None


def test_weak_label_sets_match_mask_scan(tmp_path):
    cfg = SyntheticShapesConfig(image_size=16, n_labeled=0, n_weak=100, n_test=0, rng_seed=5)
    m = generate_synthetic_dataset(cfg, tmp_path)
    for i, e in enumerate(m.entries):
        # weak samples follow labeled (0) and unlabeled (0), so the render index is i
        _, mask = render_sample(cfg, i)
        assert e.label_set == label_set_of(mask)


def test_masked_label_sets_consistent(dataset):
    m = read_manifest(dataset)
    for s in samples(m, "labeled"):
        assert s.mask.min() >= 0 and s.mask.max() < 4
        assert 0 in label_set_of(s.mask) or s.mask.all()


def test_no_shapes_gives_background(tmp_path):
    cfg = SyntheticShapesConfig(image_size=16, shapes_per_image=(0, 0), n_labeled=3, n_weak=4, n_test=0)
    m = generate_synthetic_dataset(cfg, tmp_path)
    assert all(not load_split(m, "labeled").masks.any() for _ in [0])
    assert all(s == frozenset({0}) for s in load_split(m, "weak").label_sets)


def test_mask_geometry_matches_image():
    cfg = SyntheticShapesConfig(image_size=32, texture_noise=0.0, color_jitter=0.0)
    img, mask = render_sample(cfg, 0)
    img = from_uint8(img)
    for c in np.unique(mask):
        colors = img[mask == c]
        assert np.ptp(colors, axis=0).max() < 1e-9


def test_histogram_matches_mask_scan(dataset):
    import json

    emitted = json.loads((dataset / "class_histogram.json").read_text())
    assert emitted == class_histogram(read_manifest(dataset))
    assert set(emitted) == set(CLASS_NAMES)
    assert sum(emitted.values()) == (6 + 4) * 16 * 16


def test_png_roundtrip_quantization(tmp_path):
    img = np.random.default_rng(0).uniform(-1, 1, size=(8, 8, 3))
    write_image_png(tmp_path / "x.png", to_uint8(img))
    back = read_image_png(tmp_path / "x.png").transpose(1, 2, 0)
    # half a quantization step in [-1, 1] units is 1/255
    assert np.abs(back - img).max() <= 1 / 255 + 1e-12


def test_corrupt_png_names_sample(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG garbage")
    with pytest.raises(DataError, match="sample_7"):
        read_image_png(bad, "sample_7")
    with pytest.raises(DataError, match="sample_7"):
        read_mask_png(bad, "sample_7")


def test_rgb_mask_rejected(tmp_path):
    write_image_png(tmp_path / "rgb.png", np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(DataError, match="mode RGB"):
        read_mask_png(tmp_path / "rgb.png", "m")


def test_manifest_errors(tmp_path):
    (tmp_path / "manifest.tsv").write_text("a\tlabeled\timg.png\n")
    with pytest.raises(DataError, match="5 tab-separated"):
        read_manifest(tmp_path)
    (tmp_path / "manifest.tsv").write_text("a\tbogus\ti\t-\t-\n")
    with pytest.raises(DataError, match="unknown split"):
        read_manifest(tmp_path)
    (tmp_path / "manifest.tsv").write_text("a\ttest\ti\t-\t-\na\ttest\ti\t-\t-\n")
    with pytest.raises(DataError, match="duplicate"):
        read_manifest(tmp_path)
    with pytest.raises(DataError):
        read_manifest(tmp_path / "missing")


def test_load_batch(dataset):
    m = read_manifest(dataset)
    batches = list(load_batch(m, "labeled", 100, np.random.default_rng(0)))
    assert len(batches) == 1 and len(batches[0].labeled_images) == 6
    sizes = [len(b.labeled_images) for b in load_batch(m, "labeled", 4, np.random.default_rng(0))]
    assert sizes == [4, 2]
    imgs = load_split(m, "labeled").images
    assert imgs.min() >= -1 and imgs.max() <= 1


def test_load_batch_order_deterministic(dataset):
    m = read_manifest(dataset)

    def order(seed):
        out = []
        rng = np.random.default_rng(seed)
        for _ in range(2):
            out += [b.weak_images.sum() for b in load_batch(m, "weak", 3, rng)]
        return out

    assert order(1) == order(1)
    assert order(1) != order(2)


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticShapesConfig(num_classes=5)
    with pytest.raises(ValueError):
        SyntheticShapesConfig(shapes_per_image=(3, 1))
    with pytest.raises(ValueError):
        SyntheticShapesConfig.from_dict({"colour": 1})
    cfg = replace(SMALL, rng_seed=9)
    assert SyntheticShapesConfig.from_dict(cfg.to_dict()) == cfg


def test_ensure_empty_dir(tmp_path):
    (tmp_path / "f").write_text("x")
    with pytest.raises(FileExistsError):
        ensure_empty_dir(tmp_path)
    ensure_empty_dir(tmp_path, force=True)


# -- samplers --------------------------------------------------------------------


def test_noise_range_mean_and_determinism():
    a = sample_noise(100_000, 1, np.random.default_rng(0)).data
    assert a.min() >= -1 and a.max() <= 1
    # uniform(-1, 1) has sd 1/sqrt(3); 3 sigma of the mean of 1e5 draws is 0.0055
    assert abs(a.mean()) < 0.02
    assert np.array_equal(sample_noise(4, 3, np.random.default_rng(5)).data,
                          sample_noise(4, 3, np.random.default_rng(5)).data)


def test_conditioning_single_set():
    rows = sample_conditioning([frozenset({1, 3})], 5, np.random.default_rng(0)).data
    assert rows.tolist() == [[0, 1, 0, 1]] * 5


def test_conditioning_follows_pool_frequency():
    pool = [frozenset({0})] * 5 + [frozenset({0, 1})] * 3 + [frozenset({0, 2, 3})] * 2
    draws = draw_label_sets(pool, 10_000, np.random.default_rng(0))
    freq = Counter(draws)
    for s, want in ((frozenset({0}), 0.5), (frozenset({0, 1}), 0.3), (frozenset({0, 2, 3}), 0.2)):
        assert abs(freq[s] / 10_000 - want) < 0.05
    onehot = encode_multi_hot(draws, 4)
    assert np.all(onehot.sum(axis=1) >= 1)


def test_conditioning_empty_pool():
    with pytest.raises(ValueError):
        draw_label_sets([], 3, np.random.default_rng(0))
