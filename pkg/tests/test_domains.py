import numpy as np
import pytest

from sansaw.domains import (
    SOURCE,
    TARGETS,
    DomainRange,
    DomainSpec,
    apply_style,
    gen_benchmark,
    gen_scene,
    load_benchmark,
    save_benchmark,
)


@pytest.fixture(scope="module")
def bench():
    return gen_benchmark(0)


def test_scene_deterministic():
    a, la = gen_scene(11)
    b, lb = gen_scene(11)
    assert a.tobytes() == b.tobytes() and np.array_equal(la, lb)


def test_later_shapes_cover_earlier_ones():
    # shapes are painted in class order, so a pixel carries the highest class
    # whose shape covers it; a disk pixel keeps label 2 unless the band covers it
    found = 0
    for seed in range(30):
        img, lbl = gen_scene(seed)
        assert set(np.unique(lbl)) <= {0, 1, 2, 3}
        disk = lbl == 2
        if disk.any():
            found += 1
            color = img[:, disk].mean(axis=1)
            assert color[2] > color[0]   # disks are blue
    assert found > 20


def test_background_fraction():
    fracs = [(gen_scene(s)[1] == 0).mean() for s in range(100)]
    assert min(fracs) > 0.3


def test_scene_errors():
    with pytest.raises(ValueError):
        gen_scene(0, num_classes=9)
    with pytest.raises(ValueError):
        gen_scene(0, h=16)


def test_style_examples():
    img = np.full((3, 2, 2), 0.5)
    assert np.array_equal(apply_style(img, DomainSpec()), img)
    assert np.allclose(apply_style(img, DomainSpec(gamma=2.0)), 0.25)
    noisy = DomainSpec(noise_std=0.05)
    a = apply_style(img, noisy, np.random.default_rng(3))
    b = apply_style(img, noisy, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        apply_style(img, noisy)
    with pytest.raises(ValueError):
        DomainSpec(gamma=3.0)


def test_default_counts(bench):
    assert len(bench.train.images) == 200
    assert list(bench.tests) == ["source", "dim", "warm", "foggy"]
    assert all(len(s.images) == 50 for s in bench.tests.values())
    assert bench.train.images.shape[1:] == (3, 64, 64)


def test_targets_disjoint_from_source():
    assert not any(t.overlaps(SOURCE) for t in TARGETS)
    clash = DomainRange("clash", SOURCE.gain, SOURCE.bias, SOURCE.gamma, SOURCE.noise_std)
    with pytest.raises(ValueError):
        gen_benchmark(0, 2, 1, targets=(clash,))


def test_channel_means_shift(bench):
    src = bench.tests["source"].images.mean(axis=(0, 2, 3))
    for name in ("dim", "warm", "foggy"):
        tgt = bench.tests[name].images.mean(axis=(0, 2, 3))
        assert np.abs(src - tgt).max() > 0.05, name


def test_style_gap_is_detectable(bench):
    """A nearest-centroid rule on per-image color means separates source
    from each target."""
    def feats(split):
        return split.images.mean(axis=(2, 3))

    src_train, src_test = feats(bench.train), feats(bench.tests["source"])
    for name in ("dim", "warm", "foggy"):
        tgt = feats(bench.tests[name])
        half = len(tgt) // 2
        c_src, c_tgt = src_train.mean(0), tgt[:half].mean(0)
        test = np.concatenate([src_test, tgt[half:]])
        truth = np.r_[np.zeros(len(src_test)), np.ones(len(tgt) - half)]
        pred = np.linalg.norm(test - c_tgt, axis=1) < np.linalg.norm(test - c_src, axis=1)
        assert (pred == truth).mean() > 0.9, name


def test_semantics_invariant_across_styles():
    base, lbl = gen_scene(42)
    rng = np.random.default_rng(0)
    for dom in (SOURCE, *TARGETS):
        styled = apply_style(base, dom.sample(rng), rng)
        assert styled.shape == base.shape
    # labels come from the scene alone
    assert np.array_equal(gen_scene(42)[1], lbl)


def test_benchmark_deterministic():
    a = gen_benchmark(3, 4, 2, h=32, w=32)
    b = gen_benchmark(3, 4, 2, h=32, w=32)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    for k in a.tests:
        assert a.tests[k].images.tobytes() == b.tests[k].images.tobytes()


def test_bundle_round_trip(tmp_path):
    a = gen_benchmark(1, 3, 2, h=32, w=32)
    b = load_benchmark(save_benchmark(a, tmp_path / "data"))
    assert b.seed == 1 and b.num_classes == 4 and b.targets == a.targets
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert np.array_equal(a.train.labels, b.train.labels)
    for k in a.tests:
        assert a.tests[k].images.tobytes() == b.tests[k].images.tobytes()


def test_missing_bundle(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_benchmark(tmp_path)


def test_domain_range_json():
    for d in TARGETS:
        assert DomainRange.from_json(d.to_json()) == d


def test_six_classes_remap_to_other():
    from sansaw.toynet import NetConfig, ToyNet, loss_and_grads

    b = gen_benchmark(0, 2, 1, h=32, w=32, num_classes=6)
    assert b.train.labels.max() <= 5
    net = ToyNet.init(NetConfig(num_classes=6, san="on", whiten="saw"), 0)
    assert net.category_map.tolist() == [0, 1, 2, 3, 4, 4]
    total, grads, _ = loss_and_grads(net, b.train.images, b.train.labels)
    assert np.isfinite(total) and grads["san1.cls_w"].shape == (5, 16, 1, 1)
