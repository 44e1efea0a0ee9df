import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vimoe.data import (Dataset, SyntheticConfig, batches, gen_cluster_classification,
                        gen_region_segmentation, load_dataset, patch_majority_label,
                        save_dataset, template_classify, template_segment)
from vimoe.errors import ConfigError, ContractError, FormatError

CLEAN = SyntheticConfig(noise=0.0)


def test_one_image_per_class_without_noise():
    ds = gen_cluster_classification(8, 8, 0, CLEAN)
    assert ds.labels.tolist() == list(range(8))
    flat = ds.images.reshape(8, -1)
    assert len({row.tobytes() for row in flat}) == 8


def test_balanced_and_deterministic():
    a = gen_cluster_classification(5, 50, 3)
    assert np.bincount(a.labels).tolist() == [10] * 5
    assert a == gen_cluster_classification(5, 50, 3)
    assert a != gen_cluster_classification(5, 50, 4)


def test_items_independent_of_count():
    small = gen_cluster_classification(4, 6, 1)
    big = gen_cluster_classification(4, 20, 1)
    assert np.array_equal(small.images, big.images[:6])


def test_splits_disjoint():
    tr = gen_cluster_classification(4, 64, 0, CLEAN)
    te = gen_cluster_classification(4, 64, 0, SyntheticConfig(noise=0.0, split="test"))
    assert not {r.tobytes() for r in tr.images} & {r.tobytes() for r in te.images}


def test_needs_two_classes():
    with pytest.raises(ConfigError):
        gen_cluster_classification(1, 4, 0)


def test_images_are_f32_exact():
    ds = gen_region_segmentation(4, 3, 0)
    assert np.array_equal(ds.images.astype(np.float32).astype(np.float64), ds.images)


def test_template_oracle_classification():
    ds = gen_cluster_classification(8, 512, 0, SyntheticConfig(split="test"))
    acc = (template_classify(ds.images, 8) == ds.labels).mean()
    assert acc >= 0.95


def test_template_oracle_segmentation():
    ds = gen_region_segmentation(6, 64, 0)
    acc = (template_segment(ds.images, 6) == ds.labels).mean()
    assert acc >= 0.90


def test_segmentation_layouts():
    one = gen_region_segmentation(5, 4, 0, SyntheticConfig(min_regions=1, max_regions=1))
    for lab in one.labels:
        assert len(np.unique(lab)) == 1
    ds = gen_region_segmentation(5, 20, 2)
    for lab in ds.labels:
        # each class region is a union of whole rectangles: every row of
        # the map changes label at most 3 times
        assert np.all((np.diff(lab, axis=1) != 0).sum(axis=1) <= 3)
    assert set(np.unique(ds.labels)) <= set(range(5))


def test_patch_majority_examples():
    assert patch_majority_label(np.full((4, 4), 3), 2).tolist() == [[3, 3], [3, 3]]
    assert patch_majority_label(np.array([[0, 0], [1, 2]]), 2).tolist() == [[0]]
    assert patch_majority_label(np.array([[1, 1], [2, 2]]), 2).tolist() == [[1]]
    with pytest.raises(ContractError):
        patch_majority_label(np.zeros((5, 5), dtype=int), 2)


def _mode_smallest(values):
    counts = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def test_patch_majority_exhaustive_2x2():
    cells = np.array(list(itertools.product(range(4), repeat=4)))
    maps = cells.reshape(-1, 2, 2)
    out = patch_majority_label(maps, 2).reshape(-1)
    expected = [_mode_smallest(c.tolist()) for c in cells]
    assert out.tolist() == expected


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(0, 4)))
def test_patch_majority_subset(lab):
    out = patch_majority_label(lab, 3)
    assert set(out.reshape(-1)) <= set(lab.reshape(-1))


def test_batches():
    assert [b.tolist() for b in batches(5, 2)] == [[0, 1], [2, 3], [4]]
    a = np.concatenate(list(batches(10, 3, seed=1, epoch=2)))
    assert sorted(a.tolist()) == list(range(10))
    b = np.concatenate(list(batches(10, 3, seed=1, epoch=2)))
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 1000), st.booleans())
def test_round_trip(tmp_path_factory, m, c, seed, seg):
    cfg = SyntheticConfig(image_size=8, split="val")
    gen = gen_region_segmentation if seg else gen_cluster_classification
    ds = gen(c, m, seed, cfg)
    path = tmp_path_factory.mktemp("d") / "x.vimd"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back == ds
    assert back.images.tobytes() == ds.images.tobytes()


def test_empty_rejected(tmp_path):
    empty = Dataset(np.zeros((0, 3, 4, 4)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ContractError):
        save_dataset(tmp_path / "e.vimd", empty)


def test_corruption_detected(tmp_path):
    ds = gen_cluster_classification(3, 4, 0, SyntheticConfig(image_size=8))
    save_dataset(tmp_path / "d.vimd", ds)
    blob = (tmp_path / "d.vimd").read_bytes()
    for pos in (40, len(blob) - 1, len(blob) // 2):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        (tmp_path / "b.vimd").write_bytes(bytes(bad))
        with pytest.raises(FormatError, match="checksum"):
            load_dataset(tmp_path / "b.vimd")
    cases = {b"NOPE" + blob[4:]: 0, blob[:4] + b"\x09" + blob[5:]: 4,
             blob[:-3]: None, blob + b"\0": None}
    for bad, offset in cases.items():
        (tmp_path / "b.vimd").write_bytes(bad)
        with pytest.raises(FormatError) as info:
            load_dataset(tmp_path / "b.vimd")
        if offset is not None:
            assert info.value.offset == offset
