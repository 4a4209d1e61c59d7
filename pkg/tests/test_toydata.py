import numpy as np

from nametune.manifest import load_manifest
from nametune.toydata import META_ITEMS_PER_CLASS, TRADITIONAL_COUNTS, make_toy_dataset, write_toy_dataset


def test_generator_deterministic(toy_traditional):
    again = make_toy_dataset("traditional")
    assert again.rows == toy_traditional.rows
    assert all(again.frames[k].tobytes() == v.tobytes() for k, v in toy_traditional.frames.items())
    other = make_toy_dataset("traditional", seed=1)
    assert any(other.frames[k].tobytes() != v.tobytes() for k, v in toy_traditional.frames.items())


def test_traditional_layout(toy_traditional):
    tags = [r.split for r in toy_traditional.rows]
    assert len({r.class_name for r in toy_traditional.rows}) == 5
    for tag, count in TRADITIONAL_COUNTS.items():
        assert tags.count(tag) == 5 * count


def test_meta_layout(toy_meta):
    by_tag = {}
    for r in toy_meta.rows:
        by_tag.setdefault(r.split, set()).add(r.class_name)
    assert set(by_tag) == {"meta_val", "meta_test"}
    assert not by_tag["meta_val"] & by_tag["meta_test"]
    assert len(toy_meta.rows) == 10 * META_ITEMS_PER_CLASS


def test_centers_are_unit_and_distinct(toy_traditional):
    c = toy_traditional.centers
    assert np.allclose(np.linalg.norm(c, axis=1), 1)
    assert np.min(np.linalg.norm(c[:, None] - c[None], axis=-1) + np.eye(len(c))) > 0


def test_write_and_reload(tmp_path, toy_traditional):
    path = write_toy_dataset(tmp_path, toy_traditional)
    m = load_manifest(path)
    assert m.rows == toy_traditional.rows
    row = m.rows[0]
    assert np.array_equal(np.load(m.resolve(row)), toy_traditional.frames[row.id])
