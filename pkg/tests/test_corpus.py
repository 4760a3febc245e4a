import numpy as np
import pytest

from voxmix import corpus
from voxmix.voxel import load_binvox

CLASSES = ("box", "table", "lamp")


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    manifest = corpus.build_dataset(root, CLASSES, objects_per_class=3,
                                    poses_per_object=4, vox_dim=16,
                                    image_size=32, seed=7)
    return manifest


def test_manifest_row_count(small_dataset):
    assert len(small_dataset.records) == 3 * 3 * 4


def test_regeneration_is_byte_identical(small_dataset, tmp_path):
    corpus.build_dataset(tmp_path, CLASSES, objects_per_class=3,
                         poses_per_object=4, vox_dim=16, image_size=32, seed=7)
    first = (small_dataset.root / "manifest.jsonl").read_bytes()
    second = (tmp_path / "manifest.jsonl").read_bytes()
    assert first == second
    for rec in small_dataset.records[:6]:
        assert (small_dataset.root / rec.sil).read_bytes() == \
            (tmp_path / rec.sil).read_bytes()
        assert (small_dataset.root / rec.volume).read_bytes() == \
            (tmp_path / rec.volume).read_bytes()


def test_different_seed_changes_volumes(small_dataset, tmp_path):
    other = corpus.build_dataset(tmp_path, CLASSES, objects_per_class=3,
                                 poses_per_object=4, vox_dim=16,
                                 image_size=32, seed=8)
    changed = any(
        (small_dataset.root / rec.volume).read_bytes()
        != (tmp_path / other.records[i].volume).read_bytes()
        for i, rec in enumerate(small_dataset.records))
    assert changed


def test_per_class_counts_recounted_from_disk(small_dataset):
    by_class = small_dataset.objects_by_class()
    assert set(by_class) == set(CLASSES)
    for class_id, objects in by_class.items():
        assert len(objects) == 3
        for obj in objects:
            path = small_dataset.root / "volumes" / f"{obj}.binvox"
            assert path.exists()
            assert load_binvox(path).dim == 16


def test_views_of_one_object_share_volume_ref(small_dataset):
    by_object = {}
    for rec in small_dataset.records:
        by_object.setdefault(rec.object_id, set()).add(rec.volume)
    assert all(len(refs) == 1 for refs in by_object.values())


def test_manifest_round_trip(small_dataset):
    again = corpus.DatasetManifest.load(small_dataset.root)
    assert again.records == small_dataset.records


def test_load_samples_shapes(small_dataset):
    records = small_dataset.records[:5]
    samples = corpus.load_samples(small_dataset, records)
    assert samples.images.shape == (5, 2, 32, 32)
    assert samples.volumes.shape == (5, 1, 16, 16, 16)
    assert samples.images.min() >= 0.0 and samples.images.max() <= 1.0
    assert set(np.unique(samples.volumes)) <= {0.0, 1.0}


# ---------------------------------------------------------------------------
# make_split
# ---------------------------------------------------------------------------

def test_split_exact_shot_counts(small_dataset):
    split = corpus.make_split(small_dataset, ("box", "table"), ("lamp",),
                              shots=1, seed=0)
    assert len(split.train_objects["lamp"]) == 1
    assert len(split.query_objects["lamp"]) == 2
    assert len(split.train_objects["box"]) == 3
    assert split.query_objects["box"] == ()


def test_split_query_disjoint_from_train(small_dataset):
    split = corpus.make_split(small_dataset, ("box", "table"), ("lamp",),
                              shots=2, seed=3)
    overlap = set(split.train_objects["lamp"]) & set(split.query_objects["lamp"])
    assert not overlap
    assert len(split.train_objects["lamp"]) == 2


def test_split_rejects_overlapping_class_sets(small_dataset):
    with pytest.raises(ValueError, match="overlap"):
        corpus.make_split(small_dataset, ("box", "lamp"), ("lamp",), 1, 0)


def test_split_rejects_too_many_shots(small_dataset):
    with pytest.raises(ValueError, match="shots"):
        corpus.make_split(small_dataset, ("box",), ("lamp",), shots=10, seed=0)


def test_split_deterministic(small_dataset):
    a = corpus.make_split(small_dataset, ("box",), ("lamp", "table"), 1, seed=5)
    b = corpus.make_split(small_dataset, ("box",), ("lamp", "table"), 1, seed=5)
    assert a == b


def test_split_round_trip(small_dataset, tmp_path):
    split = corpus.make_split(small_dataset, ("box", "table"), ("lamp",), 1, 0)
    path = tmp_path / "split.json"
    split.save(path)
    assert corpus.FewShotSplit.load(path) == split
