import struct

import numpy as np
import pytest

from mmalign.data import (
    AlignmentSeedSet,
    MultiModalKG,
    SyntheticSpec,
    adjacency_from_triples,
    build_bag_features,
    build_joint_bag_features,
    generate_synthetic_pair,
    load_corruption,
    load_kg_pair,
    split_seeds,
    write_kg_pair,
)
from mmalign.errors import ConfigError, FormatError, LoadError, ValidationError


def write_image_file(path, rows):
    rows = np.asarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"PMFV1")
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def make_fixture(root, triples_1="0\t0\t1\n1\t1\t2\n", img_rows_1=None):
    (root / "triples_1.tsv").write_text(triples_1)
    (root / "triples_2.tsv").write_text("0\t0\t1\n2\t1\t1\n")
    (root / "rel_bags_1.tsv").write_text("0\t0\n1\t0,1\n2\t1\n")
    (root / "rel_bags_2.tsv").write_text("0\t0\n1\t0,1\n2\t1\n")
    (root / "attr_bags_1.tsv").write_text("0\t2\n2\t0,3\n")
    (root / "attr_bags_2.tsv").write_text("0\t2\n2\t0,3\n")
    if img_rows_1 is None:
        img_rows_1 = [[1.0, 0.5], [0.25, -1.0], [2.0, 0.125]]
    write_image_file(root / "img_features_1.bin", img_rows_1)
    write_image_file(root / "img_features_2.bin", [[1.0, 0.5], [0.25, -1.0], [2.0, 0.25]])
    (root / "seeds.tsv").write_text("0\t0\n1\t1\n2\t2\n")


def test_load_round_trips_hand_fixture(tmp_path):
    make_fixture(tmp_path)
    kg1, kg2, seeds = load_kg_pair(tmp_path)
    assert kg1.n_entities == 3 and kg2.n_entities == 3
    assert len(kg1.triples) == 2 and len(kg2.triples) == 2
    assert kg1.triples[0] == (0, 0, 1)
    assert len(seeds.pairs) == 3
    assert seeds.train_idx.size == 0 and seeds.test_idx.size == 3


def test_load_rejects_out_of_range_entity(tmp_path):
    make_fixture(tmp_path, triples_1="0\t0\t1\n99\t0\t2\n")
    with pytest.raises(ValidationError, match=r"triples_1\.tsv:2"):
        load_kg_pair(tmp_path)


def test_missing_image_row_gives_zero_vector(tmp_path):
    make_fixture(tmp_path, img_rows_1=[[1.0, 0.5], [0.0, 0.0], [2.0, 0.125]])
    kg1, _, _ = load_kg_pair(tmp_path)
    assert not kg1.has_image[1]
    assert np.array_equal(kg1.image_features[1], [0.0, 0.0])
    assert kg1.has_image[0] and kg1.has_image[2]


def test_load_missing_file_names_it(tmp_path):
    make_fixture(tmp_path)
    (tmp_path / "attr_bags_2.tsv").unlink()
    with pytest.raises(LoadError, match="attr_bags_2"):
        load_kg_pair(tmp_path)


def test_load_rejects_image_dim_mismatch(tmp_path):
    make_fixture(tmp_path)
    write_image_file(tmp_path / "img_features_2.bin", [[1.0, 0.5, 0.0]] * 3)
    with pytest.raises(FormatError, match="dimension"):
        load_kg_pair(tmp_path)


def test_load_rejects_bad_magic(tmp_path):
    make_fixture(tmp_path)
    (tmp_path / "img_features_1.bin").write_bytes(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        load_kg_pair(tmp_path)


def test_write_load_write_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_entities=12, missing_image_rate=0.2, corrupt_rate_img=0.25, seed=5)
    kg1, kg2, seeds, corruption = generate_synthetic_pair(spec)
    first = tmp_path / "first"
    second = tmp_path / "second"
    write_kg_pair(first, kg1, kg2, seeds, corruption)
    reloaded = load_kg_pair(first)
    write_kg_pair(second, reloaded[0], reloaded[1], reloaded[2],
                  load_corruption(first, kg2.n_entities))
    for name in sorted(p.name for p in first.iterdir()):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def _toy_kg(rel_items, n_relations=4):
    n = len(rel_items)
    return MultiModalKG.assemble(
        name="toy", n_entities=n,
        relations=list(range(n_relations)), attributes=[0, 1],
        triples=[], rel_items=rel_items, attr_items=[[] for _ in range(n)],
        rel_bag=np.zeros((n, 1)), attr_bag=np.zeros((n, 1)),
        image_features=np.zeros((n, 2)), has_image=np.zeros(n, dtype=bool),
    )


def test_bag_features_multi_hot_definition():
    kg = _toy_kg([[0, 2], [1]])
    mat = build_bag_features(kg, "rel")
    assert np.array_equal(mat[0], [1, 0, 1, 0])
    assert np.array_equal(mat[1], [0, 1, 0, 0])


def test_bag_features_empty_bag_gives_zero_row():
    kg = _toy_kg([[0, 2], []])
    mat = build_bag_features(kg, "rel")
    assert np.array_equal(mat[1], [0, 0, 0, 0])


def test_bag_features_cap_keeps_most_frequent():
    # 1200 relations; ids 0..999 occur twice, 1000..1199 once
    rel_items = [list(range(0, 1200, 2)), list(range(0, 1200, 2)),
                 list(range(1, 1200, 2))]
    frequent = [i for i in range(1200) if i % 2 == 0]
    kg = _toy_kg(rel_items, n_relations=1200)
    mat = build_bag_features(kg, "rel", cap=1000)
    assert mat.shape[1] == 1000
    # the 600 even ids (frequency 2) all survive the cut
    cols = sorted(frequent + [i for i in range(1, 801, 2)])
    assert np.array_equal(mat[0], np.isin(cols, frequent).astype(float))


def test_joint_bag_features_share_columns():
    m1, m2 = build_joint_bag_features([[0], [3]], [[3], [1]], vocab=[0, 1, 2, 3])
    assert m1.shape == m2.shape == (2, 4)
    assert np.array_equal(m1[1], m2[0])


def test_synthetic_zero_corruption_zero_noise_identical_images():
    spec = SyntheticSpec(n_entities=10, corrupt_rate_img=0.0, noise_scale=0.0, seed=1)
    kg1, kg2, _, _ = generate_synthetic_pair(spec)
    assert np.array_equal(kg1.image_features, kg2.image_features)


def test_synthetic_corruption_count_is_exact():
    spec = SyntheticSpec(n_entities=100, corrupt_rate_img=0.3, seed=2)
    _, _, _, corruption = generate_synthetic_pair(spec)
    assert corruption["img"].sum() == 30


def test_synthetic_is_deterministic(tmp_path):
    spec = SyntheticSpec(n_entities=40, corrupt_rate_img=0.2, corrupt_rate_rel=0.1,
                         missing_image_rate=0.1, seed=9)
    a = generate_synthetic_pair(spec)
    b = generate_synthetic_pair(spec)
    assert np.array_equal(a[0].image_features, b[0].image_features)
    assert np.array_equal(a[1].image_features, b[1].image_features)
    assert a[0].triples == b[0].triples and a[1].triples == b[1].triples
    assert np.array_equal(a[3]["img"], b[3]["img"])
    da, db = tmp_path / "a", tmp_path / "b"
    write_kg_pair(da, a[0], a[1], a[2], a[3])
    write_kg_pair(db, b[0], b[1], b[2], b[3])
    for name in sorted(p.name for p in da.iterdir()):
        assert (da / name).read_bytes() == (db / name).read_bytes(), name


def test_synthetic_rejects_tiny_spec():
    with pytest.raises(ConfigError):
        generate_synthetic_pair(SyntheticSpec(n_entities=1))
    with pytest.raises(ConfigError):
        SyntheticSpec(n_entities=10, corrupt_rate_img=1.5).validate()


def test_synthetic_cosine_separation():
    spec = SyntheticSpec(n_entities=400, corrupt_rate_img=0.5, seed=3)
    kg1, kg2, _, corruption = generate_synthetic_pair(spec)
    src, tgt = kg1.image_features, kg2.image_features
    cos = np.array([
        float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        for a, b in zip(src, tgt)
    ])
    clean = ~corruption["img"]
    assert (cos[clean] >= 0.9).all()
    bad = cos[corruption["img"]]
    assert len(bad) >= 100
    assert abs(bad.mean()) < 0.15


def test_split_seeds_arithmetic():
    pairs = [(i, i) for i in range(10)]
    seeds = split_seeds(pairs, 0.2, 0.1, seed=0)
    assert len(seeds.train_idx) == 2
    assert len(seeds.valid_idx) == 1
    assert len(seeds.test_idx) == 7


def test_split_seeds_paper_scale_ratio():
    pairs = [(i, i) for i in range(15000)]
    seeds = split_seeds(pairs, 0.3, 0.0, seed=0)
    assert len(seeds.train_idx) == 4500


def test_split_seeds_rejects_bad_ratios():
    pairs = [(0, 0), (1, 1)]
    with pytest.raises(ConfigError):
        split_seeds(pairs, 0.9, 0.2, seed=0)
    with pytest.raises(ConfigError):
        split_seeds(pairs, -0.1, 0.0, seed=0)


def test_split_seeds_reproducible_and_exhaustive():
    pairs = [(i, i + 1) for i in range(37)]
    a = split_seeds(pairs, 0.4, 0.2, seed=7)
    b = split_seeds(pairs, 0.4, 0.2, seed=7)
    assert np.array_equal(a.train_idx, b.train_idx)
    assert np.array_equal(a.valid_idx, b.valid_idx)
    everything = np.sort(np.concatenate([a.train_idx, a.valid_idx, a.test_idx]))
    assert np.array_equal(everything, np.arange(37))


def test_seed_set_rejects_duplicate_entities():
    with pytest.raises(ValidationError):
        AlignmentSeedSet(pairs=[(0, 0), (0, 1)], train_idx=[0, 1], valid_idx=[], test_idx=[])


def test_adjacency_symmetric_self_looped():
    adj = adjacency_from_triples(3, [(0, 0, 1)])
    assert np.array_equal(adj, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])


def test_published_archive_converter_is_a_stub(tmp_path):
    from mmalign.data import convert_published_archive

    with pytest.raises(NotImplementedError):
        convert_published_archive(tmp_path, tmp_path)
