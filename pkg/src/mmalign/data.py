"""Multi-modal KG data model: types, file ingestion, seed splits, synthetic pairs.

On-disk layout (UTF-8, tab-separated, one record per line):
  triples_1.tsv / triples_2.tsv   head <tab> relation <tab> tail (decimal ids)
  rel_bags_?.tsv / attr_bags_?.tsv   entity-id <tab> comma-separated item ids
  img_features_?.bin   magic b"PMFV1", uint32-LE n and d_v, n*d_v float32-LE row-major
  seeds.tsv            source-id <tab> target-id
  corruption.tsv       entity-id <tab> modality <tab> 0/1   (synthetic pairs only)

An all-zero image row means the entity has no image; the loader sets
has_image=False for it.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, LoadError, ValidationError

MODALITIES = ("str", "rel", "attr", "img")
BAG_CAP = 1000
IMG_MAGIC = b"PMFV1"


@dataclass(frozen=True)
class MultiModalKG:
    """One knowledge graph with per-modality raw attribute features."""

    name: str
    n_entities: int
    relations: list[int]
    attributes: list[int]
    triples: list[tuple[int, int, int]]
    rel_items: list[list[int]]
    attr_items: list[list[int]]
    rel_bag: np.ndarray
    attr_bag: np.ndarray
    image_features: np.ndarray
    has_image: np.ndarray
    adjacency: np.ndarray = field(repr=False)

    @classmethod
    def assemble(cls, name, n_entities, relations, attributes, triples,
                 rel_items, attr_items, rel_bag, attr_bag, image_features, has_image):
        kg = cls(
            name=name,
            n_entities=n_entities,
            relations=list(relations),
            attributes=list(attributes),
            triples=[tuple(t) for t in triples],
            rel_items=[sorted(set(r)) for r in rel_items],
            attr_items=[sorted(set(a)) for a in attr_items],
            rel_bag=np.asarray(rel_bag, dtype=np.float64),
            attr_bag=np.asarray(attr_bag, dtype=np.float64),
            image_features=np.asarray(image_features, dtype=np.float64),
            has_image=np.asarray(has_image, dtype=bool),
            adjacency=adjacency_from_triples(n_entities, triples),
        )
        validate_kg(kg)
        return kg

    @property
    def d_v(self) -> int:
        return self.image_features.shape[1]


def adjacency_from_triples(n_entities: int, triples) -> np.ndarray:
    """Unlabeled symmetric adjacency with self-loops on every entity."""
    adj = np.eye(n_entities)
    for h, _, t in triples:
        adj[h, t] = 1.0
        adj[t, h] = 1.0
    return adj


def validate_kg(kg: MultiModalKG):
    n = kg.n_entities
    rel_vocab = set(kg.relations)
    for h, r, t in kg.triples:
        if not (0 <= h < n and 0 <= t < n):
            raise ValidationError(f"{kg.name}: triple ({h},{r},{t}) references entity outside [0,{n})")
        if r not in rel_vocab:
            raise ValidationError(f"{kg.name}: triple ({h},{r},{t}) uses unknown relation {r}")
    if len(kg.rel_items) != n or len(kg.attr_items) != n:
        raise ValidationError(f"{kg.name}: bag item lists must have one entry per entity")
    if kg.image_features.shape[0] != n or kg.has_image.shape[0] != n:
        raise ValidationError(f"{kg.name}: image rows/flags must have one entry per entity")
    if kg.rel_bag.shape[0] != n or kg.attr_bag.shape[0] != n:
        raise ValidationError(f"{kg.name}: bag matrices must have one row per entity")
    missing = ~kg.has_image
    if missing.any() and np.any(kg.image_features[missing] != 0.0):
        raise ValidationError(f"{kg.name}: entities without images must have all-zero feature rows")
    if kg.adjacency.shape != (n, n):
        raise ValidationError(f"{kg.name}: adjacency must be {n}x{n}")
    if not np.array_equal(kg.adjacency, kg.adjacency.T) or np.any(np.diag(kg.adjacency) != 1.0):
        raise ValidationError(f"{kg.name}: adjacency must be symmetric with unit diagonal")


@dataclass(frozen=True)
class AlignmentSeedSet:
    """Pre-aligned entity pairs with a disjoint train/valid/test partition."""

    pairs: np.ndarray
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pairs", np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2))
        for part in ("train_idx", "valid_idx", "test_idx"):
            object.__setattr__(self, part, np.asarray(getattr(self, part), dtype=np.int64).reshape(-1))
        n = len(self.pairs)
        combined = np.concatenate([self.train_idx, self.valid_idx, self.test_idx])
        if len(combined) != n or len(np.unique(combined)) != n or (n and combined.max() >= n):
            raise ValidationError("seed partitions must be disjoint and cover all pairs")
        for side in (0, 1):
            col = self.pairs[:, side]
            if len(np.unique(col)) != len(col):
                raise ValidationError(f"an entity appears twice on side {side + 1} of the seed pairs")

    @property
    def train_pairs(self) -> np.ndarray:
        return self.pairs[self.train_idx]

    @property
    def valid_pairs(self) -> np.ndarray:
        return self.pairs[self.valid_idx]

    @property
    def test_pairs(self) -> np.ndarray:
        return self.pairs[self.test_idx]


def split_seeds(pairs, train_ratio: float, valid_ratio: float, seed: int) -> AlignmentSeedSet:
    """Deterministic shuffle and split; remainder after train+valid goes to test."""
    if not (0.0 <= train_ratio <= 1.0 and 0.0 <= valid_ratio <= 1.0):
        raise ConfigError(f"seed split ratios must lie in [0,1], got {train_ratio}/{valid_ratio}")
    if train_ratio + valid_ratio > 1.0:
        raise ConfigError(f"train_ratio + valid_ratio = {train_ratio + valid_ratio} exceeds 1")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    perm = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(np.floor(train_ratio * len(pairs)))
    n_valid = int(np.floor(valid_ratio * len(pairs)))
    return AlignmentSeedSet(
        pairs=pairs,
        train_idx=perm[:n_train],
        valid_idx=perm[n_train:n_train + n_valid],
        test_idx=perm[n_train + n_valid:],
    )


# -- bag features -------------------------------------------------------------


def _select_vocab(frequencies: Counter, vocab, cap: int) -> list[int]:
    # keep the cap most frequent items; ties resolved toward smaller ids
    ranked = sorted(vocab, key=lambda item: (-frequencies.get(item, 0), item))
    return sorted(ranked[:cap])


def _multi_hot(item_lists, columns: list[int]) -> np.ndarray:
    col_of = {item: j for j, item in enumerate(columns)}
    mat = np.zeros((len(item_lists), len(columns)))
    for i, items in enumerate(item_lists):
        for item in items:
            j = col_of.get(item)
            if j is not None:
                mat[i, j] = 1.0
    return mat


def build_bag_features(kg: MultiModalKG, modality: str, cap: int = BAG_CAP) -> np.ndarray:
    """Multi-hot matrix over the cap most frequent vocabulary items of one KG."""
    if modality not in ("rel", "attr"):
        raise ConfigError(f"bag features exist for 'rel' and 'attr' only, got {modality!r}")
    items = kg.rel_items if modality == "rel" else kg.attr_items
    vocab = kg.relations if modality == "rel" else kg.attributes
    freq = Counter(item for row in items for item in row)
    return _multi_hot(items, _select_vocab(freq, vocab, cap))


def build_joint_bag_features(items_1, items_2, vocab, cap: int = BAG_CAP):
    """Shared-vocabulary multi-hot matrices for both KGs of a pair.

    A shared vocabulary keeps bag features comparable across the pair, which
    cross-KG similarity scoring requires.
    """
    freq = Counter(item for rows in (items_1, items_2) for row in rows for item in row)
    columns = _select_vocab(freq, vocab, cap)
    return _multi_hot(items_1, columns), _multi_hot(items_2, columns)


# -- file I/O ------------------------------------------------------------------


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise LoadError(f"missing file: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def _parse_int_columns(path: Path, n_cols: int) -> list[tuple[int, tuple]]:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != n_cols:
            raise FormatError(f"{path}:{lineno}: expected {n_cols} tab-separated fields")
        try:
            rows.append((lineno, tuple(int(p) for p in parts)))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer field") from None
    return rows


def _parse_bags(path: Path, n_entities: int) -> list[list[int]]:
    items = [[] for _ in range(n_entities)]
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'entity<TAB>items'")
        try:
            eid = int(parts[0])
            row = [int(tok) for tok in parts[1].split(",") if tok]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer id") from None
        if not (0 <= eid < n_entities):
            raise ValidationError(f"{path}:{lineno}: entity {eid} outside [0,{n_entities})")
        if any(item < 0 for item in row):
            raise ValidationError(f"{path}:{lineno}: negative item id")
        items[eid] = sorted(set(row))
    return items


def _read_image_file(path: Path) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"missing file: {path}")
    blob = path.read_bytes()
    if blob[: len(IMG_MAGIC)] != IMG_MAGIC:
        raise FormatError(f"{path}: bad magic bytes, expected {IMG_MAGIC!r}")
    header_end = len(IMG_MAGIC) + 8
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header")
    n, d_v = struct.unpack("<II", blob[len(IMG_MAGIC):header_end])
    expected = header_end + 4 * n * d_v
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n}x{d_v} features, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4", offset=header_end)
    return flat.reshape(n, d_v).astype(np.float64)


def _write_image_file(path: Path, features: np.ndarray):
    n, d_v = features.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<II", n, d_v))
        fh.write(features.astype("<f4").tobytes())


def load_kg_pair(dir_path, layout: str = "tsv"):
    """Read one KG pair plus its seed alignments from a dataset directory."""
    if layout != "tsv":
        raise ConfigError(f"unknown dataset layout {layout!r}")
    root = Path(dir_path)
    raw = {}
    for side in (1, 2):
        images = _read_image_file(root / f"img_features_{side}.bin")
        n = images.shape[0]
        triples_path = root / f"triples_{side}.tsv"
        numbered = _parse_int_columns(triples_path, 3)
        for lineno, (h, r, t) in numbered:
            if not (0 <= h < n and 0 <= t < n):
                raise ValidationError(f"{triples_path}:{lineno}: entity id outside [0,{n})")
            if r < 0:
                raise ValidationError(f"{triples_path}:{lineno}: negative relation id")
        triples = [row for _, row in numbered]
        raw[side] = {
            "n": n,
            "images": images,
            "triples": triples,
            "rel_items": _parse_bags(root / f"rel_bags_{side}.tsv", n),
            "attr_items": _parse_bags(root / f"attr_bags_{side}.tsv", n),
        }

    if raw[1]["images"].shape[1] != raw[2]["images"].shape[1]:
        raise FormatError(
            f"{root}: image feature dimensions differ between sides "
            f"({raw[1]['images'].shape[1]} vs {raw[2]['images'].shape[1]})"
        )

    max_rel = max(
        [r for side in (1, 2) for _, r, _ in raw[side]["triples"]]
        + [item for side in (1, 2) for row in raw[side]["rel_items"] for item in row]
        + [-1]
    )
    max_attr = max(
        [item for side in (1, 2) for row in raw[side]["attr_items"] for item in row] + [-1]
    )
    relations = list(range(max_rel + 1))
    attributes = list(range(max_attr + 1))

    rel_bag_1, rel_bag_2 = build_joint_bag_features(
        raw[1]["rel_items"], raw[2]["rel_items"], relations)
    attr_bag_1, attr_bag_2 = build_joint_bag_features(
        raw[1]["attr_items"], raw[2]["attr_items"], attributes)

    kgs = []
    for side, rel_bag, attr_bag in ((1, rel_bag_1, attr_bag_1), (2, rel_bag_2, attr_bag_2)):
        images = raw[side]["images"]
        has_image = np.any(images != 0.0, axis=1)
        kgs.append(MultiModalKG.assemble(
            name=f"kg{side}",
            n_entities=raw[side]["n"],
            relations=relations,
            attributes=attributes,
            triples=raw[side]["triples"],
            rel_items=raw[side]["rel_items"],
            attr_items=raw[side]["attr_items"],
            rel_bag=rel_bag,
            attr_bag=attr_bag,
            image_features=images,
            has_image=has_image,
        ))

    seeds_path = root / "seeds.tsv"
    numbered_pairs = _parse_int_columns(seeds_path, 2)
    for lineno, (src, tgt) in numbered_pairs:
        if not (0 <= src < kgs[0].n_entities and 0 <= tgt < kgs[1].n_entities):
            raise ValidationError(f"{seeds_path}:{lineno}: seed pair ({src},{tgt}) out of range")
    pairs = [row for _, row in numbered_pairs]
    seeds = AlignmentSeedSet(
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        train_idx=np.array([], dtype=np.int64),
        valid_idx=np.array([], dtype=np.int64),
        test_idx=np.arange(len(pairs), dtype=np.int64),
    )
    return kgs[0], kgs[1], seeds


def write_kg_pair(dir_path, kg1: MultiModalKG, kg2: MultiModalKG,
                  seeds: AlignmentSeedSet, corruption: dict[str, np.ndarray] | None = None):
    """Write the canonical on-disk form of a KG pair; inverse of load_kg_pair."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    for side, kg in ((1, kg1), (2, kg2)):
        with open(root / f"triples_{side}.tsv", "w", encoding="utf-8") as fh:
            for h, r, t in kg.triples:
                fh.write(f"{h}\t{r}\t{t}\n")
        for label, items in (("rel", kg.rel_items), ("attr", kg.attr_items)):
            with open(root / f"{label}_bags_{side}.tsv", "w", encoding="utf-8") as fh:
                for eid, row in enumerate(items):
                    if row:
                        fh.write(f"{eid}\t{','.join(str(i) for i in row)}\n")
        _write_image_file(root / f"img_features_{side}.bin", kg.image_features)
    with open(root / "seeds.tsv", "w", encoding="utf-8") as fh:
        for src, tgt in seeds.pairs:
            fh.write(f"{src}\t{tgt}\n")
    if corruption is not None:
        with open(root / "corruption.tsv", "w", encoding="utf-8") as fh:
            n = kg2.n_entities
            for eid in range(n):
                for modality in MODALITIES:
                    flag = int(bool(corruption[modality][eid])) if modality in corruption else 0
                    fh.write(f"{eid}\t{modality}\t{flag}\n")


def load_corruption(dir_path, n_entities: int) -> dict[str, np.ndarray]:
    path = Path(dir_path) / "corruption.tsv"
    labels = {m: np.zeros(n_entities, dtype=bool) for m in MODALITIES}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in MODALITIES:
            raise FormatError(f"{path}:{lineno}: expected 'entity<TAB>modality<TAB>0/1'")
        labels[parts[1]][int(parts[0])] = parts[2] == "1"
    return labels


def convert_published_archive(archive_dir, out_dir):
    """Stub for converting published MMEA dataset archives into this layout.

    Published archives ship entity/relation URIs, raw attribute triples, and
    pretrained image features in assorted per-dataset formats; mapping them
    onto the integer-id TSV + PMFV1 layout documented above (shared
    relation/attribute vocabularies, zero rows for missing images) is
    dataset-specific and intentionally not implemented here.
    """
    raise NotImplementedError(
        "dataset-specific conversion is out of scope; produce the documented "
        "TSV/PMFV1 layout directly and load it with load_kg_pair")


# -- synthetic pairs -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic aligned KG pair with controlled corruption."""

    n_entities: int
    n_relations: int = 20
    n_attributes: int = 40
    triple_density: float = 3.0
    d_v: int = 64
    corrupt_rate_str: float = 0.0
    corrupt_rate_rel: float = 0.0
    corrupt_rate_attr: float = 0.0
    corrupt_rate_img: float = 0.0
    missing_image_rate: float = 0.0
    noise_scale: float = 0.1
    attr_items_per_entity: int = 4
    seed: int = 0

    def corrupt_rate(self, modality: str) -> float:
        return getattr(self, f"corrupt_rate_{modality}")

    def validate(self):
        if self.n_entities < 2:
            raise ConfigError(f"n_entities must be >= 2, got {self.n_entities}")
        rates = {f"corrupt_rate_{m}": self.corrupt_rate(m) for m in MODALITIES}
        rates["missing_image_rate"] = self.missing_image_rate
        for name, rate in rates.items():
            if not (0.0 <= rate <= 1.0):
                raise ConfigError(f"{name} must lie in [0,1], got {rate}")
        if self.n_relations < 1 or self.n_attributes < 1 or self.d_v < 1:
            raise ConfigError("vocabulary sizes and d_v must be positive")


def _float32_round(arr: np.ndarray) -> np.ndarray:
    # keep in-memory features identical to their on-disk float32 form
    return arr.astype(np.float32).astype(np.float64)


def _rel_items_from_triples(n: int, triples) -> list[list[int]]:
    items = [set() for _ in range(n)]
    for h, r, t in triples:
        items[h].add(r)
        items[t].add(r)
    return [sorted(s) for s in items]


def generate_synthetic_pair(spec: SyntheticSpec):
    """Build an aligned KG pair (entity i <-> entity i) with known corruption.

    Target features of uncorrupted entities are per-modality noisy copies of
    the source; corrupted entities get independently resampled features.
    Returns (source, target, seeds, corruption) where corruption maps each
    modality to a boolean flag per target entity.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_entities

    # source side
    n_triples = int(round(spec.triple_density * n))
    heads = rng.integers(0, n, size=n_triples)
    rels = rng.integers(0, spec.n_relations, size=n_triples)
    tails = rng.integers(0, n, size=n_triples)
    src_triples = list(zip(heads.tolist(), rels.tolist(), tails.tolist()))

    attr_counts = np.maximum(1, rng.poisson(spec.attr_items_per_entity, size=n))
    attr_counts = np.minimum(attr_counts, spec.n_attributes)
    src_attr = [sorted(rng.choice(spec.n_attributes, size=k, replace=False).tolist())
                for k in attr_counts]
    src_images = _float32_round(rng.normal(size=(n, spec.d_v)))

    # corruption draws (one per modality, fixed order)
    corruption = {}
    for modality in MODALITIES:
        k = int(np.floor(spec.corrupt_rate(modality) * n))
        flags = np.zeros(n, dtype=bool)
        flags[rng.choice(n, size=k, replace=False)] = True
        corruption[modality] = flags

    # target structure: copy, but rewire triples touching str-corrupted entities
    tgt_triples = []
    for h, r, t in src_triples:
        h_bad, t_bad = corruption["str"][h], corruption["str"][t]
        if h_bad and t_bad:
            tgt_triples.append((h, int(rng.integers(0, spec.n_relations)), int(rng.integers(0, n))))
        elif h_bad:
            tgt_triples.append((h, r, int(rng.integers(0, n))))
        elif t_bad:
            tgt_triples.append((int(rng.integers(0, n)), r, t))
        else:
            tgt_triples.append((h, r, t))

    # relation bags follow each side's own triples; corrupted ones are resampled
    src_rel_items = _rel_items_from_triples(n, src_triples)
    tgt_rel_items = _rel_items_from_triples(n, tgt_triples)
    for eid in np.flatnonzero(corruption["rel"]):
        k = min(max(1, len(src_rel_items[eid])), spec.n_relations)
        tgt_rel_items[eid] = sorted(rng.choice(spec.n_relations, size=k, replace=False).tolist())

    tgt_attr = [list(row) for row in src_attr]
    for eid in np.flatnonzero(corruption["attr"]):
        k = min(max(1, len(src_attr[eid])), spec.n_attributes)
        tgt_attr[eid] = sorted(rng.choice(spec.n_attributes, size=k, replace=False).tolist())

    # target images: spherical noise at noise_scale of the mean source norm
    mean_norm = float(np.linalg.norm(src_images, axis=1).mean())
    direction = rng.normal(size=(n, spec.d_v))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    direction /= np.where(norms > 0, norms, 1.0)
    tgt_images = src_images + spec.noise_scale * mean_norm * direction
    resampled = rng.normal(size=(n, spec.d_v))
    img_bad = corruption["img"]
    tgt_images[img_bad] = resampled[img_bad]
    tgt_images = _float32_round(tgt_images)

    # missing images, drawn independently per side
    n_missing = int(np.floor(spec.missing_image_rate * n))
    src_has = np.ones(n, dtype=bool)
    tgt_has = np.ones(n, dtype=bool)
    src_has[rng.choice(n, size=n_missing, replace=False)] = False
    tgt_has[rng.choice(n, size=n_missing, replace=False)] = False
    src_images = np.where(src_has[:, None], src_images, 0.0)
    tgt_images = np.where(tgt_has[:, None], tgt_images, 0.0)

    relations = list(range(spec.n_relations))
    attributes = list(range(spec.n_attributes))
    rel_bag_1, rel_bag_2 = build_joint_bag_features(src_rel_items, tgt_rel_items, relations)
    attr_bag_1, attr_bag_2 = build_joint_bag_features(src_attr, tgt_attr, attributes)

    source = MultiModalKG.assemble(
        name="source", n_entities=n, relations=relations, attributes=attributes,
        triples=src_triples, rel_items=src_rel_items, attr_items=src_attr,
        rel_bag=rel_bag_1, attr_bag=attr_bag_1,
        image_features=src_images, has_image=src_has,
    )
    target = MultiModalKG.assemble(
        name="target", n_entities=n, relations=relations, attributes=attributes,
        triples=tgt_triples, rel_items=tgt_rel_items, attr_items=tgt_attr,
        rel_bag=rel_bag_2, attr_bag=attr_bag_2,
        image_features=tgt_images, has_image=tgt_has,
    )
    seeds = AlignmentSeedSet(
        pairs=np.stack([np.arange(n), np.arange(n)], axis=1),
        train_idx=np.array([], dtype=np.int64),
        valid_idx=np.array([], dtype=np.int64),
        test_idx=np.arange(n, dtype=np.int64),
    )
    return source, target, seeds, corruption
