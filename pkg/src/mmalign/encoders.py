"""Per-modality encoders: graph attention for structure, dense layers for the rest.

The two KGs of a pair share every encoder weight except the structural base
embedding tables, which are per-KG. Sharing keeps embeddings comparable
across the pair, which both the relevance scores and the cross-KG loss rely
on. Modality embeddings all live in one hidden dimension d.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import DiffTensor, Tape, constant, parameter
from .data import MODALITIES, MultiModalKG
from .errors import ConfigError, DimensionError, FormatError, LoadError

CHECKPOINT_MAGIC = b"PMFC1"

# map modality -> n x d embedding matrix
ModalityEmbeddings = dict


class EncoderParams:
    """Learnable encoder weights for one KG (dense/GAT weights shared pairwise)."""

    def __init__(self, hidden_dim: int, side: int, base: DiffTensor | None,
                 gat_layers: list, dense: dict, leaky_slope: float = 0.2):
        self.hidden_dim = hidden_dim
        self.side = side
        self.base = base
        self.gat_layers = gat_layers
        self.dense = dense
        self.leaky_slope = leaky_slope

    @property
    def modalities(self) -> tuple:
        mods = (("str",) if self.base is not None else ()) + tuple(self.dense)
        return tuple(m for m in MODALITIES if m in mods)

    def named(self) -> dict[str, DiffTensor]:
        out = {}
        if self.base is not None:
            out[f"base_{self.side}"] = self.base
        for i, (w, a_src, a_dst) in enumerate(self.gat_layers):
            out[f"gat{i}_weight"] = w
            out[f"gat{i}_att_src"] = a_src
            out[f"gat{i}_att_dst"] = a_dst
        for m, (w, b) in self.dense.items():
            out[f"{m}_weight"] = w
            out[f"{m}_bias"] = b
        return out

    def trainable(self) -> list[DiffTensor]:
        return [t for t in self.named().values() if t.requires_grad]


def trainable_pair(params_1: EncoderParams, params_2: EncoderParams) -> list[DiffTensor]:
    """All distinct trainable tensors of a parameter pair (shared ones once)."""
    seen, out = set(), []
    for t in params_1.trainable() + params_2.trainable():
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out


def init_encoder_pair(kg1: MultiModalKG, kg2: MultiModalKG, modalities=MODALITIES,
                      hidden_dim: int = 300, gat_layers: int = 2,
                      leaky_slope: float = 0.2, seed: int = 0):
    """Xavier-initialized encoder parameters for both KGs of a pair."""
    for m in modalities:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}")
    rng = np.random.default_rng(seed)

    def xavier(rows, cols, name):
        limit = np.sqrt(6.0 / (rows + cols))
        return parameter(rng.uniform(-limit, limit, size=(rows, cols)), name)

    base_1 = base_2 = None
    layers = []
    if "str" in modalities:
        base_1 = xavier(kg1.n_entities, hidden_dim, "base_1")
        base_2 = xavier(kg2.n_entities, hidden_dim, "base_2")
        for i in range(gat_layers):
            layers.append((
                xavier(hidden_dim, hidden_dim, f"gat{i}_weight"),
                xavier(hidden_dim, 1, f"gat{i}_att_src"),
                xavier(hidden_dim, 1, f"gat{i}_att_dst"),
            ))

    dense = {}
    input_dims = {"rel": (kg1.rel_bag.shape[1], kg2.rel_bag.shape[1]),
                  "attr": (kg1.attr_bag.shape[1], kg2.attr_bag.shape[1]),
                  "img": (kg1.d_v, kg2.d_v)}
    for m in ("rel", "attr", "img"):
        if m not in modalities:
            continue
        dim1, dim2 = input_dims[m]
        if dim1 != dim2:
            raise ConfigError(f"{m} feature dimensions differ between KGs ({dim1} vs {dim2})")
        weight = xavier(dim1, hidden_dim, f"{m}_weight")
        # a nonzero image bias would leak signal into missing-image entities,
        # so that one stays pinned at zero
        bias = DiffTensor(np.zeros((1, hidden_dim)), requires_grad=(m != "img"), name=f"{m}_bias")
        dense[m] = (weight, bias)

    return (EncoderParams(hidden_dim, 1, base_1, layers, dense, leaky_slope),
            EncoderParams(hidden_dim, 2, base_2, layers, dense, leaky_slope))


def encode_structure(adjacency: np.ndarray, params: EncoderParams, tape: Tape,
                     return_attention: bool = False):
    """Stacked graph-attention layers over the base embedding table."""
    if params.base is None:
        raise ConfigError("structure encoding requested without structural parameters")
    n = params.base.shape[0]
    if adjacency.shape != (n, n):
        raise DimensionError(f"encode_structure: adjacency {adjacency.shape} for {n} entities")
    off_edge = constant(np.where(adjacency > 0, 0.0, -1e30))

    x = params.base
    attentions = []
    for weight, a_src, a_dst in params.gat_layers:
        z = tape.matmul(x, weight)
        score_src = tape.matmul(z, a_src)
        score_dst = tape.matmul(z, a_dst)
        logits = tape.leaky_relu(tape.add(score_src, tape.transpose(score_dst)),
                                 params.leaky_slope)
        att = tape.softmax_rows(tape.add(logits, off_edge))
        attentions.append(att.values)
        x = tape.matmul(att, z)
    if return_attention:
        return x, attentions
    return x


def encode_dense(features: np.ndarray, weight: DiffTensor, bias: DiffTensor,
                 tape: Tape) -> DiffTensor:
    """Single fully connected layer, no activation: features @ W + b."""
    if features.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"encode_dense: features {features.shape} vs weight {weight.shape}")
    return tape.add(tape.matmul(constant(features), weight), bias)


def encode_all(kg: MultiModalKG, params: EncoderParams, tape: Tape,
               modalities=None) -> ModalityEmbeddings:
    """Encode every configured modality of one KG into n x d embeddings."""
    modalities = params.modalities if modalities is None else tuple(modalities)
    features = {"rel": kg.rel_bag, "attr": kg.attr_bag, "img": kg.image_features}
    out = {}
    for m in modalities:
        if m == "str":
            if params.base is None:
                raise ConfigError("modality 'str' configured but no structural parameters")
            out[m] = encode_structure(kg.adjacency, params, tape)
        else:
            if m not in params.dense:
                raise ConfigError(f"modality {m!r} configured but no encoder parameters")
            weight, bias = params.dense[m]
            out[m] = encode_dense(features[m], weight, bias, tape)
    return out


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, sections: dict[str, np.ndarray]):
    """Versioned binary: one (name, rows, cols, float32 data) section per entry."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise DimensionError(f"checkpoint section {name!r} must be 2-D")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing file: {path}")
    blob = path.read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        sections = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            flat = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=pos)
            pos += 4 * rows * cols
            sections[name] = flat.reshape(rows, cols).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return sections


def restore_encoder_pair(params_1: EncoderParams, params_2: EncoderParams,
                         sections: dict[str, np.ndarray]):
    """Load checkpoint sections into an existing parameter pair, in place."""
    named = dict(params_1.named())
    named.update(params_2.named())
    for name, tensor in named.items():
        if name not in sections:
            raise FormatError(f"checkpoint lacks section {name!r}")
        if sections[name].shape != tensor.shape:
            raise FormatError(
                f"checkpoint section {name!r} has shape {sections[name].shape}, "
                f"expected {tensor.shape}")
        tensor.values[...] = sections[name]
