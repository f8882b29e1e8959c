"""Unified contrastive objective: cross-modality association + cross-KG alignment.

All similarities are dot products of row-L2-normalized embeddings divided by
a temperature, so the exp() terms stay bounded even at temperature 0.05.
Per-pair contrastive terms lie in (0, 1]; losses are sums of their negative
logs and therefore non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor, Tape
from .data import MODALITIES
from .errors import ConfigError, NumericError

JOINT = "joint"
DEFAULT_WEIGHTS = {"str": 0.1, "rel": 0.1, "attr": 0.1, "img": 10.0}


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    modality_pairs: tuple | None = None   # None: all unordered pairs present
    negatives: str = "full"               # "full" or "in-batch"
    ckg_literal_sum: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        for m, beta in self.weights.items():
            if beta <= 0:
                raise ConfigError(f"modality weight for {m!r} must be positive, got {beta}")
        if self.negatives not in ("full", "in-batch"):
            raise ConfigError(f"negatives mode must be 'full' or 'in-batch', got {self.negatives!r}")
        if self.modality_pairs is not None:
            for p, q in self.modality_pairs:
                if p == q:
                    raise ConfigError(f"modality pair ({p},{q}) is not distinct")


def _pairs_for(config: LossConfig, modalities) -> list[tuple[str, str]]:
    if config.modality_pairs is not None:
        return list(config.modality_pairs)
    present = [m for m in MODALITIES if m in modalities]
    return [(p, q) for i, p in enumerate(present) for q in present[i + 1:]]


def cross_modality_loss(embeddings: dict[str, DiffTensor], config: LossConfig,
                        tape: Tape) -> DiffTensor:
    """Association loss over modality pairs within one KG.

    For entity i and modality pair (p, q), the positive is (h_i^p, h_i^q) and
    the negatives are every cross pairing (h_i^p, h_j^q) and (h_j^p, h_i^q)
    with j != i. Each pair's term is weighted by the product of the two
    modality weights.
    """
    total = None
    for p, q in _pairs_for(config, embeddings):
        for m in (p, q):
            if m not in embeddings:
                raise ConfigError(f"cross_modality_loss: no embeddings for modality {m!r}")
            if m not in config.weights:
                raise ConfigError(f"cross_modality_loss: no weight configured for {m!r}")
        n = embeddings[p].shape[0]
        hp = tape.l2_normalize_rows(embeddings[p])
        hq = tape.l2_normalize_rows(embeddings[q])
        sims = tape.scale(tape.matmul(hp, hq, transpose_b=True), 1.0 / config.temperature)
        exp_fwd = tape.exp(sims)
        exp_bwd = tape.exp(tape.transpose(sims))
        eye = np.eye(n)
        ones = np.ones((n, n))
        positive = tape.masked_row_sum(exp_fwd, eye)
        denom = tape.add(
            tape.add(tape.masked_row_sum(exp_fwd, ones), tape.masked_row_sum(exp_bwd, ones)),
            tape.scale(positive, -1.0),
        )
        log_l = tape.add(tape.log(positive), tape.scale(tape.log(denom), -1.0))
        piece = tape.scale(tape.sum_all(log_l), -config.weights[p] * config.weights[q])
        total = piece if total is None else tape.add(total, piece)
    if total is None:
        raise ConfigError("cross_modality_loss: no modality pairs to score")
    return total


def _directional_log_l(tape: Tape, queries: DiffTensor, pool: DiffTensor,
                       positive_cols: np.ndarray, temperature: float) -> DiffTensor:
    sims = tape.scale(tape.matmul(queries, pool, transpose_b=True), 1.0 / temperature)
    probs = tape.softmax_rows(sims)
    onehot = np.zeros(sims.shape)
    onehot[np.arange(len(positive_cols)), positive_cols] = 1.0
    return tape.masked_row_sum(probs, onehot)


def cross_kg_loss(src_embeddings: dict[str, DiffTensor], tgt_embeddings: dict[str, DiffTensor],
                  seed_pairs: np.ndarray, config: LossConfig, tape: Tape) -> DiffTensor:
    """Bidirectional alignment loss over seed pairs, per modality incl. joint.

    'full' negatives rank each query against every entity of the opposite KG;
    'in-batch' restricts the pool to the batch's opposite-side entities. The
    default combines directions as -1/2(log l_fwd + log l_bwd); the literal-sum
    variant uses -1/2 log(l_fwd + l_bwd) instead.
    """
    pairs = np.asarray(seed_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ConfigError("cross_kg_loss: empty seed batch")
    if set(src_embeddings) != set(tgt_embeddings):
        raise ConfigError("cross_kg_loss: modality sets differ between KGs")
    src_idx, tgt_idx = pairs[:, 0], pairs[:, 1]
    batch = np.arange(len(pairs))
    total = None
    for m in [m for m in MODALITIES if m in src_embeddings] + (
            [JOINT] if JOINT in src_embeddings else []):
        hs = tape.l2_normalize_rows(src_embeddings[m])
        ht = tape.l2_normalize_rows(tgt_embeddings[m])
        if src_idx.max() >= hs.shape[0] or tgt_idx.max() >= ht.shape[0]:
            raise ConfigError(f"cross_kg_loss: seed pair references a missing row in {m!r}")
        qs = tape.gather_rows(hs, src_idx)
        qt = tape.gather_rows(ht, tgt_idx)
        if config.negatives == "full":
            l_fwd = _directional_log_l(tape, qs, ht, tgt_idx, config.temperature)
            l_bwd = _directional_log_l(tape, qt, hs, src_idx, config.temperature)
        else:
            l_fwd = _directional_log_l(tape, qs, qt, batch, config.temperature)
            l_bwd = _directional_log_l(tape, qt, qs, batch, config.temperature)
        if config.ckg_literal_sum:
            combined = tape.log(tape.add(l_fwd, l_bwd))
        else:
            combined = tape.add(tape.log(l_fwd), tape.log(l_bwd))
        piece = tape.scale(tape.sum_all(combined), -0.5)
        total = piece if total is None else tape.add(total, piece)
    return total


def total_loss(l_cm: DiffTensor, l_ckg: DiffTensor, tape: Tape) -> DiffTensor:
    """Sum of the two objective components; rejects non-finite inputs."""
    for name, part in (("cross-modality", l_cm), ("cross-KG", l_ckg)):
        if not np.isfinite(part.values).all():
            raise NumericError(f"{name} loss is not finite: {part.values[0, 0]}")
    return tape.add(l_cm, l_ckg)
