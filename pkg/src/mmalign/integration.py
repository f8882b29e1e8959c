"""Progressive feature integration: relevance scoring, freezing, weighted fusion.

Each epoch the growing threshold re-derives per-entity relevance scores from
the current embeddings (non-sticky: earlier masks are discarded). Scores are
computed outside the gradient tape and treated as constants everywhere; only
the freezing and fusion steps touch tape-attached tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor, Tape, cosine_similarity_matrix
from .data import MODALITIES
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class ThresholdSchedule:
    """Freeze threshold growing multiplicatively per epoch up to a cap."""

    delta0: float = 0.1
    factor: float = 1.2
    cap: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.delta0 <= self.cap <= 1.0):
            raise ConfigError(f"need 0 <= delta0 <= cap <= 1, got {self.delta0}/{self.cap}")
        if self.factor < 1.0:
            raise ConfigError(f"threshold growth factor must be >= 1, got {self.factor}")

    def at_epoch(self, epoch: int) -> float:
        if epoch < 0:
            raise ConfigError(f"epoch must be >= 0, got {epoch}")
        return min(self.delta0 * self.factor ** epoch, self.cap)


@dataclass
class ModalityState:
    """Per-modality snapshot after one integration step."""

    modality: str
    embeddings: DiffTensor      # post-freezing, tape-attached
    relevance: np.ndarray       # per-entity scores in [0, 1]
    freeze_flags: np.ndarray    # 0 = stop gradient
    epoch: int

    @property
    def frozen_ratio(self) -> float:
        return float((self.freeze_flags == 0).mean())


@dataclass(frozen=True)
class IntegrationOptions:
    """Ablation switches for the integration step."""

    relevance_disabled: bool = False          # all scores forced to 1
    freezing_disabled: bool = False           # masks forced to 1, scores kept
    fusion_weighting_disabled: bool = False   # fuse with weight 1, masks kept
    static_epoch: int | None = None           # measure relevance once, then reuse
    bypass_freezing: bool = False             # omit the stop-gradient node entirely
    force_frozen: tuple = ()                  # modalities whose masks are forced to 0


def relevance_from_alpha(alpha: np.ndarray, delta: float) -> np.ndarray:
    """Normalized thresholded scores for one side's best-match similarities.

    If no entity exceeds the threshold the whole side scores 0 (the modality
    has nothing relevant to offer this epoch) rather than dividing by a
    non-positive number.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    peak = alpha.max() if alpha.size else 0.0
    if peak <= delta:
        return np.zeros_like(alpha)
    return np.maximum(0.0, (alpha - delta) / (peak - delta))


def relevance_scores(h_src: np.ndarray, h_tgt: np.ndarray, delta: float):
    """Alignment-relevance scores for both sides of one modality.

    alpha_i is entity i's best cosine similarity against the whole opposite
    side; zero-norm rows (missing features) get alpha 0 and therefore score 0.
    """
    sims = cosine_similarity_matrix(h_src, h_tgt)
    return (relevance_from_alpha(sims.max(axis=1), delta),
            relevance_from_alpha(sims.max(axis=0), delta))


def freeze_mask(relevance: np.ndarray) -> np.ndarray:
    """Flags per entity: 0 (stop gradient) exactly where the score is 0."""
    return (np.asarray(relevance) != 0.0).astype(np.float64)


def apply_freezing(embeddings: DiffTensor, flags: np.ndarray, tape: Tape) -> DiffTensor:
    """Values pass through unchanged; frozen rows stop contributing gradient."""
    return tape.stop_gradient_rows(embeddings, flags)


def fuse_modalities(states: dict[str, ModalityState], tape: Tape,
                    weighted: bool = True) -> DiffTensor:
    """Concatenate relevance-weighted modality embeddings in fixed order."""
    ordered = [states[m] for m in MODALITIES if m in states]
    if not ordered:
        raise ConfigError("fuse_modalities: no modality states")
    dims = {st.embeddings.shape for st in ordered}
    if len({shape[0] for shape in dims}) != 1 or len({shape[1] for shape in dims}) != 1:
        raise DimensionError(f"fuse_modalities: inconsistent shapes {sorted(dims)}")
    blocks = []
    for st in ordered:
        weights = st.relevance if weighted else np.ones(st.embeddings.shape[0])
        blocks.append(tape.scale_rows(st.embeddings, weights))
    return tape.concat_cols(blocks)


@dataclass
class IntegrationResult:
    epoch: int
    delta: float
    src_states: dict[str, ModalityState]
    tgt_states: dict[str, ModalityState]
    joint_src: DiffTensor
    joint_tgt: DiffTensor
    log_rows: list = field(default_factory=list)

    def scores(self):
        return ({m: st.relevance for m, st in self.src_states.items()},
                {m: st.relevance for m, st in self.tgt_states.items()})


def integrate_epoch(src_embs: dict[str, DiffTensor], tgt_embs: dict[str, DiffTensor],
                    schedule: ThresholdSchedule, epoch: int, tape: Tape,
                    options: IntegrationOptions = IntegrationOptions(),
                    scores_override=None, delta_override: float | None = None) -> IntegrationResult:
    """One integration step: score, freeze, fuse; emits per-modality log rows.

    scores_override, when given as ({m: w_src}, {m: w_tgt}), replaces the
    relevance measurement (used by static-integration ablations);
    delta_override records the threshold those scores were measured at.
    """
    if set(src_embs) != set(tgt_embs):
        raise ConfigError(f"modality sets differ: {sorted(src_embs)} vs {sorted(tgt_embs)}")
    delta = schedule.at_epoch(epoch) if delta_override is None else delta_override
    src_states, tgt_states, log_rows = {}, {}, []
    for m in (mod for mod in MODALITIES if mod in src_embs):
        n_src = src_embs[m].shape[0]
        n_tgt = tgt_embs[m].shape[0]
        if scores_override is not None:
            w_src, w_tgt = scores_override[0][m], scores_override[1][m]
        elif options.relevance_disabled:
            w_src, w_tgt = np.ones(n_src), np.ones(n_tgt)
        else:
            w_src, w_tgt = relevance_scores(src_embs[m].values, tgt_embs[m].values, delta)
        for side, embs, w, states in ((1, src_embs[m], w_src, src_states),
                                      (2, tgt_embs[m], w_tgt, tgt_states)):
            if m in options.force_frozen:
                flags = np.zeros(len(w))
            elif options.freezing_disabled:
                flags = np.ones(len(w))
            else:
                flags = freeze_mask(w)
            state = ModalityState(
                modality=m,
                embeddings=embs if options.bypass_freezing
                else apply_freezing(embs, flags, tape),
                relevance=w,
                freeze_flags=flags,
                epoch=epoch,
            )
            states[m] = state
            log_rows.append({
                "epoch": epoch, "modality": m, "side": side, "delta": delta,
                "frozen_ratio": state.frozen_ratio, "mean_w": float(np.mean(w)),
            })
    weighted = not options.fusion_weighting_disabled
    return IntegrationResult(
        epoch=epoch,
        delta=delta,
        src_states=src_states,
        tgt_states=tgt_states,
        joint_src=fuse_modalities(src_states, tape, weighted=weighted),
        joint_tgt=fuse_modalities(tgt_states, tape, weighted=weighted),
        log_rows=log_rows,
    )


FREEZE_LOG_HEADER = "epoch,modality,side,delta,frozen_ratio,mean_w"


def write_freeze_log(path, rows):
    """Per-epoch freezing diagnostics as CSV (the data behind ratio curves)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FREEZE_LOG_HEADER + "\n")
        for row in rows:
            fh.write(f"{row['epoch']},{row['modality']},{row['side']},"
                     f"{row['delta']!r},{row['frozen_ratio']!r},{row['mean_w']!r}\n")


def write_score_scatter(path, pairs, src_scores: dict, tgt_scores: dict):
    """Per-pair relevance scores on both sides, one CSV row per aligned pair."""
    modalities = [m for m in MODALITIES if m in src_scores]
    header = ["src_entity", "tgt_entity"]
    for m in modalities:
        header += [f"w_{m}_src", f"w_{m}_tgt"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for src, tgt in np.asarray(pairs).reshape(-1, 2):
            cells = [str(int(src)), str(int(tgt))]
            for m in modalities:
                cells.append(repr(float(src_scores[m][src])))
                cells.append(repr(float(tgt_scores[m][tgt])))
            fh.write(",".join(cells) + "\n")
