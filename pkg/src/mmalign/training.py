"""Optimization loop: encode, integrate, contrastive losses, AdamW updates.

One optimizer step per epoch: every seed batch contributes its loss to the
epoch's tape, so the single backward pass accumulates exactly the summed
gradient of all micro-batches. The freeze threshold advances per epoch and
keeps advancing through the iterative extension, where probation promotes
stable mutual-nearest pairs into the training seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor, Tape, cosine_similarity_matrix
from .data import AlignmentSeedSet, MultiModalKG
from .encoders import EncoderParams, encode_all, trainable_pair
from .errors import ConfigError, NumericError
from .inference import evaluate
from .integration import IntegrationOptions, ThresholdSchedule, integrate_epoch
from .objectives import JOINT, LossConfig, cross_kg_loss, cross_modality_loss, total_loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    iterative_epochs: int = 500
    batch_size: int = 3500
    base_lr: float = 5e-3
    warmup_fraction: float = 0.15
    accumulation_steps: int = 1
    early_stop_patience: int = 10
    eval_interval: int = 5
    probation_interval: int = 5
    probation_stability: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    cm_entity_cap: int = 2000

    def __post_init__(self):
        counts = {"epochs": self.epochs, "batch_size": self.batch_size,
                  "accumulation_steps": self.accumulation_steps,
                  "early_stop_patience": self.early_stop_patience,
                  "eval_interval": self.eval_interval,
                  "probation_interval": self.probation_interval,
                  "probation_stability": self.probation_stability}
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.iterative_epochs < 0:
            raise ConfigError(f"iterative_epochs must be >= 0, got {self.iterative_epochs}")
        if not (0.0 <= self.warmup_fraction <= 1.0):
            raise ConfigError(f"warmup_fraction must lie in [0,1], got {self.warmup_fraction}")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be non-negative")


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warm-up to base_lr, then cosine decay to zero."""
    if not (0 <= step <= total_steps):
        raise ConfigError(f"step {step} outside [0,{total_steps}]")
    warmup = int(config.warmup_fraction * total_steps)
    if step < warmup:
        return config.base_lr * step / warmup
    if total_steps == warmup:
        return config.base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """AdamW first/second moment accumulators, one slot per parameter."""

    first: list
    second: list
    step_count: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(first=[np.zeros_like(p.values) for p in params],
                   second=[np.zeros_like(p.values) for p in params])


def optimizer_step(params, state: OptimizerState, rate: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Decoupled-weight-decay Adam update, in place."""
    state.step_count += 1
    t = state.step_count
    for p, m, v in zip(params, state.first, state.second):
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {p.name or '?'}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.values -= rate * m_hat / (np.sqrt(v_hat) + eps)
        p.values -= rate * weight_decay * p.values


@dataclass
class ProbationLedger:
    """Streak counts for mutual-nearest candidate pairs."""

    streaks: dict = field(default_factory=dict)


def probation_update(joint_src: np.ndarray, joint_tgt: np.ndarray,
                     train_pairs: np.ndarray, ledger: ProbationLedger,
                     stability: int) -> list[tuple[int, int]]:
    """One probation round: refresh streaks, return pairs ready for promotion.

    Candidates are entities outside the current (augmented) train seeds. A
    pair's streak grows only while it stays mutual-nearest every round; any
    miss resets it. Reaching `stability` consecutive rounds promotes the pair.
    """
    train_pairs = np.asarray(train_pairs).reshape(-1, 2)
    cand_src = np.setdiff1d(np.arange(joint_src.shape[0]), train_pairs[:, 0])
    cand_tgt = np.setdiff1d(np.arange(joint_tgt.shape[0]), train_pairs[:, 1])
    if cand_src.size == 0 or cand_tgt.size == 0:
        ledger.streaks = {}
        return []
    sims = cosine_similarity_matrix(joint_src[cand_src], joint_tgt[cand_tgt])
    nearest_tgt = sims.argmax(axis=1)
    nearest_src = sims.argmax(axis=0)
    mutual = [(int(cand_src[a]), int(cand_tgt[b]))
              for a, b in enumerate(nearest_tgt) if nearest_src[b] == a]
    ledger.streaks = {pair: ledger.streaks.get(pair, 0) + 1 for pair in mutual}
    promoted = [pair for pair, streak in ledger.streaks.items() if streak >= stability]
    for pair in promoted:
        del ledger.streaks[pair]
    return promoted


@dataclass
class TrainHistory:
    epoch_rows: list = field(default_factory=list)
    freeze_rows: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)
    augmented: list = field(default_factory=list)   # (epoch, src, tgt)


@dataclass
class TrainResult:
    params_src: EncoderParams
    params_tgt: EncoderParams
    history: TrainHistory
    best_values: dict
    best_scores: tuple
    best_epoch: int
    best_delta: float
    best_val_hits1: float | None
    train_pairs: np.ndarray
    epochs_run: int
    final_scores: tuple = ({}, {})


def _embedding_views(result):
    src = {m: st.embeddings for m, st in result.src_states.items()}
    tgt = {m: st.embeddings for m, st in result.tgt_states.items()}
    src[JOINT] = result.joint_src
    tgt[JOINT] = result.joint_tgt
    return src, tgt


def _cm_loss_for_kg(embs, config: LossConfig, tape: Tape, cap: int, rng) -> DiffTensor:
    n = next(iter(embs.values())).shape[0]
    if n > cap:
        batch = rng.choice(n, size=cap, replace=False)
        embs = {m: tape.gather_rows(h, batch) for m, h in embs.items()}
    return cross_modality_loss(embs, config, tape)


def snapshot_values(params_src: EncoderParams, params_tgt: EncoderParams) -> dict:
    named = dict(params_src.named())
    named.update(params_tgt.named())
    return {name: t.values.copy() for name, t in named.items()}


def train(kg_src: MultiModalKG, kg_tgt: MultiModalKG, seeds: AlignmentSeedSet,
          params_src: EncoderParams, params_tgt: EncoderParams,
          loss_config: LossConfig, train_config: TrainConfig,
          schedule: ThresholdSchedule,
          options: IntegrationOptions = IntegrationOptions(),
          cm_loss_enabled: bool = True) -> TrainResult:
    """Full training run; returns final params plus the best-validation state."""
    train_pairs = seeds.train_pairs.copy()
    if len(train_pairs) == 0:
        raise ConfigError("train: empty train seed set")
    valid_pairs = seeds.valid_pairs
    modalities = params_src.modalities

    params = trainable_pair(params_src, params_tgt)
    opt_state = OptimizerState.for_params(params)
    seq = np.random.SeedSequence(train_config.seed)
    shuffle_rng, cm_rng = (np.random.default_rng(s) for s in seq.spawn(2))

    total_epochs = train_config.epochs + train_config.iterative_epochs
    history = TrainHistory()
    ledger = ProbationLedger()
    static_scores = None
    ones_scores = None
    best_val = (-np.inf, -np.inf)
    best_values = snapshot_values(params_src, params_tgt)
    best_scores = ({}, {})
    best_epoch, best_delta = 0, schedule.at_epoch(0)
    evals_without_improvement = 0
    epochs_run = 0

    for epoch in range(total_epochs):
        epochs_run = epoch + 1
        tape = Tape()
        for p in params:
            p.zero_grad()
        src_embs = encode_all(kg_src, params_src, tape, modalities)
        tgt_embs = encode_all(kg_tgt, params_tgt, tape, modalities)

        scores_override = None
        delta_override = None
        if options.static_epoch is not None:
            if epoch < options.static_epoch:
                if ones_scores is None:
                    ones_scores = ({m: np.ones(kg_src.n_entities) for m in modalities},
                                   {m: np.ones(kg_tgt.n_entities) for m in modalities})
                scores_override = ones_scores
            elif static_scores is not None:
                scores_override = static_scores
                delta_override = schedule.at_epoch(options.static_epoch)
        result = integrate_epoch(src_embs, tgt_embs, schedule, epoch, tape,
                                 options, scores_override, delta_override)
        if options.static_epoch is not None and epoch == options.static_epoch:
            static_scores = result.scores()
        history.freeze_rows.extend(result.log_rows)
        src_all, tgt_all = _embedding_views(result)

        # losses: cross-modality on both KGs, cross-KG over shuffled seed batches
        if cm_loss_enabled:
            cm = tape.add(
                _cm_loss_for_kg(src_all, loss_config, tape, train_config.cm_entity_cap, cm_rng),
                _cm_loss_for_kg(tgt_all, loss_config, tape, train_config.cm_entity_cap, cm_rng),
            )
        else:
            cm = DiffTensor(np.zeros((1, 1)))
        order = shuffle_rng.permutation(len(train_pairs))
        ckg = None
        for start in range(0, len(order), train_config.batch_size):
            batch = train_pairs[order[start:start + train_config.batch_size]]
            chunks = np.array_split(np.arange(len(batch)),
                                    min(train_config.accumulation_steps, len(batch)))
            for chunk in chunks:
                piece = cross_kg_loss(src_all, tgt_all, batch[chunk], loss_config, tape)
                ckg = piece if ckg is None else tape.add(ckg, piece)
        try:
            loss = total_loss(cm, ckg, tape)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from None

        rate = lr_schedule(epoch, total_epochs, train_config)
        row = {"epoch": epoch, "loss_total": float(loss.values[0, 0]),
               "loss_cm": float(cm.values[0, 0]), "loss_ckg": float(ckg.values[0, 0]),
               "delta": result.delta, "lr": rate, "n_train_seeds": len(train_pairs)}
        for m in modalities:
            row[f"frozen_{m}_src"] = result.src_states[m].frozen_ratio
            row[f"frozen_{m}_tgt"] = result.tgt_states[m].frozen_ratio
        history.epoch_rows.append(row)

        stop_early = False
        if len(valid_pairs) and (epoch % train_config.eval_interval == 0
                                 or epoch == total_epochs - 1):
            # validation pairs rank against every entity: a wide candidate pool
            # keeps the selection signal fine-grained without touching test labels
            report = evaluate(result.joint_src.values, result.joint_tgt.values,
                              valid_pairs, candidate_pool="all")
            history.eval_rows.append({"epoch": epoch, **{f"val_{k}": v
                                                         for k, v in report.mean.items()}})
            score = (report.mean["hits1"], report.mean["mrr"])
            if score > best_val:
                best_val = score
                best_values = snapshot_values(params_src, params_tgt)
                best_scores = result.scores()
                best_epoch, best_delta = epoch, result.delta
                evals_without_improvement = 0
            else:
                evals_without_improvement += 1
                if evals_without_improvement >= train_config.early_stop_patience:
                    stop_early = True

        tape.backward(loss)
        optimizer_step(params, opt_state, rate, train_config.weight_decay)

        in_iterative = epoch >= train_config.epochs
        if (in_iterative and train_config.iterative_epochs > 0
                and (epoch - train_config.epochs) % train_config.probation_interval == 0):
            promoted = probation_update(result.joint_src.values, result.joint_tgt.values,
                                        train_pairs, ledger, train_config.probation_stability)
            if promoted:
                history.augmented.extend((epoch, s, t) for s, t in promoted)
                train_pairs = np.vstack([train_pairs, np.array(promoted, dtype=np.int64)])

        if stop_early:
            break

    if len(valid_pairs) == 0:
        # no validation signal: the final state is the best state
        best_values = snapshot_values(params_src, params_tgt)
        best_scores = result.scores()
        best_epoch, best_delta = epochs_run - 1, result.delta
    return TrainResult(
        params_src=params_src, params_tgt=params_tgt, history=history,
        best_values=best_values, best_scores=best_scores, best_epoch=best_epoch,
        best_delta=best_delta,
        best_val_hits1=None if best_val[0] == -np.inf else float(best_val[0]),
        train_pairs=train_pairs, epochs_run=epochs_run,
        final_scores=result.scores(),
    )


# -- run artifacts ---------------------------------------------------------------


def history_csv_lines(history: TrainHistory, modalities) -> list[str]:
    """history.csv rows: per-epoch scalars plus validation metrics when present."""
    columns = ["epoch", "loss_total", "loss_cm", "loss_ckg", "delta", "lr"]
    for m in modalities:
        columns += [f"frozen_{m}_src", f"frozen_{m}_tgt"]
    columns += ["n_train_seeds", "val_hits1", "val_hits10", "val_mrr"]
    evals = {row["epoch"]: row for row in history.eval_rows}
    lines = [",".join(columns)]
    for row in history.epoch_rows:
        merged = dict(row)
        merged.update(evals.get(row["epoch"], {}))
        cells = []
        for col in columns:
            value = merged.get(col, "")
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    return lines


def write_history_csv(path, history: TrainHistory, modalities):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(history_csv_lines(history, modalities)) + "\n")


def write_augmented_seeds(path, history: TrainHistory):
    with open(path, "w", encoding="utf-8") as fh:
        for epoch, src, tgt in history.augmented:
            fh.write(f"{src}\t{tgt}\t{epoch}\n")
