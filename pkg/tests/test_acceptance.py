"""Acceptance suite: one criterion per test, one printed pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s`. Criteria 7-9 share one set
of corrupted-pair experiments (5 seeds x {full, no-relevance, static}); all
experiment runs go through the same CLI pipeline that users invoke.
"""

import contextlib
import math
import sys
import time

import numpy as np
import pytest

from mmalign.autodiff import Tape, constant, finite_difference_check, parameter
from mmalign.cli import run_experiment
from mmalign.config import ExperimentConfig
from mmalign.data import (
    SyntheticSpec,
    generate_synthetic_pair,
    load_corruption,
    split_seeds,
)
from mmalign.encoders import encode_all, init_encoder_pair, trainable_pair
from mmalign.inference import hits_at_n, mean_reciprocal_rank
from mmalign.integration import (
    IntegrationOptions,
    ThresholdSchedule,
    integrate_epoch,
    relevance_from_alpha,
    relevance_scores,
)
from mmalign.objectives import JOINT, LossConfig, cross_kg_loss, cross_modality_loss, total_loss
from mmalign.training import TrainConfig, train


def _announce(line):
    # bypass pytest capture so the verdict lines always reach the console
    print(line)
    if sys.stdout is not sys.__stdout__ and sys.__stdout__ is not None:
        print(line, file=sys.__stdout__)


@contextlib.contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        _announce(f"[FAIL] criterion {number}: {description}")
        raise
    _announce(f"[PASS] criterion {number}: {description}")


# -- shared experiment configuration -------------------------------------------


def corrupted_experiment(seed, **ablation) -> ExperimentConfig:
    return ExperimentConfig(
        synthetic=SyntheticSpec(
            n_entities=300, n_relations=10, n_attributes=15,
            attr_items_per_entity=3, d_v=32, triple_density=3.0,
            corrupt_rate_img=0.3, missing_image_rate=0.1, seed=seed),
        train_ratio=0.2, valid_fraction=0.1, split_seed=seed,
        hidden_dim=32, gat_layers=2,
        loss=LossConfig(),
        train=TrainConfig(epochs=40, iterative_epochs=0, eval_interval=5,
                          early_stop_patience=10, seed=seed),
        schedule=ThresholdSchedule(),
        **ablation,
    )


def low_resource_experiment(seed, ratio) -> ExperimentConfig:
    # harder mix: every modality partially corrupted so supervision matters;
    # no validation holdout (train to completion) keeps tiny-seed runs stable
    return ExperimentConfig(
        synthetic=SyntheticSpec(
            n_entities=300, n_relations=10, n_attributes=15,
            attr_items_per_entity=3, d_v=32, triple_density=3.0,
            corrupt_rate_str=0.2, corrupt_rate_rel=0.4, corrupt_rate_attr=0.4,
            corrupt_rate_img=0.4, missing_image_rate=0.1, seed=seed),
        train_ratio=ratio, valid_fraction=0.0, split_seed=seed,
        hidden_dim=32, gat_layers=2,
        loss=LossConfig(),
        train=TrainConfig(epochs=40, iterative_epochs=0, eval_interval=5,
                          early_stop_patience=10, seed=seed),
        schedule=ThresholdSchedule(),
    )


SEEDS = range(5)


@pytest.fixture(scope="module")
def corrupted_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("corrupted")
    started = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        for variant, ablation in (("pmf", {}),
                                  ("frm", {"disable_relevance": True})):
            run_dir = root / f"{variant}_{seed}"
            runs[(variant, seed)] = (run_dir, run_experiment(
                corrupted_experiment(seed, **ablation), run_dir))
    elapsed = time.perf_counter() - started
    for seed in SEEDS:
        run_dir = root / f"static_{seed}"
        runs[("static", seed)] = (run_dir, run_experiment(
            corrupted_experiment(seed, static_epoch=0), run_dir))
    return {"runs": runs, "elapsed_pmf_frm": elapsed}


def read_freeze_log(run_dir):
    lines = (run_dir / "freeze_log.csv").read_text().strip().splitlines()
    rows = []
    for line in lines[1:]:
        epoch, modality, side, delta, ratio, mean_w = line.split(",")
        rows.append({"epoch": int(epoch), "modality": modality, "side": int(side),
                     "delta": float(delta), "frozen_ratio": float(ratio),
                     "mean_w": float(mean_w)})
    return rows


def read_score_scatter(run_dir):
    paths = sorted(run_dir.glob("scores_epoch*.csv"),
                   key=lambda p: int(p.stem.replace("scores_epoch", "")))
    lines = paths[-1].read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    return rows


# -- criteria -------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    with criterion(1, "finite differences on every primitive and the full loss (<1e-3, <30s)"):
        started = time.perf_counter()
        rng = np.random.default_rng(0)

        def kink_free(shape):
            vals = rng.normal(size=shape)
            while (np.abs(vals) < 0.1).any():
                vals = np.where(np.abs(vals) < 0.1, rng.normal(size=shape), vals)
            return vals

        x = parameter(kink_free((4, 3)))
        y = parameter(kink_free((4, 3)))
        w = parameter(rng.normal(size=(3, 5)))
        pos = parameter(np.abs(rng.normal(size=(4, 3))) + 0.5)
        proj = constant(rng.normal(size=(3, 2)))
        row = parameter(rng.normal(size=(1, 3)))
        mask = (rng.random((4, 3)) < 0.5).astype(float)
        idx = rng.integers(0, 4, size=6)
        weights = rng.normal(size=4)

        def sq(t, v):
            gram = t.matmul(v, v, transpose_b=True)
            return t.masked_row_sum(gram, np.eye(v.shape[0]))

        primitive_cases = {
            "matmul": (lambda t: t.sum_all(t.matmul(x, w)), [x, w]),
            "matmul_t": (lambda t: t.sum_all(t.matmul(x, y, transpose_b=True)), [x, y]),
            "add": (lambda t: t.sum_all(sq(t, t.add(x, row))), [x, row]),
            "scale": (lambda t: t.sum_all(sq(t, t.scale(x, -2.5))), [x]),
            "scale_rows": (lambda t: t.sum_all(sq(t, t.scale_rows(x, weights))), [x]),
            "relu": (lambda t: t.sum_all(sq(t, t.relu(x))), [x]),
            "leaky_relu": (lambda t: t.sum_all(sq(t, t.leaky_relu(x, 0.2))), [x]),
            "softmax_rows": (lambda t: t.sum_all(sq(t, t.softmax_rows(x))), [x]),
            "l2_normalize_rows": (lambda t: t.sum_all(
                t.matmul(t.l2_normalize_rows(x), proj)), [x]),
            "concat_cols": (lambda t: t.sum_all(sq(t, t.concat_cols([x, y]))), [x, y]),
            "exp": (lambda t: t.sum_all(t.exp(x)), [x]),
            "log": (lambda t: t.sum_all(t.log(pos)), [pos]),
            "transpose": (lambda t: t.sum_all(sq(t, t.transpose(x))), [x]),
            "gather_rows": (lambda t: t.sum_all(sq(t, t.gather_rows(x, idx))), [x]),
            "masked_row_sum": (lambda t: t.sum_all(sq(t, t.masked_row_sum(x, mask))), [x]),
            "sum_all": (lambda t: t.sum_all(x), [x]),
        }
        for name, (f, params) in primitive_cases.items():
            err = finite_difference_check(f, params, eps=1e-5)
            assert err < 1e-3, f"{name}: {err}"

        # full loss on a 5-entity synthetic pair with relevance held constant
        spec = SyntheticSpec(n_entities=5, n_relations=4, n_attributes=6, d_v=4,
                             missing_image_rate=0.0, seed=21)
        kg1, kg2, _, _ = generate_synthetic_pair(spec)
        seeds = split_seeds([(i, i) for i in range(5)], 0.6, 0.0, seed=0)
        p1, p2 = init_encoder_pair(kg1, kg2, hidden_dim=4, gat_layers=1, seed=2)
        config = LossConfig(temperature=0.5)
        schedule = ThresholdSchedule()

        def full_loss(tape, scores_override=None):
            e1 = encode_all(kg1, p1, tape)
            e2 = encode_all(kg2, p2, tape)
            result = integrate_epoch(e1, e2, schedule, 0, tape,
                                     scores_override=scores_override)
            src = {m: st.embeddings for m, st in result.src_states.items()}
            tgt = {m: st.embeddings for m, st in result.tgt_states.items()}
            src[JOINT] = result.joint_src
            tgt[JOINT] = result.joint_tgt
            cm = tape.add(cross_modality_loss(src, config, tape),
                          cross_modality_loss(tgt, config, tape))
            ckg = cross_kg_loss(src, tgt, seeds.train_pairs, config, tape)
            return total_loss(cm, ckg, tape), result

        first = full_loss(Tape())[1]
        flags = np.concatenate(
            [st.freeze_flags for st in first.src_states.values()]
            + [st.freeze_flags for st in first.tgt_states.values()])
        assert (flags == 1.0).all(), "expected an unfrozen epoch-0 state"
        scores = first.scores()
        err = finite_difference_check(lambda t: full_loss(t, scores)[0],
                                      trainable_pair(p1, p2), eps=1e-5, max_samples=6)
        assert err < 1e-3, f"full loss fd error {err}"
        elapsed = time.perf_counter() - started
        assert elapsed < 30.0, f"gradient checks took {elapsed:.1f}s"


def test_criterion_2_freezing_exactness():
    with criterion(2, "frozen rows give bit-zero gradients; all-ones masks match a no-freezing run"):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(6, 3))
        mask = np.array([1, 0, 1, 1, 0, 1], dtype=float)

        def grads(apply_mask, row_subset=None):
            w = parameter(rng_w.copy())
            tape = Tape()
            h = tape.matmul(constant(feats if row_subset is None else feats[row_subset]), w)
            if apply_mask:
                h = tape.stop_gradient_rows(h, mask)
            gram = tape.matmul(h, h, transpose_b=True)
            tape.backward(tape.sum_all(tape.masked_row_sum(gram, np.eye(h.shape[0]))))
            return w.grad.copy()

        rng_w = rng.normal(size=(3, 3))
        masked_grad = grads(apply_mask=True)
        # paired-computation oracle: rebuild the loss with the frozen rows'
        # contributions deleted outright
        kept = np.flatnonzero(mask)
        oracle_grad = grads(apply_mask=False, row_subset=kept)
        assert np.array_equal(masked_grad, oracle_grad)

        # a fully frozen input contributes exactly zero to its encoder weights
        w = parameter(rng_w.copy())
        tape = Tape()
        h = tape.stop_gradient_rows(tape.matmul(constant(feats), w), np.zeros(6))
        gram = tape.matmul(h, h, transpose_b=True)
        tape.backward(tape.sum_all(tape.masked_row_sum(gram, np.eye(6))))
        assert np.array_equal(w.grad, np.zeros((3, 3)))

        # all-ones masks: parameter updates bit-identical to a freezing-disabled run
        def short_run(options):
            spec = SyntheticSpec(n_entities=30, n_relations=8, n_attributes=12,
                                 d_v=8, missing_image_rate=0.1, seed=5)
            kg1, kg2, seeds_all, _ = generate_synthetic_pair(spec)
            seeds = split_seeds(seeds_all.pairs, 0.3, 0.1, seed=5)
            p1, p2 = init_encoder_pair(kg1, kg2, hidden_dim=12, seed=5)
            config = TrainConfig(epochs=3, iterative_epochs=0, eval_interval=2, seed=5)
            train(kg1, kg2, seeds, p1, p2, LossConfig(), config,
                  ThresholdSchedule(), options=options)
            named = dict(p1.named())
            named.update(p2.named())
            return {name: t.values.copy() for name, t in named.items()}

        ones_masked = short_run(IntegrationOptions(relevance_disabled=True))
        no_freezing = short_run(IntegrationOptions(relevance_disabled=True,
                                                   bypass_freezing=True))
        for name in ones_masked:
            assert np.array_equal(ones_masked[name], no_freezing[name]), name


def test_criterion_3_relevance_score_law():
    with criterion(3, "relevance scores: range, attained max, monotone in threshold, hand case"):
        rng = np.random.default_rng(2)
        for _ in range(10):
            src = rng.normal(size=(12, 6))
            tgt = rng.normal(size=(14, 6))
            prev = None
            for delta in np.linspace(0.0, 0.95, 15):
                w_src, w_tgt = relevance_scores(src, tgt, float(delta))
                for w in (w_src, w_tgt):
                    assert ((0.0 <= w) & (w <= 1.0)).all()
                if w_src.max() > 0:
                    assert w_src.max() == 1.0  # attained whenever anything clears the bar
                if prev is not None:
                    assert (w_src <= prev + 1e-12).all()
                prev = w_src
        # score 1 is attained whenever the best similarity clears the bar
        sims_alpha = np.array([0.95, 0.4, 0.33])
        w = relevance_from_alpha(sims_alpha, 0.3)
        assert w.max() == 1.0
        hand = relevance_from_alpha(np.array([0.9, 0.5, 0.2]), 0.2)
        assert np.allclose(hand, [1.0, 0.42857142857142855, 0.0], atol=1e-6)


def test_criterion_4_threshold_schedule():
    with criterion(4, "threshold sequence equals min(0.1*1.2^t, 0.9) exactly for t=0..30"):
        schedule = ThresholdSchedule()
        for t in range(31):
            assert schedule.at_epoch(t) == min(0.1 * 1.2 ** t, 0.9)
        assert schedule.at_epoch(0) == 0.1
        assert schedule.at_epoch(20) == 0.9


def test_criterion_5_loss_oracles():
    with criterion(5, "hand-set loss instances match independent scalar oracles (<1e-6)"):
        # cross-modality: 2 entities, closed form log(2e+1) + log(2+e) - 1
        embs = {"str": constant([[1.0, 0.0], [0.0, 1.0]]),
                "img": constant([[1.0, 0.0], [1.0, 0.0]])}
        config = LossConfig(temperature=1.0, weights={"str": 1.0, "img": 1.0},
                            modality_pairs=(("str", "img"),))
        value = cross_modality_loss(embs, config, Tape()).values[0, 0]
        expected = math.log(2 * math.e + 1) + math.log(2 + math.e) - 1
        assert abs(value - expected) < 1e-6

        # no negatives: exactly zero
        single = {"str": constant([[0.6, 0.8]]), "img": constant([[0.0, 1.0]])}
        assert cross_modality_loss(single, config, Tape()).values[0, 0] == 0.0
        one_pair = cross_kg_loss({"str": constant([[1.0, 0.0]])},
                                 {"str": constant([[0.6, 0.8]])},
                                 [(0, 0)], LossConfig(temperature=0.05), Tape())
        assert one_pair.values[0, 0] == 0.0

        # cross-KG: 3 orthonormal pairs vs brute-force evaluation
        src = {"str": constant(np.eye(3))}
        tgt = {"str": constant(np.eye(3))}
        pairs = [(0, 0), (1, 1), (2, 2)]
        tau = 0.05
        value = cross_kg_loss(src, tgt, pairs, LossConfig(temperature=tau),
                              Tape()).values[0, 0]
        brute = 0.0
        hs = np.eye(3)
        for i, j in pairs:
            fwd = math.exp(hs[i] @ hs[j] / tau) / math.fsum(
                math.exp(hs[i] @ row / tau) for row in hs)
            brute += -0.5 * (math.log(fwd) + math.log(fwd))
        assert abs(value - brute) < 1e-6


def test_criterion_6_metric_oracles():
    with criterion(6, "Hits@n and MRR equal brute-force recomputation"):
        rng = np.random.default_rng(3)
        ranks = rng.integers(1, 500, size=1000)
        for n in (1, 3, 10, 50):
            brute = sum(1 for r in ranks if r <= n) / len(ranks)
            assert hits_at_n(ranks, n) == brute
        brute_mrr = sum(1.0 / r for r in ranks) / len(ranks)
        assert mean_reciprocal_rank(ranks) == pytest.approx(brute_mrr, abs=1e-12)
        assert mean_reciprocal_rank([1, 2, 4]) == pytest.approx(0.5833333333333334, abs=1e-9)


def test_criterion_7_end_to_end_effectiveness(corrupted_runs):
    with criterion(7, "full model beats the no-relevance ablation by >=3 points; "
                      ">=60% of image-corrupted entities frozen; <15 min"):
        runs = corrupted_runs["runs"]
        pmf = [runs[("pmf", s)][1]["mean"]["hits1"] for s in SEEDS]
        frm = [runs[("frm", s)][1]["mean"]["hits1"] for s in SEEDS]
        gap = float(np.mean(pmf) - np.mean(frm))
        print(f"\n  mean H@1 full {np.mean(pmf):.4f} vs no-relevance {np.mean(frm):.4f} "
              f"(gap {100 * gap:.1f} points)")
        assert gap >= 0.03

        for seed in SEEDS:
            run_dir = runs[("pmf", seed)][0]
            corruption = load_corruption(run_dir / "dataset", 300)["img"]
            scatter = read_score_scatter(run_dir)
            frozen_tgt = np.array([float(row["w_img_tgt"]) == 0.0 for row in scatter])
            frozen_fraction = float(frozen_tgt[corruption].mean())
            assert frozen_fraction >= 0.6, f"seed {seed}: {frozen_fraction:.2f}"
        assert corrupted_runs["elapsed_pmf_frm"] < 900.0


def test_criterion_8_progressive_vs_static(corrupted_runs):
    with criterion(8, "progressive integration is not worse than static-at-epoch-0"):
        runs = corrupted_runs["runs"]
        prog = float(np.mean([runs[("pmf", s)][1]["mean"]["hits1"] for s in SEEDS]))
        static = float(np.mean([runs[("static", s)][1]["mean"]["hits1"] for s in SEEDS]))
        print(f"\n  mean H@1 progressive {prog:.4f} vs static {static:.4f} "
              f"(margin {100 * (prog - static):.1f} points)")
        assert prog >= static


def test_criterion_9_frozen_ratio_trend(corrupted_runs):
    with criterion(9, "image frozen ratio at the final epoch >= epoch 0, every seed"):
        for seed in SEEDS:
            run_dir = corrupted_runs["runs"][("pmf", seed)][0]
            img_rows = [r for r in read_freeze_log(run_dir) if r["modality"] == "img"]
            first_epoch = img_rows[0]["epoch"]
            last_epoch = img_rows[-1]["epoch"]
            start = np.mean([r["frozen_ratio"] for r in img_rows
                             if r["epoch"] == first_epoch])
            end = np.mean([r["frozen_ratio"] for r in img_rows
                           if r["epoch"] == last_epoch])
            assert end >= start, f"seed {seed}: {end:.3f} < {start:.3f}"


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "identical config and seed give byte-identical history.csv and metrics.json"):
        config = corrupted_experiment(0)
        fast = ExperimentConfig(**{**config.__dict__,
                                   "train": TrainConfig(epochs=6, iterative_epochs=0,
                                                        eval_interval=2, seed=0)})
        run_experiment(fast, tmp_path / "one")
        run_experiment(fast, tmp_path / "two")
        for name in ("history.csv", "metrics.json"):
            assert ((tmp_path / "one" / name).read_bytes()
                    == (tmp_path / "two" / name).read_bytes()), name


def test_criterion_11_low_resource_trend(tmp_path):
    with criterion(11, "H@1 non-decreasing in seed ratio {0.05,0.1,0.2,0.3} over 3 seeds"):
        means = []
        for ratio in (0.05, 0.1, 0.2, 0.3):
            values = [run_experiment(low_resource_experiment(seed, ratio),
                                     tmp_path / f"ratio{ratio}_{seed}")["mean"]["hits1"]
                      for seed in range(3)]
            means.append(float(np.mean(values)))
        print(f"\n  mean H@1 by ratio: "
              + ", ".join(f"{r}:{m:.4f}" for r, m in zip((0.05, 0.1, 0.2, 0.3), means)))
        assert all(b >= a for a, b in zip(means, means[1:])), means
