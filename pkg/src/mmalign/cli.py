"""Experiment runner: dataset generation, training, evaluation, sweeps, reports.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error,
1 anything else. Every run directory receives the exact config snapshot that
produced it, so runs are reproducible from their artifacts alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .autodiff import Tape, cosine_similarity_matrix
from .config import (
    ExperimentConfig,
    config_hash,
    experiment_toml_text,
    load_experiment_config,
    parse_experiment_toml,
    parse_synthetic_table,
)
from .data import (
    MODALITIES,
    generate_synthetic_pair,
    load_kg_pair,
    split_seeds,
    write_kg_pair,
)
from .encoders import (
    encode_all,
    init_encoder_pair,
    load_checkpoint,
    restore_encoder_pair,
    save_checkpoint,
)
from .errors import ConfigError, DataError, FormatError, LoadError, MMAlignError, NumericError
from .inference import evaluate, greedy_match_sims
from .integration import write_freeze_log, write_score_scatter
from .training import train, write_augmented_seeds, write_history_csv


def _resolve_out_dir(cli_out, config: ExperimentConfig, default_name: str) -> Path:
    if cli_out:
        return Path(cli_out)
    if config.out_dir:
        return Path(config.out_dir)
    return Path(os.environ.get("MMALIGN_OUT_ROOT", "runs")) / default_name


def _resolve_dataset(config: ExperimentConfig, run_dir: Path):
    """Materialize the dataset: synthetic specs are written then reloaded so
    file-based and generated runs share one ingestion path."""
    if config.dataset_path is not None:
        data_dir = Path(config.dataset_path)
    else:
        data_dir = run_dir / "dataset"
        if not (data_dir / "seeds.tsv").exists():
            kg1, kg2, seeds, corruption = generate_synthetic_pair(config.synthetic)
            write_kg_pair(data_dir, kg1, kg2, seeds, corruption)
    kg1, kg2, seeds = load_kg_pair(data_dir)
    return kg1, kg2, seeds, data_dir


def _split(config: ExperimentConfig, all_pairs):
    train_ratio, valid_ratio = config.split_ratios()
    return split_seeds(all_pairs, train_ratio, valid_ratio, config.split_seed)


def _init_params(config: ExperimentConfig, kg1, kg2):
    return init_encoder_pair(
        kg1, kg2, modalities=config.active_modalities,
        hidden_dim=config.hidden_dim, gat_layers=config.gat_layers,
        leaky_slope=config.leaky_slope, seed=config.train.seed,
    )


def _fused_joint(embs_values: dict, scores: dict, weighted: bool, modalities) -> np.ndarray:
    blocks = []
    for m in modalities:
        w = scores[m].reshape(-1, 1) if weighted else 1.0
        blocks.append(embs_values[m] * w)
    return np.concatenate(blocks, axis=1)


def _checkpoint_joint(run_dir: Path, config: ExperimentConfig, kg1, kg2):
    """Rebuild both joint embedding matrices from a run's checkpoint."""
    sections = load_checkpoint(run_dir / "checkpoint.bin")
    params_1, params_2 = _init_params(config, kg1, kg2)
    score_sections = {name for name in sections if name.startswith("score_")}
    restore_encoder_pair(params_1, params_2,
                         {k: v for k, v in sections.items()
                          if k not in score_sections and k != "meta"})
    modalities = config.active_modalities
    src_scores = {m: sections[f"score_src_{m}"].reshape(-1) for m in modalities}
    tgt_scores = {m: sections[f"score_tgt_{m}"].reshape(-1) for m in modalities}
    tape = Tape()
    src_values = {m: h.values for m, h in encode_all(kg1, params_1, tape).items()}
    tgt_values = {m: h.values for m, h in encode_all(kg2, params_2, tape).items()}
    weighted = not config.disable_fusion_weighting
    joint_src = _fused_joint(src_values, src_scores, weighted, modalities)
    joint_tgt = _fused_joint(tgt_values, tgt_scores, weighted, modalities)
    meta = sections["meta"]
    return joint_src, joint_tgt, (src_scores, tgt_scores), int(meta[0, 0])


def _metrics_payload(report, seeds, snapshot_text: str, best_epoch: int) -> dict:
    payload = report.to_dict()
    payload["seed_counts"] = {"train": int(len(seeds.train_idx)),
                              "valid": int(len(seeds.valid_idx)),
                              "test": int(len(seeds.test_idx))}
    payload["config_hash"] = config_hash(snapshot_text)
    payload["best_epoch"] = best_epoch
    return payload


def _write_metrics(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(config: ExperimentConfig, run_dir: Path) -> dict:
    """Train once and populate the run directory; returns the metrics payload."""
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = experiment_toml_text(config)
    (run_dir / "config.toml").write_text(snapshot, encoding="utf-8")

    kg1, kg2, all_seeds, _ = _resolve_dataset(config, run_dir)
    seeds = _split(config, all_seeds.pairs)
    params_1, params_2 = _init_params(config, kg1, kg2)

    result = train(kg1, kg2, seeds, params_1, params_2, config.loss, config.train,
                   config.schedule, options=config.integration_options(),
                   cm_loss_enabled=not config.disable_cm_loss)

    modalities = config.active_modalities
    write_history_csv(run_dir / "history.csv", result.history, modalities)
    write_freeze_log(run_dir / "freeze_log.csv", result.history.freeze_rows)
    if result.history.augmented:
        write_augmented_seeds(run_dir / "augmented_seeds.tsv", result.history)

    sections = dict(result.best_values)
    src_scores, tgt_scores = result.best_scores
    for m in modalities:
        sections[f"score_src_{m}"] = np.asarray(src_scores[m]).reshape(-1, 1)
        sections[f"score_tgt_{m}"] = np.asarray(tgt_scores[m]).reshape(-1, 1)
    sections["meta"] = np.array([[float(result.best_epoch), result.best_delta]])
    save_checkpoint(run_dir / "checkpoint.bin", sections)

    final_src_scores, final_tgt_scores = result.final_scores
    write_score_scatter(run_dir / f"scores_epoch{result.epochs_run - 1}.csv",
                        all_seeds.pairs, final_src_scores, final_tgt_scores)

    joint_src, joint_tgt, _, best_epoch = _checkpoint_joint(run_dir, config, kg1, kg2)
    report = evaluate(joint_src, joint_tgt, seeds.test_pairs, config.candidate_pool)
    payload = _metrics_payload(report, seeds, snapshot, best_epoch)
    _write_metrics(run_dir / "metrics.json", payload)
    return payload


# -- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"missing spec file: {spec_path}")
    doc = tomllib.loads(spec_path.read_text(encoding="utf-8"))
    spec = parse_synthetic_table(doc.get("synthetic", doc))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out) if args.out else Path(
        os.environ.get("MMALIGN_OUT_ROOT", "runs")) / f"{spec_path.stem}_data"
    kg1, kg2, seeds, corruption = generate_synthetic_pair(spec)
    write_kg_pair(out, kg1, kg2, seeds, corruption)
    print(f"dataset written to {out}")
    print(f"entities: {kg1.n_entities} per side; "
          f"triples: {len(kg1.triples)}/{len(kg2.triples)}; "
          f"seed pairs: {len(seeds.pairs)}")
    for m in MODALITIES:
        print(f"corrupted {m}: {int(corruption[m].sum())}")
    print(f"missing images: {int((~kg1.has_image).sum())}/{int((~kg2.has_image).sum())}")
    return 0


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        updates["train"] = dataclasses.replace(config.train, seed=args.seed)
        updates["split_seed"] = args.seed
        if config.synthetic is not None:
            updates["synthetic"] = dataclasses.replace(config.synthetic, seed=args.seed)
    for name in args.ablate or []:
        if name == "frm":
            updates["disable_relevance"] = True
        elif name == "iff":
            updates["disable_freezing"] = True
        elif name == "rff":
            updates["disable_fusion_weighting"] = True
        elif name == "cm":
            updates["disable_cm_loss"] = True
        elif name.startswith("static_integration=epoch:"):
            updates["static_epoch"] = int(name.split(":", 1)[1])
        else:
            raise ConfigError(
                f"unknown ablation {name!r}; expected frm, iff, rff, cm or "
                f"static_integration=epoch:N")
    if args.drop_modalities:
        updates["drop_modalities"] = tuple(
            m.strip() for m in args.drop_modalities.split(",") if m.strip())
    return dataclasses.replace(config, **updates) if updates else config


def cmd_train(args) -> int:
    config = _apply_overrides(load_experiment_config(args.config), args)
    run_dir = _resolve_out_dir(args.out, config, Path(args.config).stem)
    payload = run_experiment(config, run_dir)
    print(f"run directory: {run_dir}")
    print(f"best epoch: {payload['best_epoch']}")
    mean = payload["mean"]
    print(f"test H@1 {mean['hits1']:.4f}  H@10 {mean['hits10']:.4f}  MRR {mean['mrr']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config.toml"
    if not config_path.exists():
        raise LoadError(f"missing file: {config_path}")
    snapshot = config_path.read_text(encoding="utf-8")
    config = parse_experiment_toml(snapshot)
    if args.pool:
        config = dataclasses.replace(config, candidate_pool=args.pool)

    if args.data:
        data_dir = Path(args.data)
    elif config.dataset_path is not None:
        data_dir = Path(config.dataset_path)
    else:
        data_dir = run_dir / "dataset"
    kg1, kg2, all_seeds = load_kg_pair(data_dir)
    seeds = _split(config, all_seeds.pairs)

    joint_src, joint_tgt, _, best_epoch = _checkpoint_joint(run_dir, config, kg1, kg2)
    report = evaluate(joint_src, joint_tgt, seeds.test_pairs, config.candidate_pool)
    payload = _metrics_payload(report, seeds, snapshot, best_epoch)
    _write_metrics(run_dir / "metrics.json", payload)
    mean = payload["mean"]
    print(f"test H@1 {mean['hits1']:.4f}  H@10 {mean['hits10']:.4f}  MRR {mean['mrr']:.4f}")

    if args.greedy:
        test = seeds.test_pairs
        sims = cosine_similarity_matrix(joint_src[test[:, 0]], joint_tgt[test[:, 1]])
        result = greedy_match_sims(sims, src_ids=test[:, 0], tgt_ids=test[:, 1])
        with open(run_dir / "matches.tsv", "w", encoding="utf-8") as fh:
            for s, t, sim in result.matches:
                fh.write(f"{s}\t{t}\t{sim!r}\n")
        truth = {int(s): int(t) for s, t in test}
        correct = sum(1 for s, t, _ in result.matches if truth.get(s) == t)
        print(f"greedy matches: {len(result.matches)} "
              f"({correct} correct) -> {run_dir / 'matches.tsv'}")
    return 0


def _final_img_frozen_ratio(run_dir: Path) -> float:
    lines = (run_dir / "freeze_log.csv").read_text(encoding="utf-8").strip().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    img_rows = [r for r in rows if r[1] == "img"]
    if not img_rows:
        raise DataError(f"{run_dir}: freeze log has no image-modality rows")
    last_epoch = img_rows[-1][0]
    finals = [float(r[4]) for r in img_rows if r[0] == last_epoch]
    return sum(finals) / len(finals)


def cmd_sweep_delta(args) -> int:
    config = _apply_overrides(load_experiment_config(args.config), args)
    caps = [float(tok) for tok in args.caps.split(",") if tok.strip()]
    if not caps:
        raise ConfigError("sweep-delta: empty cap list")
    for cap in caps:
        if not (0.0 < cap <= 1.0):
            raise ConfigError(f"sweep-delta: cap {cap} outside (0,1]")
    out = _resolve_out_dir(args.out, config, Path(args.config).stem + "_sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cap in caps:
        schedule = dataclasses.replace(config.schedule, cap=cap,
                                       delta0=min(config.schedule.delta0, cap))
        sub = dataclasses.replace(config, schedule=schedule, out_dir=None)
        run_dir = out / f"cap_{cap:g}"
        payload = run_experiment(sub, run_dir)
        rows.append((cap, _final_img_frozen_ratio(run_dir), payload["mean"]["hits1"]))
        print(f"cap {cap:g}: img frozen {rows[-1][1]:.4f}  H@1 {rows[-1][2]:.4f}")
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("cap,img_frozen_ratio,hits1\n")
        for cap, ratio, h1 in rows:
            fh.write(f"{cap!r},{ratio!r},{h1!r}\n")
    print(f"sweep table: {out / 'sweep.csv'}")
    return 0


def _reject_non_finite(token: str):
    raise FormatError(f"non-finite metric value {token!r}")


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        run_dir = Path(run)
        path = run_dir / "metrics.json"
        if not path.exists():
            raise LoadError(f"missing metrics.json in {run_dir}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"),
                                 parse_constant=_reject_non_finite)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
        mean = payload["mean"]
        rows.append((run_dir.name, mean["hits1"], mean["hits10"], mean["mrr"]))

    header = f"{'run':<28} {'H@1':>8} {'H@10':>8} {'MRR':>8}"
    print(header)
    print("-" * len(header))
    for name, h1, h10, mrr in rows:
        print(f"{name:<28} {h1:>8.4f} {h10:>8.4f} {mrr:>8.4f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("run,hits1,hits10,mrr\n")
            for name, h1, h10, mrr in rows:
                fh.write(f"{name},{h1!r},{h10!r},{mrr!r}\n")
        print(f"report table: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmalign",
        description="Multi-modal KG entity alignment with progressive modality freezing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic aligned KG pair")
    p.add_argument("--spec", required=True, help="TOML file with a [synthetic] table")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    p.add_argument("--config", required=True, help="experiment TOML")
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int, help="override train/split/generator seeds")
    p.add_argument("--ablate", action="append", default=[],
                   help="frm | iff | rff | cm | static_integration=epoch:N")
    p.add_argument("--drop-modalities", help="comma-separated modalities to drop")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate a run directory from its checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="dataset directory override")
    p.add_argument("--pool", choices=["test", "all"])
    p.add_argument("--greedy", action="store_true", help="also write greedy matches.tsv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-delta", help="one full run per freeze-threshold cap")
    p.add_argument("--config", required=True)
    p.add_argument("--caps", required=True, help="comma-separated caps in (0,1]")
    p.add_argument("--out", help="sweep root directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append", default=[])
    p.add_argument("--drop-modalities")
    p.set_defaults(func=cmd_sweep_delta)

    p = sub.add_parser("report", help="merge metrics.json files into one table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="write report.csv here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except MMAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
