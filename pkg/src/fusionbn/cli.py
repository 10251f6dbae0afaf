"""Command-line interface.

One binary, subcommands for each stage:

    fusionbn gen-data   --out data ...
    fusionbn train      --data data --source-center C0 --out runs/model.fusb
    fusionbn adapt      --checkpoint runs/model.fusb --target data/C4 ...
    fusionbn evaluate   --predictions runs/adapt/predictions.csv --target data/C4
    fusionbn sweep      --checkpoint runs/model.fusb --data data ...
    fusionbn diagnose   --checkpoint runs/model.fusb --data data --target C4
    fusionbn reproduce-all --out runs/repro --seed 7

Exit codes: 0 success, 2 usage errors, 3 missing/unreadable artifacts,
4 numeric failure (training divergence). Every random choice derives from
--seed; rerunning any subcommand with the same flags reproduces its
outputs byte for byte. FUSION_THREADS caps harness parallelism.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import adapt as A
from . import config as C
from . import harness as H
from . import stainsim as S
from .checkpoint import (
    atomic_write_text,
    load_container,
    load_dataset,
    load_model,
    load_sidecar,
    save_container,
    save_dataset,
    save_model,
    save_sidecar,
)
from .errors import (
    ConfigFileError,
    ConfigurationError,
    ContractError,
    DivergenceError,
    FusionError,
    LoadError,
    ShapeError,
)
from .layers import NetworkSpec, build_model
from .metrics import balanced_accuracy, mean_dice
from .seeding import derive_seed
from .train import RECIPES, TrainRecipe, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_config_opts(parser: argparse.ArgumentParser, sections: tuple) -> None:
    parser.add_argument("--config", metavar="FILE", help="configuration file (INI)")
    for section in sections:
        for key, (tag, default, help_text) in C.SCHEMA[section].items():
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            parser.add_argument(
                f"--{section}.{key}",
                dest=f"cfg__{section}__{key}",
                metavar=tag.upper(),
                help=f"{help_text} (default: {default})",
            )


def _build_config(args) -> dict:
    cfg = C.load_config(getattr(args, "config", None))
    for name, value in vars(args).items():
        if name.startswith("cfg__") and value is not None:
            _, section, key = name.split("__", 2)
            C.apply_override(cfg, f"{section}.{key}", value)
    return cfg


def _recipe_from_config(cfg: dict) -> TrainRecipe:
    t = cfg["train"]
    base = RECIPES.get(t["preset"])
    if base is None:
        raise ConfigFileError(f"unknown train preset {t['preset']!r} (desk | paper)")
    fields = dict(base.__dict__)
    for key in ("epochs", "lr", "batch_size", "momentum", "weight_decay", "decay_factor", "augment"):
        if t[key] is not None:
            fields[key] = t[key]
    if t["decay_epoch"] is not None:
        fields["decay_epochs"] = (t["decay_epoch"],)
    recipe = TrainRecipe(**fields)
    recipe.validate()
    return recipe


def _network_from_config(cfg: dict, task: str) -> NetworkSpec:
    return NetworkSpec(
        task=task,
        num_classes=cfg["model"]["classes"],
        channels=tuple(cfg["model"]["channels"]),
        input_size=cfg["dataset"]["patch_size"],
    )


def _require_path(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise LoadError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    d = cfg["dataset"]
    if args.centers is not None:
        d["centers"] = args.centers
    if args.samples is not None:
        d["samples"] = args.samples
    if args.shift_profile is not None:
        d["shift_profile"] = tuple(float(v) for v in args.shift_profile.split(","))
    if args.task is not None:
        d["task"] = args.task
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    shifts = d["shift_profile"]
    if len(shifts) != d["centers"]:
        raise ConfigurationError(
            f"--shift-profile lists {len(shifts)} magnitudes for {d['centers']} centers"
        )
    if d["task"] not in ("classification", "dense-prediction"):
        raise ConfigurationError(f"--task must be classification or dense-prediction")

    out = Path(d["out"])
    benchmark = S.make_benchmark(
        n_train=d["samples"],
        n_test=d["test_samples"],
        task=d["task"],
        shifts=shifts,
        seed=d["seed"],
        patch_size=d["patch_size"],
    )
    for cid, bundle in benchmark.items():
        save_dataset(bundle.train, out / cid, "train")
        save_dataset(bundle.test, out / cid, "test")

    ids = list(benchmark)
    matrix = np.zeros((len(ids), len(ids)))
    for i, a in enumerate(ids):
        for j, b in enumerate(ids):
            matrix[i, j] = S.chromatic_distance(benchmark[a].train, benchmark[b].train)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["center"] + ids)
    for i, a in enumerate(ids):
        w.writerow([a] + [repr(float(v)) for v in matrix[i]])
    atomic_write_text(out / "distances.csv", buf.getvalue())

    print(f"wrote {len(ids)} centers to {out}")
    print("chromatic distance matrix:")
    print("        " + "  ".join(f"{c:>7s}" for c in ids))
    for i, a in enumerate(ids):
        print(f"{a:>7s} " + "  ".join(f"{v:7.4f}" for v in matrix[i]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _build_config(args)
    data_dir = _require_path(args.data, "dataset directory")
    center_dir = _require_path(data_dir / args.source_center, "source center")
    dataset = load_dataset(center_dir, "train")
    network = _network_from_config(cfg, dataset.task)
    recipe = _recipe_from_config(cfg)
    if recipe.lr == 0:
        print("warning: learning rate 0; parameters will not change", file=sys.stderr)

    seed = args.seed if args.seed is not None else cfg["dataset"]["seed"]
    model = build_model(network, seed=derive_seed(seed, "model-init"))
    log = train(model, dataset, recipe, seed=seed, verbose=args.verbose)

    out = Path(args.out)
    save_model(
        out,
        model,
        {"seed": seed, "source_center": args.source_center, "recipe": recipe.__dict__ | {"decay_epochs": list(recipe.decay_epochs)}},
    )
    atomic_write_text(out.with_suffix(".train_log.csv"), log.to_csv())
    final = log.epochs[-1]
    print(
        f"trained on {args.source_center}: final loss {final[1]:.4f}, "
        f"train metric {final[2]:.4f}; checkpoint at {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# adapt


def cmd_adapt(args) -> int:
    cfg = _build_config(args)
    a = cfg["adapt"]
    if args.policy is not None:
        a["policy"] = args.policy
    if args.beta is not None:
        a["beta"] = args.beta
    if args.steps is not None:
        a["steps"] = args.steps
    if args.batch_size is not None:
        a["batch_size"] = args.batch_size
    if a["batch_size"] < 2:
        raise ConfigurationError(
            "batch size 1 is degenerate: batch statistics need at least two elements"
        )

    model, meta = load_model(_require_path(args.checkpoint, "checkpoint"))
    target_dir = _require_path(args.target, "target center directory")
    # unsupervised contract: the label and mask columns are never loaded here
    target = load_dataset(target_dir, args.split, with_labels=False)
    policy = A.policy_from_name(a["policy"], beta=a["beta"], n_prior=a["n_prior"])

    seed = args.seed if args.seed is not None else 0
    result = A.run_fusion_protocol(
        model,
        target,
        policy,
        steps=a["steps"],
        batch_size=a["batch_size"],
        seed=seed,
        stratified=False,  # no labels on this path, so no stratification
    )
    for wmsg in result.warnings:
        print(f"warning: {wmsg}", file=sys.stderr)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    protocol_meta = {
        "policy": a["policy"],
        "beta": a["beta"] if isinstance(policy, A.Fused) else None,
        "steps": result.log.steps,
        "batch_size": a["batch_size"],
        "seed": seed,
        "target": target.center_id,
    }
    save_sidecar(out / "adapted_state.fusb", result.states, protocol_meta)

    probs = result.probabilities
    if probs.ndim == 2:  # classification: CSV of per-class probabilities
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "prediction"] + [f"prob_{k}" for k in range(probs.shape[1])])
        pred = probs.argmax(axis=1)
        for i in range(probs.shape[0]):
            w.writerow([i, int(pred[i])] + [repr(float(v)) for v in probs[i]])
        atomic_write_text(out / "predictions.csv", buf.getvalue())
    else:  # dense prediction: probabilities container
        save_container(out / "predictions.fusb", {"probs": probs}, protocol_meta)
    print(f"adapted with {a['policy']}; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    target_dir = _require_path(args.target, "target center directory")
    target = load_dataset(target_dir, args.split)
    pred_path = _require_path(args.predictions, "predictions file")

    if pred_path.suffix == ".csv":
        rows = pred_path.read_text("utf-8").splitlines()
        reader = csv.reader(rows)
        header = next(reader)
        pred = np.array([int(r[1]) for r in reader], dtype=np.int64)
        if target.labels is None:
            raise LoadError(f"{target_dir} carries no labels to evaluate against")
        value = balanced_accuracy(pred, target.labels)
        metric_name = "balanced_accuracy"
    else:
        tensors, _ = load_container(pred_path)
        if target.masks is None:
            raise LoadError(f"{target_dir} carries no masks to evaluate against")
        pred = (tensors["probs"] >= 0.5).astype(np.float32)
        value = mean_dice(pred, target.masks)
        metric_name = "dice_score"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "metric_name", "value"])
    w.writerow([target.center_id, metric_name, repr(float(value))])
    if args.out:
        atomic_write_text(args.out, buf.getvalue())
    print(f"{target.center_id} {metric_name} = {value:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _load_benchmark_dir(data_dir: Path) -> dict:
    centers = sorted(p.name for p in data_dir.iterdir() if p.is_dir())
    if not centers:
        raise LoadError(f"no center directories under {data_dir}")
    return {
        cid: S.CenterBundle(
            train=load_dataset(data_dir / cid, "train"),
            test=load_dataset(data_dir / cid, "test"),
        )
        for cid in centers
    }


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    e = cfg["experiment"]
    data_dir = _require_path(args.data, "dataset directory")
    benchmark = _load_benchmark_dir(data_dir)
    source = e["source"]
    targets = (
        tuple(t for t in e["targets"].split(",") if t)
        if e["targets"]
        else tuple(c for c in benchmark if c != source)
    )
    models = []
    for i, ckpt in enumerate(args.checkpoint):
        model, meta = load_model(_require_path(ckpt, "checkpoint"))
        models.append((i, int(meta.get("seed", i)), model))

    sample = benchmark[source].train
    config = H.ExperimentConfig(
        source=source,
        targets=targets,
        task=sample.task,
        network=models[0][2].spec,
        recipe=_recipe_from_config(cfg),
        roster=[],
        repetitions=len(models),
        seed=args.seed if args.seed is not None else cfg["dataset"]["seed"],
    )
    grid = H.sweep_steps_and_batch(
        config,
        benchmark,
        step_counts=tuple(e["sweep_steps"]),
        batch_sizes=tuple(e["sweep_batches"]),
        beta=cfg["adapt"]["beta"],
        models=models,
    )
    atomic_write_text(args.out, H.sweep_to_csv(grid))
    print(f"sweep grid ({len(grid)} cells) written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args) -> int:
    cfg = _build_config(args)
    model, _ = load_model(_require_path(args.checkpoint, "checkpoint"))
    data_dir = _require_path(args.data, "dataset directory")
    source = load_dataset(_require_path(data_dir / args.source_center, "source"), "test")
    target = load_dataset(_require_path(data_dir / args.target, "target"), "test")
    policy = A.policy_from_name(
        cfg["adapt"]["policy"], beta=cfg["adapt"]["beta"], n_prior=cfg["adapt"]["n_prior"]
    )
    seed = args.seed if args.seed is not None else 0

    diagnostics = H.diagnose_shift(
        model,
        source,
        target,
        policy,
        steps=args.steps,
        batch_size=cfg["adapt"]["batch_size"],
        seed=seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "moments.csv", H.diagnostics_to_csv(diagnostics))
    atomic_write_text(out / "histograms.csv", H.histograms_to_csv(diagnostics))

    curve = H.moment_deviation_curve(
        model, target, steps=args.steps, batch_size=cfg["adapt"]["batch_size"], seed=seed
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "moment_deviation"])
    for beta, d in zip(H.DIAGNOSTIC_BETA_GRID, curve):
        w.writerow([repr(float(beta)), repr(float(d))])
    atomic_write_text(out / "deviation_curve.csv", buf.getvalue())
    print(f"diagnostics written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce-all


def cmd_reproduce_all(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg["dataset"]["seed"]
    n_train = args.samples if args.samples is not None else cfg["dataset"]["samples"]
    n_test = (
        args.test_samples
        if args.test_samples is not None
        else cfg["dataset"]["test_samples"]
    )
    reps = (
        args.repetitions
        if args.repetitions is not None
        else cfg["experiment"]["repetitions"]
    )
    recipe = _recipe_from_config(cfg)
    if args.epochs is not None:
        recipe = TrainRecipe(**{**recipe.__dict__, "epochs": args.epochs})
    patch = cfg["dataset"]["patch_size"]

    # 1. data
    cls_bench = S.make_benchmark(
        n_train, n_test, "classification", cfg["dataset"]["shift_profile"], seed, patch
    )
    seg_bench = S.make_benchmark(
        n_train, n_test, "dense-prediction", (0.0, 1.5), derive_seed(seed, "seg"), patch
    )
    for name, bench in (("cls", cls_bench), ("seg", seg_bench)):
        for cid, bundle in bench.items():
            save_dataset(bundle.train, out / "data" / name / cid, "train")
            save_dataset(bundle.test, out / "data" / name / cid, "test")

    steps = cfg["adapt"]["steps"]
    batch = cfg["adapt"]["batch_size"]
    roster = H.default_roster(
        tuple(cfg["experiment"]["beta_grid"]), steps=steps, batch_size=batch
    )

    # 2. classification experiment
    cls_targets = tuple(c for c in cls_bench if c != "C0")
    cls_config = H.ExperimentConfig(
        source="C0",
        targets=cls_targets,
        task="classification",
        network=_network_from_config(cfg, "classification"),
        recipe=recipe,
        roster=roster,
        repetitions=reps,
        seed=seed,
    )
    cls_models = H.train_models(cls_config, cls_bench)
    for rep, mseed, model in cls_models:
        if model is not None:
            save_model(out / "checkpoints" / f"cls_seed{rep}.fusb", model, {"seed": mseed})
    records = H.run_experiment(cls_config, cls_bench, models=cls_models)
    H.write_experiment_outputs(records, out, stem="experiment_classification")

    # 3. segmentation experiment
    seg_config = H.ExperimentConfig(
        source="C0",
        targets=("C1",),
        task="dense-prediction",
        network=_network_from_config(cfg, "dense-prediction"),
        recipe=recipe,
        roster=[r for r in roster if r.name != "per-batch-unstratified"],
        repetitions=reps,
        seed=derive_seed(seed, "seg"),
    )
    seg_models = H.train_models(seg_config, seg_bench)
    for rep, mseed, model in seg_models:
        if model is not None:
            save_model(out / "checkpoints" / f"seg_seed{rep}.fusb", model, {"seed": mseed})
    seg_records = H.run_experiment(seg_config, seg_bench, models=seg_models)
    H.write_experiment_outputs(seg_records, out, stem="experiment_segmentation")

    # 4. sweep (classification, fused policy)
    grid = H.sweep_steps_and_batch(
        cls_config,
        cls_bench,
        step_counts=tuple(cfg["experiment"]["sweep_steps"]),
        batch_sizes=tuple(cfg["experiment"]["sweep_batches"]),
        beta=cfg["adapt"]["beta"],
        models=cls_models,
    )
    atomic_write_text(out / "sweep.csv", H.sweep_to_csv(grid))

    # 5. diagnostics on the strongest shift
    strongest = cls_targets[-1]
    model = next(m for _, _, m in cls_models if m is not None)
    diagnostics = H.diagnose_shift(
        model,
        cls_bench["C0"].test,
        cls_bench[strongest].test,
        A.Fused(cfg["adapt"]["beta"]),
        steps=64,
        batch_size=batch,
        seed=seed,
    )
    atomic_write_text(out / "diagnostics_moments.csv", H.diagnostics_to_csv(diagnostics))
    atomic_write_text(out / "diagnostics_histograms.csv", H.histograms_to_csv(diagnostics))
    curve = H.moment_deviation_curve(
        model, cls_bench[strongest].test, steps=64, batch_size=batch, seed=seed
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "moment_deviation"])
    for beta, dval in zip(H.DIAGNOSTIC_BETA_GRID, curve):
        w.writerow([repr(float(beta)), repr(float(dval))])
    atomic_write_text(out / "deviation_curve.csv", buf.getvalue())

    print(f"reproduction artifacts written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionbn",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the multi-center synthetic benchmark")
    _add_config_opts(p, ("dataset",))
    p.add_argument("--centers", type=int, help="number of centers")
    p.add_argument("--samples", type=int, help="training samples per center")
    p.add_argument("--shift-profile", help="comma-separated shift magnitudes")
    p.add_argument("--task", help="classification | dense-prediction")
    p.add_argument("--seed", type=int, help="content seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on one source center")
    _add_config_opts(p, ("dataset", "model", "train"))
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--source-center", default="C0", help="center id to train on")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--verbose", action="store_true", help="print per-epoch progress")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="run the two-step adaptation protocol")
    _add_config_opts(p, ("adapt",))
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--target", required=True, help="target center directory")
    p.add_argument("--split", default="test", help="dataset split (default test)")
    p.add_argument("--policy", help="adaptation policy name")
    p.add_argument("--beta", type=float, help="fusion weighting factor")
    p.add_argument("--steps", type=int, help="accumulation steps")
    p.add_argument("--batch-size", type=int, help="adaptation batch size")
    p.add_argument("--seed", type=int, help="protocol seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="join predictions with labels into metrics")
    p.add_argument("--predictions", required=True, help="predictions.csv or .fusb")
    p.add_argument("--target", required=True, help="target center directory")
    p.add_argument("--split", default="test", help="dataset split (default test)")
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="steps x batch-size sweep of the fused protocol")
    _add_config_opts(p, ("experiment", "adapt", "train", "dataset", "model"))
    p.add_argument("--checkpoint", action="append", required=True, help="trained checkpoint (repeatable)")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--seed", type=int, help="protocol seed")
    p.add_argument("--out", required=True, help="grid CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="activation-distribution shift diagnostics")
    _add_config_opts(p, ("adapt",))
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--source-center", default="C0")
    p.add_argument("--target", required=True, help="target center id")
    p.add_argument("--steps", type=int, default=64, help="accumulation steps")
    p.add_argument("--seed", type=int, help="protocol seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser(
        "reproduce-all",
        help="chain gen-data, train, adapt, evaluate, sweep, diagnose",
    )
    _add_config_opts(p, ("dataset", "model", "train", "adapt", "experiment"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--samples", type=int, help="training samples per center")
    p.add_argument("--test-samples", type=int, help="test samples per center")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--repetitions", type=int, help="training seeds")
    p.set_defaults(func=cmd_reproduce_all)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigFileError, ConfigurationError, ContractError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
