"""Command-line pipeline driver.

Subcommands: generate, fit-prototypes, embed, probe, evaluate, interpret.
Every command accepts ``--config FILE`` (TOML or JSON) whose keys are flag
names; explicit flags override the file. Each output artifact gets a sidecar
``<artifact>.manifest.json`` recording the command, resolved configuration,
inputs/outputs, seed, wall time, and library version. Exit codes: 0 success,
1 usage or validation failure, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .compose import EMBED_METHODS, embed_cohort
from .data import (
    Cohort,
    SyntheticSpec,
    generate_synthetic_cohort,
    load_cohort,
    save_cohort,
)
from .embedding import export_embeddings_csv, load_embeddings, save_embeddings
from .errors import NumericalError, ValidationError
from .interpret import (
    assignment_map,
    assignment_raster,
    cohort_pi_table,
    heatmap_raster,
    write_assignment_csv,
    write_f32_matrix,
    write_pgm,
)
from .metrics import evaluate_classification, evaluate_survival
from .mixture import EmConfig, fit_set
from .predictor import (
    HeadSpec,
    TrainConfig,
    load_head,
    loss_cox,
    predict,
    save_head,
    train,
)
from .prototypes import KMeansConfig, fit_prototypes, load_bank, save_bank
from .transport import SinkhornConfig


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config_file(path: str) -> dict:
    text = Path(path).read_bytes()
    if path.endswith(".json"):
        return json.loads(text)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text.decode("utf-8"))
    raise ValidationError(f"config file must end in .json or .toml: {path}")


def _write_manifest(artifact: Path, command: str, config: dict, inputs: list,
                    outputs: list, seed, wall_time: float) -> None:
    payload = {
        "command": command,
        "config": {k: v for k, v in sorted(config.items()) if k != "func"},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_time_s": wall_time,
        "library_version": __version__,
    }
    target = Path(str(artifact) + ".manifest.json")
    fd, tmp = tempfile.mkstemp(dir=target.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2, default=str)
            fh.write("\n")
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _safe_filename(set_id: str) -> str:
    return re.sub(r"[^-._A-Za-z0-9]", "_", set_id) or "set"


# ---------------------------------------------------------------------------
# generate


def _default_profiles(components: int, classes: int, concentration: float) -> list[list[float]]:
    profiles = []
    for cls in range(classes):
        own = [k for k in range(components) if k % classes == cls]
        other = [k for k in range(components) if k % classes != cls]
        p = np.zeros(components)
        if not other:
            p[own] = 1.0 / len(own)
        else:
            p[own] = concentration / len(own)
            p[other] = (1.0 - concentration) / len(other)
        profiles.append(p.tolist())
    return profiles


def _cmd_generate(args) -> int:
    if args.components < 2:
        raise ValidationError("components must be >= 2")
    if args.classes < 1:
        raise ValidationError("classes must be >= 1")
    if args.classes > args.components:
        raise ValidationError("classes cannot exceed components")
    if not (0 < args.concentration <= 1):
        raise ValidationError("concentration must be in (0, 1]")
    world_seed = args.seed if args.world_seed is None else args.world_seed
    rng = np.random.default_rng([world_seed, 1])
    means = args.sep * rng.standard_normal((args.components, args.d))
    survival_means = censor_mean = None
    if args.target == "survival":
        if args.surv_scales:
            survival_means = tuple(float(v) for v in args.surv_scales.split(","))
        else:
            survival_means = tuple(8.0 / (cls + 1) for cls in range(args.classes))
        censor_mean = args.censor_scale if args.censor_scale > 0 else None
    spec = SyntheticSpec(
        num_sets=args.sets,
        d=args.d,
        component_means=tuple(map(tuple, means.tolist())),
        component_variances=tuple(map(tuple, np.ones_like(means).tolist())),
        proportion_profiles=tuple(
            map(tuple, _default_profiles(args.components, args.classes, args.concentration))
        ),
        n_range=(args.n_min, args.n_max),
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        survival_mean_times=survival_means,
        censor_mean_time=censor_mean,
    )
    started = time.monotonic()
    cohort = generate_synthetic_cohort(spec)
    save_cohort(cohort, args.out, format=args.format)
    _write_manifest(Path(args.out), "generate", vars(args), [], [args.out],
                    args.seed, time.monotonic() - started)
    print(f"wrote {len(cohort)} sets (d={cohort.d}) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fit-prototypes


def _cmd_fit_prototypes(args) -> int:
    started = time.monotonic()
    cohort = load_cohort(args.cohort, format=args.cohort_format)
    cfg = KMeansConfig(C=args.C, max_iters=args.max_iters, tol=args.tol,
                       seed=args.seed, init=args.init)
    bank = fit_prototypes(cohort, cfg, max_points=args.max_points)
    save_bank(bank, args.out)
    _write_manifest(Path(args.out), "fit-prototypes", vars(args), [args.cohort],
                    [args.out], args.seed, time.monotonic() - started)
    meta = bank.fit_meta
    print(
        f"fit {bank.C} prototypes (d={bank.d}) in {meta['iterations_run']} iterations, "
        f"inertia {meta['final_inertia']:.6g} -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# embed


def _cmd_embed(args) -> int:
    started = time.monotonic()
    cohort = load_cohort(args.cohort, format=args.cohort_format)
    bank = load_bank(args.bank) if args.bank else None
    em_cfg = EmConfig(num_steps=args.em_steps, var_floor=args.var_floor)
    sk_cfg = SinkhornConfig(eps=args.eps, max_iters=args.sinkhorn_iters)
    embeddings = embed_cohort(
        cohort,
        bank,
        args.method,
        em_cfg=em_cfg,
        sinkhorn_cfg=sk_cfg,
        normalize_counts=not args.raw_counts,
        threads=args.threads,
        skip_errors=args.skip_errors,
    )
    if not embeddings:
        raise ValidationError("no embeddings produced")
    save_embeddings(embeddings, args.out)
    outputs = [args.out]
    if args.csv:
        export_embeddings_csv(embeddings, args.csv)
        outputs.append(args.csv)
    inputs = [args.cohort] + ([args.bank] if args.bank else [])
    _write_manifest(Path(args.out), "embed", vars(args), inputs, outputs,
                    None, time.monotonic() - started)
    print(
        f"embedded {len(embeddings)} sets with {args.method} "
        f"(length {len(embeddings[0])}) -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# probe


def _targets_for(embeddings, cohort: Cohort):
    by_id = {s.id: s.target for s in cohort.sets}
    targets = []
    for e in embeddings:
        if e.set_id not in by_id:
            raise ValidationError(f"embedding set {e.set_id!r} not present in the cohort")
        if by_id[e.set_id] is None:
            raise ValidationError(f"set {e.set_id!r} has no target")
        targets.append(by_id[e.set_id])
    return targets


def _cmd_probe(args) -> int:
    started = time.monotonic()
    train_embs = load_embeddings(args.train_emb)
    train_cohort = load_cohort(args.train_cohort, format=args.cohort_format)
    targets = _targets_for(train_embs, train_cohort)
    loss = {"ce": "cross_entropy", "cox": "cox"}[args.loss]
    epochs = args.epochs if args.epochs else (20 if loss == "cross_entropy" else 50)
    batch_size = args.batch_size if args.batch_size else (32 if loss == "cross_entropy" else 64)

    if loss == "cross_entropy":
        labels = [t.class_label for t in targets if t.kind == "class_label"]
        if len(labels) != len(targets):
            raise ValidationError("loss ce requires class_label targets on every set")
        out_dim = args.out_dim or (max(labels) + 1)
    else:
        out_dim = 1
    if args.structured:
        spec = HeadSpec(indiv_kind=args.head, pred_kind="linear",
                        indiv_out_dim=args.indiv_dim, hidden_dim=args.hidden_dim,
                        out_dim=out_dim)
    else:
        spec = HeadSpec(indiv_kind="identity", pred_kind=args.head,
                        indiv_out_dim=args.indiv_dim, hidden_dim=args.hidden_dim,
                        out_dim=out_dim)
    cfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, epochs=epochs,
                      batch_size=batch_size, seed=args.seed, loss=loss,
                      lr_schedule=args.schedule)

    callback = None
    if args.val_emb:
        if not args.val_cohort:
            raise ValidationError("--val-emb requires --val-cohort for targets")
        val_embs = load_embeddings(args.val_emb)
        val_cohort = load_cohort(args.val_cohort, format=args.cohort_format)
        val_targets = _targets_for(val_embs, val_cohort)
        state = {"best": float("inf"), "bad": 0}

        def callback(epoch, head, history):
            outputs = predict(head, val_embs)
            if loss == "cross_entropy":
                val_labels = np.asarray([t.class_label for t in val_targets])
                m = outputs.max(axis=1, keepdims=True)
                lse = m[:, 0] + np.log(np.exp(outputs - m).sum(axis=1))
                val_loss = float(np.mean(lse - outputs[np.arange(len(val_labels)), val_labels]))
            else:
                times = np.asarray([t.time for t in val_targets])
                events = np.asarray([t.event for t in val_targets])
                val_loss = loss_cox(outputs[:, 0], times, events)
            history[-1]["val_loss"] = val_loss
            if val_loss < state["best"] - 1e-12:
                state["best"] = val_loss
                state["bad"] = 0
            else:
                state["bad"] += 1
            return args.patience > 0 and state["bad"] >= args.patience

    head = train(train_embs, targets, cfg, spec, epoch_callback=callback)
    save_head(head, args.out)
    outputs = [args.out]
    log_path = args.log or (str(args.out) + ".log.csv")
    keys = ["epoch", "lr", "loss", "train_balanced_accuracy", "val_loss"]
    with open(log_path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for record in head.history:
            fh.write(",".join(
                ("%.9g" % record[k] if isinstance(record.get(k), float) else str(record.get(k, "")))
                for k in keys
            ) + "\n")
    outputs.append(log_path)
    inputs = [args.train_emb, args.train_cohort]
    _write_manifest(Path(args.out), "probe", vars(args), inputs, outputs,
                    args.seed, time.monotonic() - started)
    final = head.history[-1]
    extra = (
        f", train balanced accuracy {final['train_balanced_accuracy']:.3f}"
        if "train_balanced_accuracy" in final
        else ""
    )
    print(f"trained head over {len(head.history)} epochs, final loss {head.final_train_loss:.6g}{extra} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _cmd_evaluate(args) -> int:
    started = time.monotonic()
    embeddings = load_embeddings(args.emb)
    cohort = load_cohort(args.cohort, format=args.cohort_format)
    head = load_head(args.head)
    targets = _targets_for(embeddings, cohort)
    outputs = predict(head, embeddings)
    kinds = {t.kind for t in targets}
    if len(kinds) != 1:
        raise ValidationError("cohort mixes class and survival targets")
    kind = kinds.pop()
    if args.metrics != "auto" and args.metrics != {"class_label": "classification", "survival": "survival"}[kind]:
        raise ValidationError(f"--metrics {args.metrics} does not match target kind {kind}")
    if kind == "class_label":
        if head.spec.out_dim < 2:
            raise ValidationError("classification evaluation needs a multi-logit head")
        labels = np.asarray([t.class_label for t in targets])
        preds = outputs.argmax(axis=1)
        report = evaluate_classification(preds, labels, head.spec.out_dim)
    else:
        if head.spec.out_dim != 1:
            raise ValidationError("survival evaluation needs a scalar-risk head")
        times = np.asarray([t.time for t in targets])
        events = np.asarray([t.event for t in targets])
        report = evaluate_survival(outputs[:, 0], times, events)
    print(report.to_json())
    written = []
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        written.append(args.out)
    if args.csv:
        header, row = report.to_csv_row()
        Path(args.csv).write_text(",".join(header) + "\n" + ",".join(row) + "\n")
        written.append(args.csv)
    if written:
        _write_manifest(Path(written[0]), "evaluate", vars(args),
                        [args.emb, args.cohort, args.head], written,
                        None, time.monotonic() - started)
    return 0


# ---------------------------------------------------------------------------
# interpret


def _cmd_interpret(args) -> int:
    started = time.monotonic()
    cohort = load_cohort(args.cohort, format=args.cohort_format)
    bank = load_bank(args.bank)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    em_cfg = EmConfig(num_steps=args.em_steps)
    chosen = cohort.sets
    if args.set_id is not None:
        chosen = [s for s in cohort.sets if s.id == args.set_id]
        if not chosen:
            raise ValidationError(f"set id {args.set_id!r} not found in cohort")

    def fit_one(s):
        params, posterior = fit_set(s.features, bank, em_cfg)
        amap = assignment_map(s.features, posterior, params, coords=s.coords)
        amap.set_id = s.id
        return params, amap

    if args.threads and args.threads > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            fitted = list(pool.map(fit_one, chosen))
    else:
        fitted = [fit_one(s) for s in chosen]

    maps = []
    labels = []
    outputs = []
    for s, (params, amap) in zip(chosen, fitted):
        maps.append(amap)
        labels.append(
            s.target.class_label
            if s.target is not None and s.target.kind == "class_label"
            else None
        )
        base = out_dir / _safe_filename(s.id)
        write_assignment_csv(amap, f"{base}.assignments.csv")
        outputs.append(f"{base}.assignments.csv")
        if s.coords is not None:
            grid = assignment_raster(amap)
            write_pgm(grid, f"{base}.assigned.pgm")
            write_f32_matrix(grid.astype(np.float32), f"{base}.assigned.pmat")
            c_star = args.heatmap_proto if args.heatmap_proto is not None else int(np.argmax(params.pi))
            heat = heatmap_raster(amap, c_star)
            write_pgm(heat, f"{base}.heatmap{c_star}.pgm")
            write_f32_matrix(heat, f"{base}.heatmap{c_star}.pmat")
            outputs += [f"{base}.assigned.pgm", f"{base}.assigned.pmat",
                        f"{base}.heatmap{c_star}.pgm", f"{base}.heatmap{c_star}.pmat"]
    table_labels = None if any(v is None for v in labels) else labels
    table = cohort_pi_table(maps, labels=table_labels)
    pi_path = out_dir / "pi_table.csv"
    table.to_csv(pi_path)
    outputs.append(str(pi_path))
    _write_manifest(pi_path, "interpret", vars(args), [args.cohort, args.bank],
                    outputs, None, time.monotonic() - started)
    print(f"wrote interpretability exports for {len(maps)} sets to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="protomix", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p):
        p.add_argument("--config", help="TOML/JSON file of flag defaults")
        p.add_argument("--cohort-format", choices=["binary", "csv"], default="binary")

    p = sub.add_parser("generate", help="draw a synthetic cohort")
    add_common(p)
    p.add_argument("--sets", type=int, default=32)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--concentration", type=float, default=0.7,
                   help="profile mass a class puts on its own components")
    p.add_argument("--sep", type=float, default=6.0, help="component mean scale")
    p.add_argument("--noise-sigma", type=float, default=0.25)
    p.add_argument("--n-min", type=int, default=50)
    p.add_argument("--n-max", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world-seed", type=int, default=None,
                   help="seed for the planted means/profiles (default: --seed); "
                        "share it across train/val splits of one task")
    p.add_argument("--target", choices=["class", "survival"], default="class")
    p.add_argument("--surv-scales", default="", help="comma list of per-class mean event times")
    p.add_argument("--censor-scale", type=float, default=0.0, help="mean censoring time (0: none)")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("fit-prototypes", help="k-means prototype bank over a cohort")
    add_common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--C", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=["kmeanspp", "random_rows"], default="kmeanspp")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-points", type=int, default=None,
                   help="subsample the pooled elements (default: use all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_prototypes)

    p = sub.add_parser("embed", help="aggregate each set into a fixed-length embedding")
    add_common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--method", choices=list(EMBED_METHODS), required=True)
    p.add_argument("--em-steps", type=int, default=1)
    p.add_argument("--var-floor", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=None,
                   help="sinkhorn regularization (default: 0.1 x median cost)")
    p.add_argument("--sinkhorn-iters", type=int, default=200)
    p.add_argument("--raw-counts", action="store_true",
                   help="protocounts: raw counts instead of proportions")
    p.add_argument("--threads", type=int, default=os.cpu_count())
    p.add_argument("--skip-errors", action="store_true")
    p.add_argument("--csv", default=None, help="also export a CSV table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("probe", help="train a prediction head on embeddings")
    add_common(p)
    p.add_argument("--train-emb", required=True)
    p.add_argument("--train-cohort", required=True, help="cohort file supplying targets")
    p.add_argument("--val-emb", default=None)
    p.add_argument("--val-cohort", default=None)
    p.add_argument("--head", choices=["linear", "mlp"], default="linear")
    p.add_argument("--structured", action="store_true",
                   help="apply the head per prototype block, then a linear map")
    p.add_argument("--loss", choices=["ce", "cox"], default="ce")
    p.add_argument("--epochs", type=int, default=None, help="default 20 (ce) / 50 (cox)")
    p.add_argument("--batch-size", type=int, default=None, help="default 32 (ce) / 64 (cox)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--schedule", choices=["cosine", "constant"], default="cosine")
    p.add_argument("--indiv-dim", type=int, default=32)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--out-dim", type=int, default=None,
                   help="number of classes (default: inferred from labels)")
    p.add_argument("--patience", type=int, default=10,
                   help="early stop when val loss stalls this many epochs (needs --val-emb)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("evaluate", help="score a head on embeddings with targets")
    add_common(p)
    p.add_argument("--emb", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--metrics", choices=["auto", "classification", "survival"], default="auto")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--csv", default=None, help="one-row CSV summary path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("interpret", help="assignment maps, rasters, and pi table")
    add_common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--set-id", default=None, help="restrict to one set (default: all)")
    p.add_argument("--em-steps", type=int, default=1)
    p.add_argument("--heatmap-proto", type=int, default=None,
                   help="prototype for the posterior heatmap (default: largest pi)")
    p.add_argument("--threads", type=int, default=os.cpu_count())
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_interpret)

    return parser


def _apply_config(parser: _Parser, argv: list[str]) -> None:
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    values = _load_config_file(path)
    if not isinstance(values, dict):
        raise ValidationError("config file must hold a table of flag values")
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    if command is None or command not in sub_actions[0].choices:
        raise ValidationError("--config requires a subcommand")
    sub = sub_actions[0].choices[command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ValidationError(f"unknown config key {key!r} for command {command!r}")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
