"""Command-line entry point. Subcommands cover the whole workflow: synth
data generation, single-subject training, the cross-session protocol, the
ablation grid, parameter counting, gradient verification, attribution
exports, deletion tests, and an informational latency report.

Every run writes a ``manifest.json`` (resolved config, seed, package
version, input checksums) into its output directory so results can be
reproduced bit for bit. ``MFTNET_THREADS`` caps protocol worker processes.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tz
from .data import (EtfError, SplitSpec, discover_sessions, load_trials,
                   split_train_val, synth_corpus, write_corpus)
from .interpret import (channel_scores, class_average_map,
                        correct_trial_attributions, deletion_test,
                        default_channel_names, finetune_for_interpretation,
                        load_montage, write_channel_scores_csv,
                        write_deletion_csv, write_map_csv)
from .model import (CheckpointError, Model, ModelConfig, VARIANTS, build_model,
                    count_parameters, reduced_config)
from .training import (TrainConfig, evaluate, full_model_grad_check, run_protocol,
                       train, write_history_csv, write_results_csv,
                       write_summary_json)

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _resolve_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    """defaults <- json config file <- command-line flags."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
    merged = dict(file_cfg)
    for key in ("seed", "variant", "epochs", "data", "out"):
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    model_kwargs = {k: v for k, v in merged.items() if k in _MODEL_FIELDS}
    if "branch_kernels" in model_kwargs:
        model_kwargs["branch_kernels"] = tuple(model_kwargs["branch_kernels"])
    train_kwargs = {k: v for k, v in merged.items() if k in _TRAIN_FIELDS}
    if "variant" in merged:
        model_kwargs["variant"] = merged["variant"]
    if "seed" in merged:
        train_kwargs["seed"] = merged["seed"]
    if "epochs" in merged:
        train_kwargs["epochs"] = merged["epochs"]
    model_cfg = ModelConfig(**model_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    return model_cfg, train_cfg, merged


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _fit_to_data(model_cfg: ModelConfig, merged: dict,
                 n_channels: int, n_samples: int) -> ModelConfig:
    """Point the config at the data's trial shape. If the configured kernels
    or pools cannot fit shorter trials and the user did not pin them, scale
    the architecture down the same way the test configs do."""
    cfg = dataclasses.replace(model_cfg, n_channels=n_channels, n_samples=n_samples)
    try:
        cfg.validate()
        if (n_samples // cfg.pool1) >= cfg.separable_kernel:
            return cfg
    except ValueError:
        pass
    pinned = {"branch_kernels", "pool1", "pool2", "eegnet_kernel",
              "single_branch_kernel", "separable_kernel"} & set(merged)
    if pinned:
        raise SystemExit(f"error: configured architecture does not fit "
                         f"{n_channels} x {n_samples} trials (pinned: {sorted(pinned)})")
    scaled = reduced_config(n_channels=n_channels, n_samples=n_samples,
                            variant=cfg.variant, n_classes=cfg.n_classes)
    print(f"note: scaled architecture to fit {n_channels} x {n_samples} trials")
    return dataclasses.replace(
        cfg, branch_kernels=scaled.branch_kernels, pool1=scaled.pool1,
        pool2=scaled.pool2, transformer_ff_dim=scaled.transformer_ff_dim,
        eegnet_kernel=scaled.eegnet_kernel,
        single_branch_kernel=scaled.single_branch_kernel)


def _write_manifest(out_dir, command: str, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, inputs: list[Path],
                    extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": train_cfg.seed,
        "precision": 64 if tz.get_dtype() == np.float64 else 32,
        "model_config": model_cfg.to_dict(),
        "train_config": dataclasses.asdict(train_cfg),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise SystemExit(f"error: --{name.replace('_', '-')} is required for this command")


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_params(args) -> int:
    model_cfg, train_cfg, _ = _resolve_configs(args)
    model = build_model(model_cfg, seed=args.seed or 42)
    counts = count_parameters(model)
    print(f"variant: {model_cfg.variant}")
    print(f"trainable parameters: {counts['trainable']}")
    print(f"non-trainable parameters: {counts['non_trainable']}")
    if args.breakdown:
        for entry in counts["breakdown"]:
            kind = "trainable" if entry["trainable"] else "buffer"
            print(f"  {entry['name']:40s} {str(entry['shape']):18s} "
                  f"{entry['count']:7d}  {kind}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        serializable = dict(counts)
        serializable["breakdown"] = [
            {**e, "shape": list(e["shape"])} for e in counts["breakdown"]]
        (out / "params.json").write_text(json.dumps(serializable, indent=2))
        _write_manifest(out, "params", model_cfg, train_cfg, [])
    return 0


def cmd_gradcheck(args) -> int:
    tz.set_dtype(args.precision or 64)
    cfg = reduced_config(n_channels=args.channels, n_samples=args.samples,
                         variant=args.variant or "full")
    model = build_model(cfg, seed=args.seed or 42)
    rng = np.random.default_rng(args.seed or 42)
    x = rng.normal(size=(2, cfg.n_channels, cfg.n_samples, 1))
    labels = np.array([0, 1])
    max_elems = None if args.exhaustive else 4
    err = full_model_grad_check(model, x, labels, max_elems=max_elems, rng=rng)
    ok = err <= args.tolerance
    print(f"max relative error: {err:.3e} (tolerance {args.tolerance:g}): "
          f"{'PASS' if ok else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(
            {"max_relative_error": err, "tolerance": args.tolerance,
             "passed": bool(ok), "channels": args.channels,
             "samples": args.samples}, indent=2))
        _write_manifest(out, "gradcheck", cfg, TrainConfig(seed=args.seed or 42), [])
    return 0 if ok else 1


def cmd_synth(args) -> int:
    _require(args, "out")
    model_cfg, train_cfg, _ = _resolve_configs(args)
    corpus = synth_corpus(args.subjects, args.trials_per_class, args.channels,
                          args.samples, seed=train_cfg.seed, snr=args.snr)
    written = write_corpus(corpus, args.out)
    _write_manifest(args.out, "synth", model_cfg, train_cfg, written,
                    extra={"snr": args.snr, "subjects": args.subjects,
                           "trials_per_class": args.trials_per_class})
    print(f"wrote {len(written)} session files to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require(args, "data", "out")
    model_cfg, train_cfg, merged = _resolve_configs(args)
    sessions = discover_sessions(args.data)
    if not sessions:
        raise SystemExit(f"error: no .etf files found in {args.data}")
    subject = args.subject or min(sessions)
    if subject not in sessions or 1 not in sessions[subject]:
        raise SystemExit(f"error: no training session for subject {subject} in {args.data}")
    full = load_trials(sessions[subject][1])
    model_cfg = _fit_to_data(model_cfg, merged, full.n_channels, full.n_samples)
    tr, va = split_train_val(full, SplitSpec(seed=train_cfg.seed,
                                             val_fraction=train_cfg.val_fraction))
    model = build_model(model_cfg, seed=train_cfg.seed)
    history = train(model, tr, va, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.mftw")
    write_history_csv(history, out / "history.csv")
    rows = []
    for k, path in sorted(sessions[subject].items()):
        if k == 1:
            continue
        ts = load_trials(path)
        _, acc = evaluate(model, ts, train_cfg.batch_size)
        rows.append({"subject": subject, "session": k, "accuracy": acc,
                     "n_trials": ts.n_trials})
    write_results_csv({"rows": rows}, out / "results.csv")
    _write_manifest(out, "train", model_cfg, train_cfg,
                    sorted(sessions[subject].values()),
                    extra={"subject": subject,
                           "best_epoch": history.best_epoch,
                           "best_val_acc": history.best_val_acc})
    print(f"best val acc {history.best_val_acc:.4f} at epoch {history.best_epoch}; "
          f"checkpoint and results in {out}")
    return 0


def _protocol_one_subject(payload) -> dict:
    subject, session_paths, model_dict, train_dict = payload
    model_cfg = ModelConfig.from_dict(model_dict)
    train_cfg = TrainConfig(**train_dict)
    corpus = {subject: {k: Path(p) for k, p in session_paths.items()}}
    return run_protocol(corpus, model_cfg, train_cfg)


def cmd_protocol(args) -> int:
    _require(args, "data", "out")
    model_cfg, train_cfg, merged = _resolve_configs(args)
    sessions = discover_sessions(args.data)
    if not sessions:
        raise SystemExit(f"error: no .etf files found in {args.data}")
    probe = load_trials(next(iter(next(iter(sessions.values())).values())))
    model_cfg = _fit_to_data(model_cfg, merged, probe.n_channels, probe.n_samples)
    workers = int(os.environ.get("MFTNET_THREADS", "1"))
    if workers > 1 and len(sessions) > 1:
        payloads = [(s, {k: str(p) for k, p in sessions[s].items()},
                     model_cfg.to_dict(), dataclasses.asdict(train_cfg))
                    for s in sorted(sessions)]
        partials = []
        with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as pool:
            partials = list(pool.map(_protocol_one_subject, payloads))
        results = _merge_protocol_results(partials, model_cfg, train_cfg)
    else:
        results = run_protocol(sessions, model_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(results, out / "results.csv")
    write_summary_json(results, out / "summary.json")
    inputs = [p for subj in sessions.values() for p in subj.values()]
    _write_manifest(out, "protocol", model_cfg, train_cfg, sorted(inputs))
    print(f"grand mean accuracy {100 * results['grand_mean']:.1f} "
          f"+- {100 * results['grand_std']:.1f} over {len(results['per_subject_mean'])} "
          f"subject(s); results in {out}")
    return 0


def _merge_protocol_results(partials: list[dict], model_cfg: ModelConfig,
                            train_cfg: TrainConfig) -> dict:
    rows = [r for part in partials for r in part["rows"]]
    rows.sort(key=lambda r: (r["subject"], r["session"]))
    per_subject = {}
    for part in partials:
        per_subject.update(part["per_subject_mean"])
    means = np.array([per_subject[s] for s in sorted(per_subject)], dtype=np.float64)
    session_means = {}
    for k in sorted({r["session"] for r in rows}):
        session_means[k] = float(np.mean([r["accuracy"] for r in rows
                                          if r["session"] == k]))
    return {"rows": rows, "per_subject_mean": per_subject,
            "per_session_mean": session_means,
            "grand_mean": float(means.mean()) if means.size else float("nan"),
            "grand_std": float(means.std(ddof=0)) if means.size else float("nan"),
            "seed": train_cfg.seed, "model_config": model_cfg.to_dict(),
            "train_config": dataclasses.asdict(train_cfg)}


def cmd_ablate(args) -> int:
    _require(args, "data", "out")
    model_cfg, train_cfg, merged = _resolve_configs(args)
    sessions = discover_sessions(args.data)
    if not sessions:
        raise SystemExit(f"error: no .etf files found in {args.data}")
    subject = args.subject or min(sessions)
    if subject not in sessions:
        raise SystemExit(f"error: subject {subject} not present in {args.data}")
    probe = load_trials(next(iter(sessions[subject].values())))
    model_cfg = _fit_to_data(model_cfg, merged, probe.n_channels, probe.n_samples)
    rows = []
    marks = {"full": ("yes", "yes"), "no-multiscale": ("yes", "no"),
             "no-transformer": ("no", "yes"), "eegnet-baseline": ("no", "no")}
    for variant in ("eegnet-baseline", "no-multiscale", "no-transformer", "full"):
        cfg = dataclasses.replace(model_cfg, variant=variant)
        sub_results = run_protocol({subject: sessions[subject]}, cfg, train_cfg)
        params = count_parameters(build_model(cfg, seed=train_cfg.seed))["trainable"]
        transformer, multiscale = marks[variant]
        rows.append({"variant": variant, "transformer": transformer,
                     "multiscale": multiscale, "params": params,
                     "accuracy": sub_results["grand_mean"]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        import csv as _csv
        writer = _csv.writer(fh)
        writer.writerow(["variant", "transformer", "multiscale", "params", "accuracy"])
        for r in rows:
            writer.writerow([r["variant"], r["transformer"], r["multiscale"],
                             r["params"], f"{r['accuracy']:.6f}"])
    inputs = sorted(sessions[subject].values())
    _write_manifest(out, "ablate", model_cfg, train_cfg, inputs,
                    extra={"subject": subject})
    for r in rows:
        print(f"{r['variant']:18s} transformer={r['transformer']:3s} "
              f"multiscale={r['multiscale']:3s} params={r['params']:6d} "
              f"acc={100 * r['accuracy']:.1f}")
    return 0


def _load_for_interpret(args) -> tuple[Model, "TrialSet", list[str]]:
    _require(args, "data", "checkpoint")
    model = Model.load(args.checkpoint)
    sessions = discover_sessions(args.data)
    subject = args.subject or min(sessions)
    session = args.session or 1
    if subject not in sessions or session not in sessions[subject]:
        raise SystemExit(f"error: subject {subject} session {session} not found")
    ts = load_trials(sessions[subject][session])
    names = (load_montage(args.montage) if args.montage
             else default_channel_names(ts.n_channels))
    return model, ts, names


def cmd_interpret(args) -> int:
    _require(args, "out")
    model, ts, names = _load_for_interpret(args)
    model_cfg, train_cfg, _ = _resolve_configs(args)
    if args.finetune_epochs:
        finetune_for_interpretation(model, ts, epochs=args.finetune_epochs,
                                    cfg=train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for class_id in range(model.config.n_classes):
        mean_map, scores = class_average_map(model, ts, class_id)
        write_map_csv(out / f"map_class{class_id}.csv", mean_map, names)
        write_channel_scores_csv(out / f"channel_scores_class{class_id}.csv",
                                 scores, names)
    _write_manifest(out, "interpret", model.config, train_cfg,
                    [Path(args.checkpoint)],
                    extra={"finetune_epochs": args.finetune_epochs})
    print(f"attribution exports written to {out}")
    return 0


def cmd_deletion_test(args) -> int:
    _require(args, "out")
    model, ts, names = _load_for_interpret(args)
    _, train_cfg, _ = _resolve_configs(args)
    fractions = [float(f) for f in args.fractions.split(",")]
    curves = []
    for class_id in range(model.config.n_classes):
        maps = correct_trial_attributions(model, ts, class_id=class_id)
        if not maps:
            print(f"class {class_id}: no correctly classified trials; skipped",
                  file=sys.stderr)
            continue
        scores = channel_scores(maps)
        idx = [m.trial_id for m in maps]
        subset = ts.subset(np.asarray(idx))
        for mode in ("most-important", "least-important"):
            curves.append(deletion_test(model, subset, scores, fractions, mode,
                                        class_id=class_id))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_deletion_csv(out / "deletion.csv", curves)
    _write_manifest(out, "deletion-test", model.config, train_cfg,
                    [Path(args.checkpoint)], extra={"fractions": fractions})
    print(f"deletion curves written to {out / 'deletion.csv'}")
    return 0


def cmd_latency(args) -> int:
    model_cfg, _, _ = _resolve_configs(args)
    model = build_model(model_cfg, seed=args.seed or 42)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, model_cfg.n_channels, model_cfg.n_samples, 1)).astype(np.float32)
    with tz.no_grad():
        for _ in range(5):   # warm-up
            model.forward(x)
        times = []
        for _ in range(args.trials):
            t0 = time.perf_counter()
            model.forward(x)
            times.append((time.perf_counter() - t0) * 1000.0)
    mean = statistics.fmean(times)
    median = statistics.median(times)
    print(f"per-trial inference over {args.trials} trials: "
          f"mean {mean:.2f} ms, median {median:.2f} ms (informational)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "latency.json").write_text(json.dumps(
            {"trials": args.trials, "mean_ms": mean, "median_ms": median},
            indent=2))
        _write_manifest(out, "latency", model_cfg, TrainConfig(seed=args.seed or 42),
                        [], extra={"trials": args.trials})
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mftnet",
        description="Motor-imagery EEG decoder: training, evaluation, and "
                    "interpretability tooling.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--data", help="directory of .etf session files")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="run seed (default 42)")
        p.add_argument("--variant", choices=VARIANTS, default=None)
        p.add_argument("--subject", type=int, default=None)
        p.add_argument("--session", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--precision", type=int, choices=(32, 64), default=None)

    p = sub.add_parser("params", help="trainable-parameter counts")
    common(p)
    p.add_argument("--breakdown", action="store_true", help="per-tensor listing")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--exhaustive", action="store_true",
                   help="sweep every element of every parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic .etf corpus")
    common(p)
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--trials-per-class", type=int, default=32)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--snr", type=float, default=4.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one subject (session 1, 80/20 split)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protocol", help="train/test every subject across sessions")
    common(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("ablate", help="run all four architecture variants")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("interpret", help="attribution maps and channel scores")
    common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--montage", help="JSON montage mapping index -> electrode label")
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("deletion-test", help="electrode deletion confidence curves")
    common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--montage", help="JSON montage mapping index -> electrode label")
    p.add_argument("--fractions", default="0,0.2,0.4,0.6,0.8,1.0")
    p.set_defaults(func=cmd_deletion_test)

    p = sub.add_parser("latency", help="per-trial inference timing (informational)")
    common(p)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_latency)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "precision", None):
        tz.set_dtype(args.precision)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, EtfError, CheckpointError,
            tz.ShapeError, tz.AutodiffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
