"""Command-line entry point: ``camp <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Every subcommand writes ``run_manifest.json`` into its
output directory; its ``argv`` field replays the run with every setting
spelled out.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfg
from . import evaluation as ev
from .diagnostics import format_table, gradient_suite
from .errors import CampError, DataError, NumericalError
from .imaging import DatasetManifest, ManifestEntry, load_manifest, read_slice, to_unit, write_manifest, write_slice
from .models import build_camp1, build_camp2, load_checkpoint, save_checkpoint
from .preprocess import preprocess_volume, write_quality_csv
from .synthdata import PhantomSpec, generate_phantoms
from .training import classifier_scores, cross_validate, train_autoencoder, train_classifier

log = logging.getLogger("camp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "seed", "noise_sigma", "loss", "leaky_alpha",
              "val_fraction", "modality", "pooled")
CLF_KEYS = ("epochs", "batch_size", "learning_rate", "seed", "folds", "sparsity_p", "beta_min", "beta_max",
            "sparsity_epsilon", "freeze_transferred", "leaky_alpha", "dropout_rate", "val_fraction",
            "modality", "pooled", "cross_validate")

# config keys used by each subcommand; the remaining flags are paths
SUBCOMMAND_KEYS = {
    "synth": ("patients", "slices", "size", "seed", "rule"),
    "preprocess": ("entropy_threshold", "snr_threshold", "background_region", "target_size"),
    "train-ae": TRAIN_KEYS,
    "train-clf": CLF_KEYS,
    "predict": ("leaky_alpha", "dropout_rate", "modality", "pooled", "aggregate"),
    "evaluate": ("threshold", "aggregate"),
    "activations": ("leaky_alpha", "dropout_rate"),
    "gradcheck": ("seed",),
}

PATH_FLAGS = {
    "synth": ("out",),
    "preprocess": ("manifest", "out"),
    "train-ae": ("manifest", "out"),
    "train-clf": ("manifest", "camp1", "out"),
    "predict": ("manifest", "model", "out"),
    "evaluate": ("predictions", "out"),
    "activations": ("model", "slice", "layers", "out"),
    "gradcheck": ("out", "scale"),
}

PREDICTION_HEADER = ["group", "patient_id", "modality", "slice_path", "label", "score"]
PATIENT_HEADER = ["group", "patient_id", "label", "score"]


class UsageError(CampError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(key):
    return "--" + key.replace("_", "-")


def _add_key(parser, key):
    spec = cfg.KEYS[key]

    def parse(text, key=key):
        try:
            return cfg.parse_value(key, text)
        except cfg.ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    parser.add_argument(_flag(key), dest=key, type=parse, default=None, metavar=key.upper(),
                        help=f"{spec.help} (default: {spec.default})")


def build_parser():
    parser = _Parser(prog="camp", description="Two-phase CAMP MGMT pipeline on P5 slice datasets.")
    parser.add_argument("--version", action="version", version=f"camp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    helps = {
        "synth": "write a synthetic phantom dataset",
        "preprocess": "resize, quality-gate and equalize slices",
        "train-ae": "train the denoising autoencoder (phase I)",
        "train-clf": "train the classifier from a phase-I encoder (phase II)",
        "predict": "score slices and patients with a trained classifier",
        "evaluate": "metrics and ROC curves from a predictions CSV",
        "activations": "export per-channel activation maps as P5 images",
        "gradcheck": "finite-difference check of every differentiable op",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, help="key = value config file; flags override it")
        for key in SUBCOMMAND_KEYS[name]:
            _add_key(p, key)
        paths = PATH_FLAGS[name]
        if "manifest" in paths:
            p.add_argument("--manifest", type=Path, required=True, help="dataset manifest CSV")
        if "camp1" in paths:
            p.add_argument("--camp1", type=Path, required=True,
                           help="phase-I checkpoint, or the train-ae output directory")
        if "model" in paths:
            p.add_argument("--model", type=Path, required=True,
                           help="classifier checkpoint, or the train-clf output directory")
        if "predictions" in paths:
            p.add_argument("--predictions", type=Path, required=True, help="CSV written by predict or train-clf")
        if "slice" in paths:
            p.add_argument("--slice", type=Path, required=True, help="P5 slice to push through the model")
            p.add_argument("--layers", default=None, help="comma-separated layer names (default: every conv)")
        if "scale" in paths:
            p.add_argument("--scale", type=int, default=32, help="image edge for the full-model checks")
        p.add_argument("--out", type=Path, required=name != "gradcheck", help="output directory")
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _resolve(args):
    file_values = cfg.load_config(args.config) if args.config else {}
    keys = SUBCOMMAND_KEYS[args.command]
    return cfg.resolve(keys, file_values, {k: getattr(args, k) for k in keys})


def _replay_argv(args, values):
    argv = [args.command]
    for name in PATH_FLAGS[args.command]:
        v = getattr(args, name, None)
        if v is not None:
            argv += [_flag(name), str(v)]
    for key in SUBCOMMAND_KEYS[args.command]:
        v = values[key]
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        argv += [_flag(key), str(v)]
    return argv


def _json_value(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def _write_run_manifest(out_dir, args, values, outputs):
    record = {
        "tool": "camp",
        "version": __version__,
        "subcommand": args.command,
        "config": {k: _json_value(v) for k, v in values.items()},
        "seed": values.get("seed"),
        "inputs": {k: str(getattr(args, k)) for k in ("manifest", "camp1", "model", "predictions", "slice")
                   if getattr(args, k, None) is not None},
        "outputs": sorted(str(Path(o).relative_to(out_dir)) for o in outputs),
        "argv": _replay_argv(args, values),
    }
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{path}: cannot create output directory: {exc.strerror}") from None
    return path


def _groups(manifest, values):
    """``[(group name, sub-manifest)]``: pooled, one chosen modality, or one per modality."""
    if values.get("pooled"):
        return [("pooled", manifest)]
    if values.get("modality"):
        sub = manifest.select(values["modality"])
        if not len(sub):
            raise DataError(f"manifest has no {values['modality']} slices")
        return [(values["modality"], sub)]
    mods = list(dict.fromkeys(e.modality for e in manifest.entries))
    return [(m.value, manifest.select(m)) for m in mods]


def _load_images(entries):
    if not entries:
        raise DataError("no slices to load")
    slices = [read_slice(e.slice_path) for e in entries]
    first = slices[0]
    for e, s in zip(entries, slices):
        if (s.width, s.height) != (first.width, first.height):
            raise DataError(f"{e.slice_path}: slice is {s.width}x{s.height}, expected "
                            f"{first.width}x{first.height}; run preprocess first")
    if first.width != first.height:
        raise DataError(f"{entries[0].slice_path}: slices must be square; run preprocess first")
    return to_unit(slices)


def _labels(entries):
    missing = [e for e in entries if e.label is None]
    if missing:
        raise DataError(f"{missing[0].slice_path}: patient {missing[0].patient_id} has no label")
    return np.array([e.label for e in entries])


def _split_patients(entries, fraction, seed):
    """Deterministic patient-level holdout; returns (train entries, val entries)."""
    if not 0.0 <= fraction < 1.0:
        raise cfg.ConfigError(f"val_fraction must lie in [0, 1), got {fraction}")
    pids = list(dict.fromkeys(e.patient_id for e in entries))
    n_val = int(math.ceil(fraction * len(pids))) if fraction > 0 else 0
    if n_val >= len(pids):
        raise DataError(f"val_fraction {fraction} leaves no training patients")
    order = np.random.default_rng(seed).permutation(len(pids))
    val = {pids[i] for i in order[:n_val]}
    return [e for e in entries if e.patient_id not in val], [e for e in entries if e.patient_id in val]


def _checkpoint_for(path, prefix, group):
    path = Path(path)
    if path.is_dir():
        path = path / f"{prefix}_{group}.ckpt"
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    return path


def _check_model_size(builder, size):
    try:
        builder(size=size)
    except ValueError as exc:
        raise DataError(f"slices of {size}px do not fit the model: {exc}") from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, v):
    out = _out_dir(args.out)
    try:
        spec = PhantomSpec(v["patients"], v["slices"], v["size"], v["seed"], v["rule"])
    except ValueError as exc:
        raise cfg.ConfigError(str(exc)) from None
    manifest = generate_phantoms(spec, out)
    log.info("wrote %d slices for %d patients", len(manifest), len(manifest.patients()))
    return [out / "manifest.csv"] + [e.slice_path for e in manifest.entries]


def cmd_preprocess(args, v):
    pconf = cfg.preprocess_config(v)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args.out)
    entries, quality, outputs = [], [], []
    by_volume = {}
    for e in manifest.entries:
        by_volume.setdefault((e.patient_id, e.modality), []).append(e)
    for (pid, mod), group in by_volume.items():
        volume = DatasetManifest(tuple(group)).volumes()[0]
        kept, qualities, keep = preprocess_volume(volume, pconf)
        for z, q in enumerate(qualities):
            quality.append((pid, mod, z, q))
        pdir = out / pid
        pdir.mkdir(exist_ok=True)
        for z, slc in zip(keep, kept.slices):
            path = pdir / f"{mod.value}_{z:03d}.pgm"
            write_slice(slc, path)
            outputs.append(path)
            entries.append(ManifestEntry(pid, mod, path, group[z].label))
    write_manifest(DatasetManifest(tuple(entries)), out / "manifest.csv")
    write_quality_csv(quality, out / "quality.csv")
    log.info("kept %d of %d slices", len(entries), len(manifest))
    return outputs + [out / "manifest.csv", out / "quality.csv"]


def cmd_train_ae(args, v):
    tconf = cfg.train_config(v)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args.out)
    outputs = []
    for group, sub in _groups(manifest, v):
        train_e, val_e = _split_patients(list(sub.entries), v["val_fraction"], tconf.seed)
        x = _load_images(train_e)
        _check_model_size(build_camp1, x.shape[1])
        xv = _load_images(val_e) if val_e else None
        log.info("[%s] training autoencoder on %d slices", group, len(x))
        model, history = train_autoencoder(x, tconf, val_images=xv)
        ckpt, log_csv = out / f"camp1_{group}.ckpt", out / f"ae_log_{group}.csv"
        save_checkpoint(model, ckpt)
        history.write_csv(log_csv)
        outputs += [ckpt, log_csv]
    return outputs


def _write_predictions(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER + (["fold"] if rows and len(rows[0]) > 6 else []))
        for row in rows:
            w.writerow(row)


def cmd_train_clf(args, v):
    tconf = cfg.train_config(v)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args.out)
    outputs = []
    for group, sub in _groups(manifest, v):
        entries = list(sub.entries)
        _labels(entries)
        camp1_path = _checkpoint_for(args.camp1, "camp1", group)
        train_e, val_e = _split_patients(entries, v["val_fraction"], tconf.seed)
        x, y = _load_images(train_e), _labels(train_e)
        _check_model_size(build_camp2, x.shape[1])
        camp1 = load_checkpoint(camp1_path, expected_name=f"camp1-{x.shape[1]}", alpha=tconf.leaky_alpha)
        val = (_load_images(val_e), _labels(val_e)) if val_e else None
        log.info("[%s] training classifier on %d slices", group, len(x))
        model, history = train_classifier(x, y, camp1, tconf, val=val)
        ckpt, log_csv = out / f"camp2_{group}.ckpt", out / f"clf_log_{group}.csv"
        save_checkpoint(model, ckpt)
        history.write_csv(log_csv)
        outputs += [ckpt, log_csv]
        if v["cross_validate"]:
            xa, ya = _load_images(entries), _labels(entries)
            pids = [e.patient_id for e in entries]
            res = cross_validate(xa, ya, pids, tconf, camp1=camp1)
            fold_of = {pid: f for f, ids in enumerate(res.plan.val) for pid in ids}
            order = {}
            for e in entries:
                order.setdefault(e.patient_id, []).append(e)
            rows, cursor = [], {}
            for pid, score in zip(res.val_patients, res.val_scores):
                i = cursor.get(pid, 0)
                cursor[pid] = i + 1
                e = order[pid][i]
                rows.append([group, pid, e.modality.value, str(e.slice_path), e.label, repr(float(score)),
                             fold_of[pid]])
            path = out / f"cv_predictions_{group}.csv"
            _write_predictions(path, rows)
            outputs.append(path)
            log.info("[%s] cross-validation: mean held-out accuracy %.3f", group, float(np.mean(res.val_accuracy)))
    return outputs


def cmd_predict(args, v):
    manifest = load_manifest(args.manifest)
    out = _out_dir(args.out)
    slice_rows, patient_rows = [], []
    for group, sub in _groups(manifest, v):
        entries = list(sub.entries)
        x = _load_images(entries)
        model = load_checkpoint(_checkpoint_for(args.model, "camp2", group), expected_name=f"camp2-{x.shape[1]}",
                                alpha=v["leaky_alpha"], dropout=v["dropout_rate"])
        scores = classifier_scores(model, x)
        for e, s in zip(entries, scores):
            slice_rows.append([group, e.patient_id, e.modality.value, str(e.slice_path),
                               "" if e.label is None else e.label, repr(float(s))])
        pids = [e.patient_id for e in entries]
        labels = {e.patient_id: e.label for e in entries}
        for pid, s in ev.aggregate_patient(scores, pids, v["aggregate"]).items():
            patient_rows.append([group, pid, "" if labels[pid] is None else labels[pid], repr(s)])
    _write_predictions(out / "predictions.csv", slice_rows)
    with open(out / "patients.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATIENT_HEADER)
        w.writerows(patient_rows)
    return [out / "predictions.csv", out / "patients.csv"]


def _read_predictions(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    groups = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:6] != PREDICTION_HEADER:
            raise DataError(f"{path}: header must start with {','.join(PREDICTION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                group, pid, _, _, label, score = row[:6]
                if label == "":
                    raise ValueError("missing label")
                groups.setdefault(group, []).append((pid, int(label), float(score)))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not groups:
        raise DataError(f"{path}: no predictions")
    return groups


def cmd_evaluate(args, v):
    groups = _read_predictions(args.predictions)
    out = _out_dir(args.out)
    outputs, text = [], []
    for group, rows in groups.items():
        pids = [r[0] for r in rows]
        labels = np.array([r[1] for r in rows])
        scores = np.array([r[2] for r in rows])
        p_scores = ev.aggregate_patient(scores, pids, v["aggregate"])
        p_labels = ev.aggregate_labels(labels, pids)
        levels = {"slice": (scores, labels),
                  "patient": (np.array(list(p_scores.values())), np.array([p_labels[p] for p in p_scores]))}
        for level, (s, y) in levels.items():
            report = ev.metrics_report(s, y, v["threshold"])
            curve, _ = ev.roc_auc(s, y)
            m_csv, r_csv = out / f"metrics_{group}_{level}.csv", out / f"roc_{group}_{level}.csv"
            ev.write_metrics_csv(report, m_csv)
            ev.write_roc_csv(curve, r_csv)
            outputs += [m_csv, r_csv]
            text.append(ev.format_report(report, f"{group} {level}-level"))
    (out / "metrics.txt").write_text("\n".join(text))
    sys.stdout.write("\n".join(text))
    return outputs + [out / "metrics.txt"]


def cmd_activations(args, v):
    slc = read_slice(args.slice)
    if slc.width != slc.height:
        raise DataError(f"{args.slice}: slice must be square")
    model = load_checkpoint(args.model, alpha=v["leaky_alpha"], dropout=v["dropout_rate"])
    if model.size != slc.width:
        raise DataError(f"{args.slice}: slice is {slc.width}px but {model.name} expects {model.size}px")
    layers = [s for s in (args.layers or "").split(",") if s] or \
        [s.name for s in model.layers if s.kind in ("conv", "conv_transpose")]
    return ev.export_activation_maps(model, slc.data, layers, _out_dir(args.out))


def cmd_gradcheck(args, v):
    if args.scale < 8 or args.scale % 8:
        raise cfg.ConfigError(f"--scale must be a positive multiple of 8, got {args.scale}")
    results = gradient_suite(seed=v["seed"], size=args.scale)
    table = format_table(results)
    sys.stdout.write(table + "\n")
    outputs = []
    if args.out is not None:
        out = _out_dir(args.out)
        (out / "gradcheck.txt").write_text(table + "\n")
        outputs.append(out / "gradcheck.txt")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    return outputs


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train-ae": cmd_train_ae,
    "train-clf": cmd_train_clf,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "activations": cmd_activations,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    values = _resolve(args)
    outputs = COMMANDS[args.command](args, values)
    if args.out is not None:
        _write_run_manifest(Path(args.out), args, values, outputs)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except (UsageError, cfg.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        name = f"{exc.filename}: " if exc.filename else ""
        print(f"data error: {name}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
