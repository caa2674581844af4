"""Command-line entry point: ``pcp <command> [options]``.

Any option may also come from a ``--config`` file of ``key=value`` lines
(``#`` starts a comment); options given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from pcp.data import CohortConfig, EcgDataset, generate_synthetic_cohort, load_dataset, patient_split, save_dataset
from pcp.distill import SWEEP_FRACTIONS, ProbeConfig, distill_eval, write_results_csv
from pcp.errors import DataError, NumericError, PcpError, UsageError
from pcp.metrics import auc
from pcp.model import PcpModel, load_checkpoint, save_checkpoint
from pcp.similarity import (
    base_match_rate,
    distance_distributions,
    least_similar_pair,
    most_similar_pair,
    patient_distance_matrix,
    precision_curve,
    threshold_grid,
    write_curve_csv,
    write_distributions_csv,
    write_matrix_csv,
    write_pair_frames_csv,
)
from pcp.strategies import ALL_STRATEGIES, predict_logits
from pcp.training import TrainConfig, train

OUTPUT_DIR_ENV = "PCP_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pcp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in str(text).replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [t for t in str(text).replace(",", " ").split()]


# (dest, type, default, help); "REQUIRED" marks a mandatory option
COMMON = [
    ("config", str, None, "key=value file supplying defaults for any option"),
    ("out_dir", str, None, f"output directory (default ${OUTPUT_DIR_ENV} or the current directory)"),
]
DATA_OPTS = [
    ("data", str, "REQUIRED", "dataset file (.pcpd)"),
    ("split_seed", int, 0, "seed of the 60/20/20 patient split"),
]
COMMANDS: dict[str, list[tuple]] = {
    "gen": [
        ("patients", int, 40, "number of patients"),
        ("frames", int, 20, "frames per patient and lead"),
        ("classes", int, 4, "number of rhythm classes"),
        ("leads", _int_list, [0], "comma-separated lead ids (0-11)"),
        ("noise", float, 0.03, "additive noise level"),
        ("seed", int, 7, "cohort seed"),
        ("output", str, "cohort.pcpd", "output file name"),
    ],
    "train": DATA_OPTS
    + [
        ("emb", int, 128, "embedding dimension E"),
        ("tau", float, 0.1, "temperature"),
        ("batch", int, 256, "batch size"),
        ("lr", float, 1e-4, "Adam learning rate"),
        ("epochs", int, 20, "training epochs"),
        ("seed", int, 0, "training seed"),
        ("reduction", str, "sum", "loss reduction over the batch: sum or mean"),
    ],
    "eval": DATA_OPTS
    + [
        ("checkpoint", str, "REQUIRED", "model checkpoint (.pcpm)"),
        ("emb", int, None, "expected embedding dimension (checked against the checkpoint)"),
        ("seed", int, 0, "seed recorded in the report"),
        ("split", str, "test", "split to evaluate"),
    ],
    "similarity": DATA_OPTS
    + [
        ("checkpoint", str, "REQUIRED", "model checkpoint (.pcpm)"),
        ("checkpoint_b", str, None, "second checkpoint for cross-dataset comparison"),
        ("data_b", str, None, "dataset of the second checkpoint"),
        ("metric", str, "euclidean", "euclidean or cosine_distance"),
        ("num_thresholds", int, 20, "grid size of the precision curve"),
        ("thresholds", _float_list, None, "explicit ascending thresholds (overrides the grid)"),
        ("require_specific", int, 0, "1: exit with a numeric error unless same-patient mean < different-patient mean"),
    ],
    "distill": DATA_OPTS
    + [
        ("checkpoint", str, "REQUIRED", "model checkpoint (.pcpm)"),
        ("methods", _str_list, ["pcps", "lightweight", "uniform", "full"], "methods to run"),
        ("spaces", _str_list, ["raw", "representation"], "coreset spaces for uniform/lightweight"),
        ("fractions", _float_list, list(SWEEP_FRACTIONS), "prototype fractions for the pcps sweep"),
        ("seeds", _int_list, [0, 1, 2, 3, 4], "probe/coreset seeds"),
        ("jobs", int, 1, "parallel worker processes (1 = single-threaded)"),
        ("record_runtime", int, 0, "1: fill the runtime_seconds column"),
    ],
    "export-embeddings": DATA_OPTS
    + [
        ("checkpoint", str, "REQUIRED", "model checkpoint (.pcpm)"),
        ("split", str, "all", "all, train, validation or test"),
        ("output", str, "embeddings.csv", "output file name"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcp", description="Patient cardiac prototypes on synthetic ECG.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for dest, typ, _default, help_ in COMMON + opts:
            flags = ["--" + dest.replace("_", "-")]
            if dest == "output":
                flags.append("-o")
            p.add_argument(*flags, dest=dest, type=typ, default=None, help=help_)
    return parser


def _read_config(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge config file and defaults into the parsed namespace; validate."""
    opts = {dest: (typ, default) for dest, typ, default, _ in COMMON + COMMANDS[args.command]}
    if args.config:
        for key, value in _read_config(args.config).items():
            if key not in opts or key == "config":
                raise UsageError(f"unknown config key {key!r} for command {args.command}")
            if getattr(args, key) is None:
                try:
                    setattr(args, key, opts[key][0](value))
                except ValueError:
                    raise UsageError(f"bad value for {key}: {value!r}") from None
    for dest, (_, default) in opts.items():
        if getattr(args, dest) is None:
            if default == "REQUIRED":
                raise UsageError(f"{args.command}: --{dest.replace('_', '-')} is required")
            setattr(args, dest, default)
    if args.out_dir is None:
        args.out_dir = os.environ.get(OUTPUT_DIR_ENV, ".")
    return args


# -- helpers ---------------------------------------------------------------


def _out(args, name: str) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _load(path: str) -> EcgDataset:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"no such dataset file: {path}") from None


def _model(path: str) -> PcpModel:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"no such checkpoint file: {path}") from None


def _splits(args) -> dict[str, EcgDataset]:
    full = _load(args.data)
    tr, va, te = patient_split(full, seed=args.split_seed)
    return {"all": full, "train": tr, "validation": va, "test": te}


def _check_bank(model: PcpModel, train_split: EcgDataset) -> None:
    if not np.array_equal(np.sort(model.bank.patient_ids), train_split.patients):
        raise DataError("checkpoint prototypes do not match the training patients of this dataset/split seed")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands --------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = CohortConfig(
        num_patients=args.patients,
        frames_per_patient=args.frames,
        num_classes=args.classes,
        leads=tuple(args.leads),
        noise_level=args.noise,
        seed=args.seed,
    )
    ds = generate_synthetic_cohort(cfg)
    path = _out(args, args.output)
    save_dataset(ds, path)
    print(f"wrote {path}: {len(ds.patients)} patients, {len(ds)} frames, {ds.num_classes} classes")
    return EXIT_OK


def cmd_train(args) -> int:
    splits = _splits(args)
    cfg = TrainConfig(
        temperature=args.tau,
        embedding_dim=args.emb,
        batch_size=args.batch,
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        loss_reduction=args.reduction,
    )
    model, history = train(splits["train"], cfg)
    save_checkpoint(model, _out(args, "model.pcpm"))
    _write_csv(
        _out(args, "metrics.csv"),
        ["epoch", "contrastive_loss", "supervised_loss", "train_auc"],
        [
            [m.epoch, repr(m.contrastive_loss), repr(m.supervised_loss), "" if m.train_auc is None else repr(m.train_auc)]
            for m in history
        ],
    )
    labels = splits["all"].patient_labels()
    rows = []
    for tag in ("train", "validation", "test"):
        rows += [[int(p), tag, labels[int(p)]] for p in splits[tag].patients]
    _write_csv(_out(args, "split.csv"), ["patient_id", "split", "label"], rows)
    last = history[-1] if history else None
    print(f"trained {args.epochs} epochs; final combined loss {last.combined_loss:.4f}" if last else "trained 0 epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    splits = _splits(args)
    model = _model(args.checkpoint)
    if args.emb is not None and args.emb != model.embedding_dim:
        raise DataError(f"--emb {args.emb} does not match checkpoint E={model.embedding_dim}")
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    target = splits[args.split]
    h = model.represent(target.samples)
    rows = []
    for strategy in ALL_STRATEGIES:
        score = auc(predict_logits(model, None, strategy, h=h), target.labels)
        rows.append([strategy.name, model.embedding_dim, args.seed, repr(score)])
        print(f"{strategy.name:24s} auc {score:.4f}")
    _write_csv(_out(args, "eval.csv"), ["strategy", "E", "seed", "auc"], rows)
    return EXIT_OK


def cmd_similarity(args) -> int:
    splits = _splits(args)
    model = _model(args.checkpoint)
    _check_bank(model, splits["train"])
    tr, va = splits["train"], splits["validation"]
    protos = model.bank.vectors.data
    train_reps = model.represent(tr.samples)
    val_reps = model.represent(va.samples)

    dist = distance_distributions(protos, model.bank.patient_ids, train_reps, tr.patient_ids, val_reps, args.metric)
    write_distributions_csv(dist, _out(args, "distances.csv"))
    means = dist.means()
    print(", ".join(f"{k} mean {v:.4f}" for k, v in means.items() if v is not None))

    labels = splits["all"].patient_labels()
    matrix = patient_distance_matrix(protos, model.bank.patient_ids, val_reps, va.patient_ids, args.metric)
    write_matrix_csv(matrix, _out(args, "patient_matrix.csv"))
    thresholds = args.thresholds or threshold_grid(matrix.values, args.num_thresholds)
    curve = precision_curve(matrix, labels, labels, thresholds)
    write_curve_csv(curve, _out(args, "precision_curve.csv"))
    print(f"base label-match rate {base_match_rate(matrix, labels, labels):.4f}")

    ms, ls = most_similar_pair(matrix), least_similar_pair(matrix)
    frames = lambda ds, p: ds.samples[ds.patient_ids == p]  # noqa: E731
    write_pair_frames_csv(
        _out(args, "pairs.csv"),
        [
            ("most_similar_pcp", ms[0], frames(tr, ms[0])),
            ("most_similar_validation", ms[1], frames(va, ms[1])),
            ("least_similar_pcp", ls[0], frames(tr, ls[0])),
            ("least_similar_validation", ls[1], frames(va, ls[1])),
        ],
    )
    print(f"most similar pair {ms[0]}-{ms[1]} ({ms[2]:.4f}); least similar {ls[0]}-{ls[1]} ({ls[2]:.4f})")

    if args.checkpoint_b:
        other = _model(args.checkpoint_b)
        if other.embedding_dim != model.embedding_dim:
            raise DataError(f"embedding dimensions differ: {model.embedding_dim} vs {other.embedding_dim}")
        cross = patient_distance_matrix(protos, model.bank.patient_ids, other.bank.vectors.data, other.bank.patient_ids, args.metric)
        write_matrix_csv(cross, _out(args, "cross_matrix.csv"))
        if args.data_b:
            labels_b = _load(args.data_b).patient_labels()
            cross_curve = precision_curve(cross, labels, labels_b, threshold_grid(cross.values, args.num_thresholds))
            write_curve_csv(cross_curve, _out(args, "cross_precision_curve.csv"))
        cs = most_similar_pair(cross)
        print(f"cross-dataset most similar pair {cs[0]}-{cs[1]} ({cs[2]:.4f})")

    if args.require_specific and not means["pcp_to_same"] < means["pcp_to_different"]:
        raise NumericError("same-patient mean distance is not below the different-patient mean")
    return EXIT_OK


def _distill_cell(payload):
    model, tr, va, method, space, fraction, seed, train_reps, val_reps = payload
    return distill_eval(model, tr, va, method, fraction, seed, space, ProbeConfig(), train_reps, val_reps)


def cmd_distill(args) -> int:
    splits = _splits(args)
    model = _model(args.checkpoint)
    _check_bank(model, splits["train"])
    tr, va = splits["train"], splits["validation"]
    train_reps = model.represent(tr.samples)
    val_reps = model.represent(va.samples)
    cells = []
    for seed in args.seeds:
        for method in args.methods:
            if method == "pcps":
                cells += [(method, "representation", f, seed) for f in args.fractions]
            elif method == "full":
                cells.append((method, "representation", 1.0, seed))
            else:
                cells += [(method, space, 1.0, seed) for space in args.spaces]
    payloads = [(model, tr, va, m, s, f, seed, train_reps, val_reps) for m, s, f, seed in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_distill_cell, payloads))
    else:
        results = [_distill_cell(p) for p in payloads]
    write_results_csv(results, _out(args, "distill.csv"), include_runtime=bool(args.record_runtime))
    summary: dict[tuple, list[float]] = {}
    for r in results:
        summary.setdefault((r.method, r.space, r.fraction), []).append(r.auc)
    for (m, s, f), v in summary.items():
        print(f"{m:12s} {s:15s} fraction {f:<5g} auc {np.mean(v):.4f} (n={len(v)})")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    splits = _splits(args)
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    model = _model(args.checkpoint)
    target = splits[args.split]
    labels = splits["all"].patient_labels()
    h = model.represent(target.samples)
    e = model.embedding_dim
    rows = [["representation", int(p), int(y)] + [repr(float(v)) for v in row] for p, y, row in zip(target.patient_ids, target.labels, h)]
    rows += [
        ["pcp", int(p), labels.get(int(p), "")] + [repr(float(v)) for v in row]
        for p, row in zip(model.bank.patient_ids, model.bank.vectors.data)
    ]
    path = _out(args, args.output)
    _write_csv(path, ["kind", "patient_id", "label"] + [f"e{i}" for i in range(e)], rows)
    print(f"wrote {path}: {len(h)} representations, {len(model.bank.patient_ids)} prototypes")
    return EXIT_OK


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "similarity": cmd_similarity,
    "distill": cmd_distill,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(HANDLERS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return HANDLERS[args.command](resolve(args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PcpError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
