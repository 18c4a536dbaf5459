"""Command-line pipeline: gen -> mine -> train -> eval, plus kmeans and stats.

Every option can also come from a flat ``key = value`` config file given
with ``--config``; command-line flags win over file values. The resolved
configuration of each run is written to ``<out>/<command>.config``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import embed_store as store
from .baselines import kmeans, read_assignments, write_assignments
from .head import LossWeights, predict, read_head, write_head
from .knn import compute_neighborhoods, neighbor_accuracy_curve
from .metrics import clustering_report, gcd_report
from .neighbors import (SupervisionConfig, clean, eta_sweep, neighbor_stats,
                        positive_purity, read_index, write_index)
from .trainer import TrainConfig, argmax_concentration, train

COLLAPSE_THRESHOLD = 0.9


class UsageError(Exception):
    pass


def _checked(conv, ok, what):
    def parse(text):
        try:
            v = conv(text)
        except ValueError:
            v = None
        if v is None or not ok(v):
            raise argparse.ArgumentTypeError(f"expected {what}, got {text}")
        return v
    parse.__name__ = what
    return parse


_positive_int = _checked(int, lambda v: v >= 1, "a positive integer")
_nonneg_int = _checked(int, lambda v: v >= 0, "a nonnegative integer")
_fraction = _checked(float, lambda v: 0.0 <= v <= 1.0, "a value in [0, 1]")
_nonneg_float = _checked(float, lambda v: v >= 0, "a nonnegative number")


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text}")


@dataclass(frozen=True)
class Opt:
    type: object
    default: object
    help: str
    choices: tuple | None = None
    flag: bool = False


OPTIONS: dict[str, Opt] = {
    # global
    "seed": Opt(int, 0, "random seed"),
    "threads": Opt(_positive_int, 1, "worker threads for neighbor ranking"),
    "out": Opt(str, ".", "output directory (gen also accepts a .emb file path)"),
    # gen
    "n": Opt(_positive_int, 2000, "sample count"),
    "dim": Opt(_positive_int, 32, "embedding dimensionality"),
    "classes": Opt(_positive_int, 10, "mixture components"),
    "sep": Opt(_nonneg_float, 6.0, "distance between means in unit std"),
    "labeled_frac": Opt(_fraction, 0.0, "labeled fraction of each Old class"),
    "old_frac": Opt(_fraction, 0.0, "fraction of classes that are Old"),
    "csv": Opt(str, None, "import embeddings from CSV instead of synthesizing"),
    "csv_labels": Opt(_bool, False, "last CSV column holds integer labels", flag=True),
    # paths
    "embeddings": Opt(str, None, "UNICEMB1 embeddings file"),
    "neighbors": Opt(str, None, "UNICNBR1 neighbor index"),
    "model": Opt(str, None, "UNICHEAD model file"),
    "split": Opt(str, None, "GCD split JSON"),
    "pred": Opt(str, None, "predictions CSV (index,cluster) instead of a model"),
    # mine
    "tau1": Opt(_positive_int, 10, "positive neighbors per anchor, self included"),
    "tau2": Opt(_positive_int, None, "negative rank cutoff (default n/2)"),
    "eta": Opt(_nonneg_int, 70, "second-order union size limit"),
    "stride": Opt(_positive_int, 20, "rank stride of the neighbor accuracy curve"),
    # train
    "mode": Opt(str, "cluster", "training mode", ("cluster", "gcd")),
    "k": Opt(_positive_int, None, "number of clusters (default: distinct labels)"),
    "epochs": Opt(_positive_int, 100, "training epochs"),
    "batch": Opt(int, 128, "batch size"),
    "lr": Opt(float, 1e-4, "initial learning rate"),
    "lambda_pos": Opt(_nonneg_float, 1.0, "positive loss weight"),
    "lambda_neg": Opt(_nonneg_float, 1.0, "negative loss weight"),
    "lambda_ent": Opt(_nonneg_float, 3.0, "entropy loss weight"),
    "head": Opt(str, "mlp", "clustering head", ("mlp", "linear")),
    "hidden": Opt(_positive_int, 2048, "hidden width of the mlp head"),
    "pos_labeled": Opt(str, "labeled", "positive source, labeled anchors",
                       ("labeled", "mined", "cleaned")),
    "pos_unlabeled": Opt(str, "cleaned", "positive source, unlabeled anchors",
                         ("mined", "cleaned")),
    "neg_labeled": Opt(str, "mined", "negative source, labeled anchors",
                       ("labeled", "mined", "random")),
    "neg_unlabeled": Opt(str, "mined", "negative source, unlabeled anchors",
                         ("mined", "random")),
    "alpha": Opt(_fraction, 0.5, "share of labeled negatives for labeled anchors"),
    "n_pos": Opt(_positive_int, 1, "positives per anchor per step"),
    "n_neg": Opt(_positive_int, 1, "negatives per anchor per step"),
    "eval_epochs": Opt(_bool, False, "record metrics after every epoch", flag=True),
    # eval / kmeans
    "protocol": Opt(str, "cluster", "evaluation protocol", ("cluster", "gcd")),
    "restarts": Opt(_positive_int, 10, "k-means restarts"),
    "max_iter": Opt(_positive_int, 300, "Lloyd iterations per restart"),
    "tol": Opt(float, 1e-6, "centroid shift tolerance"),
}

GLOBAL = ("seed", "threads", "out")
COMMANDS: dict[str, tuple[str, ...]] = {
    "gen": ("n", "dim", "classes", "sep", "labeled_frac", "old_frac", "csv", "csv_labels"),
    "mine": ("embeddings", "tau1", "tau2", "eta"),
    "train": ("embeddings", "neighbors", "split", "mode", "k", "epochs", "batch", "lr",
              "lambda_pos", "lambda_neg", "lambda_ent", "head", "hidden", "pos_labeled",
              "pos_unlabeled", "neg_labeled", "neg_unlabeled", "alpha", "n_pos", "n_neg",
              "eval_epochs"),
    "eval": ("embeddings", "model", "pred", "split", "protocol", "k"),
    "kmeans": ("embeddings", "k", "restarts", "max_iter", "tol"),
    "stats": ("embeddings", "neighbors", "stride", "eta"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add(parser, name):
    opt = OPTIONS[name]
    flag = "--" + name.replace("_", "-")
    if opt.flag:
        parser.add_argument(flag, dest=name, action="store_true", default=argparse.SUPPRESS,
                            help=opt.help)
        return
    parser.add_argument(flag, dest=name, type=opt.type, choices=opt.choices,
                        default=argparse.SUPPRESS, help=opt.help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unic", description="Neighbor-mining clustering on embeddings.")
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    for name in GLOBAL:
        _add(common, name)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, names in COMMANDS.items():
        p = sub.add_parser(cmd, parents=[common])
        for name in names:
            _add(p, name)
    return parser


def read_config(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key '{key}'")
        values[key] = value
    return values


def resolve(command: str, ns: argparse.Namespace) -> dict:
    cli = vars(ns).copy()
    cli.pop("command", None)
    config_path = cli.pop("config", None)
    file_values = read_config(config_path) if config_path else {}
    cfg = {}
    for name in GLOBAL + COMMANDS[command]:
        opt = OPTIONS[name]
        if name in cli:
            cfg[name] = cli[name]
        elif name in file_values:
            try:
                cfg[name] = opt.type(file_values[name])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key '{name}': {exc}") from None
            if opt.choices and cfg[name] not in opt.choices:
                raise UsageError(f"config key '{name}' must be one of {opt.choices}")
        else:
            cfg[name] = opt.default
    return cfg


def _format_config(cfg: dict) -> str:
    # unset keys stay commented so the file can be fed back through --config
    return "".join(f"# {k} =\n" if v is None else f"{k} = {v}\n" for k, v in cfg.items())


def _info(msg):
    print(msg, file=sys.stdout)


class Run:
    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        out = Path(cfg["out"])
        if command == "gen" and out.suffix == ".emb":
            self.emb_target = out
            out = out.parent
        else:
            self.emb_target = out / "embeddings.emb"
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / f"{command}.config").write_text(_format_config(cfg))

    def path(self, key, default_name):
        value = self.cfg.get(key)
        return Path(value) if value else self.out / default_name

    def embeddings(self) -> store.EmbeddingSet:
        return store.read_embeddings(self.path("embeddings", "embeddings.emb"))


def _k_for(cfg, es):
    if cfg.get("k"):
        return cfg["k"]
    if es.labels is None or (es.labels < 0).all():
        raise UsageError("--k is required when embeddings carry no labels")
    return int(es.labels.max()) + 1


def cmd_gen(run: Run):
    cfg = run.cfg
    if cfg["csv"]:
        es = store.read_csv_embeddings(cfg["csv"], cfg["csv_labels"])
        split = None
        if es.labels is not None and (es.labels >= 0).all():
            split = store.make_gcd_split(es, cfg["old_frac"], cfg["labeled_frac"], cfg["seed"])
    else:
        if cfg["n"] < cfg["classes"]:
            raise UsageError(f"--n ({cfg['n']}) must be >= --classes ({cfg['classes']})")
        params = store.MixtureParams(k=cfg["classes"], dim=cfg["dim"], n=cfg["n"],
                                     separation=cfg["sep"], seed=cfg["seed"],
                                     labeled_fraction=cfg["labeled_frac"],
                                     old_class_fraction=cfg["old_frac"])
        es, split = store.generate_gaussian_mixture(params)
    store.write_embeddings(es, run.emb_target)
    summary = {"n": es.n, "dim": es.dim, "path": str(run.emb_target)}
    if split is not None:
        split_path = run.emb_target.with_suffix(".split.json")
        store.write_split(split, split_path)
        summary["split"] = str(split_path)
        summary["old_classes"] = len(split.old_classes)
        summary["labeled"] = int(split.labeled_mask.sum())
    if es.labels is not None:
        summary["k"] = int(np.unique(es.labels[es.labels >= 0]).size)
        tau1 = OPTIONS["tau1"].default
        if es.n > tau1:
            nb = compute_neighborhoods(es, tau1, es.n, workers=run.cfg["threads"])
            summary[f"purity@{tau1}"] = round(float(positive_purity(nb.positives, es.labels).mean()), 6)
    _info(json.dumps(summary))


def cmd_mine(run: Run):
    cfg = run.cfg
    if cfg["tau2"] is not None and cfg["tau1"] >= cfg["tau2"]:
        raise UsageError("tau1 < tau2 required")
    es = run.embeddings()
    tau1 = cfg["tau1"]
    tau2 = cfg["tau2"] if cfg["tau2"] is not None else es.n // 2
    if tau1 >= tau2:
        raise UsageError("tau1 < tau2 required")
    if tau2 > es.n:
        raise UsageError(f"tau2 <= n required (n={es.n})")
    nb = compute_neighborhoods(es, tau1, tau2, workers=cfg["threads"])
    index = clean(nb, cfg["eta"])
    path = run.out / "neighbors.nbr"
    write_index(index, path)
    summary = {"path": str(path), "tau1": tau1, "tau2": tau2, "eta": cfg["eta"],
               "removed_fraction": float(index.was_cleaned.mean())}
    if es.labels is not None:
        stats = _write_stats(run, index, es.labels, cfg["eta"])
        row = next(r for r in stats.rows if r[0] == cfg["eta"])
        summary.update(retained_purity=row[2], removed_purity=row[3])
    _info(json.dumps(summary))


def _write_stats(run, index, labels, eta):
    etas = sorted(set(eta_sweep(index.tau1)) | {eta})
    stats = neighbor_stats(index, labels, etas)
    (run.out / "stats.csv").write_text(stats.to_csv())
    (run.out / "union_hist.csv").write_text(stats.histogram_csv())
    return stats


def cmd_stats(run: Run):
    cfg = run.cfg
    es = run.embeddings()
    labels = es.require_labels()
    index = read_index(run.path("neighbors", "neighbors.nbr"), es)
    _write_stats(run, index, labels, cfg["eta"] if cfg["eta"] is not None else index.eta)
    curve = neighbor_accuracy_curve(es, cfg["stride"], workers=cfg["threads"])
    lines = ["rank_fraction,same_class_rate"] + [f"{r:.6f},{c:.6f}" for r, c in curve]
    (run.out / "accuracy_curve.csv").write_text("\n".join(lines) + "\n")
    _info(json.dumps({"stats": str(run.out / "stats.csv"),
                      "curve": str(run.out / "accuracy_curve.csv")}))


def cmd_train(run: Run):
    cfg = run.cfg
    if cfg["mode"] == "gcd" and not cfg["split"]:
        raise UsageError("--mode gcd requires --split")
    if cfg["batch"] < 2:
        raise UsageError("--batch must be >= 2")
    es = run.embeddings()
    index = read_index(run.path("neighbors", "neighbors.nbr"), es)
    split = store.read_split(cfg["split"]) if cfg["split"] else None
    sup = SupervisionConfig(cfg["mode"], cfg["pos_labeled"], cfg["pos_unlabeled"],
                            cfg["neg_labeled"], cfg["neg_unlabeled"], cfg["alpha"])
    tc = TrainConfig(
        k=_k_for(cfg, es), epochs=cfg["epochs"], batch_size=cfg["batch"], lr0=cfg["lr"],
        weights=LossWeights(cfg["lambda_pos"], cfg["lambda_neg"], cfg["lambda_ent"]),
        seed=cfg["seed"], supervision=sup, n_pos=cfg["n_pos"], n_neg=cfg["n_neg"],
        head_kind=cfg["head"], hidden=cfg["hidden"])
    params, history = train(es, index, split, tc, eval_each_epoch=cfg["eval_epochs"])
    write_head(params, run.out / "model.head")
    (run.out / "history.csv").write_text(history.to_csv())
    conc = argmax_concentration(params, es)
    if conc > COLLAPSE_THRESHOLD:
        print(f"warning: collapse: {conc:.1%} of samples share one cluster", file=sys.stderr)
    summary = {"model": str(run.out / "model.head"), "epochs": len(history),
               "final_total": history.records[-1].total}
    if es.labels is not None and (es.labels >= 0).all():
        k = max(tc.k, int(es.labels.max()) + 1)
        report = _report(predict(params, es.data), es.labels, split, cfg["mode"], k)
        summary["metrics"] = report.as_dict()
    _info(json.dumps(summary))


def _report(pred, labels, split, protocol, k):
    if protocol == "gcd":
        return gcd_report(pred, labels, split, k)
    return clustering_report(pred, labels, k)


def cmd_eval(run: Run):
    cfg = run.cfg
    es = run.embeddings()
    labels = es.require_labels()
    if cfg["pred"]:
        pred = read_assignments(cfg["pred"])
        if pred.shape[0] != es.n:
            raise ValueError(f"predictions cover n={pred.shape[0]}, embeddings have n={es.n}")
        k = _k_for(cfg, es)
    else:
        params = read_head(run.path("model", "model.head"))
        if params.dim != es.dim:
            raise ValueError(f"model dim {params.dim} does not match embeddings dim {es.dim}")
        pred = predict(params, es.data)
        k = max(cfg["k"] or params.k, int(labels.max()) + 1)
    split = None
    if cfg["protocol"] == "gcd":
        if not cfg["split"]:
            raise UsageError("--protocol gcd requires --split")
        split = store.read_split(cfg["split"])
        if split.n != es.n:
            raise ValueError(f"split covers n={split.n}, embeddings have n={es.n}")
    text = _report(pred, labels, split, cfg["protocol"], k).to_json()
    (run.out / "report.json").write_text(text + "\n")
    _info(text)


def cmd_kmeans(run: Run):
    cfg = run.cfg
    es = run.embeddings()
    k = _k_for(cfg, es)
    res = kmeans(es, k, seed=cfg["seed"], restarts=cfg["restarts"],
                 max_iter=cfg["max_iter"], tol=cfg["tol"])
    write_assignments(res.assignments, run.out / "assignments.csv")
    doc = {"inertia": res.inertia, "iterations": res.iterations}
    if es.labels is not None and (es.labels >= 0).all():
        doc = {**clustering_report(res.assignments, es.labels, max(k, int(es.labels.max()) + 1))
               .as_dict(), **doc}
    text = json.dumps(doc)
    (run.out / "kmeans.json").write_text(text + "\n")
    _info(text)


HANDLERS = {"gen": cmd_gen, "mine": cmd_mine, "train": cmd_train, "eval": cmd_eval,
            "kmeans": cmd_kmeans, "stats": cmd_stats}


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        cfg = resolve(ns.command, ns)
        HANDLERS[ns.command](Run(ns.command, cfg))
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
