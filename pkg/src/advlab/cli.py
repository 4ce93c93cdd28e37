"""Command-line entry point.

Every command writes its artifacts plus ``manifest.json`` (resolved options,
their hash, the seed, input/output digests and library versions) into the run
directory given by ``--out``. Options may also come from an INI file passed
with ``--config``: one section per command (``[train]``, ``[eval roc]``, ...)
plus ``[backdoor]`` for an inline poisoning spec. Command-line flags override
the file; unknown sections or keys are rejected.

Exit codes: 0 ok, 1 a scan reported an attack, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

from . import ada, attacks, bddefense, data, density, evaluation, poisoning, reverse
from .io import FormatError, load_network, save_network, save_tensor
from .nncore import TrainConfig, accuracy

EXIT_OK, EXIT_ATTACKED, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    pass


# -- run configuration --------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved options of one command invocation."""

    command: str
    options: dict
    out: str
    seed: int
    inputs: list = field(default_factory=list)   # option names holding input paths

    def validate(self):
        for name in self.inputs:
            path = self.options.get(name)
            if path is not None and not os.path.isfile(path):
                raise CliError(f"file not found: {path}")

    def canonical(self):
        return {k: v for k, v in sorted(self.options.items()) if k not in ("out", "config")}

    def config_hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def path(self, name):
        return os.path.join(self.out, name)


def _sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _versions():
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for dist in ("artifact", "scipy", "scikit-learn"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


def write_manifest(run: RunConfig, outputs):
    manifest = {
        "command": run.command,
        "options": run.canonical(),
        "config_hash": run.config_hash(),
        "seed": run.seed,
        "inputs": {run.options[n]: _sha256(run.options[n]) for n in run.inputs
                   if run.options.get(n) is not None},
        "outputs": {name: _sha256(run.path(name)) for name in sorted(outputs)},
        "versions": _versions(),
    }
    with open(run.path("manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# -- shared loaders -----------------------------------------------------------

def _shape(text):
    return None if not text else tuple(int(v) for v in text.split(","))


def load_data(path, labels=None, shape=None, classes=None):
    """Dataset from a container file, a CSV (label last) or an IDX image/label pair."""
    if labels:
        return data.load_idx(path, labels, classes or 10)
    if path.endswith(".csv"):
        return data.load_csv(path, _shape(shape), classes)
    return data.load_dataset(path)


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _layers(net, text):
    if text == "default":
        return None
    if text == "all":
        return list(range(len(net.layers) - 1))
    return [int(v) for v in text.split(",")]


def _score_fn(method, net, bank, mode="max"):
    if method == "ada":
        if bank is None:
            raise CliError("method ada needs --null")
        return lambda x: ada.ada_statistic(net, bank, x, mode).score
    if method == "confidence":
        return lambda x: ada.confidence_score(net, x)
    raise CliError(f"unsupported score method {method!r}")


def _threshold(args, score):
    if args.threshold is not None:
        return float(args.threshold)
    if args.calib:
        return ada.threshold_at_fpr(score(load_data(args.calib).X), args.fpr)
    return None


# -- commands -----------------------------------------------------------------

def cmd_train(args, run):
    if (args.data is None) == (args.synth is None):
        raise CliError("give exactly one of --data or --synth")
    if args.synth:
        if args.synth == "gaussians":
            ds = data.synth_gaussians(args.classes, args.dim, args.n_per_class, args.separation,
                                      args.seed)
        else:
            ds = data.synth_images(args.classes, args.side, args.n_per_class, args.seed,
                                   channels=args.channels, modes=args.modes,
                                   variation=args.variation, noise=args.noise)
        train, test = data.split(ds, args.test_fraction, args.seed)
    else:
        train = load_data(args.data, args.labels, args.shape)
        test = load_data(args.test) if args.test else None
    if args.normalize:
        train, *rest = data.minmax_normalize(train, *([test] if test is not None else []))
        test = rest[0] if rest else None
    cfg = TrainConfig(args.arch, args.epochs, args.batch_size, args.lr, args.momentum, args.seed)
    net = cfg.fit(train.X, train.y, train.class_count)
    save_network(run.path("model.bin"), net)
    data.save_dataset(run.path("train.bin"), train)
    outputs = ["model.bin", "train.bin", "metrics.csv"]
    rows = [("train", len(train), accuracy(net, train.X, train.y))]
    if test is not None:
        data.save_dataset(run.path("test.bin"), test)
        outputs.append("test.bin")
        rows.append(("test", len(test), accuracy(net, test.X, test.y)))
    with open(run.path("metrics.csv"), "w") as f:
        f.write("split,n,accuracy\n")
        for name, n, acc in rows:
            f.write(f"{name},{n},{float(acc)!r}\n")
    return EXIT_OK, outputs


def cmd_attack(args, run):
    net = load_network(args.model)
    ds = load_data(args.data)
    X, y = ds.X, ds.y
    if args.correct_only:
        ok = net.predict(X) == y
        X, y = X[ok], y[ok]
    if args.limit:
        X, y = X[:args.limit], y[:args.limit]
    if args.target == "none":
        target = None
    elif args.target == "random":
        target = attacks.random_targets(y, net.class_count, args.seed)
    else:
        target = np.full(len(y), int(args.target))
    cfg = attacks.AttackConfig(args.kind, None, args.eps, args.steps, args.step_size, args.c, args.k,
                               2, args.lr, args.iters, args.budget)
    r = attacks.run(net, X, y, cfg, target)
    data.save_dataset(run.path("adversarial.bin"), data.Dataset(r.x_adv, y, ds.class_count, "adversarial"))
    with open(run.path("attack.csv"), "w") as f:
        f.write("sample,label,target,l2,linf,success,decision\n")
        for i in range(len(r)):
            t = -1 if target is None else int(target[i])
            f.write(f"{i},{int(y[i])},{t},{float(r.l2[i])!r},{float(r.linf[i])!r},"
                    f"{int(r.success[i])},{int(r.decision[i])}\n")
    return EXIT_OK, ["adversarial.bin", "attack.csv"]


def cmd_poison(args, run):
    if args.spec:
        spec = poisoning.load_spec(args.spec)
    elif args.backdoor_section:
        spec = poisoning.spec_from_mapping(args.backdoor_section)
    else:
        raise CliError("give --spec or a [backdoor] section in --config")
    ds = load_data(args.data)
    poisoned, idx = poisoning.poison_trainset(ds, spec, args.seed)
    data.save_dataset(run.path("poisoned.bin"), poisoned)
    poisoning.save_poison_indices(run.path("poison_indices.csv"), idx)
    poisoning.save_spec(run.path("backdoor.ini"), spec, tensor_dir=run.out)
    outputs = ["poisoned.bin", "poison_indices.csv", "backdoor.ini"]
    if args.test:
        bd = poisoning.backdoor_test_set(load_data(args.test), spec)
        data.save_dataset(run.path("backdoor_test.bin"), bd)
        outputs.append("backdoor_test.bin")
    return EXIT_OK, outputs


def cmd_fit_null(args, run):
    net = load_network(args.model)
    ds = load_data(args.data)
    comps = "bic" if args.components == "bic" else int(args.components)
    bank = ada.fit_null(net, ds, _layers(net, args.layers), args.family, comps, args.seed,
                        args.k_max, args.cov_mode, args.correct_only)
    ada.save_bank(run.path("null.bin"), bank)
    with open(run.path("null.csv"), "w") as f:
        f.write("class,layer,components,dim\n")
        for (c, l), m in sorted(bank.models.items()):
            f.write(f"{c},{l},{m.n_components},{m.dim}\n")
    return EXIT_OK, ["null.bin", "null.csv"]


def cmd_detect(args, run):
    net = load_network(args.model)
    ds = load_data(args.data)
    if args.method == "blur":
        flagged, blurred = ada.blur_disagree(net, ds.X)
        with open(run.path("scores.csv"), "w") as f:
            f.write("sample,decision,blur_decision,detected\n")
            dec = net.predict(ds.X)
            for i in range(len(ds)):
                f.write(f"{i},{int(dec[i])},{int(blurred[i])},{int(flagged[i])}\n")
        thr = float("nan")
    else:
        bank = ada.load_bank(args.null) if args.null else None
        score = _score_fn(args.method, net, bank, args.mode)
        thr = _threshold(args, score)
        if args.method == "ada":
            result = ada.ada_statistic(net, bank, ds.X, args.mode)
            ada.save_scores_csv(run.path("scores.csv"), result, thr)
            s = result.score
        else:
            s = score(ds.X)
            dec = net.predict(ds.X)
            with open(run.path("scores.csv"), "w") as f:
                f.write("sample,score,decision" + (",detected" if thr is not None else "") + "\n")
                for i in range(len(s)):
                    row = f"{i},{float(s[i])!r},{int(dec[i])}"
                    if thr is not None:
                        row += f",{int(s[i] > thr)}"
                    f.write(row + "\n")
        flagged = s > thr if thr is not None else np.zeros(len(s), dtype=bool)
        thr = float("nan") if thr is None else thr
    with open(run.path("summary.csv"), "w") as f:
        f.write("method,threshold,n,flagged,rate\n")
        n = len(flagged)
        f.write(f"{args.method},{float(thr)!r},{n},{int(flagged.sum())},{float(flagged.mean()) if n else 0.0!r}\n")
    return EXIT_OK, ["scores.csv", "summary.csv"]


def cmd_scan(args, run):
    net = load_network(args.model)
    ds = load_data(args.data)
    if args.mode == "impurity":
        report = bddefense.cluster_impurity(net, ds, args.k_max, args.seed, args.impurity_threshold,
                                            reg=args.reg)
        bddefense.write_impurity_csv(run.path("impurity.csv"), report)
        poisoning.save_poison_indices(run.path("flagged.csv"), report.flagged_indices)
        attacked = len(report.flagged_indices) > 0
        with open(run.path("report.txt"), "w") as f:
            f.write(f"attacked: {'yes' if attacked else 'no'}\n"
                    f"flagged: {len(report.flagged_indices)}\n")
        outputs = ["impurity.csv", "flagged.csv", "report.txt"]
    elif args.mode == "perceptible":
        scan = bddefense.scan_perceptible(net, ds.X, ds.y, [int(w) for w in _floats(args.widths)],
                                          args.mamf_threshold, args.per_class, args.stride,
                                          args.patch_iters)
        bddefense.write_mamf_csv(run.path("mamf.csv"), scan)
        with open(run.path("report.txt"), "w") as f:
            f.write(bddefense.format_verdict(scan.verdict))
        attacked = scan.verdict.attacked
        outputs = ["mamf.csv", "report.txt"]
    else:
        cfg = bddefense.ScanConfig(args.target_fraction, args.iters, args.lr, args.alpha, args.null,
                                   args.per_class)
        verdict = bddefense.scan_imperceptible(net, ds.X, ds.y, cfg)
        bddefense.write_pair_csv(run.path("pairs.csv"), verdict)
        with open(run.path("report.txt"), "w") as f:
            f.write(bddefense.format_verdict(verdict))
        attacked = verdict.attacked
        outputs = ["pairs.csv", "report.txt"]
        if attacked:
            save_tensor(run.path("pattern.bin"), verdict.pattern, source=verdict.pair[0],
                        target=verdict.pair[1])
            outputs.append("pattern.bin")
    sys.stdout.write(open(run.path("report.txt")).read())
    return (EXIT_ATTACKED if attacked else EXIT_OK), outputs


def cmd_re_sim(args, run):
    victim = load_network(args.model)
    pool = load_data(args.data)
    rng = np.random.default_rng(args.seed)
    n = min(args.seed_size, len(pool))
    S0 = pool.X[rng.choice(len(pool), n, replace=False)]
    cfg = TrainConfig(args.arch, args.epochs, args.batch_size, args.lr, args.momentum, args.seed)
    agree = load_data(args.agreement).X if args.agreement else None
    surrogate, log = reverse.re_attack(victim, S0, args.stages, args.lam, cfg, agree)
    save_network(run.path("surrogate.bin"), surrogate)
    reverse.save_query_log(run.path("query_log.bin"), log)
    with open(run.path("stages.csv"), "w") as f:
        f.write("stage,crafted,new,agreement\n")
        for k in range(log.n_stages):
            a = log.agreement[k] if log.agreement else float("nan")
            f.write(f"{k},{log.crafted[k]},{len(log.queries[k])},{float(a)!r}\n")
    return EXIT_OK, ["surrogate.bin", "query_log.bin", "stages.csv"]


def _read_score_column(path, column):
    with open(path) as f:
        header = f.readline().strip().split(",")
        if column is None:
            column = "max" if "max" in header else "score"
        if column not in header:
            raise CliError(f"{path}: no column {column!r}")
        j = header.index(column)
        return np.array([float(line.split(",")[j]) for line in f if line.strip()])


def cmd_eval_roc(args, run):
    a = _read_score_column(args.attack_scores, args.column)
    c = _read_score_column(args.clean_scores, args.column)
    curve = evaluation.roc(a, c)
    evaluation.write_roc_csv(run.path("roc.csv"), curve)
    print(f"auc {float(curve.auc)!r}")
    return EXIT_OK, ["roc.csv"]


def cmd_eval_sweep(args, run):
    net = load_network(args.model)
    bank = ada.load_bank(args.null) if args.null else None
    score = _score_fn(args.method, net, bank)
    thr = ada.threshold_at_fpr(score(load_data(args.calib).X), args.fpr)
    ds = load_data(args.data)
    X, y = (ds.X[:args.limit], ds.y[:args.limit]) if args.limit else (ds.X, ds.y)
    curve = evaluation.effective_success_curve(net, score, thr, args.kind, _floats(args.grid), X, y,
                                               args.seed, args.targeted, k=args.k, iters=args.iters,
                                               lr=args.lr, steps=args.steps)
    evaluation.write_curve_csv(run.path("sweep.csv"), curve)
    return EXIT_OK, ["sweep.csv"]


def cmd_eval_ccr(args, run):
    net = load_network(args.model)
    bank = ada.load_bank(args.null) if args.null else None
    score = _score_fn(args.method, net, bank)
    calib = score(load_data(args.calib).X)
    ds = load_data(args.data)
    s = score(ds.X)
    with open(run.path("ccr.csv"), "w") as f:
        f.write("fpr,threshold,passed,ccr\n")
        for fpr in _floats(args.fprs):
            thr = ada.threshold_at_fpr(calib, fpr)
            ccr = evaluation.conditional_correct_rate(net, s, thr, ds.X, ds.y)
            passed = int(np.sum(s <= thr))
            f.write(f"{float(fpr)!r},{float(thr)!r},{passed},{float('nan') if ccr is None else float(ccr)!r}\n")
    return EXIT_OK, ["ccr.csv"]


# -- parser -------------------------------------------------------------------

def _common(p):
    p.add_argument("--out", required=True, help="run directory (created if missing)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="INI file with a section per command")


def _model_opts(p):
    p.add_argument("--arch", default="dense:32,relu,dense:16,relu",
                   help="layer list, e.g. conv:8:3,relu,maxpool:2,dense:24,relu")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)


def _score_opts(p):
    p.add_argument("--model", required=True)
    p.add_argument("--null", help="null bank from fit-null (method ada)")
    p.add_argument("--method", choices=("ada", "confidence"), default="ada")
    p.add_argument("--data", required=True)
    p.add_argument("--calib", required=True, help="clean calibration set for the threshold")
    p.add_argument("--fpr", type=float, default=0.05)


# name -> (handler, input-path options, help)
COMMANDS = {
    "train": (cmd_train, ["data", "labels", "test"], "train a network"),
    "attack": (cmd_attack, ["model", "data"], "craft adversarial examples"),
    "poison": (cmd_poison, ["data", "spec", "test"], "embed a backdoor into a training set"),
    "fit-null": (cmd_fit_null, ["model", "data"], "fit per-class null densities"),
    "detect": (cmd_detect, ["model", "data", "null", "calib"], "score and flag test inputs"),
    "scan-backdoor": (cmd_scan, ["model", "data"], "scan a model or training set for backdoors"),
    "re-sim": (cmd_re_sim, ["model", "data", "agreement"], "simulate surrogate learning"),
    "eval roc": (cmd_eval_roc, ["attack_scores", "clean_scores"], "ROC curve from two score files"),
    "eval sweep": (cmd_eval_sweep, ["model", "null", "data", "calib"],
                   "effective success rate versus attack strength"),
    "eval ccr": (cmd_eval_ccr, ["model", "null", "data", "calib"],
                 "accuracy on inputs the detector lets through"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advlab", description="Adversarial attacks, backdoors and their detection.",
        epilog="commands: " + ", ".join(COMMANDS))
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    parsers = {}

    p = sub.add_parser("train", help=COMMANDS["train"][2])
    _common(p)
    p.add_argument("--data", help="training set: container, .csv or IDX images")
    p.add_argument("--labels", help="IDX label file (with IDX --data)")
    p.add_argument("--shape", help="sample shape for CSV input, e.g. 1,8,8")
    p.add_argument("--test", help="test set file")
    p.add_argument("--synth", choices=("gaussians", "images"))
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--modes", type=int, default=1)
    p.add_argument("--variation", type=float, default=0.08)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--n-per-class", type=int, default=500)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--normalize", action="store_true", help="min-max normalise on the training set")
    _model_opts(p)
    parsers["train"] = p

    p = sub.add_parser("attack", help=COMMANDS["attack"][2])
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=attacks.KINDS, default="cw")
    p.add_argument("--target", default="none", help="none, random or a class index")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--c", type=float, default=4.0)
    p.add_argument("--k", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--limit", type=int, default=0, help="attack only the first N samples")
    p.add_argument("--correct-only", action="store_true")
    parsers["attack"] = p

    p = sub.add_parser("poison", help=COMMANDS["poison"][2])
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", help="backdoor spec file ([backdoor] section)")
    p.add_argument("--test", help="clean test set to turn into a backdoor test set")
    parsers["poison"] = p

    p = sub.add_parser("fit-null", help=COMMANDS["fit-null"][2])
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--family", choices=density.FAMILIES, default="gaussian")
    p.add_argument("--components", default="1", help="component count or 'bic'")
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--layers", default="default", help="default, all or comma list of indices")
    p.add_argument("--cov-mode", choices=("auto", "full", "diag"), default="auto")
    p.add_argument("--correct-only", action="store_true")
    parsers["fit-null"] = p

    p = sub.add_parser("detect", help=COMMANDS["detect"][2])
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("ada", "confidence", "blur"), default="ada")
    p.add_argument("--null")
    p.add_argument("--mode", choices=("max", "expected"), default="max")
    p.add_argument("--calib", help="clean calibration set; threshold at --fpr")
    p.add_argument("--fpr", type=float, default=0.05)
    p.add_argument("--threshold", type=float)
    parsers["detect"] = p

    p = sub.add_parser("scan-backdoor", help=COMMANDS["scan-backdoor"][2])
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="clean samples (training set for impurity)")
    p.add_argument("--mode", choices=("imperceptible", "perceptible", "impurity"),
                   default="imperceptible")
    p.add_argument("--target-fraction", type=float, default=0.9)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--null", choices=("gamma", "empirical"), default="gamma")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--widths", default="2,3")
    p.add_argument("--mamf-threshold", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--patch-iters", type=int, default=20)
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--impurity-threshold", type=float, default=bddefense.IMPURITY_THRESHOLD)
    p.add_argument("--reg", type=float, default=1e-2)
    parsers["scan-backdoor"] = p

    p = sub.add_parser("re-sim", help=COMMANDS["re-sim"][2])
    _common(p)
    p.add_argument("--model", required=True, help="victim network")
    p.add_argument("--data", required=True, help="attacker's pool of natural samples")
    p.add_argument("--agreement", help="held-out set for surrogate/victim agreement")
    p.add_argument("--seed-size", type=int, default=100)
    p.add_argument("--stages", type=int, default=6)
    p.add_argument("--lambda", dest="lam", type=float, default=0.37)
    _model_opts(p)
    parsers["re-sim"] = p

    p = sub.add_parser("eval", help="roc | sweep | ccr")
    esub = p.add_subparsers(dest="eval_command", required=True, metavar="metric")
    q = esub.add_parser("roc", help=COMMANDS["eval roc"][2])
    _common(q)
    q.add_argument("--attack-scores", required=True)
    q.add_argument("--clean-scores", required=True)
    q.add_argument("--column", help="score column (default max, else score)")
    parsers["eval roc"] = q
    q = esub.add_parser("sweep", help=COMMANDS["eval sweep"][2])
    _common(q)
    _score_opts(q)
    q.add_argument("--kind", choices=("fgsm", "pgd", "cw"), default="fgsm")
    q.add_argument("--grid", default="0,0.05,0.1,0.15,0.25,0.4")
    q.add_argument("--targeted", action="store_true")
    q.add_argument("--limit", type=int, default=0)
    q.add_argument("--k", type=float, default=0.0)
    q.add_argument("--iters", type=int, default=1000)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--steps", type=int, default=10)
    parsers["eval sweep"] = q
    q = esub.add_parser("ccr", help=COMMANDS["eval ccr"][2])
    _common(q)
    _score_opts(q)
    q.add_argument("--fprs", default="0.01,0.05,0.1")
    parsers["eval ccr"] = q
    return parser, parsers


def _command_name(ns):
    return f"eval {ns.eval_command}" if ns.command == "eval" else ns.command


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {text!r}")


def apply_config(path, command, parsers):
    """Check every section of the INI file and return (defaults for ``command``, backdoor section)."""
    cp = configparser.ConfigParser(interpolation=None)
    if not os.path.isfile(path):
        raise CliError(f"file not found: {path}")
    try:
        cp.read(path)
    except configparser.Error as e:
        raise CliError(f"{path}: {e}") from None
    chosen, backdoor = {}, None
    for sec in cp.sections():
        if sec == "backdoor":
            unknown = set(cp[sec]) - poisoning.SPEC_KEYS
            if unknown:
                raise CliError(f"{path}: unknown keys in [backdoor]: {sorted(unknown)}")
            backdoor = dict(cp[sec])
            continue
        if sec not in parsers:
            raise CliError(f"{path}: unknown section [{sec}]")
        actions = {a.dest: a for a in parsers[sec]._actions if a.dest not in ("help", "config")}
        for key, raw in cp[sec].items():
            dest = key.replace("-", "_")
            if dest == "lambda":
                dest = "lam"
            if dest not in actions:
                raise CliError(f"{path}: unknown key {key!r} in [{sec}]")
            act = actions[dest]
            if isinstance(act, argparse._StoreTrueAction):
                value = _bool(raw)
            else:
                try:
                    value = act.type(raw) if act.type else raw
                except ValueError:
                    raise CliError(f"{path}: bad value {raw!r} for {key!r}") from None
                if act.choices is not None and value not in act.choices:
                    raise CliError(f"{path}: {key} must be one of {list(act.choices)}")
            if sec == command:
                chosen[dest] = value
    return chosen, backdoor


def _prescan(argv):
    """Command name and ``--config`` value, read before full parsing so the file can fill required options."""
    words = [a for a in argv if not a.startswith("-")]
    command = None
    if words:
        command = f"eval {words[1]}" if words[0] == "eval" and len(words) > 1 else words[0]
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, parsers = build_parser()
    command, config = _prescan(argv)
    backdoor = None
    try:
        if config and command in parsers:
            defaults, backdoor = apply_config(config, command, parsers)
            sub = parsers[command]
            for a in sub._actions:
                if a.dest in defaults:
                    a.required = False
            sub.set_defaults(**defaults)
    except CliError as e:
        print(f"advlab {command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    command = _command_name(ns)
    try:
        handler, inputs, _ = COMMANDS[command]
        options = {k: v for k, v in vars(ns).items() if k not in ("command", "eval_command")}
        run = RunConfig(command, options, ns.out, ns.seed, inputs)
        run.validate()
        if ns.config:
            run.inputs.append("config")
        ns.backdoor_section = backdoor
        os.makedirs(ns.out, exist_ok=True)
        code, outputs = handler(ns, run)
        write_manifest(run, outputs)
        return code
    except (CliError, OSError, FormatError, data.IdxFormatError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"advlab {command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
