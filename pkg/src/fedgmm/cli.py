"""Command-line entry point: ``fedgmm {generate,train,eval,ood,adapt}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Errors are printed to stderr as a single ``error: ...`` line.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import evaluation as ev
from . import federation as fed
from . import pipeline
from .checkpoint import load_checkpoint, save_checkpoint, write_round_log
from .config import ExperimentConfig, load_config, set_value
from .errors import ConfigError, DataError, FedGMMError
from .model import CONDITIONAL_ONLY, UNSUPERVISED, LabeledDataset

log = logging.getLogger("fedgmm")

# flag dest -> (section, key)
OVERRIDES = {
    "seed": ("run", "seed"),
    "out": ("run", "out"),
    "workers": ("run", "workers"),
    "family": ("data", "family"),
    "M": ("data", "M"),
    "d": ("data", "d"),
    "C": ("data", "C"),
    "n": ("data", "n"),
    "alpha": ("data", "alpha"),
    "mean_scale": ("data", "mean_scale"),
    "min_separation": ("data", "min_separation"),
    "mode": ("federation", "mode"),
    "sigma": ("federation", "covariance"),
    "M1": ("federation", "m1"),
    "M2": ("federation", "m2"),
    "rounds": ("federation", "rounds"),
    "lr": ("federation", "lr"),
    "epochs": ("federation", "local_epochs"),
    "batch": ("federation", "batch"),
    "participation": ("federation", "participation"),
    "floor": ("federation", "floor"),
    "sigma_correction": ("federation", "sigma_correction"),
    "init": ("federation", "init"),
    "holdout": ("eval", "holdout"),
    "steps": ("eval", "steps"),
    "shift_scale": ("eval", "shift_scale"),
    "shift_angle": ("eval", "shift_angle"),
    "shift_plane": ("eval", "shift_plane"),
    "reflect_axis": ("eval", "reflect_axis"),
    "score": ("eval", "score"),
}


def _global_flags(p):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="client threads per round")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedgmm", description="Federated Gaussian-mixture EM toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic federated dataset")
    _global_flags(g)
    g.add_argument("--family", choices=dg.FAMILIES)
    g.add_argument("--M", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--C", type=int)
    g.add_argument("--n", type=int, help="samples per client (per component for figure1)")
    g.add_argument("--alpha", type=float)
    g.add_argument("--mean-scale", type=float)
    g.add_argument("--min-separation", type=float)

    t = sub.add_parser("train", help="run federated EM rounds")
    _global_flags(t)
    t.add_argument("--data", help="dataset file (default OUT/dataset.csv)")
    t.add_argument("--mode", choices=("full", "unsupervised", "conditional-only"))
    t.add_argument("--sigma", choices=fed.COVARIANCE_MODES)
    t.add_argument("--M1", type=int)
    t.add_argument("--M2", type=int)
    t.add_argument("--rounds", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int, help="local learner epochs per round")
    t.add_argument("--batch", type=int)
    t.add_argument("--participation", type=float)
    t.add_argument("--floor", type=float)
    t.add_argument("--sigma-correction", action="store_const", const=True)
    t.add_argument("--init", choices=fed.INIT_METHODS)
    t.add_argument("--holdout", type=float, help="fraction of clients (highest ids) kept out of training")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="per-client test accuracy of a checkpoint")
    _global_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", choices=dg.SPLITS, default="test")

    o = sub.add_parser("ood", help="likelihood-based novelty scores and metrics")
    _global_flags(o)
    o.add_argument("--checkpoint")
    o.add_argument("--data", help="in-distribution dataset; its test split is scored")
    o.add_argument("--shifted", help="novel dataset; defaults to a shifted copy of --data")
    o.add_argument("--shift-scale", type=float)
    o.add_argument("--shift-angle", type=float)
    o.add_argument("--shift-plane")
    o.add_argument("--reflect-axis", type=int)
    o.add_argument("--score", choices=("joint", "marginal", "conditional"))
    o.add_argument(
        "--baseline-checkpoint",
        help="separately trained model for the max-softmax baseline (default: this checkpoint)",
    )

    a = sub.add_parser("adapt", help="fit mixture weights of unseen clients")
    _global_flags(a)
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--steps", type=int)
    a.add_argument("--clients", help="comma-separated client ids (default: the checkpoint's held-out clients)")
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    for dest, (section, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_value(cfg, section, key, value)
    return cfg.finalize()


def _out_dir(cfg):
    out = Path(cfg.run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_data(path):
    if not Path(path).exists():
        raise DataError(f"dataset {path} does not exist")
    return dg.read_dataset(path)


def _check_dims(model, d):
    if model.dim != d:
        raise DataError(f"checkpoint has dimension {model.dim} but dataset has {d}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg, args):
    out = _out_dir(cfg)
    clients, truth = dg.generate_synthetic(cfg.data)
    n_classes = 2
    try:
        dg.write_dataset(out / "dataset.csv", clients, n_classes)
        dg.write_truth(out / "truth.json", truth)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from None
    print(f"wrote {out / 'dataset.csv'} ({len(clients)} clients, d={clients[0].train.dim})")
    for c in clients:
        print(f"client {c.client_id}: train={len(c.train)} val={len(c.val)} test={len(c.test)}")
    return 0


def cmd_train(cfg, args):
    out = _out_dir(cfg)
    data_path = args.data or out / "dataset.csv"
    client_data, n_classes = _load_data(data_path)
    d = client_data[0].train.dim
    fcfg = cfg.federation
    holdout = pipeline.holdout_ids([c.client_id for c in client_data], cfg.eval.holdout)
    append = False
    if args.resume:
        model, weights, saved_cfg, doc = load_checkpoint(args.resume)
        _check_dims(model, d)
        if saved_cfg is not None:
            saved_cfg.rounds = fcfg.rounds
            saved_cfg.workers = fcfg.workers
            fcfg = saved_cfg
        holdout = doc.get("holdout", holdout)
        train_ids = set(doc.get("train_clients", [c.client_id for c in client_data if c.client_id not in holdout]))
        clients = pipeline.build_clients(client_data, fcfg, train_ids)
        for c in clients:
            if c.client_id in weights:
                c.weights = weights[c.client_id]
        append = True
    else:
        train_ids = {c.client_id for c in client_data} - set(holdout)
        clients = pipeline.build_clients(client_data, fcfg, train_ids)
        model = fed.init_model(clients, fcfg, n_classes if fcfg.mode != UNSUPERVISED else None)
    if model.m1 != fcfg.m1 or model.m2 != fcfg.m2:
        raise ConfigError("checkpoint grid does not match config")
    track = fcfg.mode != UNSUPERVISED

    def progress(m, entry):
        log.info("round %d F=%.6f dF=%.3e acc=%.4f (%.2fs)", entry.round, entry.F, entry.delta_F, entry.mean_accuracy, entry.wall_time)

    model, logs = fed.train(model, clients, fcfg, track_accuracy=track, callback=progress)
    extra = {"holdout": sorted(holdout), "train_clients": sorted(train_ids), "mode": fcfg.mode}
    save_checkpoint(out / "checkpoint.json", model, {c.client_id: c.weights for c in clients}, fcfg, extra)
    write_round_log(out / "rounds.csv", logs, append=append)
    if logs:
        last = logs[-1]
        print(f"trained {len(logs)} rounds: F={last.F:.6f} mean_accuracy={last.mean_accuracy:.4f}")
    else:
        print("trained 0 rounds")
    return 0


def _checkpoint_path(cfg, args):
    return args.checkpoint or Path(cfg.run.out) / "checkpoint.json"


def cmd_eval(cfg, args):
    out = _out_dir(cfg)
    model, weights, saved_cfg, doc = load_checkpoint(_checkpoint_path(cfg, args))
    client_data, _ = _load_data(args.data or out / "dataset.csv")
    _check_dims(model, client_data[0].train.dim)
    if model.learners is None:
        raise ConfigError("checkpoint has no learners (unsupervised); nothing to evaluate")
    mode = doc.get("mode", saved_cfg.mode if saved_cfg else "full")
    tests = {c.client_id: c.split(args.split) for c in client_data if c.client_id in weights}
    report = ev.accuracy(model, weights, tests, mode)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    with open(out / "accuracy.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "accuracy"])
        for cid, acc in sorted(report.accuracy_per_client.items()):
            w.writerow([cid, repr(acc)])
    for cid, acc in sorted(report.accuracy_per_client.items()):
        print(f"client {cid}: accuracy {acc:.4f}")
    print(f"mean accuracy: {report.accuracy_mean:.4f}")
    return 0


def _shift_spec(cfg):
    try:
        plane = tuple(int(v) for v in cfg.eval.shift_plane.split(","))
    except ValueError:
        raise ConfigError(f"bad shift plane {cfg.eval.shift_plane!r}") from None
    if len(plane) != 2:
        raise ConfigError("shift plane needs two axes")
    axis = None if cfg.eval.reflect_axis < 0 else cfg.eval.reflect_axis
    return dg.ShiftSpec(cfg.eval.shift_scale, cfg.eval.shift_angle, plane, axis)


def cmd_ood(cfg, args):
    out = _out_dir(cfg)
    model, weights, saved_cfg, doc = load_checkpoint(_checkpoint_path(cfg, args))
    if model.learners is None:
        raise ConfigError("ood scoring needs a supervised checkpoint")
    mode = doc.get("mode", "full")
    in_data, _ = _load_data(args.data or out / "dataset.csv")
    _check_dims(model, in_data[0].train.dim)
    x_in, y_in = pipeline.pooled_split(in_data, "test")
    if args.shifted:
        novel, _ = _load_data(args.shifted)
        _check_dims(model, novel[0].train.dim)
        x_out, y_out = pipeline.pooled_split(novel, "test")
    else:
        shifted = dg.apply_shift(LabeledDataset(x_in, y_in), _shift_spec(cfg))
        x_out, y_out = shifted.x, shifted.y
    x = np.concatenate([x_in, x_out])
    y = np.concatenate([y_in, y_out])
    novel_flag = np.r_[np.zeros(len(y_in), bool), np.ones(len(y_out), bool)]
    pi = fed.global_pi_from_clients([fed.ClientState(cid, None, w) for cid, w in weights.items()])
    scores = ev.score_ood(model, pi, x, y, novel_flag, mode)
    ev.write_ood_csv(out / "ood_scores.csv", scores)
    field = {"joint": "log_joint", "marginal": "log_px", "conditional": "log_py_given_x"}[cfg.eval.score]
    novelty = -np.array([getattr(s, field) for s in scores])
    report = ev.ranking_report(novelty, novel_flag)
    base_model, base_weights = model, weights
    if args.baseline_checkpoint:
        base_model, base_weights, _, _ = load_checkpoint(args.baseline_checkpoint)
        _check_dims(base_model, model.dim)
        if base_model.learners is None:
            raise ConfigError("baseline checkpoint has no learners")
    # the baseline ignores the input density: learners only, max over clients
    base = ev.baseline_confidence_scores(base_model, list(base_weights.values()), x, CONDITIONAL_ONLY)
    base_report = ev.ranking_report(-base, novel_flag)
    lines = [f"{k}={v!r}" for k, v in report.as_items()[:3]]
    lines += [f"baseline_{k}={v!r}" for k, v in base_report.as_items()[:3]]
    (out / "ood_metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(out / "ood_metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scorer", "auroc", "ap", "max_f1"])
        w.writerow([f"likelihood-{cfg.eval.score}", repr(report.auroc), repr(report.ap), repr(report.max_f1)])
        w.writerow(["max-softmax", repr(base_report.auroc), repr(base_report.ap), repr(base_report.max_f1)])
    print(f"likelihood ({cfg.eval.score}): AUROC={report.auroc:.4f} AP={report.ap:.4f} MaxF1={report.max_f1:.4f}")
    print(f"max-softmax baseline: AUROC={base_report.auroc:.4f} AP={base_report.ap:.4f} MaxF1={base_report.max_f1:.4f}")
    return 0


def cmd_adapt(cfg, args):
    out = _out_dir(cfg)
    model, weights, saved_cfg, doc = load_checkpoint(_checkpoint_path(cfg, args))
    if model.learners is None:
        raise ConfigError("adaptation accuracy needs a supervised checkpoint")
    mode = doc.get("mode", "full")
    client_data, _ = _load_data(args.data or out / "dataset.csv")
    _check_dims(model, client_data[0].train.dim)
    if args.clients:
        try:
            ids = {int(v) for v in args.clients.split(",")}
        except ValueError:
            raise ConfigError(f"bad client list {args.clients!r}") from None
    elif doc.get("holdout"):
        ids = set(doc["holdout"])
    else:
        ids = {c.client_id for c in client_data} - set(weights)
    chosen = [c for c in client_data if c.client_id in ids]
    if not chosen:
        raise DataError("no unseen clients to adapt")
    before = model.fingerprint()
    steps = cfg.eval.steps
    curves, adapted = {}, {}
    for cd in chosen:
        adapt_set, test_set = pipeline.adaptation_split(cd, cfg.run.seed)
        w, accs = pipeline.adaptation_curve(model, adapt_set, test_set, steps, mode)
        curves[cd.client_id] = accs
        adapted[cd.client_id] = w.probs.tolist()
    after = model.fingerprint()
    if before != after:
        raise FedGMMError("global model changed during adaptation")
    mean_curve = np.mean([curves[c] for c in sorted(curves)], axis=0)
    with open(out / "adapt_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_accuracy", *(f"client_{c}" for c in sorted(curves))])
        for s in range(steps + 1):
            w.writerow([s, repr(float(mean_curve[s])), *(repr(curves[c][s]) for c in sorted(curves))])
    (out / "adapted_pi.json").write_text(
        json.dumps({"model_fingerprint": before, "client_pi": {str(k): v for k, v in sorted(adapted.items())}}) + "\n",
        encoding="utf-8",
    )
    print(f"adapted {len(chosen)} clients for {steps} steps: accuracy {mean_curve[0]:.4f} -> {mean_curve[-1]:.4f}")
    print(f"model fingerprint unchanged: {before}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ood": cmd_ood,
    "adapt": cmd_adapt,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.to_text())
            return 0
        return COMMANDS[args.command](cfg, args)
    except FedGMMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
