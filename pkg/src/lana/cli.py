"""Command-line entry point: simgen, rasch, train, leveled-finetune, eval, predict, export-features.

Every subcommand reads the same flat run configuration (``--config``), then
applies command-line overrides, and writes its artifacts under ``--out``.
Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, leveled, simgen, training
from .config import coerce, load_config, write_config
from .errors import (CheckpointError, ContractViolation, NumericDomainError, ParseError,
                     UndefinedMetricError)
from .model import init_params, model_forward
from . import tensor as T

log = logging.getLogger("lana")

COMMANDS = ("simgen", "rasch", "train", "leveled-finetune", "eval", "predict", "export-features")
RUNTIME_ERRORS = (ContractViolation, NumericDomainError, ParseError, UndefinedMetricError,
                  CheckpointError, OSError)


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", help="run configuration file (key = value lines)")
    p.add_argument("--out", help="output directory (default from config: lana_out)")
    p.add_argument("--data", help="interaction CSV (default: OUT/interactions.csv)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="parallel workers (simgen, leveled-finetune)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _flags(p):
    for name in ("bm", "pma", "pcffn", "ll"):
        p.add_argument(f"--no-{name}", action="store_true", help=f"disable {name.upper()}")


def build_parser():
    parser = argparse.ArgumentParser(prog="lana", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simgen", help="generate a synthetic interaction log and its ground truth")
    _common(p)
    p.add_argument("--students", type=int)
    p.add_argument("--questions", type=int)
    p.add_argument("--interactions", type=int)

    p = sub.add_parser("rasch", help="fit Rasch abilities on the training students")
    _common(p)

    p = sub.add_parser("train", help="pre-train one model on the training students")
    _common(p)
    _flags(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("leveled-finetune", help="clone the pre-trained model per ability layer and fine-tune")
    _common(p)
    _flags(p)
    p.add_argument("--ckpt", help="pre-trained checkpoint (default OUT/model.ckpt)")
    p.add_argument("--epochs", type=int, help="fine-tuning epochs per layer")
    p.add_argument("--layers", type=int, help="layer count L")
    p.add_argument("--tau", type=float, help="gap between consecutive layer means")

    for name, text in (("eval", "AUC on the validation students"),
                       ("predict", "per-position probabilities for the validation students"),
                       ("export-features", "final decoder-layer FFN inputs per window")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _flags(p)
        p.add_argument("--ckpt", help="single-model checkpoint (default OUT/model.ckpt)")
        p.add_argument("--ensemble", help="ensemble manifest (default OUT/ensemble/ensemble.json)")
        p.add_argument("--topk", type=int, help="layers fused per student")
        p.add_argument("--split", choices=("valid", "train", "all"), default="valid")
    return parser


def _resolve(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            overrides[key.strip()] = coerce(key.strip(), value)
        except ParseError as exc:
            raise UsageError(str(exc)) from None
    for key in ("out", "data", "seed", "workers"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    for name in ("bm", "pma", "pcffn", "ll"):
        if getattr(args, f"no_{name}", False):
            overrides[f"no_{name}"] = True
    mapping = {"students": "sim_students", "questions": "sim_questions", "interactions": "sim_interactions",
               "topk": "k", "layers": "L", "tau": "tau"}
    for attr, key in mapping.items():
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    if getattr(args, "epochs", None) is not None:
        overrides["finetune_epochs" if args.command == "leveled-finetune" else "epochs"] = args.epochs
    return load_config(args.config, overrides)


def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _records(cfg):
    path = Path(cfg.data) if cfg.data else Path(cfg.out) / "interactions.csv"
    return dataio.parse_interactions(path)


def _split(cfg, records, side):
    if side == "all":
        return records
    train, valid = dataio.split_by_student(records, cfg.valid_fraction, cfg.seed)
    return train if side == "train" else valid


def _fit(cfg, train_records):
    return leveled.fit_rasch(train_records, cfg.rasch_iterations, cfg.rasch_l2, cfg.rasch_step)


# ------------------------------------------------------------- commands

def cmd_simgen(cfg, args):
    out = _out(cfg)
    sim = cfg.sim_config()
    records = simgen.generate(sim, workers=cfg.workers)
    dataio.write_interactions(records, out / "interactions.csv")
    simgen.write_ground_truth(simgen.describe(sim), out / "ground_truth.csv")
    acc = np.mean([r.correct for r in records])
    print(f"students {sim.n_students} questions {sim.n_questions} interactions {len(records)} accuracy {acc:.4f}")
    return 0


def cmd_rasch(cfg, args):
    out = _out(cfg)
    fit = _fit(cfg, _split(cfg, _records(cfg), "train"))
    leveled.write_abilities(fit, out / "abilities.csv")
    leveled.write_difficulties(fit, out / "difficulties.csv")
    print(f"students {len(fit.abilities)} questions {len(fit.difficulties)} "
          f"log_likelihood {fit.log_likelihood:.6f} mu_a {fit.mean_ability:.6f} sigma2_a {fit.ability_variance:.6f}")
    return 0


def cmd_train(cfg, args):
    out = _out(cfg)
    records = _records(cfg)
    train_w = dataio.windows_from_records(_split(cfg, records, "train"), cfg.seq_len)
    valid_w = dataio.windows_from_records(_split(cfg, records, "valid"), cfg.seq_len)
    params = init_params(cfg.hyper(), cfg.flags(), seed=cfg.seed)
    history = training.train(params, train_w, cfg.train_config(), valid_windows=valid_w)
    training.save_checkpoint(params, {"seed": cfg.seed}, out / "model.ckpt")
    training.write_history(history, out / "history.csv")
    write_config(cfg, out / "train.cfg")
    print(f"valid_auc {history[-1]['valid_auc']:.6f}")
    return 0


def cmd_finetune(cfg, args):
    if cfg.no_ll:
        raise UsageError("leveled-finetune is disabled by --no-ll")
    out = _out(cfg)
    ckpt = Path(args.ckpt) if args.ckpt else out / "model.ckpt"
    pretrained = training.load_checkpoint(ckpt).params
    train_records = _split(cfg, _records(cfg), "train")
    fit = _fit(cfg, train_records)
    spec = leveled.spec_from_fit(fit, cfg.L, cfg.tau)
    windows = dataio.windows_from_records(train_records, pretrained.hyper.seq_len)
    ensemble = leveled.finetune_layers(
        pretrained, fit, spec, windows, cfg.train_config(cfg.finetune_epochs),
        threshold=cfg.membership_threshold, encoder_only=cfg.encoder_only, workers=cfg.workers,
    )
    manifest = leveled.save_ensemble(ensemble, out / "ensemble")
    p = leveled.membership_matrix([leveled.cold_start_ability(fit, w.student_id) for w in windows], spec)
    with (out / "memberships.csv").open("w", encoding="utf-8") as fh:
        fh.write("layer,mu,sigma2,n_windows,mean_membership\n")
        for i in range(spec.L):
            n = int((p[:, i] >= cfg.membership_threshold).sum())
            fh.write(f"{i},{spec.means[i]!r},{spec.variances[i]!r},{n},{float(p[:, i].mean())!r}\n")
            print(f"layer {i} mu {spec.means[i]:.4f} sigma2 {spec.variances[i]:.4f} windows {n}")
    print(f"manifest {manifest}")
    return 0


def _model(cfg, args):
    """The single model, or the ensemble unless --no-ll or --ckpt asks otherwise."""
    out = Path(cfg.out)
    manifest = Path(args.ensemble) if args.ensemble else out / "ensemble" / "ensemble.json"
    if not cfg.no_ll and not args.ckpt and manifest.exists():
        return leveled.load_ensemble(manifest), "ensemble"
    ckpt = Path(args.ckpt) if args.ckpt else out / "model.ckpt"
    return training.load_checkpoint(ckpt).params, "single"


def _windows(cfg, args, hyper):
    return dataio.windows_from_records(_split(cfg, _records(cfg), args.split), hyper.seq_len)


def _hyper(model):
    return model.hyper if kind_is_single(model) else model.models[0].hyper


def kind_is_single(model):
    return not isinstance(model, leveled.LayerEnsemble)


def _predict(cfg, model, windows):
    if kind_is_single(model):
        return training.predict_windows(model, windows)
    return leveled.ensemble_predict(model, windows, k=cfg.k, sigmoid=cfg.sigmoid_fusion)


def cmd_eval(cfg, args):
    out = _out(cfg)
    model, kind = _model(cfg, args)
    windows = _windows(cfg, args, _hyper(model))
    preds = _predict(cfg, model, windows)
    scores, labels = training.collect_valid(preds, windows)
    value = training.auc(scores, labels)
    k = "" if kind == "single" else cfg.k
    with (out / "eval.csv").open("w", encoding="utf-8") as fh:
        fh.write("model,k,split,n_predictions,auc\n")
        fh.write(f"{kind},{k},{args.split},{scores.size},{value!r}\n")
    print(f"model {kind} split {args.split} predictions {scores.size} auc {value:.6f}")
    return 0


def cmd_predict(cfg, args):
    out = _out(cfg)
    model, kind = _model(cfg, args)
    windows = _windows(cfg, args, _hyper(model))
    preds = _predict(cfg, model, windows)
    with (out / "predictions.csv").open("w", encoding="utf-8") as fh:
        fh.write("student_id,window_index,position,question_id,correct,prob\n")
        for w, row in zip(windows, preds):
            for pos, r in enumerate(w.interactions):
                fh.write(f"{w.student_id},{w.window_index},{pos},{r.question_id},{r.correct},"
                         f"{float(row[w.pad_count + pos])!r}\n")
    print(f"model {kind} windows {len(windows)} predictions {sum(len(w.interactions) for w in windows)}")
    return 0


def extract_features(params, windows, batch_size=64):
    """(student_id, window_index, features at the last valid position) per window."""
    rows = []
    with T.no_grad():
        for chunk in dataio.iter_chunks(windows, batch_size):
            capture = {}
            model_forward(params, dataio.stack_windows(chunk), capture=capture)
            for w, feats in zip(chunk, capture["pcffn_input"]):
                rows.append((w.student_id, w.window_index, feats[-1]))
    return rows


def cmd_export(cfg, args):
    out = _out(cfg)
    model, kind = _model(cfg, args)
    params = model if kind_is_single(model) else model.models[0]
    if not kind_is_single(model):
        log.info("ensemble given; exporting features of layer 0")
    windows = _windows(cfg, args, params.hyper)
    rows = extract_features(params, windows)
    d = params.hyper.d_model
    with (out / "features.csv").open("w", encoding="utf-8") as fh:
        fh.write("student_id,window_index," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for sid, idx, feats in rows:
            fh.write(f"{sid},{idx}," + ",".join(repr(float(v)) for v in feats) + "\n")
    print(f"windows {len(rows)} features {d}")
    return 0


HANDLERS = {
    "simgen": cmd_simgen, "rasch": cmd_rasch, "train": cmd_train, "leveled-finetune": cmd_finetune,
    "eval": cmd_eval, "predict": cmd_predict, "export-features": cmd_export,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lana: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"lana {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
