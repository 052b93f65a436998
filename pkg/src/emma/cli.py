"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 usage or missing prerequisite.
Failures print one line to stderr: ``error kind=<Class> exit=<code> msg=<json string>``.
"""

import argparse
import hashlib
import json
import os
import sys

from . import analysis as An
from . import pipeline as P
from . import rng as rngmod
from . import world as W
from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_config
from .errors import ConfigError, ContractError, EmmaError, FormatError, InputError
from .gradcheck import TOLERANCE

TRAIN_FILE = "train.emmadata"
TEST_FILE = "test.emmadata"
ENCODER_FILE = "encoders.ckpt"
MODEL_FILE = "model.ckpt"
USAGE_ERRORS = (ConfigError, ContractError, FormatError, InputError)


class MissingPrerequisite(EmmaError):
    pass


class UsageError(EmmaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------- helpers


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def require(path):
    if not os.path.exists(path):
        raise MissingPrerequisite(f"missing prerequisite: {path}")
    return path


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_manifest(out_dir, command, cfg, inputs=(), outputs=()):
    """Config echo plus digests of every input and output file."""
    lines = [f"command = {command}", ""]
    lines += [f"input {p} sha256={file_digest(p)}" for p in inputs]
    lines += [f"output {os.path.basename(p)} sha256={file_digest(p)}" for p in outputs]
    write_text(os.path.join(out_dir, "manifest.txt"), "\n".join(lines) + "\n\n" + cfg.to_text())


def load_config(args):
    overrides = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "adapter": args.adapter,
        "layer_tap": args.layer_tap,
    }
    cfg = parse_config(args.config, overrides)
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def data_paths(args, cfg):
    base = args.data or cfg.out_dir
    if os.path.isfile(base):
        raise MissingPrerequisite(f"--data must be a directory holding {TRAIN_FILE} and {TEST_FILE}: {base}")
    return require(os.path.join(base, TRAIN_FILE)), require(os.path.join(base, TEST_FILE))


def load_splits(args, cfg):
    train_path, test_path = data_paths(args, cfg)
    train, test = W.read_dataset(train_path), W.read_dataset(test_path)
    if train.config != cfg.world():
        raise ContractError(f"{train_path} was generated with a different world config")
    return train, test, [train_path, test_path]


def load_encoders(args, cfg, default=ENCODER_FILE):
    path = require(args.checkpoint or os.path.join(cfg.out_dir, default))
    return P.stack_from_checkpoint(load_checkpoint(path)), path


def log(msg):
    print(msg, flush=True)


# ----------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg):
    wc = cfg.world()
    outs = []
    for name, start, count in ((TRAIN_FILE, 0, cfg.n_train), (TEST_FILE, cfg.n_train, cfg.n_test)):
        path = os.path.join(cfg.out_dir, name)
        digest = W.write_dataset(W.Dataset(wc, W.generate(wc, cfg.seed, start, count)), path)
        log(f"wrote {path} ({count} samples, sha256 {digest})")
        outs.append(path)
    write_manifest(cfg.out_dir, "gen-data", cfg, outputs=outs)


def cmd_pretrain(args, cfg):
    stack, result, accuracy = P.pretrain_encoders(cfg, log)
    path = os.path.join(cfg.out_dir, ENCODER_FILE)
    save_checkpoint(P.encoder_checkpoint(cfg, stack), path)
    curve = os.path.join(cfg.out_dir, "pretrain.csv")
    write_text(curve, "step,loss\n" + "".join(f"{s},{l:.6f}\n" for s, l in result.curve))
    log(f"held-out caption retrieval {accuracy:.4f}")
    write_manifest(cfg.out_dir, "pretrain-encoders", cfg, outputs=[path, curve])


def cmd_train(args, cfg):
    stack, enc_path = load_encoders(args, cfg)
    train, test, data_inputs = load_splits(args, cfg)
    result = P.train_two_stage(cfg, train, test, stack, log)
    ckpt = os.path.join(cfg.out_dir, MODEL_FILE)
    save_checkpoint(result.checkpoint, ckpt)
    metrics = os.path.join(cfg.out_dir, "metrics.csv")
    write_text(metrics, result.metrics_csv())
    log(f"final accuracy {json.dumps(result.final.as_dict())}")
    write_manifest(cfg.out_dir, "train", cfg, inputs=[enc_path, *data_inputs], outputs=[ckpt, metrics])


def _eval_rows(ev):
    return [("ambiguous", ev.acc_ambiguous, ev.counts["ambiguous"]),
            ("unambiguous", ev.acc_unambiguous, ev.counts["unambiguous"]),
            ("all", ev.acc_all, ev.counts["all"])]


def cmd_eval(args, cfg):
    path = require(args.checkpoint or os.path.join(cfg.out_dir, MODEL_FILE))
    _, test_path = data_paths(args, cfg)
    ev = P.evaluate(load_checkpoint(path), W.read_dataset(test_path))
    out = os.path.join(cfg.out_dir, "eval.csv")
    write_text(out, "split,accuracy,count\n" + "".join(f"{s},{a:.6f},{n}\n" for s, a, n in _eval_rows(ev)))
    conf = os.path.join(cfg.out_dir, "confusion.csv")
    header = "answer," + ",".join(W.class_name(j) for j in range(W.NUM_CLASSES))
    body = "".join(W.class_name(i) + "," + ",".join(str(c) for c in row) + "\n" for i, row in enumerate(ev.confusion))
    write_text(conf, header + "\n" + body)
    log(f"accuracy {json.dumps(ev.as_dict())}")
    write_manifest(cfg.out_dir, "eval", cfg, inputs=[path, test_path], outputs=[out, conf])


def cmd_analyze(args, cfg):
    path = require(args.checkpoint or os.path.join(cfg.out_dir, MODEL_FILE))
    model = P.model_from_checkpoint(load_checkpoint(path))
    inputs = [path]
    if args.which == "weights":
        report = An.attribution_report(model.adapter)
        log(f"visual mean {report.visual_mean:.4f} text mean {report.text_mean:.4f}")
    elif args.which == "mi":
        _, test_path = data_paths(args, cfg)
        inputs.append(test_path)
        baseline = P.build_model(cfg.replace(adapter="none"), model.stack)
        report = An.mi_comparison(model, baseline, W.read_dataset(test_path).samples, cfg.mi_k, cfg.seed)
        log(f"mi adapted {report.adapted.value:.4f} raw {report.raw.value:.4f} ratio {report.ratio:.3f}")
    else:
        pairs = W.make_confusable_pairs(cfg.n_pairs, rngmod.stream(cfg.seed, "confusable-pairs"), cfg.world())
        report = An.distance_shift(model, pairs)
        log(f"mean l2 before {report.mean_pre:.4f} after {report.mean_post:.4f}")
    outs = An.emit_report([report], cfg.out_dir)
    write_manifest(cfg.out_dir, f"analyze {args.which}", cfg, inputs=inputs, outputs=outs)


def cmd_ablate(args, cfg):
    stack, enc_path = load_encoders(args, cfg)
    train, test, data_inputs = load_splits(args, cfg)
    if args.which == "adapter":
        variants = [("adapter", kind, cfg.replace(adapter=kind)) for kind in ("none", "linear", "cross_attention")]
    else:
        variants = [("layer_tap", tap, cfg.replace(layer_tap=tap)) for tap in ("final", "penultimate")]
    results = []
    for _, label, vcfg in variants:
        log(f"variant {label}")
        results.append((label, P.train_two_stage(vcfg, train, test, stack, log).final))
    if args.which == "adapter":
        out = os.path.join(cfg.out_dir, "ablation_adapter.csv")
        text = "adapter,acc_ambiguous,acc_unambiguous,acc_all\n" + "".join(
            f"{label},{ev.acc_ambiguous:.6f},{ev.acc_unambiguous:.6f},{ev.acc_all:.6f}\n" for label, ev in results
        )
    else:
        out = os.path.join(cfg.out_dir, "ablation_layer_tap.csv")
        text = "axis," + ",".join(label for label, _ in results) + "\n" + "".join(
            f"{axis}," + ",".join(f"{v:.6f}" for v in values) + "\n" for axis, values in radar_axes([ev for _, ev in results])
        )
    write_text(out, text)
    write_manifest(cfg.out_dir, f"ablate {args.which}", cfg, inputs=[enc_path, *data_inputs], outputs=[out])


def radar_axes(evals):
    """Split accuracies followed by per-answer-class recall, one row per axis."""
    rows = [(split, [getattr(ev, f"acc_{split}") for ev in evals]) for split in ("ambiguous", "unambiguous", "all")]
    for c in range(W.NUM_CLASSES):
        recall = []
        for ev in evals:
            total = ev.confusion[c].sum()
            recall.append(ev.confusion[c, c] / total if total else 0.0)
        rows.append((f"class_{W.class_name(c)}", recall))
    return rows


def cmd_gradcheck(args, cfg):
    from .gradcheck import check_ops, check_pipeline

    errors = check_ops(cfg.seed)
    errors["pipeline"] = check_pipeline(cfg.seed)
    width = max(map(len, errors))
    for name, err in errors.items():
        log(f"{name:<{width}}  {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    out = os.path.join(cfg.out_dir, "gradcheck.csv")
    write_text(out, "op,max_rel_error\n" + "".join(f"{k},{v:.6e}\n" for k, v in errors.items()))
    write_manifest(cfg.out_dir, "gradcheck", cfg, outputs=[out])
    return 0 if all(err < TOLERANCE for err in errors.values()) else 1


# ----------------------------------------------------------------------- main


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", metavar="PATH")
    common.add_argument("--adapter", choices=("none", "linear", "xattn", "cross_attention"))
    common.add_argument("--layer-tap", choices=("final", "penultimate"))
    common.add_argument("--checkpoint", metavar="PATH")
    common.add_argument("--data", metavar="PATH", help="directory holding the train and test dataset files")

    parser = _Parser(prog="emma", description="Instruction-aware visual token adaptation on a synthetic world.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write train and test dataset files").set_defaults(func=cmd_gen_data)
    sub.add_parser("pretrain-encoders", parents=[common], help="contrastively pretrain the encoders").set_defaults(func=cmd_pretrain)
    sub.add_parser("train", parents=[common], help="two-stage adapter training").set_defaults(func=cmd_train)
    sub.add_parser("eval", parents=[common], help="accuracy of a model checkpoint").set_defaults(func=cmd_eval)
    p = sub.add_parser("analyze", parents=[common], help="attribution, MI or distance-shift report")
    p.add_argument("which", choices=("weights", "mi", "distances"))
    p.set_defaults(func=cmd_analyze)
    p = sub.add_parser("ablate", parents=[common], help="train and compare variants")
    p.add_argument("which", choices=("layer-tap", "adapter"))
    p.set_defaults(func=cmd_ablate)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op").set_defaults(func=cmd_gradcheck)
    return parser


def fail(exc, code):
    print(f"error kind={type(exc).__name__} exit={code} msg={json.dumps(str(exc))}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
        code = args.func(args, cfg)
        return code or 0
    except (UsageError, MissingPrerequisite) + USAGE_ERRORS as exc:
        return fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - every failure must map to an exit code
        return fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
