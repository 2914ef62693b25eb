"""Command-line pipeline: ``weakmil gen | train | infer | eval | gradcheck``.

Every command takes its parameters from three layers, later ones winning:
built-in defaults, an optional ``--config`` JSON object, then explicit flags.
The effective parameters are echoed to stderr as one JSON line before work
starts. Exit status is 0 on success, 1 for invalid usage or configuration
(and for a failed gradient check), 2 for I/O and parse failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import fields

from . import __version__, backend
from .datagen import SCENARIOS, ScenarioConfig, dumps_dataset, generate, read_dataset
from .errors import ConfigError, ParseError, WeakMILError
from .evalkit import evaluate
from .milhead import Variant, head_linear_forward, infer, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, gradcheck, train

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2

VARIANTS = [v.value for v in Variant]


class UsageError(Exception):
    """Raised instead of exiting so :func:`main` controls the exit status."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# parameter declarations


def _bool(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _dataclass_params(cls, skip=()):
    """``(name, type, default, help)`` for each dataclass field."""
    out = []
    for f in fields(cls):
        if f.name in skip:
            continue
        out.append((f.name, type(f.default), f.default, None))
    return out


_HELP = {
    "variant": f"MIL head variant, one of {', '.join(VARIANTS)}",
    "lam": "weight of the objectness regularizer (Base and Sparse only)",
    "lr_head": "learning rate of the head",
    "weight_decay": "decoupled weight decay",
    "n_proposals": "proposals per image",
    "objectness_frozen": "use the dataset objectness logits instead of a trained objectness layer",
    "axis_convention": "prose: classes across a row; notation: transposed",
    "scenario": f"named scenario preset, one of {', '.join(sorted(SCENARIOS))}",
    "trials": "random instances per variant",
    "max_dets": "detections kept per image and class",
    "class_agnostic": "ignore class labels when matching",
}

_PATHS = {
    "gen": [("train_out", "training split output (JSON-lines)"), ("test_out", "test split output (JSON-lines)")],
    "train": [
        ("data", "training dataset"),
        ("checkpoint", "checkpoint output (JSON)"),
        ("log", "training log output (JSON-lines)"),
    ],
    "infer": [("checkpoint", "trained checkpoint"), ("data", "dataset to score"), ("out", "detections output")],
    "eval": [("detections", "detections file"), ("data", "dataset with ground truth"), ("out", "report output")],
    "gradcheck": [("out", "optional report output; the report is always printed")],
}


def _command_params(command):
    """Declared ``(name, type, default, help)`` tuples for a subcommand."""
    if command == "gen":
        params = [("scenario", str, "adversarial", None)] + _dataclass_params(ScenarioConfig)
    elif command == "train":
        params = _dataclass_params(TrainConfig)
    elif command == "infer":
        params = []
    elif command == "eval":
        params = [("max_dets", int, 100, None), ("class_agnostic", bool, False, None)]
    elif command == "gradcheck":
        params = [
            ("variant", str, "all", None),
            ("trials", int, 200, None),
            ("seed", int, 0, None),
            ("lam", float, 1000.0, None),
            ("objectness_frozen", bool, True, None),
            ("axis_convention", str, "prose", None),
        ]
    else:  # pragma: no cover - guarded by argparse choices
        raise ValueError(command)
    params += [(name, str, None, text) for name, text in _PATHS[command]]
    return params


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    parser = _Parser(prog="weakmil", description="Weakly supervised MIL detection heads on synthetic proposals.")
    parser.add_argument("--version", action="version", version=f"weakmil {__version__} ({backend} kernels)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    summaries = {
        "gen": "generate a synthetic train/test dataset pair",
        "train": "train a head on a dataset",
        "infer": "score every proposal of a dataset with a checkpoint",
        "eval": "evaluate detections against dataset ground truth",
        "gradcheck": "compare analytic and finite-difference gradients",
    }
    for command, summary in summaries.items():
        p = sub.add_parser(command, help=summary, description=summary)
        p.add_argument("--config", help="JSON object of parameter values; flags override it (default: none)")
        for name, kind, default, text in _command_params(command):
            text = text or _HELP.get(name, name.replace("_", " "))
            shown = "none" if default is None else json.dumps(default)
            if name == "variant" and command == "gradcheck":
                text = f"variant to check, one of all, {', '.join(VARIANTS)}"
            converter = _bool if kind is bool else kind
            p.add_argument(
                _flag(name),
                dest=name,
                type=converter,
                default=argparse.SUPPRESS,
                metavar=name.upper() if kind is not bool else "BOOL",
                help=f"{text} (default: {shown})",
            )
    return parser


def _resolve(command, args):
    """Merge defaults, the config file and explicit flags into one dict."""
    declared = _command_params(command)
    names = [name for name, *_ in declared]
    effective = {name: default for name, _, default, _ in declared}
    given = set()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ParseError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(doc) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        for name, kind, _, _ in declared:
            if name in doc:
                effective[name] = _coerce(name, kind, doc[name])
                given.add(name)
    for name in names:
        if hasattr(args, name):
            effective[name] = getattr(args, name)
            given.add(name)
    if command == "gen":
        # a preset replaces defaults but never a value the user set
        if effective["scenario"] not in SCENARIOS:
            raise ConfigError(f"unknown scenario {effective['scenario']!r}; choose from {sorted(SCENARIOS)}")
        for name, value in SCENARIOS[effective["scenario"]].items():
            if name not in given:
                effective[name] = value
    missing = [n for n, _ in _PATHS[command] if effective[n] is None and command != "gradcheck"]
    if missing:
        raise ConfigError(f"missing required paths: {', '.join(_flag(n) for n in missing)}")
    return effective


def _coerce(name, kind, value):
    if value is None:
        return None
    try:
        if kind is bool:
            return _bool(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigError(f"config value for {name!r} has the wrong type: {value!r}") from exc


def _echo(command, effective):
    sys.stderr.write(f"weakmil {command}: " + json.dumps(effective, sort_keys=True) + "\n")


def _pick(effective, cls):
    return {f.name: effective[f.name] for f in fields(cls) if f.name in effective}


# ---------------------------------------------------------------------------
# output helpers


def _write_text(path, text):
    """Atomic write: a sibling temp file is renamed over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".weakmil-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_detections(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                image_id = doc["image_id"]
                dets = [
                    {"box": [float(v) for v in d["box"]], "class": int(d["class"]), "confidence": float(d["confidence"])}
                    for d in doc["detections"]
                ]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed detections record: {exc}", lineno) from exc
            if image_id in out:
                raise ParseError(f"duplicate image_id {image_id!r}", lineno)
            out[image_id] = dets
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(p):
    config = ScenarioConfig(**_pick(p, ScenarioConfig))
    train_set, test_set = generate(config)
    _write_text(p["train_out"], dumps_dataset(train_set))
    _write_text(p["test_out"], dumps_dataset(test_set))
    sys.stderr.write(f"wrote {len(train_set)} training and {len(test_set)} test images\n")


def cmd_train(p):
    config = TrainConfig(**_pick(p, TrainConfig))
    dataset = read_dataset(p["data"])
    result = train(dataset, config)
    save_checkpoint(p["checkpoint"], result.params, result.variant)
    _write_text(p["log"], "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.log))
    if result.log:
        sys.stderr.write(f"final mean loss {result.log[-1]['mean_loss']:.6g}\n")


def cmd_infer(p):
    params, variant = load_checkpoint(p["checkpoint"])
    dataset = read_dataset(p["data"])
    lines = []
    for sample in dataset:
        logits = head_linear_forward(sample.features, params, sample.objectness)
        dets = infer(variant, logits, sample.boxes)
        record = {
            "image_id": sample.image_id,
            "detections": [{"box": list(d.box), "class": d.class_index, "confidence": d.confidence} for d in dets],
        }
        lines.append(json.dumps(record) + "\n")
    _write_text(p["out"], "".join(lines))


def cmd_eval(p):
    detections = _read_detections(p["detections"])
    dataset = read_dataset(p["data"])
    ground_truths = {s.image_id: list(s.gt) for s in dataset}
    unknown = sorted(set(detections) - set(ground_truths), key=str)
    if unknown:
        raise ParseError(f"detections reference unknown image_id {', '.join(map(str, unknown))}")
    report = evaluate(detections, ground_truths, max_dets=p["max_dets"], class_agnostic=p["class_agnostic"])
    _write_text(p["out"], report.to_json())
    sys.stdout.write(f"mAP {report.map:.4f}  AP50 {report.ap50:.4f}  mAR {report.mar:.4f}\n")


def cmd_gradcheck(p):
    if p["variant"] != "all" and p["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {p['variant']!r}")
    variants = VARIANTS if p["variant"] == "all" else [p["variant"]]
    config = TrainConfig(
        variant=variants[0],
        lam=p["lam"],
        seed=p["seed"],
        objectness_frozen=p["objectness_frozen"],
        axis_convention=p["axis_convention"],
    )
    results = gradcheck(config, p["trials"], variants=variants)
    report = {
        "passed": all(r.passed for r in results),
        "tolerance": results[0].tol,
        "variants": {
            r.variant: {
                "passed": r.passed,
                "max_rel_error": r.max_rel_error,
                "trials": r.trials,
                "skipped": r.skipped,
                "failing_groups": r.failing_groups,
            }
            for r in results
        },
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if p["out"]:
        _write_text(p["out"], text)
    return EXIT_OK if report["passed"] else EXIT_INVALID


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run(argv=None):
    """Execute one command and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        effective = _resolve(args.command, args)
        _echo(args.command, effective)
        status = COMMANDS[args.command](effective)
        return EXIT_OK if status is None else status
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_INVALID
    except ParseError as exc:
        sys.stderr.write(f"weakmil: parse error: {exc}\n")
        return EXIT_IO
    except (ConfigError, WeakMILError, ValueError) as exc:
        sys.stderr.write(f"weakmil: invalid input: {exc}\n")
        return EXIT_INVALID
    except OSError as exc:
        sys.stderr.write(f"weakmil: I/O error: {exc}\n")
        return EXIT_IO


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":  # pragma: no cover
    main()
