"""Command-line entry point: ``sefenet {synth,preprocess,train,loso,audit,stats}``.

Configuration files are flat ``section.key = value`` lines (``#`` starts a
comment). Sections: ``synth``, ``preprocess``, ``train``, ``loso`` and
``hparams.<backbone>``. Values are Python literals; anything else is a string.
Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import ast
import dataclasses
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .dataset import (
    EpochSet,
    LeakageError,
    RecordingFormatError,
    SynthConfig,
    make_loso_folds,
    read_recording,
    synth_generate,
    write_recording,
)
from .decoders import BACKBONES, ArchitectureConfig, audit_parameters, parse_model_label
from .nn import ShapeError
from .preprocessing import PreprocessConfig, preprocess_recording
from .stats import Sample, compare_models, reproduce_paper_stats
from .training import LosoReport, TrainConfig, TrainingDivergedError, _run_fold, run_loso, summarize_models

ALL_MODELS = tuple(f"{b}_{v}" for b in BACKBONES for v in ("nosefe", "sefe"))
LOSO_DEFAULTS = {"models": ",".join(ALL_MODELS), "repetitions": 4, "jobs": 1}
SECTIONS = {
    "synth": SynthConfig,
    "preprocess": PreprocessConfig,
    "train": TrainConfig,
}

EXIT_CODES = {"usage": 2, "config": 2, "io": 3, "format": 3, "data": 4, "leakage": 5,
              "training": 6, "statistics": 7, "internal": 70}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- config

def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str) -> dict[str, dict]:
    """``section.key = value`` lines into ``{section: {key: value}}``."""
    out: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().rpartition(".")
        if not sep or not dot or not section or not name:
            raise CliError("config", f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        out.setdefault(section, {})[name] = _literal(value.strip())
    return out


def _section(config, name, cls, **overrides):
    values = dict(config.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError("config", f"unknown {name} keys {unknown}; known: {sorted(known)}")
    if "class_freqs_hz" in values:
        values["class_freqs_hz"] = tuple(values["class_freqs_hz"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"[{name}] {exc}") from exc


def _hparams(config, backbone):
    hp = dict(config.get(f"hparams.{backbone}", {}))
    return {k: tuple(v) if isinstance(v, list) else v for k, v in hp.items()}


def _models(text):
    labels = [m.strip() for m in text.split(",") if m.strip()]
    for m in labels:
        if m not in ALL_MODELS:
            raise CliError("config", f"unknown model {m!r}; choose from {','.join(ALL_MODELS)}")
    return labels


def _defaults_help() -> str:
    lines = ["config keys and defaults:"]
    for name, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            lines.append(f"  {name}.{f.name} = {f.default!r}")
    for k, v in LOSO_DEFAULTS.items():
        lines.append(f"  loso.{k} = {v!r}")
    lines.append("  hparams.<backbone>.<name> = backbone defaults (see decoders.DEFAULT_HPARAMS)")
    return "\n".join(lines)


# ---------------------------------------------------------------- output

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _manifest(command: str, seed, config: dict, extra: dict | None = None) -> str:
    lines = ["[run]", f"command = {command}", f"version = {__version__}",
             f"seed = {seed if seed is not None else 'none'}"]
    for section in sorted(config):
        lines += ["", f"[{section}]"]
        lines += [f"{k} = {v!r}" for k, v in sorted(config[section].items())]
    if extra:
        lines += ["", "[outputs]"] + [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


def _config_dict(obj) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items()}


def _require_dir(path, what):
    if path is None:
        raise CliError("usage", f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise CliError("io", f"{what} {p} is not a directory")
    return p


def _load_epochs(directory: Path) -> dict[str, EpochSet]:
    files = sorted(directory.glob("*.npz"))
    if not files:
        raise CliError("io", f"no epoch files (*.npz) in {directory}")
    data = {}
    for f in files:
        try:
            es = EpochSet.load(f)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError("format", f"{f}: {exc}") from exc
        data[f.stem] = es
    return data


# ---------------------------------------------------------------- commands

def cmd_synth(args, config):
    cfg = _section(config, "synth", SynthConfig, seed=args.seed)
    out = Path(args.out or "recordings")
    recordings = synth_generate(cfg)
    try:
        for rec in recordings:
            write_recording(rec, out / rec.subject_id)
            print(f"{rec.subject_id}: {len(rec.events)} trials, {rec.signal.n_channels} channels, "
                  f"{rec.signal.n_samples} samples")
        _atomic_write(out / "manifest.txt",
                      _manifest("synth", cfg.seed, {"synth": _config_dict(cfg)},
                                {"subjects": len(recordings)}))
    except OSError as exc:
        raise CliError("io", f"cannot write under {out}: {exc}") from exc


def cmd_preprocess(args, config):
    cfg = _section(config, "preprocess", PreprocessConfig)
    src = _require_dir(args.input, "--in")
    out = Path(args.out or "epochs")
    subject_dirs = sorted(p for p in src.iterdir() if (p / "header.json").exists())
    if not subject_dirs:
        raise CliError("io", f"no recordings (subdirectories with header.json) in {src}")
    for d in subject_dirs:
        try:
            es = preprocess_recording(read_recording(d), cfg)
        except RecordingFormatError as exc:
            raise CliError("format", f"{d}: {exc}") from exc
        except ValueError as exc:
            raise CliError("data", f"{d}: {exc}") from exc
        es.save(out / f"{es.subjects[0]}.npz")
        print(f"{es.subjects[0]}: epochs {len(es)} x {es.n_channels} x {es.n_samples}")
    _atomic_write(out / "manifest.txt",
                  _manifest("preprocess", None, {"preprocess": _config_dict(cfg)},
                            {"input": src, "subjects": len(subject_dirs)}))


def _arch(label, data, config):
    backbone, sefe = parse_model_label(label)
    first = next(iter(data.values()))
    return ArchitectureConfig(backbone, first.n_channels, first.n_samples, 3, sefe,
                              _hparams(config, backbone))


def cmd_train(args, config):
    """Train one model on one LOSO fold (first repetition) and report its test accuracy."""
    cfg = _section(config, "train", TrainConfig, seed=args.seed)
    data = _load_epochs(_require_dir(args.input, "--in"))
    if len(data) < 2:
        raise CliError("data", f"training needs at least 2 subjects, got {len(data)}")
    models = _models(args.models or "eegnet_sefe")
    plan = make_loso_folds(list(data), cfg.seed)
    test = args.test_subject or plan.folds[0].test_subject
    fold = next((f for f in plan if f.test_subject == test), None)
    if fold is None:
        raise CliError("data", f"unknown test subject {test!r}; have {sorted(data)}")
    rows = ["model,test_subject,test_accuracy,best_epoch,epochs_run"]
    for label in models:
        res = _run_fold(_arch(label, data, config), data, fold, 0, cfg)
        rows.append(f"{label},{test},{res.test_accuracy!r},{res.best_epoch},{len(res.history)}")
        print(f"{label}: test subject {test} accuracy {res.test_accuracy:.4f} "
              f"(best epoch {res.best_epoch})")
    out = Path(args.out or "train")
    _atomic_write(out / "train.csv", "\n".join(rows) + "\n")
    _atomic_write(out / "manifest.txt",
                  _manifest("train", cfg.seed, {"train": _config_dict(cfg)},
                            {"models": ",".join(models), "test_subject": test}))


def cmd_loso(args, config):
    cfg = _section(config, "train", TrainConfig, seed=args.seed)
    loso = {**LOSO_DEFAULTS, **config.get("loso", {})}
    unknown = sorted(set(loso) - set(LOSO_DEFAULTS))
    if unknown:
        raise CliError("config", f"unknown loso keys {unknown}")
    models = _models(args.models or str(loso["models"]))
    n_jobs = args.jobs if args.jobs is not None else int(loso["jobs"])
    data = _load_epochs(_require_dir(args.input, "--in"))
    if len(data) < 2:
        raise CliError("data", f"LOSO needs at least 2 subjects, got {len(data)}")
    loso.update(models=",".join(models), jobs=n_jobs)
    out = Path(args.out or "reports")
    reports = []
    for label in models:
        report, _ = run_loso(_arch(label, data, config), data, cfg, int(loso["repetitions"]), n_jobs)
        _atomic_write(out / f"{label}.csv", report.to_csv())
        _atomic_write(out / f"{label}.txt", report.to_text())
        reports.append(report)
        print(f"{label}: grand average {report.grand_mean:.4f} (std {report.grand_std:.4f})")
    summary = ["model,grand_mean,grand_std,normalized"]
    summary += [f"{s.model},{s.mean!r},{s.std!r},{s.normalized!r}" for s in summarize_models(reports)]
    _atomic_write(out / "summary.csv", "\n".join(summary) + "\n")
    _atomic_write(out / "manifest.txt",
                  _manifest("loso", cfg.seed, {"train": _config_dict(cfg), "loso": loso},
                            {"models": ",".join(models), "input": args.input}))


def cmd_audit(args, config):
    rows = ["model,total,table_iv,relative_deviation,sefe_delta,closed_form_delta,feature_map"]
    print(f"{'model':<16}{'computed':>10}{'Table IV':>10}{'deviation':>11}")
    for backbone in BACKBONES:
        rep = audit_parameters(ArchitectureConfig(backbone, hparams=_hparams(config, backbone)))
        for row in rep.rows():
            print(f"{row.model:<16}{row.total:>10,}{row.reference:>10,}{row.deviation:>+11.2%}")
            rows.append(f"{row.model},{row.total},{row.reference},{row.deviation!r},{rep.delta},"
                        f"{rep.closed_form_delta},{rep.feature_map[0]}x{rep.feature_map[1]}")
        if rep.delta != rep.closed_form_delta:
            raise CliError("internal", f"{backbone}: SEFE delta {rep.delta} != closed form "
                                       f"{rep.closed_form_delta}")
    if args.out:
        _atomic_write(Path(args.out) / "audit.csv", "\n".join(rows) + "\n")


def cmd_stats(args, config):
    if args.input is None:
        report = reproduce_paper_stats()
    else:
        src = _require_dir(args.input, "--in")
        pairs = []
        for backbone in BACKBONES:
            paths = [src / f"{backbone}_{v}.csv" for v in ("nosefe", "sefe")]
            if not all(p.exists() for p in paths):
                continue
            try:
                a, b = (LosoReport.from_csv(p.read_text(), p.stem) for p in paths)
            except ValueError as exc:
                raise CliError("format", f"{src}/{backbone}_*.csv: {exc}") from exc
            pairs.append((backbone, Sample(a.subject_averages(), a.model),
                          Sample(b.subject_averages(), b.model)))
        if not pairs:
            raise CliError("io", f"no <backbone>_nosefe.csv / <backbone>_sefe.csv pairs in {src}")
        try:
            report = compare_models(pairs, k=len(pairs))
        except ValueError as exc:
            if "zero standard deviation" in str(exc):
                raise CliError("statistics", f"{exc}; the paired reports have identical or constantly "
                                             "shifted per-subject averages, check that --in holds "
                                             "reports from different model variants") from exc
            raise
    text = report.to_text()
    print(text, end="")
    if args.out:
        _atomic_write(Path(args.out) / "stat_report.txt", text)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "loso": cmd_loso,
    "audit": cmd_audit,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sefenet", description=__doc__.splitlines()[0],
        epilog=_defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate synthetic subject recordings",
        "preprocess": "filter, decimate and epoch recordings",
        "train": "train model(s) on a single LOSO fold",
        "loso": "leave-one-subject-out evaluation with repetitions",
        "audit": "parameter counts beside the published references",
        "stats": "assumption checks and corrected paired t-tests",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, epilog=_defaults_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat 'section.key = value' config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--in", dest="input", help="input directory")
        p.add_argument("--models", help=f"comma list from {','.join(ALL_MODELS)}")
        p.add_argument("--jobs", type=int, help="parallel folds for loso (default 1)")
        if name == "train":
            p.add_argument("--test-subject", help="held-out subject (default: first fold)")
    return parser


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, LeakageError):
        return "leakage"
    if isinstance(exc, RecordingFormatError):
        return "format"
    if isinstance(exc, TrainingDivergedError):
        return "training"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (ValueError, ShapeError)):
        return "data"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = {}
        if args.config:
            try:
                config = parse_config(Path(args.config).read_text())
            except OSError as exc:
                raise CliError("io", f"cannot read config {args.config}: {exc}") from exc
        COMMANDS[args.command](args, config)
    except CliError as exc:
        print(f"error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except Exception as exc:  # noqa: BLE001 - every failure maps to one error line
        category = _categorize(exc)
        print(f"error: {category}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CODES[category]
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
