"""Command-line entry point: ``msnn gen | label | train | sweep-na | report``.

All files live under ``--out``. Settings resolve as built-in defaults, then
the JSON ``--config`` file, then flags given on the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import NonFiniteError, ShapeError
from .cohort import (
    CohortError, CohortSplit, eligibility_filter, generate_cohort, label_subjects, read_cohort,
    stratified_split, write_cohort,
)
from .harness import (
    MODELS, PRESETS, RunConfig, VolumeStore, load_experiment, run_na_sweep, run_train,
    save_experiment, synthetic_volume,
)
from .metrics import MetricsError
from .model import CheckpointError, SpecError
from .report import ReportError, record_experiment, run_report
from .volume import VolumeFormatError, write_volume

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("msnn")

DEFAULTS = {
    "seed": 0, "out": "out", "preset": "tiny", "separation": 1.0,
    "model": "multi", "epochs": 75, "folds": 4, "lr": None, "batch_size": 4,
    "na_repeats": 20, "augment": True, "refit": False,
    "na": "0,0.125,0.25,0.375",
}


class ConfigError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--config", help="JSON file with default settings")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--model", choices=MODELS)
    training.add_argument("--folds", type=int)
    training.add_argument("--na-repeats", type=int, dest="na_repeats")

    p = argparse.ArgumentParser(prog="msnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", parents=[common], help="synthetic cohort and volumes")
    gen.add_argument("--separation", type=float)
    sub.add_parser("label", parents=[common, training], help="filter, cluster and split")
    train = sub.add_parser("train", parents=[common, training], help="cross-validated training")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int, dest="batch_size")
    train.add_argument("--no-augment", action="store_false", dest="augment", default=None)
    train.add_argument("--refit", action="store_true", default=None)
    sweep = sub.add_parser("sweep-na", parents=[common, training], help="test-time NA sweep")
    sweep.add_argument("--na")
    sweep.add_argument("--refit", action="store_true", default=None)
    sub.add_parser("report", parents=[common], help="Kruskal-Wallis table and ROC figure")
    return p


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        settings.update(loaded)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            settings[key] = value
    if settings["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {settings['preset']!r}")
    if settings["model"] not in MODELS:
        raise ConfigError(f"unknown model {settings['model']!r}")
    return settings


def run_config(s: dict) -> RunConfig:
    try:
        return RunConfig(model=s["model"], epochs=int(s["epochs"]), folds=int(s["folds"]),
                         seed=int(s["seed"]), lr=s["lr"], batch_size=int(s["batch_size"]),
                         preset=s["preset"], augment=bool(s["augment"]),
                         na_repeats=int(s["na_repeats"]), refit=bool(s["refit"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_fractions(text: str) -> list[float]:
    try:
        fractions = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --na list {text!r}") from exc
    if not fractions or any(not 0.0 <= f < 1.0 for f in fractions):
        raise ConfigError(f"NA fractions must lie in [0, 1): {text!r}")
    return fractions


def _load_labeled(out: Path, folds: int):
    subjects = read_cohort(out / "cohort.csv")
    if any(s.label is None for s in subjects):
        raise CohortError("cohort.csv is not labeled; run `msnn label` first")
    split = CohortSplit.from_json((out / "split.json").read_text())
    if len(split.folds) != folds:
        raise ConfigError(f"split.json has {len(split.folds)} folds, --folds is {folds}")
    return subjects, split


def cmd_gen(s: dict) -> None:
    out, preset = Path(s["out"]), PRESETS[s["preset"]]
    sep = float(s["separation"])
    if not 0.0 < sep <= 1.0:
        raise ConfigError(f"separation must be in (0, 1], got {sep}")
    subjects = generate_cohort(preset.n_stable, preset.n_decline, sep, int(s["seed"]))
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    write_cohort(subjects, out / "cohort.csv")
    n = 0
    for subj in subjects:
        for v in subj.visits:
            if v.volume_ref:
                vol = synthetic_volume(subj, v.months_from_baseline, preset.dims, int(s["seed"]))
                write_volume(vol, out / "volumes" / f"{v.volume_ref}.rvol")
                n += 1
    print(f"wrote {len(subjects)} subjects and {n} volumes to {out}")


def cmd_label(s: dict) -> None:
    out, preset = Path(s["out"]), PRESETS[s["preset"]]
    subjects = eligibility_filter(read_cohort(out / "cohort.csv"))
    labeled = label_subjects(subjects)
    split = stratified_split(labeled, preset.n_test, int(s["folds"]), int(s["seed"]))
    write_cohort(labeled, out / "cohort.csv")
    (out / "split.json").write_text(split.to_json())
    counts = {c: sum(x.label == c for x in labeled) for c in ("Stable", "Decline")}
    print(f"labeled {len(labeled)} subjects {counts}; "
          f"{len(split.train_ids(-1))} train / {len(split.test)} test")


def cmd_train(s: dict) -> None:
    out = Path(s["out"])
    config = run_config(s)
    subjects, split = _load_labeled(out, config.folds)
    store = VolumeStore(out / "volumes", cache=None)
    exp = run_train(config, subjects, split, store)
    save_experiment(exp, out / "checkpoints")
    record_experiment(exp, out)
    print(f"{config.model}: test AUC {exp.reports[0.0].auc:.4f}")


def cmd_sweep(s: dict) -> None:
    out = Path(s["out"])
    config = run_config(s)
    fractions = parse_fractions(s["na"])
    subjects, split = _load_labeled(out, config.folds)
    exp = load_experiment(config, subjects, split, out / "checkpoints",
                          VolumeStore(out / "volumes"))
    for r in run_na_sweep(exp, fractions):
        print(f"{config.model} NA {r.na_fraction:.3f}: AUC {r.auc:.4f}")
    record_experiment(exp, out)


def cmd_report(s: dict) -> None:
    result = run_report(s["out"])
    for row in result["kruskal"]:
        print(f"{row['group_a']} vs {row['group_b']} NA {row['na_fraction']}: "
              f"H={row['H']} p={row['p']}")
    print(f"wrote {Path(s['out']) / 'roc.svg'}")


COMMANDS = {"gen": cmd_gen, "label": cmd_label, "train": cmd_train, "sweep-na": cmd_sweep,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        COMMANDS[args.command](settings)
    except (ConfigError, SpecError) as exc:
        print(f"msnn: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CohortError, VolumeFormatError, CheckpointError, ReportError, MetricsError,
            ShapeError, NonFiniteError, OSError, KeyError) as exc:
        print(f"msnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
