"""Command-line driver: preprocess, train, evaluate, sweep, report.

Settings resolve as built-in defaults < ``--config`` file < command-line flags.
The config file holds ``key = value`` lines whose keys are the long flag names
(``batch-size = 500``); ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import __version__
from .agent import HyperParams, TrainingDiverged, TrainingHistory, predict, train
from .data import (
    ENCODINGS,
    UNKNOWN_POLICIES,
    EncodedDataset,
    NormalizationStats,
    ParseError,
    UnknownAttackError,
    UnknownCategoryError,
    class_tally,
    encode,
    fit_stats,
    load_snapshot,
    load_taxonomy,
    read_records,
    save_snapshot,
)
from .evaluation import build_confusion, compute_metrics, format_table
from .nn import Checkpoint, checkpoint_bytes, load_checkpoint

log = logging.getLogger("dqlids")

TRAIN_SNAPSHOT = "train.snapshot"
TEST_SNAPSHOT = "test.snapshot"
STATS_FILE = "stats.json"
CHECKPOINT = "checkpoint.bin"
LOSS_CSV = "history_loss.csv"
REWARD_CSV = "history_reward.csv"
TIMING_CSV = "timing.csv"
METRICS_JSON = "metrics.json"
CONFUSION_CSV = "confusion.csv"
SWEEP_CSV = "sweep.csv"
REPORT_TXT = "report.txt"


class CommandError(Exception):
    """A failure that should end the command with a message and exit code 1."""


@dataclass(frozen=True)
class RunConfig:
    train_file: str | None = None
    test_file: str | None = None
    taxonomy: str | None = None
    out: str = "runs/default"
    episodes: int = 200
    iterations: int = 100
    batch_size: int = 500
    gamma: float = 0.001
    epsilon: float = 0.9
    epsilon_decay: float = 0.99
    epsilon_floor: float = 0.01
    lr: float = 1e-3
    seed: int = 0
    encoding: str = "ordinal"
    unknown_category: str = "strict"
    shuffle: bool = False
    optimizer: str = "adam"
    reward_correct: float = 1.0
    reward_wrong: float = -1.0

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            num_episodes=self.episodes,
            num_iterations=self.iterations,
            batch_size=self.batch_size,
            epsilon_initial=self.epsilon,
            epsilon_decay=self.epsilon_decay,
            epsilon_floor=self.epsilon_floor,
            gamma=self.gamma,
            learning_rate=self.lr,
            seed=self.seed,
            reward_correct=self.reward_correct,
            reward_wrong=self.reward_wrong,
            optimizer=self.optimizer,
            shuffle=self.shuffle,
        )

    def echo(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name.replace('_', '-')} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CommandError(f"config {key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if "None" in kind:
        return raw or None
    return raw


def read_config_file(path: str) -> dict:
    values = {}
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise CommandError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError:
            raise CommandError(f"{path}:{lineno}: bad value {raw!r} for {key}") from None
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values)


# --- file helpers ---------------------------------------------------------

class Outputs:
    """Stage files next to their destination and publish them together."""

    def __init__(self, out: str):
        self.dir = Path(out)
        self.pending: list[tuple[Path, Path]] = []

    def path(self, name: str) -> Path:
        return self.dir / name

    def write(self, name: str, data: bytes | str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        final = self.dir / name
        tmp = final.with_name(final.name + ".partial")
        if isinstance(data, str):
            data = data.encode("utf-8")
        tmp.write_bytes(data)
        self.pending.append((tmp, final))

    def write_snapshot(self, name: str, dataset: EncodedDataset) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        final = self.dir / name
        tmp = final.with_name(final.name + ".partial")
        save_snapshot(dataset, tmp)
        self.pending.append((tmp, final))

    def commit(self) -> None:
        for tmp, final in self.pending:
            os.replace(tmp, final)
        self.pending.clear()

    def discard(self) -> None:
        for tmp, _ in self.pending:
            tmp.unlink(missing_ok=True)
        self.pending.clear()


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _load_raw(path: str, what: str):
    if not path:
        raise CommandError(f"no {what} file given")
    if not os.path.isfile(path):
        raise CommandError(f"{what} file not found: {path}")
    return read_records(path)


# --- pipeline steps -------------------------------------------------------

def preprocess_data(cfg: RunConfig, need_test: bool = False):
    """Parse and encode the raw files. Returns (train, test-or-None, tallies)."""
    taxonomy = load_taxonomy(cfg.taxonomy) if cfg.taxonomy else None
    train_records = _load_raw(cfg.train_file, "training")
    test_records = None
    if cfg.test_file or need_test:
        test_records = _load_raw(cfg.test_file, "test")
    if not train_records:
        raise CommandError(f"training file {cfg.train_file} has no records")
    stats = fit_stats(train_records)
    tallies = {"train": class_tally(train_records, taxonomy)}
    train_set = encode(train_records, stats, cfg.encoding, cfg.unknown_category, taxonomy)
    test_set = None
    if test_records is not None:
        tallies["test"] = class_tally(test_records, taxonomy)
        test_set = encode(test_records, stats, cfg.encoding, cfg.unknown_category, taxonomy)
    return train_set, test_set, tallies


def _print_tallies(tallies: dict) -> None:
    for split, counts in tallies.items():
        total = sum(counts.values())
        parts = ", ".join(f"{k} {v}" for k, v in counts.items())
        print(f"{split}: {total} records ({parts})")


def _training_outputs(outputs: Outputs, net, optimizer, rng, history: TrainingHistory, cfg: RunConfig, width: int):
    meta = {"hyperparams": asdict(cfg.hyperparams()), "encoding": cfg.encoding, "input_width": width}
    ckpt = Checkpoint(net, optimizer, rng.bit_generator.state if rng is not None else None, meta)
    outputs.write(CHECKPOINT, checkpoint_bytes(ckpt))
    outputs.write(LOSS_CSV, _csv(["episode", "iteration", "loss", "epsilon"],
                                 ([e, i, repr(l), repr(eps)] for e, i, l, eps in history.loss_rows())))
    outputs.write(REWARD_CSV, _csv(["episode", "cumulative_reward"],
                                   ([e, repr(r)] for e, r in enumerate(history.episode_reward))))
    outputs.write(TIMING_CSV, _csv(["episode", "wall_clock_seconds"],
                                   ([e, f"{t:.6f}"] for e, t in enumerate(history.wall_clock))))


def run_training(cfg: RunConfig, train_set: EncodedDataset, outputs: Outputs):
    hp = cfg.hyperparams()
    try:
        net, history, optimizer, rng = train(train_set, hp)
    except TrainingDiverged as exc:
        _training_outputs(outputs, exc.last_good, exc.optimizer, None, exc.history, cfg, train_set.width)
        outputs.commit()
        raise CommandError(f"training diverged: {exc}; last good checkpoint kept in {outputs.path(CHECKPOINT)}") from exc
    _training_outputs(outputs, net, optimizer, rng, history, cfg, train_set.width)
    return net, history


def run_evaluation(net, test_set: EncodedDataset, outputs: Outputs):
    if net.input_width != test_set.width:
        raise CommandError(
            f"checkpoint expects {net.input_width} input columns but the test data has {test_set.width} "
            f"(encoding {test_set.encoding!r}); re-run preprocess with the training encoding"
        )
    preds = predict(net, test_set)
    cm = build_confusion(preds, test_set.labels)
    report = compute_metrics(cm)
    outputs.write(METRICS_JSON, report.to_json())
    outputs.write(CONFUSION_CSV, cm.to_csv())
    return report


def _train_set(cfg: RunConfig, outputs: Outputs):
    if cfg.train_file:
        train_set, test_set, tallies = preprocess_data(cfg)
        _print_tallies(tallies)
        outputs.write_snapshot(TRAIN_SNAPSHOT, train_set)
        outputs.write(STATS_FILE, json.dumps(train_set.stats.to_dict(), indent=2, sort_keys=True) + "\n")
        if test_set is not None:
            outputs.write_snapshot(TEST_SNAPSHOT, test_set)
        return train_set, test_set
    snap = outputs.path(TRAIN_SNAPSHOT)
    if not snap.is_file():
        raise CommandError(f"no training data: pass --train-file or run preprocess into {outputs.dir}")
    test = outputs.path(TEST_SNAPSHOT)
    return load_snapshot(snap), (load_snapshot(test) if test.is_file() else None)


def _test_set(cfg: RunConfig, outputs: Outputs) -> EncodedDataset:
    if cfg.test_file:
        taxonomy = load_taxonomy(cfg.taxonomy) if cfg.taxonomy else None
        snap = outputs.path(TRAIN_SNAPSHOT)
        stats_path = outputs.path(STATS_FILE)
        if cfg.train_file:
            stats = fit_stats(_load_raw(cfg.train_file, "training"))
        elif snap.is_file():
            stats = load_snapshot(snap).stats
        elif stats_path.is_file():
            stats = NormalizationStats.from_dict(json.loads(stats_path.read_text("utf-8")))
        else:
            raise CommandError("test data needs training statistics: pass --train-file or run preprocess first")
        return encode(_load_raw(cfg.test_file, "test"), stats, cfg.encoding, cfg.unknown_category, taxonomy)
    snap = outputs.path(TEST_SNAPSHOT)
    if not snap.is_file():
        raise CommandError(f"no test data: pass --test-file or run preprocess into {outputs.dir}")
    return load_snapshot(snap)


# --- commands -------------------------------------------------------------

def cmd_preprocess(cfg: RunConfig, args) -> None:
    train_set, test_set, tallies = preprocess_data(cfg)
    outputs = Outputs(cfg.out)
    outputs.write_snapshot(TRAIN_SNAPSHOT, train_set)
    if test_set is not None:
        outputs.write_snapshot(TEST_SNAPSHOT, test_set)
    outputs.write(STATS_FILE, json.dumps(train_set.stats.to_dict(), indent=2, sort_keys=True) + "\n")
    outputs.write("resolved_config_preprocess.txt", cfg.echo())
    outputs.commit()
    _print_tallies(tallies)
    print(f"encoded {len(train_set)} x {train_set.width} training matrix into {outputs.dir}")


def cmd_train(cfg: RunConfig, args) -> None:
    outputs = Outputs(cfg.out)
    train_set, _ = _train_set(cfg, outputs)
    outputs.write("resolved_config_train.txt", cfg.echo())
    started = time.perf_counter()
    try:
        _, history = run_training(cfg, train_set, outputs)
    except CommandError:
        raise
    except Exception:
        outputs.discard()
        raise
    outputs.commit()
    elapsed = time.perf_counter() - started
    rewards = history.episode_reward
    print(f"trained {len(rewards)} episodes x {cfg.iterations} iterations in {elapsed:.1f}s")
    if rewards:
        print(f"final episode reward {rewards[-1]:.0f}, final loss {history.loss[-1]:.4f}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    outputs = Outputs(cfg.out)
    ckpt_path = args.checkpoint or outputs.path(CHECKPOINT)
    if not os.path.isfile(ckpt_path):
        raise CommandError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    test_set = _test_set(cfg, outputs)
    report = run_evaluation(ckpt.net, test_set, outputs)
    outputs.write("resolved_config_evaluate.txt", cfg.echo())
    outputs.commit()
    print(format_table(report))


def _parse_list(text: str, kind):
    try:
        items = [kind(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CommandError(f"cannot parse list {text!r}") from None
    if not items:
        raise CommandError("sweep lists must be non-empty")
    return items


SWEEP_HEADER = ["gamma", "episodes", "accuracy", "macro_precision", "macro_recall", "macro_f1",
                "macro_accuracy", "wall_clock_seconds", "error"]


def _sweep_one(cfg: RunConfig, train_set, test_set, gamma, episodes):
    run_cfg = replace(cfg, gamma=gamma, episodes=episodes, out=str(Path(cfg.out) / "sweep" / f"gamma-{gamma}_episodes-{episodes}"))
    outputs = Outputs(run_cfg.out)
    started = time.perf_counter()
    try:
        outputs.write("resolved_config_train.txt", run_cfg.echo())
        net, _ = run_training(run_cfg, train_set, outputs)
        report = run_evaluation(net, test_set, outputs)
        outputs.commit()
    except Exception as exc:  # recorded in the row; the sweep carries on
        outputs.discard()
        log.error("sweep run gamma=%s episodes=%s failed: %s", gamma, episodes, exc)
        return [gamma, episodes, "", "", "", "", "", f"{time.perf_counter() - started:.3f}", str(exc) or type(exc).__name__]
    return [gamma, episodes, repr(report.accuracy), repr(report.macro_precision), repr(report.macro_recall),
            repr(report.macro_f1), repr(report.macro_accuracy), f"{time.perf_counter() - started:.3f}", ""]


def cmd_sweep(cfg: RunConfig, args) -> None:
    gammas = _parse_list(args.gammas, float) if args.gammas else [cfg.gamma]
    episode_list = _parse_list(args.episode_list, int) if args.episode_list else [cfg.episodes]
    outputs = Outputs(cfg.out)
    train_set, test_set = _train_set(cfg, outputs)
    if test_set is None:
        test_set = _test_set(cfg, outputs)
    outputs.write("resolved_config_sweep.txt", cfg.echo())
    outputs.commit()
    combos = [(g, e) for g in gammas for e in episode_list]
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        rows = list(pool.map(lambda c: _sweep_one(cfg, train_set, test_set, *c), combos))
    outputs.write(SWEEP_CSV, _csv(SWEEP_HEADER, rows))
    outputs.commit()
    for row in rows:
        status = f"error: {row[-1]}" if row[-1] else f"accuracy {float(row[2]):.4f}, macro F1 {float(row[5]):.4f}"
        print(f"gamma {row[0]}, episodes {row[1]}: {status}")
    failed = sum(1 for row in rows if row[-1])
    if failed:
        raise CommandError(f"{failed} of {len(rows)} sweep runs failed (see {outputs.path(SWEEP_CSV)})")


def _mean(xs):
    return sum(xs) / len(xs)


def build_report(out: Path) -> str:
    sections = []
    metrics_path = out / METRICS_JSON
    if metrics_path.is_file():
        m = json.loads(metrics_path.read_text("utf-8"))
        lines = ["Per-class results",
                 f"{'class':<8}{'support':>9}{'TP':>8}{'FP':>8}{'FN':>8}{'TN':>8}"
                 f"{'precision':>11}{'recall':>9}{'f1':>9}{'accuracy':>10}"]
        for name, c in m["per_class"].items():
            note = "  low support" if c["low_support"] else ""
            lines.append(f"{name:<8}{c['support']:>9}{c['tp']:>8}{c['fp']:>8}{c['fn']:>8}{c['tn']:>8}"
                         f"{c['precision']:>11.4f}{c['recall']:>9.4f}{c['f1']:>9.4f}{c['accuracy']:>10.4f}{note}")
        mac = m["macro"]
        lines.append(f"macro precision {mac['precision']:.4f}  recall {mac['recall']:.4f}  "
                     f"f1 {mac['f1']:.4f}  accuracy {mac['accuracy']:.4f}")
        lines.append(f"overall accuracy {m['overall']['accuracy']:.4f} on {m['overall']['total']} records")
        sections.append("\n".join(lines))
    reward_path = out / REWARD_CSV
    if reward_path.is_file():
        with open(reward_path, newline="") as fh:
            rewards = [float(r["cumulative_reward"]) for r in csv.DictReader(fh)]
        if rewards:
            k = max(1, len(rewards) // 10)
            sections.append(f"Training: {len(rewards)} episodes; mean episode reward first 10% "
                            f"{_mean(rewards[:k]):.1f}, last 10% {_mean(rewards[-k:]):.1f}")
    sweep_path = out / SWEEP_CSV
    if sweep_path.is_file():
        with open(sweep_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        lines = ["Sweep", f"{'gamma':>8}{'episodes':>10}{'accuracy':>10}{'precision':>11}{'recall':>9}{'f1':>9}{'seconds':>10}"]
        for r in rows:
            if r["error"]:
                lines.append(f"{r['gamma']:>8}{r['episodes']:>10}  failed: {r['error']}")
                continue
            lines.append(f"{r['gamma']:>8}{r['episodes']:>10}{float(r['accuracy']):>10.4f}"
                         f"{float(r['macro_precision']):>11.4f}{float(r['macro_recall']):>9.4f}"
                         f"{float(r['macro_f1']):>9.4f}{float(r['wall_clock_seconds']):>10.1f}")
        sections.append("\n".join(lines))
    if not sections:
        raise CommandError(f"nothing to report in {out}")
    return "\n\n".join(sections) + "\n"


def cmd_report(cfg: RunConfig, args) -> None:
    outputs = Outputs(cfg.out)
    text = build_report(outputs.dir)
    outputs.write(REPORT_TXT, text)
    outputs.write("resolved_config_report.txt", cfg.echo())
    outputs.commit()
    print(text, end="")


# --- argument parsing -----------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--test-file", dest="test_file")
    p.add_argument("--taxonomy", help="attack_name,category file (default: bundled)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--episodes", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--epsilon-decay", dest="epsilon_decay", type=float)
    p.add_argument("--epsilon-floor", dest="epsilon_floor", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--encoding", choices=ENCODINGS)
    p.add_argument("--unknown-category", dest="unknown_category", choices=UNKNOWN_POLICIES)
    p.add_argument("--shuffle", action="store_const", const=True)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--reward-correct", dest="reward_correct", type=float)
    p.add_argument("--reward-wrong", dest="reward_wrong", type=float)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqlids", description="Deep Q-learning intrusion detection on NSL-KDD")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "preprocess": (cmd_preprocess, "encode raw NSL-KDD files into snapshots"),
        "train": (cmd_train, "train the Q-network"),
        "evaluate": (cmd_evaluate, "score a checkpoint on the test data"),
        "sweep": (cmd_sweep, "train and evaluate over gamma / episode grids"),
        "report": (cmd_report, "summarize the results in an output directory"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(func=func)
        if name == "evaluate":
            p.add_argument("--checkpoint", help=f"default: <out>/{CHECKPOINT}")
        if name == "sweep":
            p.add_argument("--gammas", help="comma-separated discount factors")
            p.add_argument("--episode-list", dest="episode_list", help="comma-separated episode counts")
            p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.hyperparams()
        args.func(cfg, args)
    except (CommandError, ParseError, UnknownAttackError, UnknownCategoryError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
