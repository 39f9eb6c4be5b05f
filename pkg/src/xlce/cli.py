"""Command-line harness: dataset generation, training, evaluation and sweeps.

Every failure prints one line ``E_<CODE>: message`` to stderr and exits
nonzero. Result CSVs carry the resolved-config hash in every row and are
written atomically next to a ``.config.yaml`` sidecar holding the resolved
configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from xlce.baselines import (
    HyOmpConfig,
    build_hybrid_dictionaries,
    fit_lmmse,
    hyomp_estimate,
    lmmse_estimate_many,
    nmse_batch,
    to_db,
)
from xlce.channel import (
    DatasetFormatError,
    DatasetSpec,
    atomic_write,
    make_dataset,
    read_dataset,
    reobserve,
    stack_samples,
    write_dataset,
)
from xlce.config import ESTIMATORS, ConfigError, ExperimentConfig
from xlce.model import ModelParams, freeze_partition, load_weights, save_weights
from xlce.model.params import ConfigError as ModelConfigError
from xlce.model.params import WeightFileError
from xlce.training import LOG_COLUMNS, TrainingError, predict, train

log = logging.getLogger("xlce")

RESULT_COLUMNS = (
    "estimator",
    "snr_db",
    "L",
    "L0",
    "n_samples",
    "nmse_linear",
    "nmse_db",
    "config_hash",
)
SPLITS = ("train", "val", "test")
# keeps regenerated noise streams clear of every channel seed
NOISE_SEED_OFFSET = 1 << 40


class UsageError(ValueError):
    pass


class MismatchError(ValueError):
    pass


_ERROR_CODES: list[tuple[type, str, int]] = [
    (UsageError, "E_USAGE", 2),
    (ConfigError, "E_CONFIG", 2),
    (ModelConfigError, "E_CONFIG", 2),
    (MismatchError, "E_MISMATCH", 3),
    (DatasetFormatError, "E_DATASET", 4),
    (WeightFileError, "E_WEIGHTS", 4),
    (TrainingError, "E_TRAIN", 5),
    (OSError, "E_IO", 6),
]


def worker_count() -> int:
    """Worker threads for per-sample evaluation, bounded by XCE_THREADS."""
    raw = os.environ.get("XCE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"XCE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"XCE_THREADS must be a positive integer, got {raw!r}")
    return n


def _parallel_rows(fn: Callable[[int], np.ndarray], n: int) -> list[np.ndarray]:
    """``[fn(i) for i in range(n)]`` over a thread pool; order is by index."""
    workers = min(worker_count(), n)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


# estimators


class Estimators:
    """Lazily built estimator state shared across the points of one command."""

    def __init__(self, cfg: ExperimentConfig, weights: str | None = None):
        self.cfg = cfg
        self.weights = weights
        self._lmmse = None
        self._params = None
        self._dicts = None

    def params(self) -> ModelParams:
        if self._params is None:
            if not self.weights:
                raise UsageError("estimator llm4xce needs --weights")
            self._params = load_weights(self.weights, self.cfg.model)
        return self._params

    def lmmse(self):
        if self._lmmse is None:
            spec = self.cfg.split_spec("train")
            n = self.cfg.eval["lmmse_samples"]
            if n is not None:
                spec = replace(spec, n_samples=int(n))
            h, _, _ = stack_samples(make_dataset(spec))
            self._lmmse = fit_lmmse(h)
        return self._lmmse

    def hyomp_config(self, L: int, L0: int) -> HyOmpConfig:
        spec = self.cfg.split_spec("test")
        return HyOmpConfig.default(spec.array, spec.r_range, L, L0, int(self.cfg.eval["hyomp_n_dist"]))

    def run(self, name: str, h_ls: np.ndarray, snr: np.ndarray, L: int, L0: int) -> np.ndarray:
        if name == "ls":
            return h_ls.copy()
        if name == "lmmse":
            return lmmse_estimate_many(self.lmmse(), h_ls, snr)
        if name == "hyomp":
            hcfg = self.hyomp_config(L, L0)
            if self._dicts is None:
                self._dicts = build_hybrid_dictionaries(self.cfg.array, hcfg)
            return np.stack(_parallel_rows(lambda i: hyomp_estimate(h_ls[i], self._dicts, hcfg), len(h_ls)))
        if name == "llm4xce":
            return predict(self.params(), h_ls)
        raise UsageError(f"unknown estimator {name!r}; valid: {', '.join(ESTIMATORS)}")


def parse_estimators(text: str | None, default: Sequence[str]) -> list[str]:
    names = list(default) if text is None else [s.strip() for s in text.split(",") if s.strip()]
    if not names:
        raise UsageError(f"estimator list is empty; valid: {', '.join(ESTIMATORS)}")
    unknown = [n for n in names if n not in ESTIMATORS]
    if unknown:
        raise UsageError(f"unknown estimator(s) {', '.join(unknown)}; valid: {', '.join(ESTIMATORS)}")
    return names


def _snr_label(snr: np.ndarray) -> str:
    values = np.unique(snr)
    if len(values) == 1:
        return repr(round(float(10.0 * np.log10(values[0])), 12))
    return "mixed"


def evaluate_point(
    est: Estimators, names: Sequence[str], samples, L: int, L0: int, cfg_hash: str
) -> list[list]:
    """One result row per estimator for a set of samples."""
    h, h_ls, snr = stack_samples(samples)
    rows = []
    for name in names:
        per = nmse_batch(h, est.run(name, h_ls, snr, L, L0))
        mean = float(np.mean(per))
        rows.append([name, _snr_label(snr), L, L0, len(samples), repr(mean), repr(to_db(mean)), cfg_hash])
    return rows


# output helpers


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write_text(path: Path, text: str):
    atomic_write(Path(path), text.encode("utf-8"))


def _write_sidecar(path: Path, cfg: ExperimentConfig):
    text = f"# config_hash: {cfg.hash}\n" + cfg.to_yaml()
    _write_text(Path(str(path) + ".config.yaml"), text)


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def _dataset_file(path: str | None, split: str) -> Path:
    if not path:
        raise UsageError("--dataset is required")
    p = Path(path)
    return p / f"{split}.xced" if p.is_dir() else p


def _check_M(cfg: ExperimentConfig, spec: DatasetSpec, path: Path):
    if spec.array.M != cfg.array.M:
        raise MismatchError(f"dataset {path} has M={spec.array.M} but config has M={cfg.array.M}")


# commands


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    specs = {split: cfg.split_spec(split) for split in SPLITS}
    for split, spec in specs.items():
        path = out / f"{split}.xced"
        write_dataset(path, spec, make_dataset(spec), extra={"config_hash": cfg.hash, "split": split})
        last = spec.base_seed + spec.n_samples - 1
        print(f"{split}: {spec.n_samples} samples, seeds {spec.base_seed}..{last} -> {path}")
    _write_sidecar(out / "dataset", cfg)
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _require_out(args)
    sets = {}
    for split in ("train", "val"):
        path = _dataset_file(args.dataset, split)
        spec, samples, _ = read_dataset(path)
        _check_M(cfg, spec, path)
        sets[split] = samples
    tcfg = cfg.train
    if args.weights:
        params = load_weights(args.weights, cfg.model)
    else:
        params = ModelParams.init(cfg.model, seed=tcfg.seed)
    freeze_partition(params)
    result = train(params, sets["train"], sets["val"], tcfg)
    save_weights(params, out)
    rows = [
        [r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_nmse_db"]), cfg.hash]
        for r in result.log
    ]
    log_path = Path(str(out) + ".log.csv")
    _write_text(log_path, _csv_text(LOG_COLUMNS + ("config_hash",), rows))
    _write_sidecar(out, cfg)
    print(f"best epoch {result.best_epoch}: val NMSE {result.best_val_nmse_db:.3f} dB -> {out}")
    print(f"log -> {log_path}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _require_out(args)
    names = parse_estimators(args.estimators, cfg.eval["estimators"])
    path = _dataset_file(args.dataset, "test")
    spec, samples, _ = read_dataset(path)
    _check_M(cfg, spec, path)
    est = Estimators(cfg, args.weights)
    rows = evaluate_point(est, names, samples, spec.L, spec.L0, cfg.hash)
    _write_text(out, _csv_text(RESULT_COLUMNS, rows))
    _write_sidecar(out, cfg)
    _echo(rows)
    return 0


def _scenarios(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    """(L, L0) test mixes for the SNR sweep."""
    pure = cfg.eval["test_mode"] == "pure"
    out = []
    for L in (int(v) for v in cfg.eval["sweep_L"]):
        far, near = (L, 0) if pure else (max(L - 1, 0), min(1, L))
        for L0 in (far, near):
            if (L, L0) not in out:
                out.append((L, L0))
    return out


def _test_spec(cfg: ExperimentConfig, L: int, L0: int, snr_db: float, base_seed: int) -> DatasetSpec:
    base = cfg.split_spec("test")
    return DatasetSpec(
        array=base.array,
        L=L,
        L0=L0,
        r_range=base.r_range,
        snr_db=float(snr_db),
        n_samples=int(cfg.eval["samples_per_point"]),
        base_seed=base_seed,
    )


def cmd_sweep_snr(cfg: ExperimentConfig, args) -> int:
    out = _require_out(args)
    names = parse_estimators(args.estimators, cfg.eval["estimators"])
    est = Estimators(cfg, args.weights)
    n = int(cfg.eval["samples_per_point"])
    rows = []
    for j, (L, L0) in enumerate(_scenarios(cfg)):
        channels = make_dataset(_test_spec(cfg, L, L0, 0.0, cfg.eval_seed + j * n))
        for k, snr_db in enumerate(float(v) for v in cfg.eval["snr_grid_db"]):
            noise_seed = cfg.eval_seed + NOISE_SEED_OFFSET + k * n
            samples = reobserve(channels, snr_db, noise_seed)
            rows += evaluate_point(est, names, samples, L, L0, cfg.hash)
    _write_text(out, _csv_text(RESULT_COLUMNS, rows))
    _write_sidecar(out, cfg)
    _echo(rows)
    return 0


def cmd_sweep_paths(cfg: ExperimentConfig, args) -> int:
    out = _require_out(args)
    names = parse_estimators(args.estimators, cfg.eval["estimators"])
    est = Estimators(cfg, args.weights)
    L = int(cfg.raw["dataset"]["L"])
    snr_db = float(cfg.eval["paths_snr_db"])
    rows = []
    for L0 in cfg.L0_grid:
        samples = make_dataset(_test_spec(cfg, L, L0, snr_db, cfg.eval_seed))
        rows += evaluate_point(est, names, samples, L, L0, cfg.hash)
    _write_text(out, _csv_text(RESULT_COLUMNS, rows))
    _write_sidecar(out, cfg)
    _echo(rows)
    return 0


def _echo(rows):
    for r in rows:
        print(f"{r[0]:>8}  snr_db={r[1]:>6}  L={r[2]} L0={r[3]}  nmse_db={float(r[6]):8.3f}")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-snr": cmd_sweep_snr,
    "sweep-paths": cmd_sweep_paths,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xlce", description="Hybrid-field XL-MIMO channel estimation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen": "write train/val/test datasets into the --out directory",
        "train": "train on --dataset (directory from gen) and write weights to --out",
        "eval": "evaluate estimators on the test split of --dataset",
        "sweep-snr": "NMSE versus SNR on fixed channels with regenerated noise",
        "sweep-paths": "NMSE versus number of far-field paths at a fixed SNR",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", default="preset:toy", help="YAML file or preset:<name> (default preset:toy)")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override dataset and training seeds")
        if name != "gen":
            p.add_argument("--weights", help="XCEW1 weight file")
        if name in ("train", "eval"):
            p.add_argument("--dataset", help="dataset directory or XCED1 file")
        if name in ("eval", "sweep-snr", "sweep-paths"):
            p.add_argument("--estimators", help=f"comma list from {','.join(ESTIMATORS)}")
    return parser


def _error_code(exc: BaseException) -> tuple[str, int]:
    for kind, code, status in _ERROR_CODES:
        if isinstance(exc, kind):
            return code, status
    return "E_INTERNAL", 1


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(levelname)s %(message)s",
            stream=sys.stderr,
        )
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise UsageError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
            cfg = cfg.with_seed(args.seed)
        worker_count()
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one coded line
        code, status = _error_code(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{code}: {message}", file=sys.stderr)
        return status


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
