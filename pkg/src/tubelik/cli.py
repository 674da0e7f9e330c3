"""Command-line entry point: ``tubelik {gen-data,fit,eval,sweep,ablate,propcheck}``.

All commands share one output directory.  ``gen-data`` writes the corpora and
the ground-truth joint, ``fit`` writes the evaluated model and the ARM
baseline, and the remaining commands read them back and emit CSV.  Every run
writes ``manifest_<command>.json``.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import platform
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from . import experiments as ex
from .models import (
    fit_arm,
    load_joint,
    load_model,
    read_corpus,
    save_joint,
    save_model,
    write_corpus,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

CORPUS_FILE = "corpus.txt"
TEST_FILE = "test.txt"
JOINT_FILE = "joint.json"
MODEL_FILE = "model.json"
ARM_FILE = "arm.json"
LOCK_FILE = ".tubelik.lock"


class ConfigError(Exception):
    pass


class InvariantViolation(Exception):
    def __init__(self, message: str, outputs: list[Path] | None = None):
        super().__init__(message)
        self.outputs = outputs or []


class DirectoryLocked(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration and manifest
# ---------------------------------------------------------------------------


def load_config(path: str | Path, seed: int | None = None) -> ex.ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(raw, dict) or "schema_version" not in raw:
        raise ConfigError(f"{path}: missing required key 'schema_version'")
    if seed is not None:
        raw["seed"] = seed
    try:
        return ex.ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(f"{path}: {err}") from err


def config_hash(config: ex.ExperimentConfig) -> str:
    """SHA-256 of the canonical (sorted-key) JSON form of the config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _versions() -> dict[str, str]:
    out = {"tubelik": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pydantic"):
        with contextlib.suppress(metadata.PackageNotFoundError):
            out[pkg] = metadata.version(pkg)
    return out


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, config: ex.ExperimentConfig, outputs: list[Path],
                   started: str, elapsed: float, jobs: int, status: str) -> Path:
    path = out / f"manifest_{command}.json"
    manifest = {
        "command": command,
        "status": status,
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "ground_truth_seed": config.ground_truth.seed,
        "jobs": jobs,
        "versions": _versions(),
        "outputs": [p.name for p in outputs],
        "started": started,
        "finished": _timestamp(),
        "wall_clock_seconds": round(elapsed, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@contextlib.contextmanager
def directory_lock(out: Path):
    lock = out / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as err:
        raise DirectoryLocked(f"{out} is in use by another command (remove {lock} if stale)") from err
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _require(out: Path, *names: str) -> None:
    missing = [n for n in names if not (out / n).exists()]
    if missing:
        raise FileNotFoundError(f"missing inputs in {out}: {', '.join(missing)}")


def _load_setup(config: ex.ExperimentConfig, out: Path) -> ex.Setup:
    _require(out, JOINT_FILE, CORPUS_FILE, TEST_FILE, MODEL_FILE, ARM_FILE)
    space = config.seq_space
    joint = load_joint(out / JOINT_FILE)
    train, v, length = read_corpus(out / CORPUS_FILE)
    test, _, _ = read_corpus(out / TEST_FILE)
    model = load_model(out / MODEL_FILE)
    arm = load_model(out / ARM_FILE)
    if (v, length) != (space.vocab_size, space.length) or model.space != space:
        raise ConfigError("stored data or model does not match the configured space")
    return ex.Setup(config, joint, train, test, model, arm)


def cmd_gen_data(config: ex.ExperimentConfig, out: Path, jobs: int) -> list[Path]:
    joint, train, test = ex.generate_data(config)
    space = config.seq_space
    paths = [out / CORPUS_FILE, out / TEST_FILE, out / JOINT_FILE]
    write_corpus(train, space, paths[0])
    write_corpus(test, space, paths[1])
    save_joint(joint, paths[2])
    return paths


def cmd_fit(config: ex.ExperimentConfig, out: Path, jobs: int) -> list[Path]:
    _require(out, JOINT_FILE, CORPUS_FILE)
    joint = load_joint(out / JOINT_FILE)
    train, _, _ = read_corpus(out / CORPUS_FILE)
    if config.model.source == "fit" and len(train) == 0:
        raise FileNotFoundError("fitting needs a nonempty corpus")
    model = ex.build_model(config, joint, train)
    alpha = max(config.model.alpha, 1e-3)
    corpus = train if len(train) else read_corpus(out / TEST_FILE)[0]
    arm = fit_arm(corpus, config.seq_space, alpha)
    paths = [out / MODEL_FILE, out / ARM_FILE]
    save_model(model, paths[0], source=config.model.source, epsilon=config.model.epsilon)
    save_model(arm, paths[1], source="arm")
    return paths


def _check_table(table: ex.EstimateTable) -> None:
    problems = []
    values = {}
    for row in table.rows:
        if not np.isfinite(row.mean_nats):
            problems.append(f"non-finite value at {row.regime}/{row.estimator}")
        if row.estimator == "tube" and row.violation:
            problems.append(f"TUBE flagged below ELBO_K at {row.regime}")
        if row.regime == "NFE=1":
            values.setdefault("nfe1", set()).add(row.mean_nats)
    if len(values.get("nfe1", ())) > 1:
        problems.append("NFE=1 row is not identical across estimators")
    if problems:
        raise InvariantViolation("; ".join(problems))


def cmd_eval(config: ex.ExperimentConfig, out: Path, jobs: int) -> list[Path]:
    setup = _load_setup(config, out)
    table = ex.run_comparison_table(setup, jobs=jobs)
    path = out / "table.csv"
    path.write_text(table.to_csv(), encoding="utf-8")
    try:
        _check_table(table)
    except InvariantViolation as err:
        raise InvariantViolation(str(err), [path]) from None
    return [path]


def cmd_sweep(config: ex.ExperimentConfig, out: Path, jobs: int) -> list[Path]:
    setup = _load_setup(config, out)
    cells = ex.cubo_sweep(setup)
    path = out / "sweep.csv"
    path.write_text(ex.sweep_to_csv(cells), encoding="utf-8")
    full = max(c.bank_size for c in cells)
    if any(c.violation for c in cells if c.beta == 1.0 and c.bank_size == full):
        raise InvariantViolation("full-bank beta=1 CUBO cell flagged below the exact value", [path])
    return [path]


def cmd_ablate(config: ex.ExperimentConfig, out: Path, jobs: int) -> list[Path]:
    setup = _load_setup(config, out)
    records = ex.surrogate_ablation(setup)
    path = out / "ablation.csv"
    path.write_text(ex.ablation_to_csv(records), encoding="utf-8")
    pi = next(r for r in records if r.surrogate == "psi_pi")
    m1 = next(r for r in records if r.surrogate == "psi_M" and r.m == 1)
    if pi.mean_nats != m1.mean_nats:
        raise InvariantViolation("psi_pi differs from psi_M at M=1", [path])
    return [path]


def cmd_propcheck(config: ex.ExperimentConfig, out: Path, jobs: int) -> list[Path]:
    setup = _load_setup(config, out)
    studies = ex.unbiasedness_variance_study(setup)
    path = out / "propcheck.csv"
    path.write_text(ex.propcheck_to_csv(studies), encoding="utf-8")
    return [path]


COMMANDS = {
    "gen-data": (cmd_gen_data, "sample train/test corpora from a random ground-truth joint"),
    "fit": (cmd_fit, "build the evaluated model and the left-to-right ARM baseline"),
    "eval": (cmd_eval, "estimator comparison table (table.csv)"),
    "sweep": (cmd_sweep, "CUBO beta x bank-size sweep (sweep.csv)"),
    "ablate": (cmd_ablate, "TUBE surrogate ablation (ablation.csv)"),
    "propcheck": (cmd_propcheck, "TUBE unbiasedness and variance study (propcheck.csv)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tubelik", description="Likelihood bounds for any-order and masked diffusion models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
        p.add_argument("--out", default=".", help="shared output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(args.config, args.seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        print(f"error: cannot create {out}: {err}", file=sys.stderr)
        return EXIT_ERROR

    func = COMMANDS[args.command][0]
    started, t0 = _timestamp(), time.perf_counter()
    try:
        with directory_lock(out):
            status, code, outputs = "ok", EXIT_OK, []
            try:
                outputs = func(config, out, args.jobs)
            except InvariantViolation as err:
                status, code, outputs = "invariant-violation", EXIT_INVARIANT, err.outputs
                print(f"invariant violation: {err}", file=sys.stderr)
            except ConfigError as err:
                print(f"config error: {err}", file=sys.stderr)
                return EXIT_CONFIG
            except (FileNotFoundError, ValueError) as err:
                print(f"error: {err}", file=sys.stderr)
                return EXIT_CONFIG if isinstance(err, ValueError) else EXIT_ERROR
            manifest = write_manifest(out, args.command, config, outputs, started,
                                      time.perf_counter() - t0, args.jobs, status)
    except DirectoryLocked as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    for p in outputs + [manifest]:
        print(p)
    return code


if __name__ == "__main__":
    sys.exit(main())
