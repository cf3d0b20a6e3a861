"""Run ledger, determinism twins, permutation tests and the shipped fixture pack."""

from __future__ import annotations

import hashlib
import json
import math
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from . import _kernels
from .config import (  # noqa: F401 - re-exported as the config API
    RunConfig,
    canonical_json,
    config_from_dict,
    config_hash,
    config_to_dict,
    diff_configs,
    dump_config,
    load_config,
)
from .errors import BadRange, BadRepeatCount, ConfigInvalid, GroupTooSmall, LedgerIOError
from .numerics import parse_checkpoint
from .rng import GENERATOR_ID, stream
from .zeroshot import EvalReport

EXHAUSTIVE_LIMIT = 20000
MC_RESAMPLES = 10000


# ---------------------------------------------------------------------------
# environment and ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvRecord:
    version: str
    dtype: str
    rng: str
    os: str
    arch: str
    python: str
    numpy: str
    backend: str
    timestamp: str

    def __post_init__(self):
        empty = [k for k, v in self.to_dict().items() if not isinstance(v, str) or not v]
        if empty:
            raise LedgerIOError(f"environment fields must be non-empty strings: {empty}")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dtype": self.dtype,
            "rng": self.rng,
            "os": self.os,
            "arch": self.arch,
            "python": self.python,
            "numpy": self.numpy,
            "backend": self.backend,
            "timestamp": self.timestamp,
        }


def capture_env(dtype: str = "f32", timestamp: str | None = None) -> EnvRecord:
    return EnvRecord(
        version=__version__,
        dtype=dtype,
        rng=GENERATOR_ID,
        os=f"{platform.system()} {platform.release()}".strip() or "unknown",
        arch=platform.machine() or "unknown",
        python=platform.python_version(),
        numpy=np.__version__,
        backend=_kernels.BACKEND,
        timestamp=timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


@dataclass
class LedgerEntry:
    run_id: str
    config_hash: str
    config: RunConfig
    env: EnvRecord
    results: dict = field(default_factory=dict)  # dataset name -> EvalReport
    trajectory: str | None = None
    supersedes: str | None = None

    def __post_init__(self):
        actual = config_hash(self.config)
        if actual != self.config_hash:
            raise LedgerIOError(f"entry {self.run_id}: stored hash {self.config_hash[:12]} does not match config ({actual[:12]})")

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "config": config_to_dict(self.config),
            "env": self.env.to_dict(),
            "results": {k: v.to_dict() for k, v in self.results.items()},
            "trajectory": self.trajectory,
            "supersedes": self.supersedes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerEntry":
        return cls(
            run_id=d["run_id"],
            config_hash=d["config_hash"],
            config=config_from_dict(d["config"]),
            env=EnvRecord(**d["env"]),
            results={k: EvalReport.from_dict(v) for k, v in d["results"].items()},
            trajectory=d.get("trajectory"),
            supersedes=d.get("supersedes"),
        )

    def render(self) -> str:
        lines = [f"{self.run_id}  {self.config_hash[:12]}  {self.env.timestamp}"]
        if self.supersedes:
            lines.append(f"  supersedes {self.supersedes}")
        for name in sorted(self.results):
            lines.append("  " + self.results[name].render())
        return "\n".join(lines)


def read_ledger(path) -> list[LedgerEntry]:
    p = Path(path)
    if not p.exists():
        return []
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise LedgerIOError(f"cannot read ledger {p}: {exc}") from None
    entries = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            entries.append(LedgerEntry.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ConfigInvalid) as exc:
            raise LedgerIOError(f"{p}:{n}: malformed ledger entry ({exc})") from None
    return entries


def record_run(
    ledger_path,
    c: RunConfig,
    env: EnvRecord,
    results: Mapping[str, EvalReport] | None = None,
    *,
    trajectory: str | None = None,
    supersedes: str | None = None,
) -> LedgerEntry:
    """Append one entry; its run_id is ``<config run_id>#<n>`` with n counting prior entries."""
    path = Path(ledger_path)
    prior = read_ledger(path)
    if supersedes is not None and supersedes not in {e.run_id for e in prior}:
        raise LedgerIOError(f"cannot supersede unknown run {supersedes!r}")
    n = 1 + sum(1 for e in prior if e.run_id.rpartition("#")[0] == c.run_id)
    entry = LedgerEntry(
        run_id=f"{c.run_id}#{n}",
        config_hash=config_hash(c),
        config=c,
        env=env,
        results=dict(results or {}),
        trajectory=trajectory,
        supersedes=supersedes,
    )
    line = entry.to_json() + "\n"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            _lock(fh)
            fh.write(line)
    except OSError as exc:
        raise LedgerIOError(f"cannot append to ledger {path}: {exc}") from None
    return entry


def _lock(fh) -> None:
    # single writer at a time; released when the file closes
    try:
        import fcntl
    except ImportError:  # pragma: no cover - non-POSIX
        return
    fcntl.flock(fh.fileno(), fcntl.LOCK_EX)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass
class ReproReport:
    mode: str  # "determinism" or "group_compare"
    verdict: str | None = None  # "pass" / "fail" for determinism
    p_value: float | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value {self.p_value} outside [0, 1]")

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "verdict": self.verdict, "p_value": self.p_value, "details": self.details}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def first_divergence(traj_a: str, traj_b: str, ckpt_a: bytes, ckpt_b: bytes) -> dict | None:
    """Where two runs part ways: first trajectory step and first checkpoint tensor."""
    if traj_a == traj_b and ckpt_a == ckpt_b:
        return None
    lines_a, lines_b = traj_a.splitlines(), traj_b.splitlines()
    step = None
    for i, (x, y) in enumerate(zip(lines_a, lines_b)):
        if x != y:
            step = json.loads(x)["step"]
            break
    if step is None:
        # trajectories agree; the final update is the first place they can differ
        step = len(lines_a) if len(lines_a) == len(lines_b) else min(len(lines_a), len(lines_b))
    tensor = None
    ta, _ = parse_checkpoint(ckpt_a)
    tb, _ = parse_checkpoint(ckpt_b)
    for name in ta:
        if name not in tb or ta[name].tobytes() != tb[name].tobytes():
            tensor = name
            break
    return {"step": step, "tensor": tensor}


def verify_determinism(c: RunConfig, k: int = 2, *, train_fn: Callable | None = None) -> ReproReport:
    """Train ``k`` times and demand byte-identical trajectories and checkpoints."""
    if k < 2:
        raise BadRepeatCount(f"need at least 2 repeats, got {k}")
    if train_fn is None:
        from .trainer import train as train_fn
    runs = [train_fn(c) for _ in range(k)]
    ref = runs[0]
    ref_traj = ref.trajectory_jsonl()
    for i, run in enumerate(runs[1:], 1):
        where = first_divergence(ref_traj, run.trajectory_jsonl(), ref.checkpoint, run.checkpoint)
        if where is not None:
            return ReproReport("determinism", "fail", details={"repeat": i, **where})
    digest = hashlib.sha256(ref.checkpoint).hexdigest()
    return ReproReport("determinism", "pass", details={"repeats": k, "steps": len(ref.trajectory), "checkpoint_sha256": digest})


def _canonical_order(a: list, b: list) -> tuple[list, list, bool]:
    # the two-sided test must not depend on argument order
    key_a, key_b = (len(a), sorted(a)), (len(b), sorted(b))
    return (b, a, True) if key_b < key_a else (a, b, False)


def permutation_test(
    group_a: Sequence[float],
    group_b: Sequence[float],
    two_sided: bool = True,
    *,
    mode: str = "auto",
    resamples: int = MC_RESAMPLES,
) -> float:
    """Permutation p-value for a difference in means.

    The statistic is |mean(a) - mean(b)| (two-sided) or mean(a) - mean(b).
    ``mode`` is "auto" (exhaustive up to EXHAUSTIVE_LIMIT splits), "exhaustive"
    or "monte_carlo". The observed split counts toward the p-value in both
    modes, so p > 0.
    """
    a, b = [float(x) for x in group_a], [float(x) for x in group_b]
    if len(a) < 2 or len(b) < 2:
        raise GroupTooSmall(f"each group needs at least 2 values, got {len(a)} and {len(b)}")
    if not all(math.isfinite(x) for x in a + b):
        raise BadRange("group values must be finite")
    if mode not in ("auto", "exhaustive", "monte_carlo"):
        raise ValueError(f"unknown mode {mode!r}")
    first, second, swapped = _canonical_order(a, b)
    sign = -1.0 if swapped else 1.0
    pooled = np.array(first + second, dtype=np.float64)
    n, n_a = len(pooled), len(first)
    total = math.fsum(pooled)

    def stats(sum_first: np.ndarray) -> np.ndarray:
        d = sum_first / n_a - (total - sum_first) / (n - n_a)
        return np.abs(d) if two_sided else sign * d

    observed = stats(np.array([math.fsum(first)]))[0]
    tol = 1e-9 * max(1.0, float(np.max(np.abs(pooled))))
    n_splits = math.comb(n, n_a)
    if mode == "exhaustive" or (mode == "auto" and n_splits <= EXHAUSTIVE_LIMIT):
        sums = np.array([math.fsum(pooled[list(idx)]) for idx in combinations(range(n), n_a)])
        count = int(np.count_nonzero(stats(sums) >= observed - tol))
        return count / n_splits
    perms = stream(0, 0, "permtest").shuffles(resamples, n)
    sums = np.array([math.fsum(pooled[row[:n_a]]) for row in perms])
    count = int(np.count_nonzero(stats(sums) >= observed - tol))
    return (count + 1) / (resamples + 1)


def compare_groups(a: Sequence[float], b: Sequence[float], *, two_sided: bool = True, threshold: float = 0.05) -> ReproReport:
    p = permutation_test(a, b, two_sided)
    n_splits = math.comb(len(a) + len(b), len(a))
    return ReproReport(
        "group_compare",
        p_value=p,
        details={
            "n_a": len(a),
            "n_b": len(b),
            "mean_a": math.fsum(a) / len(a),
            "mean_b": math.fsum(b) / len(b),
            "method": "exhaustive" if n_splits <= EXHAUSTIVE_LIMIT else "monte_carlo",
            "threshold": threshold,
            "significant": p < threshold,
        },
    )


# ---------------------------------------------------------------------------
# fixture pack
# ---------------------------------------------------------------------------

def _fixture_dir():
    return resources.files("cliprepro") / "fixtures"


def fixture_names() -> list[str]:
    names = [p.name[:-5] for p in _fixture_dir().iterdir() if p.name.endswith(".json") and p.name != "published_results.json"]
    return sorted(names, key=lambda s: (not s[1:].isdigit(), int(s[1:]) if s[1:].isdigit() else 0, s))


def fixture_text(name: str) -> str:
    p = _fixture_dir() / f"{name}.json"
    if not p.is_file():
        raise ConfigInvalid(f"no fixture named {name!r}; known: {', '.join(fixture_names())}")
    return p.read_text(encoding="utf-8")


def load_fixture(name: str) -> RunConfig:
    return config_from_dict(json.loads(fixture_text(name)))


def resolve_config(ref: str) -> RunConfig:
    """A config file path, or the name of a shipped fixture such as ``R8``."""
    p = Path(ref)
    if p.is_file():
        return load_config(p)
    return load_fixture(ref)


def published_results() -> dict[str, dict[str, EvalReport]]:
    """Published accuracy/sensitivity/specificity per run, as EvalReports."""
    raw = json.loads((_fixture_dir() / "published_results.json").read_text(encoding="utf-8"))
    classes = raw["classes"]
    out: dict[str, dict[str, EvalReport]] = {}
    for run, per_dataset in raw["runs"].items():
        out[run] = {
            name: EvalReport(
                dataset=name,
                class_names=list(classes[name]),
                class_counts=None,
                accuracy=row["accuracy_pct"] / 100.0,
                confusion=None,
                sensitivity=row.get("sensitivity"),
                specificity=row.get("specificity"),
            )
            for name, row in per_dataset.items()
        }
    return out


def results_to_table(results: Mapping[str, Mapping[str, EvalReport]]) -> dict[str, Any]:
    """Inverse of :func:`published_results` for the ``runs`` section."""
    runs = {}
    for run, per_dataset in results.items():
        runs[run] = {}
        for name, rep in per_dataset.items():
            row = {"accuracy_pct": round(rep.accuracy * 100.0, 10)}
            if rep.sensitivity is not None:
                row["sensitivity"] = rep.sensitivity
                row["specificity"] = rep.specificity
            runs[run][name] = row
    return runs

