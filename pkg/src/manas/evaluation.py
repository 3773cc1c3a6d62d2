"""Leave-one-out splitting, real-plus-N candidates, HR@K / NDCG@K and multi-sample reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

K_LIST = (5, 10)
NUM_NEGATIVES = 99
MULTI_RUNS = 20


@dataclass
class LeaveOneOut:
    train: dict            # user -> items available as training context (time ordered)
    valid: dict            # user -> (history, target)
    test: dict             # user -> (history, target)
    excluded: list = field(default_factory=list)


def leave_one_out_split(sequences: Mapping[int, Sequence[int]], n: int) -> LeaveOneOut:
    """Last item tests, second to last validates, everything before is training context.

    Users with fewer than ``n + 2`` interactions are excluded (and listed).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = LeaveOneOut({}, {}, {})
    for user in sorted(sequences):
        seq = list(sequences[user])
        if len(seq) < n + 2:
            out.excluded.append(user)
            continue
        L = len(seq)
        out.train[user] = seq[:L - 2]
        out.valid[user] = (seq[L - 2 - n:L - 2], seq[L - 2])
        out.test[user] = (seq[L - 1 - n:L - 1], seq[L - 1])
    return out


def hit_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def rank_of_positive(scores: np.ndarray, candidates: np.ndarray, positive_index: int = 0) -> np.ndarray:
    """1-based rank of the positive per row; ties go to the lower item id.

    ``scores`` and ``candidates`` are (B, C); the positive sits in column ``positive_index``.
    """
    scores = np.atleast_2d(scores)
    candidates = np.atleast_2d(candidates)
    pos_s = scores[:, positive_index:positive_index + 1]
    pos_i = candidates[:, positive_index:positive_index + 1]
    ahead = (scores > pos_s) | ((scores == pos_s) & (candidates < pos_i))
    return ahead.sum(axis=1) + 1


def batch_metrics(ranks: np.ndarray, ks=K_LIST) -> dict[str, np.ndarray]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        out[f"HR@{k}"] = (ranks <= k).astype(float)
        out[f"N@{k}"] = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return out


def sample_negatives(positive: int, interacted: set, num_items: int, rng: np.random.Generator,
                     count: int = NUM_NEGATIVES) -> np.ndarray:
    """``count`` distinct items the user never interacted with (positive excluded as well)."""
    forbidden = set(interacted) | {positive}
    pool_size = num_items - len(forbidden)
    if pool_size < count:
        raise ValueError(f"only {pool_size} non-interacted items, need {count}")
    if pool_size < 4 * count:
        allowed = np.setdiff1d(np.arange(num_items), np.fromiter(forbidden, dtype=np.int64))
        return rng.choice(allowed, size=count, replace=False)
    chosen: list[int] = []
    seen = set(forbidden)
    while len(chosen) < count:
        for it in rng.integers(0, num_items, size=2 * (count - len(chosen))):
            it = int(it)
            if it not in seen:
                seen.add(it)
                chosen.append(it)
                if len(chosen) == count:
                    break
    return np.array(chosen, dtype=np.int64)


@dataclass
class EvalSet:
    """Histories (B, n), candidates (B, 1 + N) with the positive in column 0, and the seed used."""

    users: np.ndarray
    histories: np.ndarray
    candidates: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.users)

    @property
    def positives(self) -> np.ndarray:
        return self.candidates[:, 0]

    def subset(self, idx) -> "EvalSet":
        return EvalSet(self.users[idx], self.histories[idx], self.candidates[idx], self.seed)

    def to_dict(self) -> dict:
        return {"users": self.users.tolist(), "histories": self.histories.tolist(),
                "candidates": self.candidates.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSet":
        n = len(d["histories"][0]) if d["histories"] else 0
        return cls(np.asarray(d["users"], dtype=np.int64),
                   np.asarray(d["histories"], dtype=np.int64).reshape(-1, n),
                   np.asarray(d["candidates"], dtype=np.int64).reshape(len(d["users"]), -1), int(d["seed"]))


def build_eval_set(users, histories, positives, interacted: Mapping[int, set], num_items: int, seed: int,
                   num_negatives: int = NUM_NEGATIVES) -> EvalSet:
    rng = np.random.default_rng(seed)
    cands = np.empty((len(users), num_negatives + 1), dtype=np.int64)
    for r, (u, pos) in enumerate(zip(users, positives)):
        cands[r, 0] = pos
        cands[r, 1:] = sample_negatives(int(pos), interacted[int(u)], num_items, rng, num_negatives)
    return EvalSet(np.asarray(users, dtype=np.int64), np.asarray(histories, dtype=np.int64), cands, seed)


@dataclass
class MetricReport:
    metrics: dict[str, float]
    per_run: dict[str, list[float]] = field(default_factory=dict)
    stats: dict[str, dict[str, float]] = field(default_factory=dict)
    per_sample: dict[str, np.ndarray] | None = None

    def row(self, prefix: dict | None = None) -> dict:
        out = dict(prefix or {})
        out.update({k: self.metrics[k] for k in metric_columns()})
        for k, st in self.stats.items():
            for s in ("min", "max", "std"):
                out[f"{k}_{s}"] = st[s]
        return out


def metric_columns(ks=K_LIST) -> list[str]:
    return [f"N@{k}" for k in ks] + [f"HR@{k}" for k in ks]


ScoreFn = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def evaluate(score_fn: ScoreFn, eval_set: EvalSet, ks=K_LIST, mode: str = "single",
             rng: np.random.Generator | None = None, runs: int = MULTI_RUNS,
             per_sample: bool = False) -> MetricReport:
    """Average HR/NDCG over all users.

    ``score_fn(histories, candidates, rng)`` returns (B, C) scores.  In ``multi`` mode the whole
    derivation is repeated ``runs`` times and avg/min/max/population-std of the per-run averages
    are reported.
    """
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    if mode not in ("single", "multi", "multi20"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(eval_set.seed)
    n_runs = 1 if mode == "single" else runs
    per_run: dict[str, list[float]] = {c: [] for c in metric_columns(ks)}
    last = None
    for _ in range(n_runs):
        scores = np.asarray(score_fn(eval_set.histories, eval_set.candidates, rng))
        ranks = rank_of_positive(scores, eval_set.candidates)
        last = batch_metrics(ranks, ks)
        for c in per_run:
            per_run[c].append(float(last[c].mean()))
    metrics = {c: float(np.clip(np.mean(v), min(v), max(v))) for c, v in per_run.items()}
    stats = {}
    if n_runs > 1:
        stats = {c: {"avg": metrics[c], "min": float(np.min(v)), "max": float(np.max(v)),
                     "std": _population_std(v)} for c, v in per_run.items()}
    return MetricReport(metrics, per_run, stats, last if per_sample else None)


def _population_std(values) -> float:
    # identical runs must give exactly 0, which a rounded mean does not guarantee
    if min(values) == max(values):
        return 0.0
    return float(np.std(values))


def write_csv(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def write_json(path: str | Path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))
