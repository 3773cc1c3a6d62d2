"""Interaction logs, fixed-length sequence samples, dataset bundles and planted-rule synthetic data."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architecture import AND, LogicArchitecture, canonicalize, parse_expression, to_expression_string, validate
from .evaluation import EvalSet, build_eval_set, leave_one_out_split

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "manas-dataset"
BUNDLE_VERSION = 1


def _id_key(raw: str):
    return (0, int(raw), raw) if raw.lstrip("-").isdigit() else (1, 0, raw)


@dataclass
class Vocab:
    users: list[str]
    items: list[str]

    def __post_init__(self):
        self._u = {u: i for i, u in enumerate(self.users)}
        self._i = {it: i for i, it in enumerate(self.items)}

    @classmethod
    def from_raw(cls, users, items) -> "Vocab":
        return cls(sorted(set(users), key=_id_key), sorted(set(items), key=_id_key))

    def encode_user(self, raw: str) -> int:
        return self._u[raw]

    def encode_item(self, raw: str) -> int:
        return self._i[raw]

    def decode_user(self, idx: int) -> str:
        return self.users[idx]

    def decode_item(self, idx: int) -> str:
        return self.items[idx]


@dataclass
class Interaction:
    user: int
    item: int
    rating: float | None
    timestamp: int


@dataclass
class InteractionTable:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    vocab: Vocab
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.users)

    @property
    def num_users(self) -> int:
        return len(self.vocab.users)

    @property
    def num_items(self) -> int:
        return len(self.vocab.items)

    def __iter__(self):
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield Interaction(int(u), int(i), None if np.isnan(r) else float(r), int(t))

    def stats(self) -> dict:
        n_inter = len(self)
        return {"users": self.num_users, "items": self.num_items, "interactions": n_inter,
                "density": n_inter / (self.num_users * self.num_items) if n_inter else 0.0,
                "skipped_rows": self.skipped}

    def user_sequences(self) -> dict[int, list[int]]:
        """Per-user item lists in time order (ties keep file order)."""
        order = np.lexsort((np.arange(len(self)), self.timestamps, self.users))
        seqs: dict[int, list[int]] = {}
        for r in order:
            seqs.setdefault(int(self.users[r]), []).append(int(self.items[r]))
        return seqs

    def user_timestamps(self) -> dict[int, list[int]]:
        order = np.lexsort((np.arange(len(self)), self.timestamps, self.users))
        out: dict[int, list[int]] = {}
        for r in order:
            out.setdefault(int(self.users[r]), []).append(int(self.timestamps[r]))
        return out


def load_interactions(path: str | Path, delimiter: str | None = None) -> InteractionTable:
    """Read ``user item rating timestamp`` rows (tab, comma or whitespace separated).

    Malformed rows are skipped and counted, duplicate (user, item, timestamp) rows dropped, and ids
    mapped to contiguous integers in sorted raw-id order.
    """
    path = Path(path)
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path} is empty")
    if delimiter is None:
        head = lines[0]
        delimiter = "\t" if "\t" in head else ("," if "," in head else None)
    rows, skipped = [], 0
    seen = set()
    for ln_no, line in enumerate(lines):
        fields = next(csv.reader([line], delimiter=delimiter)) if delimiter else line.split()
        fields = [f.strip() for f in fields]
        try:
            if len(fields) < 4:
                raise ValueError
            user, item = fields[0], fields[1]
            rating = float(fields[2]) if fields[2] else float("nan")
            ts = int(float(fields[3]))
            if not user or not item:
                raise ValueError
        except ValueError:
            if ln_no == 0 and any(f.lower() in ("user", "user_id", "userid") for f in fields):
                continue
            skipped += 1
            continue
        key = (user, item, ts)
        if key in seen:
            continue
        seen.add(key)
        rows.append((user, item, rating, ts))
    if not rows:
        raise ValueError(f"{path} has no valid rows ({skipped} malformed)")
    if skipped:
        logger.warning("skipped %d malformed rows in %s", skipped, path)
    vocab = Vocab.from_raw([r[0] for r in rows], [r[1] for r in rows])
    return InteractionTable(
        np.array([vocab.encode_user(r[0]) for r in rows], dtype=np.int64),
        np.array([vocab.encode_item(r[1]) for r in rows], dtype=np.int64),
        np.array([r[2] for r in rows], dtype=float),
        np.array([r[3] for r in rows], dtype=np.int64),
        vocab, skipped)


def write_interactions(table: InteractionTable, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for it in table:
            rating = "" if it.rating is None else f"{it.rating:g}"
            fh.write(f"{table.vocab.decode_user(it.user)}\t{table.vocab.decode_item(it.item)}\t{rating}\t{it.timestamp}\n")


@dataclass
class SequenceSamples:
    """Rows of (user, n-item history, target) with the timestamps needed to audit leakage."""

    users: np.ndarray
    histories: np.ndarray
    targets: np.ndarray
    history_last_ts: np.ndarray
    target_ts: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def empty(cls, n: int) -> "SequenceSamples":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, np.zeros((0, n), dtype=np.int64), z, z, z)

    @classmethod
    def from_rows(cls, rows, n: int) -> "SequenceSamples":
        if not rows:
            return cls.empty(n)
        u, h, t, hts, tts = zip(*rows)
        return cls(np.array(u, dtype=np.int64), np.array(h, dtype=np.int64).reshape(-1, n),
                   np.array(t, dtype=np.int64), np.array(hts, dtype=np.int64), np.array(tts, dtype=np.int64))


@dataclass
class SequenceSplits:
    n: int
    train: SequenceSamples
    valid: SequenceSamples
    test: SequenceSamples
    excluded_users: list[int]
    user_items: dict[int, set]


def build_sequences(table: InteractionTable, n: int, min_history: int | None = None) -> SequenceSplits:
    """Sliding-window training samples plus one validation and one test sample per user.

    With ``min_history`` only targets preceded by at least that many interactions are used, which
    keeps the user population identical across different ``n`` (sequence-length sweeps).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    need = max(n, min_history or 0)
    seqs = table.user_sequences()
    stamps = table.user_timestamps()
    # a short user cannot produce a valid/test sample with `need` history
    eligible = {u: s for u, s in seqs.items() if len(s) >= need + 2}
    split = leave_one_out_split(eligible, n)
    excluded = sorted(set(seqs) - set(eligible)) + split.excluded
    train, valid, test = [], [], []
    for u in sorted(split.valid):
        s, ts = seqs[u], stamps[u]
        L = len(s)
        for t in range(need, L - 2):
            train.append((u, s[t - n:t], s[t], ts[t - 1], ts[t]))
        valid.append((u, s[L - 2 - n:L - 2], s[L - 2], ts[L - 3], ts[L - 2]))
        test.append((u, s[L - 1 - n:L - 1], s[L - 1], ts[L - 2], ts[L - 1]))
    if not valid:
        logger.warning("no user has %d interactions; nothing to build for n=%d", need + 2, n)
    return SequenceSplits(n, SequenceSamples.from_rows(train, n), SequenceSamples.from_rows(valid, n),
                          SequenceSamples.from_rows(test, n), excluded,
                          {u: set(s) for u, s in seqs.items()})


# -- synthetic planted-rule data ------------------------------------------------------------

@dataclass
class SyntheticRule:
    """``premise`` over "history contains an item of class atoms[i]" picks the next item's class.

    The next item comes from ``true_class`` when the premise holds and from ``false_class``
    otherwise; with ``relative`` those two are offsets added (mod the class count) to the class of
    the most recent history item.  ``gated`` (relative rules only) makes the false branch offset
    from the oldest item instead, so which position matters depends on the history's content.
    With probability ``noise`` the item is replaced by a uniformly random one.
    """

    classes: list[list[int]]
    atoms: tuple[int, ...]
    premise: LogicArchitecture
    true_class: int
    false_class: int
    noise: float = 0.1
    window: int = 4
    relative: bool = False
    gated: bool = False

    def __post_init__(self):
        self.atoms = tuple(self.atoms)
        if not 0 <= self.noise <= 1:
            raise ValueError("noise must lie in [0, 1]")
        if any(len(c) == 0 for c in self.classes):
            raise ValueError("classes must be non-empty")
        flat = [i for c in self.classes for i in c]
        if len(flat) != len(set(flat)):
            raise ValueError("classes must be disjoint")
        if self.gated and not self.relative:
            raise ValueError("gated rules must be relative")
        if validate(self.premise) or self.premise.n != len(self.atoms):
            raise ValueError("premise must be a valid architecture over the atoms")
        for k in (*self.atoms, *(() if self.relative else (self.true_class, self.false_class))):
            if not 0 <= k < len(self.classes):
                raise ValueError(f"class index {k} out of range")
        self.premise = canonicalize(self.premise)

    def class_of(self, num_items: int) -> np.ndarray:
        out = np.full(num_items, -1, dtype=np.int64)
        for k, members in enumerate(self.classes):
            out[np.asarray(members)] = k
        return out

    def holds(self, history_classes) -> bool:
        present = set(int(c) for c in history_classes)
        slots = [a in present for a in self.atoms]
        for s in self.premise.steps:
            a = slots[s.left] != s.neg_left
            b = slots[s.right] != s.neg_right
            slots.append((a and b) if s.op == AND else (a or b))
        return slots[-1]

    def target_class(self, history_classes) -> int:
        holds = self.holds(history_classes)
        k = self.true_class if holds else self.false_class
        if self.relative:
            ref = history_classes[0] if self.gated and not holds else history_classes[-1]
            return (int(ref) + k) % len(self.classes)
        return k

    def describe(self) -> str:
        names = [f"c{a}" for a in self.atoms]
        if self.relative:
            other = "first" if self.gated else "last"
            return (f"{to_expression_string(self.premise, names)} -> last+{self.true_class} "
                    f"else {other}+{self.false_class} (mod {len(self.classes)})")
        return f"{to_expression_string(self.premise, names)} -> c{self.true_class} else c{self.false_class}"

    def to_dict(self) -> dict:
        return {"classes": [list(map(int, c)) for c in self.classes], "atoms": list(self.atoms),
                "premise": self.premise.to_text(), "n_atoms": self.premise.n,
                "true_class": self.true_class, "false_class": self.false_class, "noise": self.noise,
                "window": self.window, "relative": self.relative,
                "gated": self.gated}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticRule":
        return cls([list(c) for c in d["classes"]], tuple(d["atoms"]),
                   LogicArchitecture.from_text(d["premise"], d["n_atoms"]), d["true_class"], d["false_class"],
                   d["noise"], d["window"], d.get("relative", False), d.get("gated", False))


def default_rule(num_items: int = 200, num_classes: int = 10, noise: float = 0.1, window: int = 4,
                 expression: str = "(c0 ∧ ¬c1) ∨ c2", true_class: int = 1, false_class: int = 3,
                 relative: bool = True, gated: bool = False) -> SyntheticRule:
    """Contiguous equal-size item classes and a rule over class-presence atoms ``c<k>``."""
    if num_classes < 2 or num_items < num_classes:
        raise ValueError("need at least two non-empty classes")
    bounds = np.linspace(0, num_items, num_classes + 1).astype(int)
    classes = [list(range(bounds[k], bounds[k + 1])) for k in range(num_classes)]
    names = sorted({tok for tok in expression.replace("(", " ").replace(")", " ").replace("¬", " ").split()
                    if tok.startswith("c")}, key=lambda s: int(s[1:]))
    arch = parse_expression(expression, names)
    atoms = tuple(int(nm[1:]) for nm in names)
    return SyntheticRule(classes, atoms, arch, true_class, false_class, noise, window, relative, gated)


def generate_synthetic(rule: SyntheticRule, users: int = 2000, items: int = 200,
                       interactions_per_user: int = 20, seed: int = 0) -> InteractionTable:
    """Random opening window, then each item follows the rule over the previous ``window`` items."""
    if max(max(c) for c in rule.classes) >= items:
        raise ValueError("classes reference items outside the catalogue")
    cls = rule.class_of(items)
    if rule.relative and (cls < 0).any():
        raise ValueError("relative rules need every item to belong to a class")
    if interactions_per_user <= rule.window:
        raise ValueError("need more interactions per user than the rule window")
    rng = np.random.default_rng(seed)
    members = [np.asarray(c) for c in rule.classes]
    U, I, T = [], [], []
    for u in range(users):
        seq = list(rng.integers(0, items, size=rule.window))
        while len(seq) < interactions_per_user:
            if rule.noise > 0 and rng.random() < rule.noise:
                nxt = int(rng.integers(0, items))
            else:
                k = rule.target_class(cls[seq[-rule.window:]])
                nxt = int(rng.choice(members[k]))
            seq.append(nxt)
        U += [u] * len(seq)
        I += [int(x) for x in seq]
        T += list(range(len(seq)))
    vocab = Vocab([str(u) for u in range(users)], [str(i) for i in range(items)])
    return InteractionTable(np.array(U, dtype=np.int64), np.array(I, dtype=np.int64),
                            np.full(len(U), np.nan), np.array(T, dtype=np.int64), vocab)


# -- bundles --------------------------------------------------------------------------------

@dataclass
class Dataset:
    n: int
    num_items: int
    train: SequenceSamples
    valid: EvalSet
    test: EvalSet
    user_items: dict[int, set]
    stats: dict = field(default_factory=dict)
    rule: SyntheticRule | None = None
    vocab: Vocab | None = None
    min_history: int | None = None
    seed: int = 0

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "n": self.n, "num_items": self.num_items,
            "seed": self.seed, "min_history": self.min_history, "stats": self.stats,
            "train": {"users": self.train.users.tolist(), "histories": self.train.histories.tolist(),
                      "targets": self.train.targets.tolist(), "history_last_ts": self.train.history_last_ts.tolist(),
                      "target_ts": self.train.target_ts.tolist()},
            "valid": self.valid.to_dict(), "test": self.test.to_dict(),
            "user_items": {str(u): sorted(int(i) for i in s) for u, s in sorted(self.user_items.items())},
            "rule": self.rule.to_dict() if self.rule else None,
            "vocab": {"users": self.vocab.users, "items": self.vocab.items} if self.vocab else None,
        }
        path.write_text(json.dumps(payload, separators=(",", ":"), sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        d = json.loads(Path(path).read_text())
        if d.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"{path} is not a {BUNDLE_FORMAT} bundle")
        if d.get("version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {d.get('version')}")
        n = d["n"]
        tr = d["train"]
        train = SequenceSamples(np.asarray(tr["users"], dtype=np.int64),
                                np.asarray(tr["histories"], dtype=np.int64).reshape(-1, n),
                                np.asarray(tr["targets"], dtype=np.int64),
                                np.asarray(tr["history_last_ts"], dtype=np.int64),
                                np.asarray(tr["target_ts"], dtype=np.int64))
        vocab = Vocab(d["vocab"]["users"], d["vocab"]["items"]) if d.get("vocab") else None
        return cls(n, d["num_items"], train, EvalSet.from_dict(d["valid"]), EvalSet.from_dict(d["test"]),
                   {int(u): set(s) for u, s in d["user_items"].items()}, d.get("stats", {}),
                   SyntheticRule.from_dict(d["rule"]) if d.get("rule") else None, vocab,
                   d.get("min_history"), d.get("seed", 0))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_dataset(table: InteractionTable, n: int, seed: int = 0, min_history: int | None = None,
                 rule: SyntheticRule | None = None) -> Dataset:
    """Split, window and attach fixed real-plus-99 candidate sets for validation and test."""
    splits = build_sequences(table, n, min_history)
    if len(splits.valid) == 0:
        raise ValueError(f"no user has enough interactions for n={n}")
    valid = build_eval_set(splits.valid.users, splits.valid.histories, splits.valid.targets,
                           splits.user_items, table.num_items, seed)
    test = build_eval_set(splits.test.users, splits.test.histories, splits.test.targets,
                          splits.user_items, table.num_items, seed + 1)
    stats = table.stats()
    stats.update({"train_samples": len(splits.train), "valid_samples": len(valid), "test_samples": len(test),
                  "excluded_users": len(splits.excluded_users)})
    return Dataset(n, table.num_items, splits.train, valid, test, splits.user_items, stats, rule,
                   table.vocab, min_history, seed)


def synthetic_dataset(users: int = 2000, items: int = 200, interactions_per_user: int = 20, n: int = 4,
                      noise: float = 0.1, seed: int = 0, rule: SyntheticRule | None = None,
                      min_history: int | None = None) -> Dataset:
    rule = rule or default_rule(items, noise=noise, window=n)
    table = generate_synthetic(rule, users, items, interactions_per_user, seed)
    return make_dataset(table, n, seed, min_history, rule)
