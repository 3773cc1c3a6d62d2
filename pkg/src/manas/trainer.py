"""Interleaved one-shot training: a child epoch under a frozen policy, then K REINFORCE steps."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .architecture import LogicArchitecture, assemble_batch, assemble_premise, horn_scores, ncr_conjunction
from .controller import ADAPTIVE, GREEDY, POSITIONAL, SAMPLE, Controller, fixed_codes, sample_batched
from .data import Dataset
from .evaluation import EvalSet, MetricReport, batch_metrics, evaluate, rank_of_positive
from .logic import DEFAULT_LAWS, LogicModules
from .numerics import AdamConfig, adam_update, gradients, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

MODES = ("manas", "nanas", "ncr-fixed")
CONTROLLER_MODE = {"manas": ADAPTIVE, "nanas": POSITIONAL}


@dataclass
class TrainConfig:
    epochs: int = 20
    controller_steps: int = 50
    generation_batch: int = 1024
    child_batch: int = 256
    controller_batch: int = 256
    child_lr: float = 1e-3
    controller_lr: float = 5e-3
    l2_weight: float = 1e-5
    logic_weight: float = 1e-5
    baseline_decay: float = 0.99
    reward_k: int = 10
    score_scale: float = 1.0
    dim: int = 64
    mode: str = "manas"
    strategy: str = SAMPLE
    batching: str = "packed"
    laws: tuple = DEFAULT_LAWS
    seed: int = 0

    def __post_init__(self):
        self.laws = tuple(self.laws)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.strategy not in (SAMPLE, GREEDY):
            raise ValueError("strategy must be 'sample' or 'greedy'")
        if self.batching not in ("packed", "grouped"):
            raise ValueError("batching must be 'packed' or 'grouped'")
        for f in ("epochs", "controller_steps", "generation_batch", "child_batch", "controller_batch",
                  "reward_k", "dim"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        for f in ("child_lr", "controller_lr", "score_scale"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.l2_weight < 0 or self.logic_weight < 0:
            raise ValueError("regularizer weights must be non-negative")
        if not 0 < self.baseline_decay < 1:
            raise ValueError("baseline_decay must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["laws"] = list(self.laws)
        return out


@dataclass
class MovingBaseline:
    decay: float = 0.99
    value: float = 0.0
    initialized: bool = False

    def update(self, reward: float) -> float:
        if not self.initialized:
            self.value = float(reward)
            self.initialized = True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(reward)
        return self.value


@dataclass
class ArchitectureGroup:
    key: str
    architecture: LogicArchitecture
    members: np.ndarray
    batches: list[np.ndarray] = field(default_factory=list)


def bpr_loss(pos, neg):
    """``-ln sigmoid(pos - neg)``, elementwise."""
    diff = torch.as_tensor(pos, dtype=torch.float64) - torch.as_tensor(neg, dtype=torch.float64)
    return -F.logsigmoid(diff)


def group_by_architecture(codes, batch_size: int = 256) -> list[ArchitectureGroup]:
    """Partition sample indices by canonical architecture; each group is cut into batches."""
    if isinstance(codes, (list, tuple)):
        archs = list(codes)
        if len({a.n for a in archs}) > 1:
            raise ValueError("all samples must share the same history length")
        codes = np.stack([a.to_array() for a in archs]) if archs else np.zeros((0, 0, 5), np.int64)
    codes = np.asarray(codes)
    if codes.ndim != 3:
        raise ValueError("codes must be (samples, steps, 5)")
    n = codes.shape[1] + 1
    flat = codes.reshape(len(codes), -1)
    keys, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    groups = []
    for g, row in enumerate(keys):
        arch = LogicArchitecture.from_array(row, n)
        members = np.flatnonzero(inverse == g)
        batches = [members[i:i + batch_size] for i in range(0, len(members), batch_size)]
        groups.append(ArchitectureGroup(arch.to_text(), arch, members, batches))
    return groups


# -- child scoring ---------------------------------------------------------------------------

def child_scores(modules: LogicModules, histories: np.ndarray, codes: np.ndarray, candidates: np.ndarray,
                 grouped: bool = False, scale: float = 1.0) -> torch.Tensor:
    """Horn-clause scores (B, C) for each history/architecture row against its candidate row."""
    inputs = modules.embed(histories)
    if grouped:
        rows = []
        order = []
        for grp in group_by_architecture(codes, len(codes) or 1):
            rows.append(assemble_premise(grp.architecture, inputs[torch.from_numpy(grp.members)], modules))
            order.append(grp.members)
        perm = np.argsort(np.concatenate(order), kind="stable")
        premise = torch.cat(rows)[torch.from_numpy(perm)]
    else:
        premise = assemble_batch(codes, inputs, modules)
    return scale * horn_scores(premise, modules.embed(candidates), modules)


def child_loss(modules: LogicModules, histories, codes, positives, negatives, config: TrainConfig,
               grouped: bool = False) -> tuple[torch.Tensor, dict]:
    cands = np.stack([positives, negatives], axis=1)
    s = child_scores(modules, histories, codes, cands, grouped, config.score_scale)
    bpr = bpr_loss(s[:, 0], s[:, 1]).mean()
    total = bpr
    parts = {"bpr": bpr}
    if config.logic_weight > 0:
        used = np.unique(np.concatenate([np.ravel(histories), positives, negatives]))
        reg = modules.logic_regularizer(modules.embed(used), config.laws)
        total = total + config.logic_weight * reg
        parts["logic"] = reg
    if config.l2_weight > 0:
        l2 = modules.params.squared_norm()
        total = total + config.l2_weight * l2
        parts["l2"] = l2
    return total, parts


def sample_training_negatives(users: np.ndarray, user_items: dict, num_items: int,
                              rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn never-interacted item per row."""
    neg = rng.integers(0, num_items, size=len(users))
    bad = np.array([neg[r] in user_items[int(u)] for r, u in enumerate(users)], dtype=bool)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, num_items, size=len(idx))
        bad[idx] = [neg[r] in user_items[int(users[r])] for r in idx]
    return neg


def reward(scores: np.ndarray, candidates: np.ndarray, k: int = 10) -> float:
    """Minibatch mean of HR@k + NDCG@k; the positive is column 0."""
    m = batch_metrics(rank_of_positive(scores, candidates), (k,))
    return float(m[f"HR@{k}"].mean() + m[f"N@{k}"].mean())


class Trainer:
    def __init__(self, data: Dataset, config: TrainConfig, modules: LogicModules | None = None,
                 controller: Controller | None = None):
        self.data = data
        self.config = config
        seed = config.seed
        self.modules = modules or LogicModules.initialize(data.num_items, config.dim,
                                                          np.random.default_rng([seed, 0]))
        if config.mode == "ncr-fixed":
            self.controller = None
        else:
            self.controller = controller or Controller.initialize(
                data.num_items, config.dim, CONTROLLER_MODE[config.mode], max(data.n, 10),
                np.random.default_rng([seed, 1]))
        self.fixed_arch = ncr_conjunction(data.n) if config.mode == "ncr-fixed" else None
        self.baseline = MovingBaseline(config.baseline_decay)
        self.rng = np.random.default_rng([seed, 2])
        self.epoch = 0
        self.history: list[dict] = []

    # architectures ---------------------------------------------------------------------------
    def sample_codes(self, histories: np.ndarray, strategy: str | None = None) -> np.ndarray:
        if self.controller is None:
            return fixed_codes(self.fixed_arch, len(histories))
        return sample_batched(self.controller, histories, strategy or self.config.strategy, self.rng,
                              self.config.generation_batch)

    # phases ----------------------------------------------------------------------------------
    def train_child_epoch(self) -> dict:
        cfg, data = self.config, self.data
        train = data.train
        if len(train) == 0:
            raise ValueError("no training samples")
        before = self.controller.params.fingerprint() if self.controller else None
        codes = self.sample_codes(train.histories)
        negatives = sample_training_negatives(train.users, data.user_items, data.num_items, self.rng)
        if cfg.batching == "grouped":
            groups = group_by_architecture(codes, cfg.child_batch)
            batches = [b for g in groups for b in g.batches]
            batches = [batches[i] for i in self.rng.permutation(len(batches))]
            n_groups = len(groups)
        else:
            perm = self.rng.permutation(len(train))
            batches = [perm[i:i + cfg.child_batch] for i in range(0, len(perm), cfg.child_batch)]
            n_groups = len(np.unique(codes.reshape(len(codes), -1), axis=0))
        adam = AdamConfig(cfg.child_lr)
        totals = {"loss": 0.0, "bpr": 0.0}
        ps = self.modules.params
        for idx in batches:
            ps.requires_grad_(True)
            loss, parts = child_loss(self.modules, train.histories[idx], codes[idx], train.targets[idx],
                                     negatives[idx], cfg, grouped=cfg.batching == "grouped")
            grads = gradients(loss, ps)
            ps.requires_grad_(False)
            adam_update(ps, grads, adam)
            totals["loss"] += float(loss.detach()) * len(idx)
            totals["bpr"] += float(parts["bpr"].detach()) * len(idx)
        if self.controller is not None and self.controller.params.fingerprint() != before:
            raise RuntimeError("controller parameters changed during the child phase")
        return {"loss": totals["loss"] / len(train), "bpr": totals["bpr"] / len(train),
                "batches": len(batches), "groups": n_groups}

    def train_controller_steps(self, steps: int | None = None) -> dict:
        cfg, valid = self.config, self.data.valid
        if self.controller is None:
            return {"reward": float("nan"), "updates": 0}
        if len(valid) == 0:
            raise ValueError("empty validation set")
        steps = cfg.controller_steps if steps is None else steps
        before = self.modules.params.fingerprint()
        ps = self.controller.params
        adam = AdamConfig(cfg.controller_lr)
        rewards = []
        for _ in range(steps):
            perm = self.rng.permutation(len(valid))
            for start in range(0, len(perm), cfg.controller_batch):
                idx = perm[start:start + cfg.controller_batch]
                ps.requires_grad_(True)
                trace = self.controller.run(valid.histories[idx], cfg.strategy, self.rng)
                with torch.no_grad():
                    s = child_scores(self.modules, valid.histories[idx], trace.codes, valid.candidates[idx],
                                     scale=cfg.score_scale).numpy()
                r = reward(s, valid.candidates[idx], cfg.reward_k)
                advantage = r - self.baseline.value if self.baseline.initialized else 0.0
                loss = -advantage * trace.log_prob.sum()
                grads = gradients(loss, ps)
                ps.requires_grad_(False)
                adam_update(ps, grads, adam)
                self.baseline.update(r)
                rewards.append(r)
        if self.modules.params.fingerprint() != before:
            raise RuntimeError("child parameters changed during the controller phase")
        return {"reward": float(np.mean(rewards)) if rewards else float("nan"), "updates": len(rewards),
                "baseline": self.baseline.value}

    # evaluation ------------------------------------------------------------------------------
    def score_fn(self, strategy: str | None = None, chunk: int = 512):
        strategy = strategy or self.config.strategy

        def score(histories, candidates, rng):
            out = []
            with torch.no_grad():
                for s in range(0, len(histories), chunk):
                    h = histories[s:s + chunk]
                    if self.controller is None:
                        codes = fixed_codes(self.fixed_arch, len(h))
                    else:
                        codes = self.controller.run(h, strategy, rng).codes
                    out.append(child_scores(self.modules, h, codes, candidates[s:s + chunk],
                                            scale=self.config.score_scale).numpy())
            return np.concatenate(out)

        return score

    def evaluate(self, eval_set: EvalSet, mode: str = "single", strategy: str | None = None,
                 rng: np.random.Generator | None = None) -> MetricReport:
        rng = rng if rng is not None else np.random.default_rng([self.config.seed, 3, eval_set.seed])
        return evaluate(self.score_fn(strategy), eval_set, mode=mode, rng=rng)

    def derive(self, items, candidates, strategy: str | None = None,
               rng: np.random.Generator | None = None) -> tuple[LogicArchitecture, list[tuple[int, float]]]:
        """Architecture for one history plus candidates ranked by score (ties to the lower id)."""
        items = np.asarray(items, dtype=np.int64)
        candidates = np.asarray(candidates, dtype=np.int64)
        strategy = strategy or self.config.strategy
        rng = rng if rng is not None else self.rng
        with torch.no_grad():
            if self.controller is None:
                arch = self.fixed_arch
            else:
                arch = self.controller.run(items[None, :], strategy, rng).architectures()[0]
            premise = assemble_premise(arch, self.modules.embed(items), self.modules)
            s = horn_scores(premise, self.modules.embed(candidates), self.modules).numpy()
        order = np.lexsort((candidates, -s))
        return arch, [(int(candidates[i]), float(s[i])) for i in order]

    # loop ------------------------------------------------------------------------------------
    def fit(self, out_dir: str | Path | None = None, epochs: int | None = None, progress=None) -> list[dict]:
        epochs = self.config.epochs if epochs is None else epochs
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        for _ in range(epochs):
            self.epoch += 1
            t0 = time.perf_counter()
            child = self.train_child_epoch()
            t1 = time.perf_counter()
            ctrl = self.train_controller_steps()
            t2 = time.perf_counter()
            val = self.evaluate(self.data.valid, rng=np.random.default_rng([self.config.seed, 4, self.epoch]))
            rec = {"epoch": self.epoch, "loss": child["loss"], "bpr": child["bpr"], "groups": child["groups"],
                   "controller_reward": ctrl["reward"], "baseline": self.baseline.value,
                   **{f"val_{k}": v for k, v in val.metrics.items()},
                   "val_reward": val.metrics["HR@10"] + val.metrics["N@10"],
                   "child_seconds": t1 - t0, "controller_seconds": t2 - t1}
            self.history.append(rec)
            logger.info("epoch %d loss %.4f val HR@10 %.4f", self.epoch, rec["loss"], rec["val_HR@10"])
            if progress:
                progress(rec)
            if out:
                with (out / "train_log.jsonl").open("a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                self.save(out / f"checkpoint_epoch{self.epoch:03d}")
                self.save(out / "checkpoint_last")
        return self.history

    # persistence -----------------------------------------------------------------------------
    def save(self, directory: str | Path) -> Path:
        groups = {"child": self.modules.params}
        if self.controller is not None:
            groups["controller"] = self.controller.params
        extra = {"config": self.config.to_dict(), "epoch": self.epoch,
                 "baseline": asdict(self.baseline), "rng": self.rng.bit_generator.state,
                 "n": self.data.n, "num_items": self.data.num_items}
        return save_checkpoint(directory, groups, extra)

    @classmethod
    def load(cls, directory: str | Path, data: Dataset, **overrides) -> "Trainer":
        groups, extra = load_checkpoint(directory)
        cfg = extra["config"]
        cfg.update(overrides)
        config = TrainConfig.from_dict(cfg)
        if extra["num_items"] != data.num_items or extra["n"] != data.n:
            raise ValueError("checkpoint does not match the dataset (items or history length differ)")
        modules = LogicModules(groups["child"])
        controller = None
        if "controller" in groups:
            controller = Controller(groups["controller"], CONTROLLER_MODE[config.mode])
        tr = cls(data, config, modules, controller)
        tr.epoch = extra["epoch"]
        tr.baseline = MovingBaseline(**extra["baseline"])
        tr.rng.bit_generator.state = extra["rng"]
        return tr
