"""Input-adaptive LSTM policy that samples one logic architecture per history sequence.

Per layer the controller makes five decisions: the module (AND/OR), the first operand, whether to
negate it, the second operand and whether to negate that.  The LSTM advances once per decision and
is fed the embedding of the decision just made.  Raw candidates are represented by controller-space
item embeddings (adaptive mode) or by position embeddings (positional mode); an intermediate slot
is represented by the hidden state produced right after its layer finished.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from .architecture import OPS, LogicArchitecture, canonicalize, validate
from .numerics import DimensionError, ParameterSet, Tensor, VocabularyError, init_lstm, lstm_step

ADAPTIVE, POSITIONAL = "adaptive", "positional"
SAMPLE, GREEDY = "sample", "greedy"

# rows of the step-input table
EMPTY, OP_EMB, NOT_EMB = 0, 1, 3  # OP_EMB + op code, NOT_EMB + flag

DECISIONS_PER_LAYER = 5


@dataclass
class SampleTrace:
    architecture: LogicArchitecture
    decision_log_probs: list[float] = field(default_factory=list)
    log_prob: float = 0.0
    decisions: np.ndarray | None = None


@dataclass
class BatchTrace:
    """Ordered decisions ``(op, first, second, neg_first, neg_second)`` per layer and their log-probs."""

    decisions: np.ndarray
    codes: np.ndarray
    log_prob: Tensor
    decision_log_probs: Tensor

    def architectures(self) -> list[LogicArchitecture]:
        n = self.codes.shape[1] + 1
        return [LogicArchitecture.from_array(c, n) for c in self.codes]


def canonical_codes(decisions: np.ndarray) -> np.ndarray:
    """Ordered decisions -> canonical step codes with ``left < right``."""
    d = np.asarray(decisions)
    swap = d[..., 1] > d[..., 2]
    out = np.empty_like(d)
    out[..., 0] = d[..., 0]
    out[..., 1] = np.where(swap, d[..., 2], d[..., 1])
    out[..., 2] = np.where(swap, d[..., 1], d[..., 2])
    out[..., 3] = np.where(swap, d[..., 4], d[..., 3])
    out[..., 4] = np.where(swap, d[..., 3], d[..., 4])
    return out


def variable_logits(pool: Tensor, h_prev: Tensor, params: ParameterSet) -> Tensor:
    """``w1 · (e_i + h) + b1`` for every candidate in ``pool`` (..., k, d)."""
    if pool.shape[-2] == 0:
        raise ValueError("empty candidate pool")
    if pool.shape[-1] != h_prev.shape[-1]:
        raise DimensionError("candidate and hidden widths differ")
    return (pool + h_prev.unsqueeze(-2)) @ params["w1"] + params["b1"]


def op_logits(h: Tensor, params: ParameterSet) -> Tensor:
    return h @ params["op.w"].T + params["op.b"]


def not_logits(logit: Tensor) -> Tensor:
    """``[-l, l]``: index 1 couples the operand with NOT, so P(NOT) = sigmoid(2l)."""
    return torch.stack([-logit, logit], dim=-1)


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= u[:, None]).sum(axis=-1)
    last = probs.shape[-1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=-1)
    return np.minimum(idx, last)


class Controller:
    def __init__(self, params: ParameterSet, mode: str = ADAPTIVE):
        if mode not in (ADAPTIVE, POSITIONAL):
            raise ValueError(f"unknown controller mode {mode!r}")
        self.params = params
        self.mode = mode

    @classmethod
    def initialize(cls, num_items: int, dim: int = 64, mode: str = ADAPTIVE, max_len: int = 10,
                   rng: np.random.Generator | None = None, embedding_std: float = 0.1) -> "Controller":
        rng = rng if rng is not None else np.random.default_rng(0)
        ps = ParameterSet()
        init_lstm(ps, "lstm", dim, dim, rng)
        bound = 1.0 / np.sqrt(dim)
        ps.add("w1", rng.uniform(-bound, bound, size=dim))
        ps.add("b1", np.array(0.0))
        ps.add("op.w", rng.uniform(-bound, bound, size=(2, dim)))
        ps.add("op.b", np.zeros(2))
        ps.add("step_emb", rng.normal(0.0, embedding_std, size=(5, dim)))
        if mode == ADAPTIVE:
            ps.add("item_emb", rng.normal(0.0, embedding_std, size=(num_items, dim)))
        else:
            ps.add("pos_emb", rng.normal(0.0, embedding_std, size=(max_len, dim)))
        return cls(ps, mode)

    @property
    def dim(self) -> int:
        return self.params["w1"].shape[0]

    def raw_representations(self, items: np.ndarray) -> Tensor:
        items = np.asarray(items, dtype=np.int64)
        B, n = items.shape
        if self.mode == ADAPTIVE:
            table = self.params["item_emb"]
            if items.size and (items.min() < 0 or items.max() >= table.shape[0]):
                raise VocabularyError("item id outside the controller vocabulary")
            return table[torch.from_numpy(items)]
        table = self.params["pos_emb"]
        if n > table.shape[0]:
            raise ValueError(f"sequence length {n} exceeds {table.shape[0]} position embeddings")
        return table[:n].unsqueeze(0).expand(B, n, table.shape[1])

    def run(self, items, strategy: str = SAMPLE, rng: np.random.Generator | None = None,
            forced: np.ndarray | None = None) -> BatchTrace:
        """Roll the policy over a batch of equal-length sequences.

        With ``forced`` (B, n-1, 5) the given ordered decisions are replayed and scored instead of
        drawn.  Gradients flow into ``log_prob`` whenever the parameters require them.
        """
        items = np.atleast_2d(np.asarray(items, dtype=np.int64))
        B, n = items.shape
        if strategy not in (SAMPLE, GREEDY):
            raise ValueError(f"unknown strategy {strategy!r}")
        if forced is None and strategy == SAMPLE and rng is None:
            raise ValueError("sampling needs an rng")
        p = self.params
        dt = p["w1"].dtype
        raw = self.raw_representations(items)
        if n == 1:
            zero = torch.zeros(B, dtype=dt)
            return BatchTrace(np.zeros((B, 0, 5), np.int64), np.zeros((B, 0, 5), np.int64), zero,
                              torch.zeros(B, 0, dtype=dt))

        rows = torch.arange(B)
        rows_np = np.arange(B)
        h = torch.zeros(B, self.dim, dtype=dt)
        c = torch.zeros(B, self.dim, dtype=dt)
        x = p["step_emb"][EMPTY].expand(B, self.dim)
        slots = list(raw.unbind(dim=1))
        avail = np.zeros((B, 2 * n - 1), dtype=bool)
        avail[:, :n] = True
        decisions = np.zeros((B, n - 1, 5), dtype=np.int64)
        logps = []

        def choose(logp: Tensor, column: int, t: int) -> np.ndarray:
            if forced is not None:
                return np.asarray(forced[:, t, column], dtype=np.int64)
            probs = logp.detach().exp().numpy()
            if strategy == GREEDY:
                return np.argmax(probs, axis=-1)
            return _draw(probs, rng.random(B))

        for t in range(n - 1):
            h, c = lstm_step(p, x, h, c)
            if t > 0:
                slots.append(h)
                avail[:, n + t - 1] = True
            lp = torch.log_softmax(op_logits(h, p), dim=-1)
            op = choose(lp, 0, t)
            logps.append(lp[rows, torch.from_numpy(op)])
            x = p["step_emb"][torch.from_numpy(op + OP_EMB)]
            pool = torch.stack(slots, dim=1)

            picked = []
            for k in (1, 2):
                h, c = lstm_step(p, x, h, c)
                mask = torch.from_numpy(avail[:, :pool.shape[1]])
                logits = variable_logits(pool, h, p)
                lp = torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)
                sel = choose(lp, k, t)
                if not avail[rows_np, sel].all():
                    raise ValueError("selected an unavailable slot")
                sel_t = torch.from_numpy(sel)
                logps.append(lp[rows, sel_t])
                avail[rows_np, sel] = False
                x = pool[rows, sel_t]
                h, c = lstm_step(p, x, h, c)
                lp_not = torch.log_softmax(not_logits(logits[rows, sel_t]), dim=-1)
                neg = choose(lp_not, k + 2, t)
                logps.append(lp_not[rows, torch.from_numpy(neg)])
                x = p["step_emb"][torch.from_numpy(neg + NOT_EMB)]
                picked.append((sel, neg))
            decisions[:, t, 0] = op
            decisions[:, t, 1] = picked[0][0]
            decisions[:, t, 2] = picked[1][0]
            decisions[:, t, 3] = picked[0][1]
            decisions[:, t, 4] = picked[1][1]

        per = torch.stack(logps, dim=1)
        return BatchTrace(decisions, canonical_codes(decisions), per.sum(dim=1), per)

    def sample_architecture(self, items, strategy: str = SAMPLE,
                            rng: np.random.Generator | None = None) -> SampleTrace:
        with torch.no_grad():
            tr = self.run(np.asarray(items)[None, :], strategy, rng)
        arch = tr.architectures()[0]
        per = tr.decision_log_probs[0].tolist()
        return SampleTrace(arch, per, float(sum(per)), tr.decisions[0])

    def orderings(self, arch: LogicArchitecture) -> np.ndarray:
        """All ordered decision sequences that canonicalise to ``arch`` (2^(n-1) of them)."""
        base = canonicalize(arch).to_array()
        out = []
        for flips in itertools.product((False, True), repeat=len(base)):
            d = base.copy()
            for t, f in enumerate(flips):
                if f:
                    d[t] = [d[t, 0], d[t, 2], d[t, 1], d[t, 4], d[t, 3]]
            out.append(d)
        return np.stack(out) if out else np.zeros((1, 0, 5), np.int64)

    def class_log_probs(self, archs: list[LogicArchitecture], items) -> Tensor:
        """Log-probability of each canonical class: logsumexp over every ordering of its steps."""
        items = np.asarray(items, dtype=np.int64)
        for a in archs:
            if validate(a) or a.n != len(items):
                raise ValueError(f"architecture {a.to_text()!r} is not valid for n={len(items)}")
        if len(items) == 1:
            return torch.zeros(len(archs), dtype=self.params["w1"].dtype)
        forced = np.concatenate([self.orderings(a) for a in archs])
        per_class = forced.shape[0] // len(archs)
        tr = self.run(np.repeat(items[None, :], forced.shape[0], axis=0), forced=forced)
        return torch.logsumexp(tr.log_prob.view(len(archs), per_class), dim=1)

    def log_prob(self, arch: LogicArchitecture, items) -> Tensor:
        return self.class_log_probs([arch], items)[0]

    def path_log_prob(self, decisions: np.ndarray, items) -> Tensor:
        """Log-probability of specific ordered decision paths (B, n-1, 5) for item rows (B, n)."""
        return self.run(items, forced=decisions).log_prob


def sample_batched(controller: Controller, items: np.ndarray, strategy: str, rng: np.random.Generator,
                   batch_size: int = 1024) -> np.ndarray:
    """Canonical codes for many sequences, drawn in generation batches without gradients."""
    out = []
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            out.append(controller.run(items[start:start + batch_size], strategy, rng).codes)
    n = items.shape[1]
    return np.concatenate(out) if out else np.zeros((0, n - 1, 5), np.int64)


def fixed_codes(arch: LogicArchitecture, count: int) -> np.ndarray:
    return np.repeat(canonicalize(arch).to_array()[None], count, axis=0)


__all__ = ["ADAPTIVE", "POSITIONAL", "SAMPLE", "GREEDY", "OPS", "Controller", "SampleTrace", "BatchTrace",
           "variable_logits", "op_logits", "not_logits", "canonical_codes", "sample_batched", "fixed_codes"]
