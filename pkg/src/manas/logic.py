"""Child-network parameter space: predicate embeddings, neural AND/OR/NOT, the true anchor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import DimensionError, ParameterSet, VocabularyError, Tensor, cosine_similarity, init_mlp, mlp_forward

LAWS = ("and_idempotence", "or_idempotence", "double_negation", "not_true", "and_commutativity",
        "or_commutativity")
DEFAULT_LAWS = ("and_idempotence", "or_idempotence", "double_negation", "not_true")

ANCHOR = "anchor"
EMBEDDINGS = "embeddings"


@dataclass
class LogicModules:
    """Shared child parameters.

    ``params`` holds the item predicate table ``embeddings`` (num_items x d), the three MLPs
    ``and``/``or``/``not`` and the frozen unit-norm ``anchor``.
    """

    params: ParameterSet

    @classmethod
    def initialize(cls, num_items: int, dim: int = 64, rng: np.random.Generator | None = None,
                   embedding_std: float = 0.01) -> "LogicModules":
        rng = rng if rng is not None else np.random.default_rng(0)
        ps = ParameterSet()
        ps.add(EMBEDDINGS, rng.normal(0.0, embedding_std, size=(num_items, dim)))
        init_mlp(ps, "and", [2 * dim, dim, dim], rng)
        init_mlp(ps, "or", [2 * dim, dim, dim], rng)
        init_mlp(ps, "not", [dim, dim, dim], rng)
        anchor = rng.normal(size=dim)
        ps.add(ANCHOR, anchor / np.linalg.norm(anchor), frozen=True)
        return cls(ps)

    @property
    def dim(self) -> int:
        return self.params[ANCHOR].shape[0]

    @property
    def num_items(self) -> int:
        return self.params[EMBEDDINGS].shape[0]

    @property
    def anchor(self) -> Tensor:
        return self.params[ANCHOR]

    def embed(self, items) -> Tensor:
        items = torch.as_tensor(items, dtype=torch.long)
        if items.numel() and (int(items.min()) < 0 or int(items.max()) >= self.num_items):
            raise VocabularyError("item id outside the vocabulary")
        return self.params[EMBEDDINGS][items]

    def _check(self, *xs: Tensor) -> None:
        for x in xs:
            if x.shape[-1] != self.dim:
                raise DimensionError(f"expected width {self.dim}, got {x.shape[-1]}")

    def apply_and(self, x: Tensor, y: Tensor) -> Tensor:
        self._check(x, y)
        return mlp_forward(self.params, torch.cat([x, y], dim=-1), "and")

    def apply_or(self, x: Tensor, y: Tensor) -> Tensor:
        self._check(x, y)
        return mlp_forward(self.params, torch.cat([x, y], dim=-1), "or")

    def apply_not(self, x: Tensor) -> Tensor:
        self._check(x)
        return mlp_forward(self.params, x, "not")

    def truth_score(self, v: Tensor) -> Tensor:
        self._check(v)
        return cosine_similarity(v, self.anchor)

    def logic_regularizer(self, X: Tensor, laws=DEFAULT_LAWS, per_law: bool = False):
        """Sum over enabled laws of the mean ``1 - Sim(lhs, rhs)`` residual over the rows of ``X``."""
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("logic regularizer needs a non-empty (m, d) batch")
        self._check(X)
        unknown = set(laws) - set(LAWS)
        if unknown:
            raise ValueError(f"unknown laws {sorted(unknown)}")
        terms = {}
        if "and_idempotence" in laws:
            terms["and_idempotence"] = (1 - cosine_similarity(self.apply_and(X, X), X)).mean()
        if "or_idempotence" in laws:
            terms["or_idempotence"] = (1 - cosine_similarity(self.apply_or(X, X), X)).mean()
        if "double_negation" in laws:
            terms["double_negation"] = (1 - cosine_similarity(self.apply_not(self.apply_not(X)), X)).mean()
        if "not_true" in laws:
            T = self.anchor
            terms["not_true"] = 1 - cosine_similarity(self.apply_not(T), -T)
        if "and_commutativity" in laws or "or_commutativity" in laws:
            Y = X.roll(1, dims=0)
            if "and_commutativity" in laws:
                terms["and_commutativity"] = (1 - cosine_similarity(self.apply_and(X, Y), self.apply_and(Y, X))).mean()
            if "or_commutativity" in laws:
                terms["or_commutativity"] = (1 - cosine_similarity(self.apply_or(X, Y), self.apply_or(Y, X))).mean()
        total = sum(terms.values())
        return (total, terms) if per_law else total


def idempotence_residual(modules: LogicModules, X: Tensor) -> Tensor:
    return (1 - cosine_similarity(modules.apply_and(X, X), X)).mean()
