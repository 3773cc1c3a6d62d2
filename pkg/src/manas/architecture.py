"""Logic-expression architectures over ``n`` history variables.

An architecture is a list of ``n - 1`` binary steps.  Slots ``0..n-1`` are the raw inputs, step
``i`` writes slot ``n + i`` and every slot except the last is consumed exactly once, so each
architecture is a valid propositional expression with no variable reuse.  Within a step the
operands are kept in ascending slot order (the canonical form) and networks are always assembled
in that order.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .logic import LogicModules
from .numerics import Tensor

AND, OR = "AND", "OR"
OPS = (AND, OR)
OP_CODE = {AND: 0, OR: 1}
SYMBOL = {AND: "∧", OR: "∨"}
NEG = "¬"
MAX_ENUMERATE = 5


@dataclass(frozen=True)
class ArchStep:
    op: str
    left: int
    right: int
    neg_left: bool = False
    neg_right: bool = False

    def canonical(self) -> "ArchStep":
        if self.left <= self.right:
            return self
        return ArchStep(self.op, self.right, self.left, self.neg_right, self.neg_left)


@dataclass(frozen=True)
class LogicArchitecture:
    n: int
    steps: tuple[ArchStep, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def root(self) -> int:
        return 2 * self.n - 2

    def to_text(self) -> str:
        """Compact form ``OP,left,right,negL,negR;...`` (empty string for ``n == 1``)."""
        return ";".join(f"{s.op},{s.left},{s.right},{int(s.neg_left)},{int(s.neg_right)}" for s in self.steps)

    @classmethod
    def from_text(cls, text: str, n: int | None = None) -> "LogicArchitecture":
        steps = []
        for part in filter(None, (p.strip() for p in text.split(";"))):
            fields = [f.strip() for f in part.split(",")]
            if len(fields) == 3:
                fields += ["0", "0"]
            if len(fields) != 5:
                raise ValueError(f"bad step {part!r}")
            op = fields[0].upper()
            steps.append(ArchStep(op, int(fields[1]), int(fields[2]), fields[3] in ("1", "¬", "true"),
                                  fields[4] in ("1", "¬", "true")))
        return cls(len(steps) + 1 if n is None else n, tuple(steps))

    def to_array(self) -> np.ndarray:
        """Integer codes, one row per step: (op, left, right, neg_left, neg_right)."""
        return np.array([[OP_CODE[s.op], s.left, s.right, s.neg_left, s.neg_right] for s in self.steps],
                        dtype=np.int64).reshape(len(self.steps), 5)

    @classmethod
    def from_array(cls, codes: np.ndarray, n: int | None = None) -> "LogicArchitecture":
        codes = np.asarray(codes).reshape(-1, 5)
        steps = tuple(ArchStep(OPS[int(r[0])], int(r[1]), int(r[2]), bool(r[3]), bool(r[4])) for r in codes)
        return cls(len(steps) + 1 if n is None else n, steps)

    def __str__(self) -> str:
        return to_expression_string(self)


@dataclass(frozen=True)
class Violation:
    step: int | None
    rule: str
    message: str


class EnumerationRefused(ValueError):
    def __init__(self, n: int, count: int):
        super().__init__(f"refusing to enumerate n={n}: {count} architectures (limit n <= {MAX_ENUMERATE})")
        self.n = n
        self.count = count


def validate(arch: LogicArchitecture) -> list[Violation]:
    """Return every broken invariant; an empty list means the architecture is valid."""
    out = []
    n = arch.n
    if n < 1:
        return [Violation(None, "input_count", f"n must be >= 1, got {n}")]
    if len(arch.steps) != n - 1:
        out.append(Violation(None, "step_count", f"expected {n - 1} steps, got {len(arch.steps)}"))
    consumed: set[int] = set()
    for i, s in enumerate(arch.steps):
        produced = n + i
        if s.op not in OPS:
            out.append(Violation(i, "op", f"unknown op {s.op!r}"))
        if s.left == s.right:
            out.append(Violation(i, "operand_reuse", f"slot {s.left} used as both operands"))
        for slot in {s.left, s.right}:
            if not 0 <= slot < produced:
                out.append(Violation(i, "not_produced", f"slot {slot} does not exist before step {i}"))
            elif slot in consumed:
                out.append(Violation(i, "consumed_twice", f"slot {slot} consumed twice"))
        consumed.update((s.left, s.right))
    if not out and n > 1:
        missing = set(range(2 * n - 2)) - consumed
        if missing:
            out.append(Violation(None, "unconsumed", f"slots {sorted(missing)} never consumed"))
    return out


def is_valid(arch: LogicArchitecture) -> bool:
    return not validate(arch)


def _require_valid(arch: LogicArchitecture) -> None:
    problems = validate(arch)
    if problems:
        raise ValueError("invalid architecture: " + "; ".join(f"step {v.step}: {v.message}" for v in problems))


def canonicalize(arch: LogicArchitecture) -> LogicArchitecture:
    _require_valid(arch)
    return LogicArchitecture(arch.n, tuple(s.canonical() for s in arch.steps))


def count_architectures(n: int) -> int:
    """Size of the search space: the product over pool sizes i = n..2 of 4 * C(i, 2) * 2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return math.prod(4 * math.comb(i, 2) * 2 for i in range(2, n + 1))


def iter_architectures(n: int) -> Iterator[LogicArchitecture]:
    if n < 1:
        raise ValueError("n must be >= 1")

    def rec(pool: list[int], steps: list[ArchStep]):
        if len(pool) == 1:
            yield LogicArchitecture(n, tuple(steps))
            return
        new = n + len(steps)
        for a in range(len(pool)):
            for b in range(a + 1, len(pool)):
                rest = pool[:a] + pool[a + 1:b] + pool[b + 1:] + [new]
                for op in OPS:
                    for nl in (False, True):
                        for nr in (False, True):
                            steps.append(ArchStep(op, pool[a], pool[b], nl, nr))
                            yield from rec(rest, steps)
                            steps.pop()

    yield from rec(list(range(n)), [])


def enumerate_architectures(n: int) -> list[LogicArchitecture]:
    if n > MAX_ENUMERATE:
        raise EnumerationRefused(n, count_architectures(n))
    return list(iter_architectures(n))


def ncr_conjunction(n: int) -> LogicArchitecture:
    """The fixed left-deep conjunction e1 ∧ e2 ∧ ... ∧ en with no negations."""
    if n == 1:
        return LogicArchitecture(1)
    steps = [ArchStep(AND, 0, 1)]
    for i in range(1, n - 1):
        steps.append(ArchStep(AND, i + 1, n + i - 1))
    return LogicArchitecture(n, tuple(steps))


# -- neural assembly -------------------------------------------------------------------------

def assemble_premise(arch: LogicArchitecture, inputs, modules: LogicModules) -> Tensor:
    """Evaluate one architecture on ``inputs`` (n x d, or batch x n x d)."""
    _require_valid(arch)
    x = inputs if isinstance(inputs, torch.Tensor) else torch.stack(list(inputs))
    if x.shape[-2] != arch.n:
        raise ValueError(f"architecture expects {arch.n} inputs, got {x.shape[-2]}")
    slots = list(x.unbind(dim=-2))
    for s in arch.steps:
        s = s.canonical()
        a, b = slots[s.left], slots[s.right]
        if s.neg_left:
            a = modules.apply_not(a)
        if s.neg_right:
            b = modules.apply_not(b)
        slots.append(modules.apply_and(a, b) if s.op == AND else modules.apply_or(a, b))
    return slots[-1]


def _select_apply(mask: np.ndarray, fn_true, fn_false, *args: Tensor) -> Tensor:
    """Row-wise ``fn_true(rows)`` where ``mask`` else ``fn_false(rows)``, computing each only where needed."""
    idx_t = np.flatnonzero(mask)
    idx_f = np.flatnonzero(~mask)
    if len(idx_f) == 0:
        return fn_true(*args)
    if len(idx_t) == 0:
        return fn_false(*args)
    it = torch.from_numpy(idx_t)
    jf = torch.from_numpy(idx_f)
    top = fn_true(*(a[it] for a in args))
    bottom = fn_false(*(a[jf] for a in args))
    order = torch.from_numpy(np.argsort(np.concatenate([idx_t, idx_f]), kind="stable"))
    return torch.cat([top, bottom], dim=0)[order]


def assemble_batch(codes: np.ndarray, inputs: Tensor, modules: LogicModules) -> Tensor:
    """Evaluate a different architecture per row: ``codes`` is (B, n-1, 5), ``inputs`` (B, n, d).

    Codes must already be canonical (``left < right``).
    """
    codes = np.asarray(codes)
    B, n = inputs.shape[0], inputs.shape[1]
    if codes.shape != (B, n - 1, 5):
        raise ValueError(f"codes shape {codes.shape} does not match inputs {tuple(inputs.shape)}")
    slots = inputs
    rows = torch.arange(B)
    ident = lambda v: v  # noqa: E731
    for t in range(n - 1):
        c = codes[:, t]
        a = slots[rows, torch.from_numpy(c[:, 1])]
        b = slots[rows, torch.from_numpy(c[:, 2])]
        a = _select_apply(c[:, 3].astype(bool), modules.apply_not, ident, a)
        b = _select_apply(c[:, 4].astype(bool), modules.apply_not, ident, b)
        out = _select_apply(c[:, 0] == OP_CODE[AND], modules.apply_and, modules.apply_or, a, b)
        slots = torch.cat([slots, out.unsqueeze(1)], dim=1)
    return slots[:, -1]


def horn_scores(premise: Tensor, targets: Tensor, modules: LogicModules) -> Tensor:
    """Truth of ``¬premise ∨ target`` for each target: premise (..., d), targets (..., C, d) -> (..., C)."""
    neg = modules.apply_not(premise).unsqueeze(-2).expand_as(targets)
    return modules.truth_score(modules.apply_or(neg, targets))


def horn_score(premise: Tensor, target: Tensor, modules: LogicModules) -> Tensor:
    return modules.truth_score(modules.apply_or(modules.apply_not(premise), target))


@dataclass(frozen=True)
class HornNetwork:
    """``premise → target`` evaluated as ``¬premise ∨ target``."""

    premise: LogicArchitecture
    target: int

    def score(self, history, modules: LogicModules) -> Tensor:
        inputs = modules.embed(history)
        return horn_score(assemble_premise(self.premise, inputs, modules), modules.embed(self.target), modules)


# -- text, parsing, DOT ----------------------------------------------------------------------

def _default_names(n: int) -> list[str]:
    return [f"e{i + 1}" for i in range(n)]


def to_expression_string(arch: LogicArchitecture, names: Sequence[str] | None = None) -> str:
    """Infix form in network operand order, e.g. ``e4 ∧ (e3 ∨ (e1 ∧ e2))``."""
    names = list(names) if names is not None else _default_names(arch.n)
    if len(names) != arch.n:
        raise ValueError("need one name per input")
    _require_valid(arch)
    text = list(names)
    compound = [False] * arch.n
    for s in arch.steps:
        s = s.canonical()
        parts = []
        for slot, neg in ((s.left, s.neg_left), (s.right, s.neg_right)):
            t = f"({text[slot]})" if compound[slot] else text[slot]
            parts.append(NEG + t if neg else t)
        text.append(f"{parts[0]} {SYMBOL[s.op]} {parts[1]}")
        compound.append(True)
    return text[-1]


_TOKEN = re.compile(r"\s*(¬|!|~|∧|&|∨|\||\(|\)|[A-Za-z_][A-Za-z_0-9]*)")


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ValueError(f"unexpected character at {pos} in {text!r}")
        tok = m.group(1)
        out.append({"!": "¬", "~": "¬", "&": "∧", "|": "∨"}.get(tok, tok))
        pos = m.end()
    return out


def parse_tree(text: str):
    """Parse an infix expression into nested tuples ``("var", name)``, ``("not", t)``, ``(op, l, r)``.

    Binary operators must be parenthesised except at the top level; a chain ``a ∧ b ∨ c`` groups
    left to right.
    """
    toks = _tokenize(text)
    pos = 0

    def atom():
        nonlocal pos
        if pos >= len(toks):
            raise ValueError("unexpected end of expression")
        tok = toks[pos]
        pos += 1
        if tok == NEG:
            return ("not", atom())
        if tok == "(":
            t = chain()
            if pos >= len(toks) or toks[pos] != ")":
                raise ValueError("missing ')'")
            pos += 1
            return t
        if tok in (")", "∧", "∨"):
            raise ValueError(f"unexpected {tok!r}")
        return ("var", tok)

    def chain():
        nonlocal pos
        left = atom()
        while pos < len(toks) and toks[pos] in ("∧", "∨"):
            op = AND if toks[pos] == "∧" else OR
            pos += 1
            left = (op, left, atom())
        return left

    tree = chain()
    if pos != len(toks):
        raise ValueError(f"trailing tokens in {text!r}")
    return tree


def parse_expression(text: str, names: Sequence[str] | None = None) -> LogicArchitecture:
    """Build the (canonical) architecture for an expression; steps follow post-order."""
    tree = parse_tree(text)

    def variables(t):
        if t[0] == "var":
            return [t[1]]
        if t[0] == "not":
            return variables(t[1])
        return variables(t[1]) + variables(t[2])

    used = variables(tree)
    if names is None:
        names = sorted(set(used), key=lambda s: (len(s), s))
    names = list(names)
    if sorted(used) != sorted(names):
        raise ValueError("every variable must appear exactly once")
    index = {nm: i for i, nm in enumerate(names)}
    n = len(names)
    steps: list[ArchStep] = []

    def build(t) -> tuple[int, bool]:
        if t[0] == "var":
            return index[t[1]], False
        if t[0] == "not":
            slot, neg = build(t[1])
            if neg:
                raise ValueError("double negation of an operand is outside the grammar")
            return slot, True
        (ls, ln), (rs, rn) = build(t[1]), build(t[2])
        steps.append(ArchStep(t[0], ls, rs, ln, rn).canonical())
        return n + len(steps) - 1, False

    _, root_neg = build(tree)
    if root_neg:
        raise ValueError("the root of a premise cannot be negated")
    return canonicalize(LogicArchitecture(n, tuple(steps)))


def evaluate_tree(tree, values: dict, modules: LogicModules) -> Tensor:
    """Recursive evaluation of a parsed expression in its written operand order."""
    kind = tree[0]
    if kind == "var":
        return values[tree[1]]
    if kind == "not":
        return modules.apply_not(evaluate_tree(tree[1], values, modules))
    left = evaluate_tree(tree[1], values, modules)
    right = evaluate_tree(tree[2], values, modules)
    return modules.apply_and(left, right) if kind == AND else modules.apply_or(left, right)


def commutative_form(tree):
    """Normal form that ignores operand order, for comparing expressions up to commutativity."""
    if tree[0] == "var":
        return tree
    if tree[0] == "not":
        return ("not", commutative_form(tree[1]))
    a, b = sorted((commutative_form(tree[1]), commutative_form(tree[2])), key=repr)
    return (tree[0], a, b)


def to_dot(arch: LogicArchitecture, names: Sequence[str] | None = None, target: str | None = None) -> str:
    """Graphviz DOT for the premise (and, when ``target`` is given, the ``¬premise ∨ target`` head)."""
    _require_valid(arch)
    names = list(names) if names is not None else _default_names(arch.n)
    lines = ["digraph premise {", "  rankdir=BT;"]
    node = [f"v{i}" for i in range(arch.n)]
    for i, nm in enumerate(names):
        lines.append(f'  v{i} [label="{nm}", shape=box];')
    for i, s in enumerate(arch.steps):
        s = s.canonical()
        op_node = f"s{i}"
        lines.append(f'  {op_node} [label="{s.op}"];')
        for side, slot, neg in (("l", s.left, s.neg_left), ("r", s.right, s.neg_right)):
            src = node[slot]
            if neg:
                not_node = f"n{i}{side}"
                lines.append(f'  {not_node} [label="NOT", color=red];')
                lines.append(f"  {src} -> {not_node};")
                src = not_node
            lines.append(f"  {src} -> {op_node};")
        node.append(op_node)
    if target is not None:
        lines += ['  neg_premise [label="NOT", color=red];', f"  {node[-1]} -> neg_premise;",
                  f'  target [label="{target}", shape=box];', '  head [label="OR"];',
                  "  neg_premise -> head;", "  target -> head;"]
    lines.append("}")
    return "\n".join(lines)
