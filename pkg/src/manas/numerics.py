"""Dense primitives shared by the child network and the controller.

Everything runs on ``torch`` tensors in double precision by default.  Gradients
come from torch's reverse-mode autograd; :func:`finite_difference_check` is the
independent arbiter and only ever evaluates forward passes.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

DTYPE = torch.float64

CHECKPOINT_FORMAT = "manas-checkpoint"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class VocabularyError(KeyError):
    """Raised for item ids outside the embedding table."""


def set_precision(name: str) -> None:
    """Switch the dtype used for newly created parameters ("float64" or "float32")."""
    global DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"unsupported precision {name!r}")
    DTYPE = getattr(torch, name)


def as_tensor(values, dtype=None) -> Tensor:
    return torch.as_tensor(np.asarray(values), dtype=dtype or DTYPE)


class ParameterSet:
    """Named tensors plus Adam moment accumulators and a step counter.

    Names listed in ``frozen`` are stored and checkpointed but never updated.
    """

    def __init__(self, tensors: Mapping[str, Tensor] | None = None, frozen: Iterable[str] = ()):
        self.tensors: dict[str, Tensor] = {}
        self.frozen: set[str] = set(frozen)
        self.m: dict[str, Tensor] = {}
        self.v: dict[str, Tensor] = {}
        self.step = 0
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        t = torch.as_tensor(value, dtype=DTYPE).detach().clone()
        if not torch.isfinite(t).all():
            raise ValueError(f"parameter {name!r} has non-finite values")
        self.tensors[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in self.frozen]

    def requires_grad_(self, flag: bool = True) -> "ParameterSet":
        for name in self.trainable():
            self.tensors[name].requires_grad_(flag)
        return self

    def num_values(self, names: Iterable[str] | None = None) -> int:
        names = self.trainable() if names is None else names
        return sum(self.tensors[k].numel() for k in names)

    def squared_norm(self, names: Iterable[str] | None = None) -> Tensor:
        names = self.trainable() if names is None else names
        return sum((self.tensors[k] ** 2).sum() for k in names)

    def fingerprint(self) -> str:
        """SHA-256 over names and raw bytes; used to prove a phase left params untouched."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def copy(self) -> "ParameterSet":
        out = ParameterSet({k: v for k, v in self.tensors.items()}, self.frozen)
        out.m = {k: v.clone() for k, v in self.m.items()}
        out.v = {k: v.clone() for k, v in self.v.items()}
        out.step = self.step
        return out


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adam_update(params: ParameterSet, grads: Mapping[str, Tensor], config: AdamConfig,
                names: Iterable[str] | None = None) -> None:
    """Apply one bias-corrected Adam step in place and advance the step counter."""
    extra = set(grads) - set(params.tensors)
    if extra:
        raise KeyError(f"gradients for unknown parameters: {sorted(extra)}")
    names = params.trainable() if names is None else list(names)
    missing = [k for k in names if k not in grads]
    if missing:
        raise KeyError(f"missing gradients for: {missing}")
    params.step += 1
    t = params.step
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    with torch.no_grad():
        for name in names:
            if name in params.frozen:
                raise ValueError(f"parameter {name!r} is frozen")
            p = params.tensors[name]
            g = grads[name]
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {tuple(g.shape)} != {tuple(p.shape)} for {name!r}")
            m = params.m.get(name)
            v = params.v.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = config.beta1 * m + (1.0 - config.beta1) * g
            v = config.beta2 * v + (1.0 - config.beta2) * g * g
            params.m[name] = m
            params.v[name] = v
            p -= config.lr * (m / c1) / (torch.sqrt(v / c2) + config.eps)


def gradients(loss: Tensor, params: ParameterSet, names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Reverse-mode gradient of a scalar loss w.r.t. the named parameters (zeros if unused)."""
    names = params.trainable() if names is None else list(names)
    tensors = [params[k] for k in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {k: (torch.zeros_like(t) if g is None else g) for k, t, g in zip(names, tensors, grads)}


def init_mlp(params: ParameterSet, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    """Add weights ``{prefix}.w{i}`` of shape (out, in) and zero biases for consecutive ``sizes``."""
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}.w{i}", rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        params.add(f"{prefix}.b{i}", np.zeros(fan_out))


def mlp_layers(params: ParameterSet, prefix: str) -> int:
    n = 0
    while f"{prefix}.w{n}" in params:
        n += 1
    if n == 0:
        raise KeyError(f"no MLP named {prefix!r}")
    return n


def mlp_forward(params: ParameterSet, x: Tensor, prefix: str, activation=torch.relu) -> Tensor:
    """ReLU on hidden layers, linear output.  ``x`` may carry any number of leading batch dims."""
    layers = mlp_layers(params, prefix)
    w0 = params[f"{prefix}.w0"]
    if x.shape[-1] != w0.shape[1]:
        raise DimensionError(f"{prefix}: input width {x.shape[-1]} != {w0.shape[1]}")
    for i in range(layers):
        x = x @ params[f"{prefix}.w{i}"].T + params[f"{prefix}.b{i}"]
        if i < layers - 1:
            x = activation(x)
    return x


def init_lstm(params: ParameterSet, prefix: str, input_dim: int, hidden_dim: int,
              rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(hidden_dim)
    params.add(f"{prefix}.w_ih", rng.uniform(-bound, bound, size=(4 * hidden_dim, input_dim)))
    params.add(f"{prefix}.w_hh", rng.uniform(-bound, bound, size=(4 * hidden_dim, hidden_dim)))
    params.add(f"{prefix}.b", rng.uniform(-bound, bound, size=4 * hidden_dim))


def lstm_step(params: ParameterSet, x: Tensor, h_prev: Tensor, c_prev: Tensor,
              prefix: str = "lstm") -> tuple[Tensor, Tensor]:
    """One LSTM cell update; gate blocks are ordered input, forget, candidate, output."""
    w_ih = params[f"{prefix}.w_ih"]
    w_hh = params[f"{prefix}.w_hh"]
    hidden = w_hh.shape[1]
    if x.shape[-1] != w_ih.shape[1]:
        raise DimensionError(f"lstm input width {x.shape[-1]} != {w_ih.shape[1]}")
    if h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise DimensionError(f"lstm state width must be {hidden}")
    gates = x @ w_ih.T + h_prev @ w_hh.T + params[f"{prefix}.b"]
    i, f, g, o = gates.split(hidden, dim=-1)
    c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


_zero_norm_warned = False


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; zero-norm vectors score 0."""
    global _zero_norm_warned
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine over widths {a.shape[-1]} and {b.shape[-1]}")
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    zero = denom == 0
    if bool(zero.any()):
        if not _zero_norm_warned:
            logger.warning("cosine similarity of a zero-norm vector; returning 0")
            _zero_norm_warned = True
        denom = torch.where(zero, torch.ones_like(denom), denom)
    sim = (a * b).sum(dim=-1) / denom
    return sim.clamp(-1.0, 1.0)


def finite_difference_check(function: Callable[[ParameterSet], Tensor], params: ParameterSet,
                            perturbation: float = 1e-5, names: Iterable[str] | None = None,
                            details: bool = False):
    """Max relative error between autograd and central differences over every coordinate.

    Relative error per coordinate is ``|fd - an| / max(|fd|, |an|, 1e-8)``.
    With ``details=True`` also returns ``{name: (analytic, numeric)}``.
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    names = params.trainable() if names is None else list(names)
    params.requires_grad_(True)
    try:
        value = function(params)
        if not torch.isfinite(value):
            raise FloatingPointError("function value is not finite")
        analytic = gradients(value, params, names)
    finally:
        params.requires_grad_(False)

    worst = 0.0
    out = {}
    with torch.no_grad():
        for name in names:
            p = params[name]
            flat = p.view(-1)
            numeric = torch.zeros_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + perturbation
                f_plus = float(function(params))
                flat[j] = orig - perturbation
                f_minus = float(function(params))
                flat[j] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise FloatingPointError(f"non-finite value while perturbing {name}[{j}]")
                numeric[j] = (f_plus - f_minus) / (2 * perturbation)
            an = analytic[name].reshape(-1)
            denom = torch.maximum(torch.maximum(numeric.abs(), an.abs()), torch.tensor(1e-8, dtype=an.dtype))
            err = float(((numeric - an).abs() / denom).max()) if flat.numel() else 0.0
            worst = max(worst, err)
            out[name] = (an.view(p.shape).clone(), numeric.view(p.shape))
    return (worst, out) if details else worst


def save_checkpoint(directory: str | Path, groups: Mapping[str, ParameterSet], extra: dict | None = None) -> Path:
    """Write ``tensors.npz`` plus a JSON manifest (name, shape, dtype) for every group.

    Adam moments are stored as ``<group>/<name>@m`` and ``@v``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "groups": {}, "extra": extra or {}}
    for gname, ps in groups.items():
        entries = []
        for name, t in ps.tensors.items():
            key = f"{gname}/{name}"
            arrays[key] = t.detach().cpu().numpy()
            entries.append({"name": name, "shape": list(t.shape), "dtype": str(arrays[key].dtype),
                            "frozen": name in ps.frozen})
            if name in ps.m:
                arrays[key + "@m"] = ps.m[name].cpu().numpy()
                arrays[key + "@v"] = ps.v[name].cpu().numpy()
        manifest["groups"][gname] = {"step": ps.step, "tensors": entries}
    np.savez(directory / "tensors.npz", **arrays)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, ParameterSet], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory} is not a {CHECKPOINT_FORMAT}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    groups = {}
    with np.load(directory / "tensors.npz") as data:
        for gname, spec in manifest["groups"].items():
            ps = ParameterSet()
            for entry in spec["tensors"]:
                key = f"{gname}/{entry['name']}"
                arr = data[key]
                if list(arr.shape) != entry["shape"]:
                    raise DimensionError(f"{key}: stored shape {arr.shape} != manifest {entry['shape']}")
                ps.tensors[entry["name"]] = torch.from_numpy(arr.copy())
                if entry.get("frozen"):
                    ps.frozen.add(entry["name"])
                if key + "@m" in data:
                    ps.m[entry["name"]] = torch.from_numpy(data[key + "@m"].copy())
                    ps.v[entry["name"]] = torch.from_numpy(data[key + "@v"].copy())
            ps.step = spec["step"]
            groups[gname] = ps
    return groups, manifest["extra"]
