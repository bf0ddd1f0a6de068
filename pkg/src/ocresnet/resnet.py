"""Dense residual network with skip-chain intermediate outputs.

State update for block ``k``::

    x[k+1] = x[k]       + F_k(x[k])    if widths[k] == widths[k+1]
    x[k+1] = S_k(x[k])  + F_k(x[k])    otherwise (projection skip)

with ``F_k(x) = relu(x @ W1 + b1) @ W2 + b2``.  The exit at depth ``k`` pushes
``x[k]`` through every later projection skip, then the (optional) head
projection chain, then the output layer ``H``.  Identity skips contribute
nothing to an exit.

Parameters live in a flat, canonically ordered name -> array mapping:

    V.W V.b | F{k}.W1 F{k}.b1 F{k}.W2 F{k}.b2 [S{k}.W S{k}.b] ... | P{i}.W P{i}.b ... H.W H.b
    | E{k}.<map>.W E{k}.<map>.b ...   (extra_params exits only)
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError

LOSS_KINDS = ("cross_entropy", "l2")
EXIT_MODES = ("weight_shared", "extra_params")
RESIDUAL_KEYS = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture of a ResNet-N.

    ``widths[0]`` is the embedding width and ``widths[k+1]`` the output width
    of block ``k``, so ``depth == len(widths) - 1``.  ``head_chain`` lists the
    widths of extra projections applied before the output layer; it is empty
    for ordinary networks and is how a SubResNet inherits the parent's deeper
    projection skips.
    """

    widths: tuple[int, ...]
    input_dim: int
    num_outputs: int
    loss_kind: str = "cross_entropy"
    exit_mode: str = "weight_shared"
    hidden_multiplier: int = 1
    head_chain: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "head_chain", tuple(int(w) for w in self.head_chain))
        if len(self.widths) < 1:
            raise ConfigError("widths needs at least the embedding width")
        for name, seq in (("widths", self.widths), ("head_chain", self.head_chain)):
            if any(w < 1 for w in seq):
                raise ConfigError(f"{name} entries must be positive, got {list(seq)}")
        for name in ("input_dim", "num_outputs", "hidden_multiplier"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.exit_mode not in EXIT_MODES:
            raise ConfigError(f"exit_mode must be one of {EXIT_MODES}, got {self.exit_mode!r}")

    @classmethod
    def homogeneous(cls, depth: int, width: int, input_dim: int, num_outputs: int, **kw) -> NetworkConfig:
        return cls(widths=(width,) * (depth + 1), input_dim=input_dim, num_outputs=num_outputs, **kw)

    @classmethod
    def staged(cls, blocks_per_stage: int, stage_widths, input_dim: int, num_outputs: int,
               **kw) -> NetworkConfig:
        """The usual pattern: each stage after the first opens with a projection skip."""
        widths = [stage_widths[0]]
        for w in stage_widths:
            widths.extend([w] * blocks_per_stage)
        return cls(widths=tuple(widths), input_dim=input_dim, num_outputs=num_outputs, **kw)

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def skip_set(self) -> frozenset[int]:
        """Indices of blocks with a projection skip (never stored, always derived)."""
        return frozenset(k for k in range(self.depth) if self.widths[k] != self.widths[k + 1])

    @property
    def is_homogeneous(self) -> bool:
        return not self.skip_set

    def hidden_width(self, k: int) -> int:
        return self.hidden_multiplier * self.widths[k + 1]

    def chain(self, k: int) -> list[str]:
        """Map names an exit at depth ``k`` applies, in order."""
        skips = [f"S{j}" for j in sorted(self.skip_set) if j >= k]
        return skips + [f"P{i}" for i in range(len(self.head_chain))] + ["H"]

    def _map_shape(self, name: str) -> tuple[int, int]:
        if name.startswith("S"):
            j = int(name[1:])
            return self.widths[j], self.widths[j + 1]
        dims = (self.widths[-1], *self.head_chain, self.num_outputs)
        if name == "H":
            return dims[-2], dims[-1]
        i = int(name[1:])
        return dims[i], dims[i + 1]

    def param_shapes(self) -> OrderedDict[str, tuple[int, ...]]:
        shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
        shapes["V.W"] = (self.input_dim, self.widths[0])
        shapes["V.b"] = (self.widths[0],)
        for k in range(self.depth):
            h = self.hidden_width(k)
            shapes[f"F{k}.W1"] = (self.widths[k], h)
            shapes[f"F{k}.b1"] = (h,)
            shapes[f"F{k}.W2"] = (h, self.widths[k + 1])
            shapes[f"F{k}.b2"] = (self.widths[k + 1],)
            if k in self.skip_set:
                shapes[f"S{k}.W"] = (self.widths[k], self.widths[k + 1])
                shapes[f"S{k}.b"] = (self.widths[k + 1],)
        for m in self.chain(self.depth):
            fan_in, fan_out = self._map_shape(m)
            shapes[f"{m}.W"] = (fan_in, fan_out)
            shapes[f"{m}.b"] = (fan_out,)
        if self.exit_mode == "extra_params":
            for k in range(self.depth):
                for m in self.chain(k):
                    fan_in, fan_out = self._map_shape(m)
                    shapes[f"E{k}.{m}.W"] = (fan_in, fan_out)
                    shapes[f"E{k}.{m}.b"] = (fan_out,)
        return shapes

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["head_chain"] = list(self.head_chain)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> NetworkConfig:
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["head_chain"] = tuple(d.get("head_chain", ()))
        return cls(**d)


def is_exit_param(name: str) -> bool:
    return name.startswith("E")


def residual_names(k: int) -> list[str]:
    return [f"F{k}.{key}" for key in RESIDUAL_KEYS]


class WeightBundle:
    """Named float64 parameter arrays in canonical order for one config."""

    def __init__(self, config: NetworkConfig, arrays: Mapping[str, np.ndarray]):
        shapes = config.param_shapes()
        if set(arrays) != set(shapes):
            missing = sorted(set(shapes) - set(arrays))
            extra = sorted(set(arrays) - set(shapes))
            raise DimensionError(f"parameter names do not match config: missing={missing} extra={extra}")
        self.config = config
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, shape in shapes.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {a.shape}")
            self.arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.arrays[name].shape:
            raise DimensionError(f"{name}: expected shape {self.arrays[name].shape}, got {value.shape}")
        self.arrays[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> WeightBundle:
        return WeightBundle(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    @classmethod
    def from_flat(cls, config: NetworkConfig, vec: np.ndarray) -> WeightBundle:
        vec = np.asarray(vec, dtype=np.float64)
        shapes = config.param_shapes()
        total = sum(int(np.prod(s)) for s in shapes.values())
        if vec.shape != (total,):
            raise DimensionError(f"flat payload has {vec.size} values, config implies {total}")
        arrays, pos = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            arrays[name] = vec[pos:pos + n].reshape(shape).copy()
            pos += n
        return cls(config, arrays)

    def residual_sq_norms(self) -> np.ndarray:
        """``||w_F,k||^2`` for every block."""
        return np.array([
            sum(float(np.sum(self.arrays[n] * self.arrays[n])) for n in residual_names(k))
            for k in range(self.config.depth)
        ])

    def zero_residuals(self, start: int) -> WeightBundle:
        """Copy with the residual branches of blocks ``start..N-1`` set to exactly zero."""
        out = self.copy()
        for k in range(start, self.config.depth):
            for n in residual_names(k):
                out.arrays[n] = np.zeros_like(out.arrays[n])
        return out

    def tensors(self, requires_grad: bool = False) -> OrderedDict[str, Tensor]:
        return OrderedDict(
            (n, Tensor(a, requires_grad=requires_grad, name=n)) for n, a in self.arrays.items()
        )

    def equal(self, other: WeightBundle) -> bool:
        return (self.config == other.config and list(self) == list(other)
                and all(np.array_equal(self[n], other[n]) for n in self))


def init_weights(config: NetworkConfig, rng: np.random.Generator | int,
                 residual_scale: float = 0.1) -> WeightBundle:
    """He-normal stem and residual input layers, scaled-down residual output layers,
    fan-in normal projections and head, zero biases.  Extra exit parameters start as
    copies of the backbone maps they shadow."""
    rng = np.random.default_rng(rng)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in config.param_shapes().items():
        if is_exit_param(name):
            continue
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
            continue
        fan_in = shape[0]
        if name.startswith(("V.", "F")) and not name.endswith("W2"):
            std = np.sqrt(2.0 / fan_in)
        elif name.endswith("W2"):
            std = residual_scale * np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(1.0 / fan_in)
        arrays[name] = rng.normal(0.0, std, size=shape)
    if config.exit_mode == "extra_params":
        for k in range(config.depth):
            for m in config.chain(k):
                for suffix in ("W", "b"):
                    arrays[f"E{k}.{m}.{suffix}"] = arrays[f"{m}.{suffix}"].copy()
    return WeightBundle(config, arrays)


def random_weights(config: NetworkConfig, rng: np.random.Generator | int, low=-1.0, high=1.0) -> WeightBundle:
    """Every entry uniform in [low, high]; used by property tests and gradient checks."""
    rng = np.random.default_rng(rng)
    return WeightBundle(config, {n: rng.uniform(low, high, size=s)
                                 for n, s in config.param_shapes().items()})


@dataclass
class ForwardTrace:
    states: list[Tensor]
    exits: list[Tensor]
    output: Tensor

    def outputs(self) -> list[Tensor]:
        """Exits followed by the final output, i.e. depths 0..N."""
        return [*self.exits, self.output]


def _params(weights) -> Mapping[str, Tensor]:
    if isinstance(weights, WeightBundle):
        return weights.tensors()
    return weights


def _check_finite(t: Tensor, block: int) -> None:
    if not t.is_finite():
        where = "embedding" if block < 0 else f"block {block}"
        raise NumericError(f"non-finite value in {where}", block=block)


def embed(x: Tensor, weights) -> Tensor:
    p = _params(weights)
    if x.data.ndim != 2 or x.shape[1] != p["V.W"].shape[0]:
        raise DimensionError(f"input shape {x.shape} does not match embedding input dim {p['V.W'].shape[0]}")
    return ad.relu(ad.affine(x, p["V.W"], p["V.b"]))


def residual_branch(x: Tensor, weights, k: int) -> Tensor:
    p = _params(weights)
    hidden = ad.relu(ad.affine(x, p[f"F{k}.W1"], p[f"F{k}.b1"]))
    return ad.affine(hidden, p[f"F{k}.W2"], p[f"F{k}.b2"])


def block_forward(x: Tensor, weights, k: int, config: NetworkConfig) -> Tensor:
    if not 0 <= k < config.depth:
        raise IndexError(f"block index {k} out of range for depth {config.depth}")
    if x.data.ndim != 2 or x.shape[1] != config.widths[k]:
        raise DimensionError(f"block {k} expects width {config.widths[k]}, got state shape {x.shape}")
    p = _params(weights)
    branch = residual_branch(x, p, k)
    if k in config.skip_set:
        return ad.add(ad.affine(x, p[f"S{k}.W"], p[f"S{k}.b"]), branch)
    return ad.add(x, branch)


def _apply_chain(x: Tensor, p: Mapping[str, Tensor], names: list[str], prefix: str) -> Tensor:
    for m in names:
        x = ad.affine(x, p[f"{prefix}{m}.W"], p[f"{prefix}{m}.b"])
    return x


def head(x_n: Tensor, weights, config: NetworkConfig) -> Tensor:
    """Final output ``H(P-chain(x_N))``."""
    return _apply_chain(x_n, _params(weights), config.chain(config.depth), "")


def intermediate_output(x_k: Tensor, k: int, weights, config: NetworkConfig,
                        reuse_backbone: bool = False) -> Tensor:
    """Exit prediction from the state at depth ``k``.

    In ``extra_params`` mode the exit's own parameter copies are used unless
    ``reuse_backbone`` is set, in which case the backbone skips and head are
    used as in ``weight_shared`` mode.
    """
    if not 0 <= k < config.depth:
        raise IndexError(f"exit index {k} out of range [0, {config.depth})")
    shared = config.exit_mode == "weight_shared" or reuse_backbone
    prefix = "" if shared else f"E{k}."
    return _apply_chain(x_k, _params(weights), config.chain(k), prefix)


def forward_full(x, weights, config: NetworkConfig, reuse_backbone: bool = False,
                 with_exits: bool = True) -> ForwardTrace:
    """All states, all exits and the final output for a batch."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"expected a nonempty [batch, features] input, got {x.shape}")
    p = _params(weights)
    state = embed(x, p)
    _check_finite(state, -1)
    states = [state]
    exits = []
    for k in range(config.depth):
        if with_exits:
            exits.append(intermediate_output(state, k, p, config, reuse_backbone))
        state = block_forward(state, p, k, config)
        _check_finite(state, k)
        states.append(state)
    out = head(state, p, config)
    _check_finite(out, config.depth)
    return ForwardTrace(states, exits, out)


def loss_fn(pred: Tensor, targets, config: NetworkConfig) -> Tensor:
    """Configured loss; for ``l2`` the integer targets are one-hot encoded."""
    if config.loss_kind == "cross_entropy":
        return ad.softmax_cross_entropy(pred, targets)
    return ad.l2_loss(pred, Tensor(one_hot(targets, config.num_outputs)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
