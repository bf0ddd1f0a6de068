"""SubResNets: extraction, the zero-tail lift, identity-mapping checks, pruning.

A ResNet-M is a SubResNet of a ResNet-N when it shares the first M blocks and
its output layer is the parent's depth-M exit: every parent projection skip
with index >= M becomes a head projection ``P{i}`` of the child.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .resnet import NetworkConfig, WeightBundle, forward_full
from .training import TrajectoryRecord

DEFAULT_PLATEAU_TOLERANCE = 1e-2


def child_config(parent: NetworkConfig, m: int) -> NetworkConfig:
    if not 0 <= m <= parent.depth:
        raise ConfigError(f"SubResNet depth {m} outside [0, {parent.depth}]")
    tail = [parent.widths[j + 1] for j in sorted(parent.skip_set) if j >= m]
    return replace(parent, widths=parent.widths[:m + 1], head_chain=(*tail, *parent.head_chain),
                   exit_mode="weight_shared")


def check_subresnet(child: NetworkConfig, parent: NetworkConfig) -> int:
    """Return the child depth, or raise if ``child`` is not a SubResNet of ``parent``."""
    m = child.depth
    if m > parent.depth:
        raise ConfigError(f"child depth {m} exceeds parent depth {parent.depth}")
    expected = child_config(parent, m)
    mismatched = [f for f in ("widths", "head_chain", "input_dim", "num_outputs", "loss_kind",
                              "hidden_multiplier") if getattr(child, f) != getattr(expected, f)]
    if mismatched:
        raise ConfigError(f"child is not a SubResNet of the parent at depth {m}; "
                          f"mismatched fields: {', '.join(mismatched)}")
    return m


def _tail_names(parent: NetworkConfig, m: int) -> dict[str, str]:
    """Parent map name -> child map name for the maps the child absorbs into its head."""
    names = parent.chain(m)
    child_names = [f"P{i}" for i in range(len(names) - 1)] + ["H"]
    return dict(zip(names, child_names))


def extract_subresnet(weights: WeightBundle, m: int) -> WeightBundle:
    """Child ResNet-M whose output equals the parent's depth-M exit.

    For an ``extra_params`` parent the head is taken from the depth-M exit's own
    parameters (``M < N``); exit-only parameters are never carried over.
    """
    parent = weights.config
    cfg = child_config(parent, m)
    arrays = {}
    for name in cfg.param_shapes():
        if name.startswith(("V.", "F", "S")):
            arrays[name] = weights[name].copy()
    src_prefix = f"E{m}." if parent.exit_mode == "extra_params" and m < parent.depth else ""
    for p_map, c_map in _tail_names(parent, m).items():
        for suffix in ("W", "b"):
            arrays[f"{c_map}.{suffix}"] = weights[f"{src_prefix}{p_map}.{suffix}"].copy()
    return WeightBundle(cfg, arrays)


prune = extract_subresnet


def lift(child: WeightBundle, parent_config: NetworkConfig) -> WeightBundle:
    """Parent weights built from a SubResNet: shared prefix, zero residual tail.

    Exit-only parameters of an ``extra_params`` parent are set to copies of the
    backbone maps they shadow, so every exit of the lifted net equals the
    corresponding weight-shared exit.
    """
    m = check_subresnet(child.config, parent_config)
    shapes = parent_config.param_shapes()
    arrays = {}
    for name in shapes:
        if name.startswith(("V.", "S")) and name in child.arrays:
            arrays[name] = child[name].copy()
        elif name.startswith("F"):
            k = int(name[1:name.index(".")])
            arrays[name] = child[name].copy() if k < m else np.zeros(shapes[name])
    for p_map, c_map in _tail_names(parent_config, m).items():
        for suffix in ("W", "b"):
            arrays[f"{p_map}.{suffix}"] = child[f"{c_map}.{suffix}"].copy()
    if parent_config.exit_mode == "extra_params":
        for k in range(parent_config.depth):
            for p_map in parent_config.chain(k):
                for suffix in ("W", "b"):
                    arrays[f"E{k}.{p_map}.{suffix}"] = arrays[f"{p_map}.{suffix}"].copy()
    return WeightBundle(parent_config, arrays)


@dataclass
class IdentityReport:
    holds: bool
    max_deviation: float


def verify_identity_mapping(weights: WeightBundle, m: int, x) -> IdentityReport:
    """Zero residual branches from block ``m`` on and measure how far exits
    ``m..N`` drift from exit ``m``.  Exits use backbone parameters."""
    n = weights.config.depth
    if not 0 <= m <= n:
        raise ConfigError(f"identity-mapping depth {m} outside [0, {n}]")
    trace = forward_full(x, weights.zero_residuals(m), weights.config, reuse_backbone=True)
    outs = [t.data for t in trace.outputs()]
    ref = outs[m]
    holds, dev = True, 0.0
    for k in range(m + 1, n + 1):
        holds &= bool(np.array_equal(outs[k], ref))
        dev = max(dev, float(np.max(np.abs(outs[k] - ref))))
    return IdentityReport(holds and dev == 0.0, dev)


def plateau_depth(record: TrajectoryRecord, tolerance: float = DEFAULT_PLATEAU_TOLERANCE) -> int:
    """Smallest depth after which exit losses stay flat and residual contributions are small.

    Depth ``M`` qualifies when for every ``k >= M`` the loss stays within
    ``tolerance * (1 + |loss[M]|)`` of ``loss[M]`` and the output residual norm
    of block ``k`` is at most ``tolerance`` times the largest one.
    """
    losses = record.losses
    resid = record.output_residual_norm
    n = len(losses) - 1
    if len(resid) != n:
        raise ValueError(f"trajectory has {len(losses)} depth losses but {len(resid)} residual norms")
    peak = max(resid, default=0.0)
    for m in range(n + 1):
        band = tolerance * (1.0 + abs(losses[m]))
        flat = all(abs(losses[k] - losses[m]) <= band for k in range(m, n + 1))
        quiet = all(r <= tolerance * peak for r in resid[m:])
        if flat and quiet:
            return m
    return n
