"""Closed-form loss bounds of a stage-cost ResNet-N from a standard-trained ResNet-M,
plus an audit that evaluates them against trained networks.

Bound 1 (with residual-branch decay)::

    J_N <= Jbar = sum_{k<M} [gamma L(y^M_k) + lam/2 ||w^M_F,k||^2] + (1 + gamma (N - M)) Lbar

Bound 2 (average exit loss)::

    L_avg = 1/(N+1) sum_{k<=N} L(y^N_k) <= Lbar + C / (N+1)
    C = sum_{k<M} L(y^M_k) + (1 - gamma - gamma M) / gamma * Lbar

Both right-hand sides are attained exactly by the lifted parameters (shared
prefix, zero residual tail), which is what ``audit_bounds`` cross-checks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from .data import Dataset
from .errors import ConfigError
from .resnet import WeightBundle
from .subresnet import check_subresnet, lift
from .training import objective_value

FEASIBLE_RTOL = 1e-10


def bound_theorem1(child_losses: Sequence[float], child_decay: Sequence[float], l_bar: float,
                   gamma: float, lam: float, n: int) -> float:
    """Upper bound on the optimal stage-cost objective of a ResNet-N.

    ``child_losses`` and ``child_decay`` (squared residual-branch norms, without
    the ``lam/2`` factor) are the per-block values of the ResNet-M, so
    ``M = len(child_losses)``.
    """
    if gamma <= 0:
        raise ValueError(f"bound requires gamma > 0, got {gamma}")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    m = len(child_losses)
    if len(child_decay) != m:
        raise ValueError(f"{m} child losses but {len(child_decay)} decay terms")
    if m > n:
        raise ValueError(f"child depth {m} exceeds parent depth {n}")
    total = 0.0
    for loss, sq in zip(child_losses, child_decay):
        total += gamma * loss + lam / 2.0 * sq
    return total + (1.0 + gamma * (n - m)) * l_bar


def bound_theorem2(child_losses: Sequence[float], l_bar: float, gamma: float, m: int,
                   n: int) -> tuple[float, float]:
    """Return ``(C, Lbar_avg)`` for the average-exit-loss bound; needs ``0 < gamma <= 1``."""
    if not 0 < gamma <= 1:
        raise ValueError(f"average-loss bound requires 0 < gamma <= 1, got {gamma}")
    if len(child_losses) != m:
        raise ValueError(f"expected {m} child losses, got {len(child_losses)}")
    if m > n:
        raise ValueError(f"child depth {m} exceeds parent depth {n}")
    c = sum(child_losses) + (1.0 - gamma - gamma * m) / gamma * l_bar
    return c, l_bar + c / (n + 1)


@dataclass
class BoundReport:
    M: int
    N: int
    L_bar: float
    J_M: float            # child's own stage-cost objective, evaluated post hoc
    J_bar_N: float
    J_N: float | None     # parent's achieved objective
    gap1: float           # J_bar_N - J_M
    gap_true: float | None  # J_bar_N - J_N
    L_avg: float | None
    C: float
    L_bar_avg: float
    gap2: float | None    # L_bar_avg - L_avg
    bound1_holds: bool | None
    bound2_holds: bool | None
    feasible_J: float
    feasible_rel_err: float
    feasible_ok: bool
    feasible_L_avg: float
    feasible_L_avg_expected: float
    stage_boundary_warning: bool
    note: str = "bound 2 evaluated on runs with residual-branch decay"

    def to_dict(self) -> dict:
        return asdict(self)


def audit_row(parent: WeightBundle | None, child: WeightBundle, dataset: Dataset, gamma: float,
              lam: float, parent_config=None, parent_reuse_backbone: bool = False) -> BoundReport:
    parent_config = parent.config if parent is not None else parent_config
    if parent_config is None:
        raise ConfigError("need a parent network or a parent config")
    m = check_subresnet(child.config, parent_config)
    n = parent_config.depth

    child_obj = objective_value(child, dataset, gamma, lam, reuse_backbone=True)
    l_bar = child_obj.terminal_loss
    j_bar = bound_theorem1(child_obj.exit_losses, child_obj.decay_terms, l_bar, gamma, lam, n)
    c, l_bar_avg = bound_theorem2(child_obj.exit_losses, l_bar, gamma, m, n)

    lifted = lift(child, parent_config)
    lifted_obj = objective_value(lifted, dataset, gamma, lam)
    feasible_err = abs(lifted_obj.value - j_bar) / max(abs(j_bar), 1e-300)
    lifted_avg = sum(lifted_obj.depth_losses()) / (n + 1)
    expected_avg = (sum(child_obj.exit_losses) + (n + 1 - m) * l_bar) / (n + 1)

    j_n = l_avg = gap_true = gap2 = b1 = b2 = None
    if parent is not None:
        p_obj = objective_value(parent, dataset, gamma, lam, reuse_backbone=parent_reuse_backbone)
        j_n = p_obj.value
        l_avg = sum(p_obj.depth_losses()) / (n + 1)
        gap_true = j_bar - j_n
        gap2 = l_bar_avg - l_avg
        b1 = j_n <= j_bar
        b2 = l_avg <= l_bar_avg

    return BoundReport(
        M=m, N=n, L_bar=l_bar, J_M=child_obj.value, J_bar_N=j_bar, J_N=j_n,
        gap1=j_bar - child_obj.value, gap_true=gap_true, L_avg=l_avg, C=c, L_bar_avg=l_bar_avg,
        gap2=gap2, bound1_holds=b1, bound2_holds=b2, feasible_J=lifted_obj.value,
        feasible_rel_err=feasible_err, feasible_ok=feasible_err <= FEASIBLE_RTOL,
        feasible_L_avg=lifted_avg, feasible_L_avg_expected=expected_avg,
        stage_boundary_warning=not parent_config.is_homogeneous,
    )


def audit_bounds(parent: WeightBundle, children: Sequence[WeightBundle], dataset: Dataset,
                 gamma: float, lam: float, parent_reuse_backbone: bool = False) -> list[BoundReport]:
    """One report per child, ascending in child depth.

    Inequalities against the trained parent are reported, not enforced: they
    presume a globally optimal parent.
    """
    rows = [audit_row(parent, c, dataset, gamma, lam, parent_reuse_backbone=parent_reuse_backbone)
            for c in children]
    return sorted(rows, key=lambda r: r.M)


TABLE_COLUMNS = [
    ("M", "M", "{:d}"),
    ("L_bar", "L_bar", "{:.3f}"),
    ("J_N", "J_N(w^N)", "{:.3f}"),
    ("J_bar_N", "J_bar", "{:.3f}"),
    ("gap_true", "J_bar-J_N", "{:.3f}"),
    ("L_avg", "L_avg", "{:.3f}"),
    ("L_bar_avg", "L_bar_avg", "{:.3f}"),
    ("gap2", "L_bar_avg-L_avg", "{:.3f}"),
    ("J_M", "J_M(w^M)", "{:.3f}"),
    ("feasible_ok", "lift check", "{}"),
]


def format_table(reports: Sequence[BoundReport]) -> str:
    """Aligned text table; missing parent quantities print as ``-``."""
    def cell(r, key, fmt):
        v = getattr(r, key)
        if v is None:
            return "-"
        if key == "feasible_ok":
            return "pass" if v else "FAIL"
        return fmt.format(v)

    header = [title for _, title, _ in TABLE_COLUMNS]
    body = [[cell(r, key, fmt) for key, _, fmt in TABLE_COLUMNS] for r in reports]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines)
