"""Two-stage uncertainty model: Gaussian sources, rolling re-estimation,
operating-point sensitivities, and analytic chance-constraint tightening.

Sources (per-bus network loads, renewable availabilities, microgrid loads)
deviate from their typical profiles by a multivariate Gaussian with
per-source mean and covariance; covariance is declared compactly as a
standard-deviation profile plus an exponential temporal correlation length
and expanded at construction, which keeps it positive semidefinite by
construction.  Reactive deviations follow active ones through the fixed
power factor.

Security bounds on network states are tightened by propagating nodal load
deviations through a sensitivity matrix linearized at the cleared operating
point; renewable capacity bounds are tightened directly from the source's
own statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from .conic import Solution
from .network import FlowBlock, NetworkCase


class UncertaintyError(ValueError):
    """Bad stochastic data or an over-tightened (uncertainty-infeasible)
    state."""


@dataclass(frozen=True)
class Source:
    """One uncertain series: a typical profile and its deviation law."""

    kind: str                  # load | wind | pv | mgload
    key: str                   # bus id for loads, unit/mg name otherwise
    typical: np.ndarray        # (T,)
    mu: np.ndarray             # (T,) deviation mean
    std: np.ndarray            # (T,) deviation standard deviation

    KINDS = ("load", "wind", "pv", "mgload")

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.key}"


@dataclass
class GaussianUncertainty:
    sources: List[Source]
    corr_lambda: float         # temporal correlation length, hours
    tan_theta: float
    horizon: int

    def __post_init__(self):
        seen = set()
        for s in self.sources:
            if s.kind not in Source.KINDS:
                raise UncertaintyError(f"source {s.name}: unknown kind")
            if s.name in seen:
                raise UncertaintyError(f"duplicate source {s.name}")
            seen.add(s.name)
            for arr in (s.typical, s.mu, s.std):
                if len(arr) != self.horizon:
                    raise UncertaintyError(
                        f"source {s.name}: profile length {len(arr)} != "
                        f"horizon {self.horizon}")
            if np.any(s.std < 0):
                raise UncertaintyError(f"source {s.name}: negative std")
        if self.corr_lambda < 0:
            raise UncertaintyError("correlation length must be >= 0")

    def source(self, name: str) -> Optional[Source]:
        for s in self.sources:
            if s.name == name:
                return s
        return None

    def correlation(self) -> np.ndarray:
        t = np.arange(self.horizon)
        if self.corr_lambda == 0:
            return np.eye(self.horizon)
        return np.exp(-np.abs(t[:, None] - t[None, :]) / self.corr_lambda)

    def cov(self, source: Source) -> np.ndarray:
        """Sigma = diag(std) C diag(std) with exponential correlation C."""
        return np.outer(source.std, source.std) * self.correlation()

    def load_stats(self, bus: int, t: int) -> Tuple[float, float]:
        """(mean, variance) of the nodal load deviation at one hour."""
        s = self.source(f"load:{bus}")
        if s is None:
            return 0.0, 0.0
        return float(s.mu[t]), float(s.std[t] ** 2)


@dataclass
class Realization:
    """One sampled trajectory of every source, absolute values."""

    series: Dict[str, np.ndarray]
    seed: int
    tan_theta: float

    @property
    def horizon(self) -> int:
        return len(next(iter(self.series.values())))

    def value(self, name: str, t: int) -> float:
        return float(self.series[name][t])

    def reactive(self, name: str, t: int) -> float:
        return self.tan_theta * self.value(name, t)


def sample_realization(gu: GaussianUncertainty, seed: int) -> Realization:
    """Draw one correlated trajectory per source; deterministic in `seed`."""
    rng = np.random.default_rng(seed)
    C = gu.correlation()
    # shared Cholesky factor; per-source scaling by the std profile
    L = np.linalg.cholesky(C + 1e-12 * np.eye(gu.horizon))
    series = {}
    for s in gu.sources:
        z = rng.standard_normal(gu.horizon)
        dev = s.mu + s.std * (L @ z)
        series[s.name] = s.typical + dev
    return Realization(series=series, seed=seed, tan_theta=gu.tan_theta)


@dataclass
class RollingEstimate:
    """The intra-day truth revealed at step s: a 4-hour look-ahead window."""

    s: int                     # 1-based window start
    hours: List[int]           # 0-based hour indices covered
    values: Dict[str, np.ndarray]   # per source, len(hours)

    def value(self, name: str, t: int) -> float:
        return float(self.values[name][self.hours.index(t)])


def rolling_estimate(realization: Realization, s: int) -> RollingEstimate:
    """Reveal hours [s, min(s+3, T)] (1-based) of the realization."""
    T = realization.horizon
    if not 1 <= s <= T:
        raise UncertaintyError(f"window start {s} outside 1..{T}")
    hours = list(range(s - 1, min(s + 3, T)))
    values = {name: arr[hours[0]:hours[-1] + 1]
              for name, arr in realization.series.items()}
    return RollingEstimate(s=s, hours=hours, values=values)


# ------------------------------------------------------------ sensitivity -


@dataclass
class SensitivityMatrix:
    """Per-hour linear maps from nodal load deviations to state offsets.

    Columns follow `buses` (non-slack, case order); reactive deviations are
    folded in through the fixed power factor, so a column gives the state
    response to +1 of active nodal load with tan(theta) reactive alongside.
    Rows address states by (kind, index):  ("v", bus), ("l", k), ("p", k),
    ("q", k) with k the feeder index; flow states are oriented along the
    operating direction (positive = with the realized flow).
    """

    buses: List[int]
    hours: List[int]
    directions: Dict[Tuple[int, int], int]
    rows1: Dict[Tuple[str, int], int]       # ("v",bus)|("l",k) -> row in S1
    rows2: Dict[Tuple[str, int], int]       # ("p",k)|("q",k)   -> row in S2
    S1: Dict[int, np.ndarray] = field(default_factory=dict)   # per hour
    S2: Dict[int, np.ndarray] = field(default_factory=dict)

    def row(self, kind: str, idx: int, t: int) -> np.ndarray:
        if kind in ("v", "l"):
            return self.S1[t][self.rows1[(kind, idx)]]
        return self.S2[t][self.rows2[(kind, idx)]]


def build_sensitivity(case: NetworkCase, operating_point: Solution,
                      block: Optional[FlowBlock] = None) -> SensitivityMatrix:
    """Linearize the directed branch-flow equations at a solved point.

    The square per-hour system stacks nodal P/Q balance deviations (which
    carry the load deviations), voltage-drop deviations, and linearized
    tight-cone equalities (which carry zeros); inverting its partition
    yields the maps S1 (voltages, currents) and S2 (flows).
    """
    if block is None:
        block = operating_point.meta.get("flow_block")
    if block is None:
        raise UncertaintyError("no flow block attached to the solution")
    sol = operating_point
    buses = [b for b in case.buses if b != case.slack]
    nbus = {b: i for i, b in enumerate(buses)}
    m = len(case.feeders)
    n1 = len(buses) + m            # chi1 = (v, l)
    n2 = 2 * m                     # chi2 = (p, q)
    tan = case.tan_theta

    if block.kind == "undirected":
        directions = block.direction_assignment(sol)
    else:
        directions = dict(block.directions)

    rows1 = {("v", b): i for i, b in enumerate(buses)}
    rows1.update({("l", k): len(buses) + k for k in range(m)})
    rows2 = {("p", k): k for k in range(m)}
    rows2.update({("q", k): m + k for k in range(m)})
    sens = SensitivityMatrix(buses=buses, hours=list(block.hours),
                             directions=directions, rows1=rows1, rows2=rows2)

    col_v = {b: i for i, b in enumerate(buses)}
    col_l = {k: len(buses) + k for k in range(m)}
    col_p = {k: k for k in range(m)}
    col_q = {k: m + k for k in range(m)}

    for t in block.hours:
        J_R = np.zeros((2 * len(buses), n1))
        J_C = np.zeros((2 * len(buses), n2))
        J_Cq = np.zeros((2 * m, n1))
        J_v = np.zeros((2 * m, n2))

        for k, f in enumerate(case.feeders):
            d = directions[(k, t)]
            send = f.from_bus if d == 1 else f.to_bus
            recv = f.to_bus if d == 1 else f.from_bus
            p, q, l = block.net_flow(sol, k, t)
            p, q, l = d * p, d * q, d * l          # orient along the flow
            v_send = sol.primal[block.v[(send, t)]]

            # balance rows: recv gains (dp - r dl), send loses dp
            if recv != case.slack:
                i = nbus[recv]
                J_C[i, col_p[k]] += 1.0
                J_R[i, col_l[k]] += -f.r
                J_C[len(buses) + i, col_q[k]] += 1.0
                J_R[len(buses) + i, col_l[k]] += -f.x
            if send != case.slack:
                i = nbus[send]
                J_C[i, col_p[k]] += -1.0
                J_C[len(buses) + i, col_q[k]] += -1.0

            # voltage drop: dv_send - dv_recv = 2r dp + 2x dq - (r^2+x^2) dl
            z2 = f.r * f.r + f.x * f.x
            if send != case.slack:
                J_Cq[k, col_v[send]] += 1.0
            if recv != case.slack:
                J_Cq[k, col_v[recv]] += -1.0
            J_Cq[k, col_l[k]] += z2
            J_v[k, col_p[k]] += -2.0 * f.r
            J_v[k, col_q[k]] += -2.0 * f.x

            # tight cone: l v_send = p^2 + q^2 linearized
            J_Cq[m + k, col_l[k]] += v_send
            if send != case.slack:
                J_Cq[m + k, col_v[send]] += l
            J_v[m + k, col_p[k]] += -2.0 * p
            J_v[m + k, col_q[k]] += -2.0 * q

        try:
            Cq_inv_v = np.linalg.solve(J_Cq, J_v)
        except np.linalg.LinAlgError:
            Cq_inv_v = np.linalg.pinv(J_Cq) @ J_v
        core = J_C - J_R @ Cq_inv_v
        try:
            S2_full = np.linalg.inv(core)
        except np.linalg.LinAlgError:
            S2_full = np.linalg.pinv(core)
        if not np.all(np.isfinite(S2_full)):
            raise UncertaintyError(
                f"sensitivity failed at hour {t}: the balance/flow block "
                "is singular beyond pseudo-inverse repair")
        S1_full = -Cq_inv_v @ S2_full

        # fold reactive columns through the fixed power factor
        nb = len(buses)
        sens.S1[t] = S1_full[:, :nb] + tan * S1_full[:, nb:]
        sens.S2[t] = S2_full[:, :nb] + tan * S2_full[:, nb:]

    return sens


# -------------------------------------------------------------- tightening -


def tighten_bounds(kind: str, bounds: Tuple[float, float],
                   S_k: Optional[np.ndarray], mu, Sigma, gamma: float,
                   state: str = "") -> Tuple[float, float]:
    """Shrink one security box so the original holds with confidence 1-gamma.

    kind="csc" (state chance constraint):
        lower* = lower - S_k mu - ndtri(gamma) * sqrt(S_k Sigma S_k')
        upper* = upper - S_k mu - ndtri(1-gamma) * sqrt(S_k Sigma S_k')
    kind="cdc" (capacity chance constraint; S_k unused):
        upper* = upper + mu + ndtri(gamma) * sqrt(Sigma), lower unchanged.

    `Sigma` may be a covariance matrix, a variance vector (treated as the
    diagonal), or a scalar variance for "cdc".  Raises when the revised box
    is empty (the state cannot be protected at this confidence).
    """
    if not 0.0 < gamma <= 0.5:
        raise UncertaintyError(f"gamma must be in (0, 0.5], got {gamma}")
    lo, hi = float(bounds[0]), float(bounds[1])

    if kind == "cdc":
        hi_new = hi + float(mu) + ndtri(gamma) * math.sqrt(max(float(Sigma),
                                                               0.0))
        lo_new = lo
    elif kind == "csc":
        S_k = np.asarray(S_k, dtype=float)
        mu = np.asarray(mu, dtype=float)
        Sigma = np.asarray(Sigma, dtype=float)
        if Sigma.ndim == 1:
            var = float(np.sum(S_k * S_k * Sigma))
        else:
            var = float(S_k @ Sigma @ S_k)
        sigma = math.sqrt(max(var, 0.0))
        shift = float(S_k @ mu)
        lo_new = lo - shift - ndtri(gamma) * sigma
        hi_new = hi - shift - ndtri(1.0 - gamma) * sigma
    else:
        raise UncertaintyError(f"unknown tightening kind {kind!r}")

    if lo_new > hi_new:
        raise UncertaintyError(
            f"state {state or '<unnamed>'} is uncertainty-infeasible: "
            f"revised bounds [{lo_new:.6g}, {hi_new:.6g}] are empty")
    return lo_new, hi_new
