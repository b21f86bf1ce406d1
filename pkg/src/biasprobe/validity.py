"""Checks that a bias value is large enough for the 1/λ expansion to hold.

Three families of conditions are evaluated, each with a ratio that must reach
a configurable margin (default 10):

* matrix-element bound: λ must dominate every flip amplitude ``|⟨j₀|B|k₁⟩|``
  between eigenstates reachable from the initial state within three
  applications of the flip coupling;
* resonance: λ must not coincide with a gap ``|E_j⁰ − E_k¹|`` between
  coupled, reachable levels;
* an order-specific condition on sums of the form
  ``Σ_{ll'} κ_{ll'} |⟨l|X|l'⟩⟨l'|Y|l⟩|`` with the kernel
  ``κ_{ll'} = 1/|E_l − E_{l'}|`` for distinct levels and ``κ = τ`` for equal
  ones. The diagonal ``κ = τ`` terms are what limit the usable interaction
  time. Every such condition is evaluated in both index variants (A₀ basis with
  ``B†B``, and A₁ basis with ``BB†``) and the worse ratio is reported.

Reports never raise; they collect numbers for inspection and serialisation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import CouplingBlocks

DEFAULT_MARGIN = 10.0
DEFAULT_RESONANCE_FRACTION = 1e-3
SUPPORT_CUTOFF = 1e-12
REACH_DEPTH = 3


@dataclass(frozen=True)
class ConstraintCheck:
    """One inequality ``lhs ≫ rhs`` reduced to ``ratio = lhs/rhs``."""

    name: str
    lhs: float
    rhs: float
    ratio: float
    passed: bool


@dataclass(frozen=True)
class Resonance:
    """A coupled level pair whose gap is within the resonance window of λ."""

    j0: int
    k1: int
    gap: float
    detuning: float


@dataclass(frozen=True)
class ValidityReport:
    """Outcome of :func:`validity_report`."""

    lam: float
    tau: float
    leading_order: int
    margin: float
    max_coupling: float
    constraints: list[ConstraintCheck] = field(default_factory=list)
    resonances: list[Resonance] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.constraints) and not self.resonances

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        for c in out["constraints"]:
            for key in ("lhs", "rhs", "ratio"):
                if not np.isfinite(c[key]):
                    c[key] = "inf" if c[key] > 0 else "-inf"
        return out


def kappa_matrix(energies: ArrayLike, tau: float, tol: float | None = None) -> NDArray[np.float64]:
    """``κ_{jk} = 1/|E_j − E_k|`` for distinct levels and exactly ``τ`` otherwise.

    Args:
        energies: Eigenvalues of one block.
        tau: Interaction time.
        tol: Degeneracy threshold on ``|E_j − E_k|``; defaults to
            ``1e−10·max(1, max|E|)``.
    """
    e = np.asarray(energies, dtype=float)
    if tol is None:
        tol = 1e-10 * max(1.0, float(np.max(np.abs(e))) if e.size else 1.0)
    gaps = np.abs(e[:, None] - e[None, :])
    degenerate = gaps <= tol
    with np.errstate(divide="ignore"):
        kappa = np.where(degenerate, float(tau), 1.0 / np.where(degenerate, 1.0, gaps))
    return kappa


def _kappa_sum(kappa: NDArray, x: NDArray, y: NDArray) -> float:
    """``Σ_{ll'} κ_{ll'} |X_{ll'} Y_{l'l}|`` for matrices already in the eigenbasis."""
    return float(np.sum(kappa * np.abs(x * y.T)))


def _ratio(lhs: float, rhs: float) -> float:
    if rhs == 0:
        return np.inf if lhs > 0 else (np.inf if lhs == 0 else 0.0)
    return lhs / rhs


def _reach(
    bt: NDArray[np.complex128], pop0: NDArray, pop1: NDArray, depth: int
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.bool_]]:
    """Breadth-first distances over the bipartite flip graph of ``B̃``."""
    scale = np.max(np.abs(bt)) if bt.size else 0.0
    edges = np.abs(bt) > SUPPORT_CUTOFF * scale if scale > 0 else np.zeros(bt.shape, bool)
    d = bt.shape[0]
    inf = np.iinfo(np.int64).max
    dist0 = np.full(d, inf, dtype=np.int64)
    dist1 = np.full(d, inf, dtype=np.int64)
    queue: deque[tuple[int, int]] = deque()
    for j in np.flatnonzero(pop0 > SUPPORT_CUTOFF):
        dist0[j] = 0
        queue.append((0, j))
    for k in np.flatnonzero(pop1 > SUPPORT_CUTOFF):
        dist1[k] = 0
        queue.append((1, k))
    while queue:
        side, i = queue.popleft()
        here = dist0[i] if side == 0 else dist1[i]
        if here >= depth:
            continue
        if side == 0:
            for k in np.flatnonzero(edges[i, :]):
                if dist1[k] > here + 1:
                    dist1[k] = here + 1
                    queue.append((1, k))
        else:
            for j in np.flatnonzero(edges[:, i]):
                if dist0[j] > here + 1:
                    dist0[j] = here + 1
                    queue.append((0, j))
    return dist0, dist1, edges


def validity_report(
    blocks: CouplingBlocks,
    rho_s: ArrayLike,
    lam: float,
    tau: float,
    leading_order: int,
    margin: float = DEFAULT_MARGIN,
    resonance_width: float | None = None,
) -> ValidityReport:
    """Evaluate the matrix-element, resonance and order-specific conditions.

    Args:
        blocks: Coupling blocks in the control basis.
        rho_s: Initial system state.
        lam: Bias λ.
        tau: Interaction time τ.
        leading_order: Leading order of the probe configuration (0, 1 or 2).
        margin: Ratio each condition must reach to pass.
        resonance_width: Half-width of the resonance window; defaults to
            ``1e−3·λ``.
    """
    if leading_order not in (0, 1, 2):
        raise ValueError("leading_order must be 0, 1 or 2")
    lam = float(lam)
    tau = float(tau)
    width = DEFAULT_RESONANCE_FRACTION * lam if resonance_width is None else resonance_width
    rho = np.asarray(rho_s, dtype=np.complex128)
    e0, phi0 = blocks.a0.eig()
    e1, phi1 = blocks.a1.eig()
    b, bd = blocks.b, blocks.bdag
    bt = phi0.conj().T @ b @ phi1
    rho0 = phi0.conj().T @ rho @ phi0
    rho1 = phi1.conj().T @ rho @ phi1

    dist0, dist1, edges = _reach(bt, np.real(np.diag(rho0)), np.real(np.diag(rho1)), REACH_DEPTH)
    near0 = dist0 <= REACH_DEPTH
    near1 = dist1 <= REACH_DEPTH
    reachable_edges = edges & near0[:, None] & near1[None, :]
    max_coupling = float(np.max(np.abs(bt[reachable_edges]))) if reachable_edges.any() else 0.0

    checks: list[ConstraintCheck] = []

    def add(name: str, lhs: float, rhs: float) -> None:
        r = _ratio(lhs, rhs)
        checks.append(ConstraintCheck(name, float(lhs), float(rhs), float(r), bool(r >= margin)))

    add("matrix_element_bound", lam, max_coupling)

    resonances = []
    for j, k in zip(*np.nonzero(reachable_edges)):
        gap = abs(e0[j] - e1[k])
        det = abs(lam - gap)
        if det < width:
            resonances.append(Resonance(int(j), int(k), float(gap), float(det)))

    k0 = kappa_matrix(e0, tau)
    k1 = kappa_matrix(e1, tau)
    bdb0 = phi0.conj().T @ (bd @ b) @ phi0
    bbd1 = phi1.conj().T @ (b @ bd) @ phi1
    if leading_order in (0, 1):
        s0 = _kappa_sum(k0, bdb0, rho0)
        s1 = _kappa_sum(k1, bbd1, rho1)
        if leading_order == 0:
            add("zeroth_order_A0", lam, s0)
            add("zeroth_order_A1", lam, s1)
        else:
            tr_b = abs(np.trace(b @ rho))
            add("first_order_A0", tr_b, s0)
            add("first_order_A1", tr_b, s1)
    else:
        sand0 = bd @ rho @ b
        sand1 = b @ rho @ bd
        tr0 = abs(np.trace(sand0))
        tr1 = abs(np.trace(sand1))
        s0 = _kappa_sum(k0, bdb0, phi0.conj().T @ sand0 @ phi0)
        s1 = _kappa_sum(k1, bbd1, phi1.conj().T @ sand1 @ phi1)
        add("second_order_A0", lam, s0 / tr0 if tr0 > 0 else 0.0)
        add("second_order_A1", lam, s1 / tr1 if tr1 > 0 else 0.0)

    return ValidityReport(
        lam=lam,
        tau=tau,
        leading_order=leading_order,
        margin=float(margin),
        max_coupling=max_coupling,
        constraints=checks,
        resonances=resonances,
    )


def minimum_valid_lambda(
    blocks: CouplingBlocks,
    rho_s: ArrayLike,
    tau: float,
    leading_order: int,
    margin: float = DEFAULT_MARGIN,
) -> float:
    """Smallest λ at which every λ-dependent ratio reaches ``margin``.

    Resonances and the λ-independent first-order condition are not part of
    this threshold; check them with :func:`validity_report` at the chosen λ.
    """
    report = validity_report(blocks, rho_s, 1.0, tau, leading_order, margin)
    needed = 0.0
    for c in report.constraints:
        if c.lhs == 1.0 and np.isfinite(c.rhs):
            needed = max(needed, margin * c.rhs)
    return needed


def resonant_coupling_weight(
    blocks: CouplingBlocks, omega: float, width: float
) -> float:
    """Discrete stand-in for ``G(ω)``: total ``|⟨k₁|B|j₀⟩|`` with ``||E_j⁰−E_k¹| − ω| < width``."""
    e0, phi0 = blocks.a0.eig()
    e1, phi1 = blocks.a1.eig()
    bt = phi0.conj().T @ blocks.b @ phi1
    gaps = np.abs(e0[:, None] - e1[None, :])
    return float(np.sum(np.abs(bt)[np.abs(gaps - omega) < width]))
