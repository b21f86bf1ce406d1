"""Exact probe–system evolution, finite-shot sampling and a Dyson-series oracle.

The measured quantity is the transition probability::

    p_{β:α}(λ, τ) = tr[(|β⟩⟨β| ⊗ I) U (|α⟩⟨α| ⊗ ρ_S) U†],   U = exp(−i H_tot τ)

with ``H_tot = (λ/2) σ_(θ,φ) ⊗ I + V_PS``. Exact evaluation diagonalises
``H_tot`` once per bias value and then evaluates any number of evolution times
with two matrix products, which is what makes dense λ×τ sweeps cheap.

The Dyson oracle expands ``U`` in powers of the probe-flip part
``W = |π₀⟩⟨π₁|⊗B + h.c.`` around ``H₀ = H_tot − W``. The x-th order term is a
sum over paths through the eigenstates of ``H₀`` in which the nested time
integrals collapse to divided differences of the exponential at the path
energies. Coincident or nearly coincident energies take the exact limit form.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .linalg import HermitianOperator, check_density, eig_hermitian
from .model import CouplingBlocks, ProbeControl, ProbePureState, ProbeSystemModel

PROBABILITY_CLAMP_TOL = 1e-10
DEGENERATE_PHASE_TOL = 1e-6
DEFAULT_DYSON_CAP = 4


class ProbabilityRangeError(ArithmeticError):
    """An exact probability fell outside [0, 1] by more than the clamp tolerance."""


@dataclass(frozen=True)
class ExperimentPoint:
    """One setting of the probing experiment.

    Attributes:
        lam: Bias magnitude λ.
        tau: Interaction time τ ≥ 0.
        prep: Probe preparation |α⟩.
        meas: Probe measurement |β⟩.
        shots: Number of repetitions; 0 requests the exact probability.
    """

    lam: float
    tau: float
    prep: ProbePureState
    meas: ProbePureState
    shots: int = 0

    def __post_init__(self) -> None:
        if not self.tau >= 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.shots < 0:
            raise ValueError(f"shots must be non-negative, got {self.shots}")


def _clamp(p: NDArray[np.float64]) -> NDArray[np.float64]:
    lo, hi = np.min(p), np.max(p)
    if lo < -PROBABILITY_CLAMP_TOL or hi > 1 + PROBABILITY_CLAMP_TOL:
        raise ProbabilityRangeError(
            f"probability outside [0, 1] beyond tolerance (min {lo:.3e}, max {hi:.3e})"
        )
    return np.clip(p, 0.0, 1.0)


class ExactEvaluator:
    """Exact transition probabilities of one model at one bias value.

    Args:
        model: The probe–system model.
        lam: Bias magnitude λ.
    """

    def __init__(self, model: ProbeSystemModel, lam: float) -> None:
        self.model = model
        self.lam = float(lam)
        self.energies, self.vectors = eig_hermitian(
            HermitianOperator(model.total_hamiltonian(self.lam), check=False)
        )

    def _rotated(self, probe_op: NDArray[np.complex128], sys_op: NDArray) -> NDArray:
        w = self.vectors
        return w.conj().T @ np.kron(probe_op, sys_op) @ w

    def kernel(self, prep: ProbePureState, meas: ProbePureState) -> NDArray[np.complex128]:
        """Matrix ``M_ab = ρ̃_ab P̃_ba`` with ``p(τ) = Σ_ab e^{−iE_aτ} M_ab e^{iE_bτ}``."""
        basis = self.model.basis
        alpha = prep.vector(basis)
        beta = meas.vector(basis)
        rho = self._rotated(np.outer(alpha, alpha.conj()), self.model.rho_s)
        proj = self._rotated(np.outer(beta, beta.conj()), np.eye(self.model.dim_s))
        return rho * proj.T

    def probabilities(
        self,
        prep: ProbePureState,
        meas: ProbePureState,
        taus: ArrayLike,
        chunk: int = 4096,
    ) -> NDArray[np.float64]:
        """Exact ``p_{β:α}`` at each τ in ``taus``."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        kern = self.kernel(prep, meas)
        out = np.empty(taus.shape, dtype=float)
        for start in range(0, taus.size, chunk):
            t = taus[start : start + chunk]
            phases = np.exp(-1j * np.outer(t, self.energies))
            out[start : start + chunk] = np.real(
                np.einsum("ta,ta->t", phases @ kern, phases.conj())
            )
        return _clamp(out)


def transition_probability(
    v_ps: ArrayLike,
    rho_s: ArrayLike,
    control: ProbeControl,
    point: ExperimentPoint,
) -> float:
    """Exact ``p_{β:α}`` for a single experiment point.

    Raises:
        DimensionError: If ``v_ps`` and ``rho_s`` are inconsistent.
        ValueError: If ``rho_s`` is not a valid density operator.
    """
    model = ProbeSystemModel(
        np.asarray(v_ps, dtype=np.complex128),
        check_density(rho_s),
        control.theta,
        control.phi,
    )
    ev = ExactEvaluator(model, point.lam)
    return float(ev.probabilities(point.prep, point.meas, [point.tau])[0])


def _seed_sequence(seed: int | np.random.SeedSequence, key: tuple[int, ...]) -> np.random.SeedSequence:
    """Child stream ``key`` of ``seed``; a seed sequence keeps its own spawn key as prefix."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def sample_shots(
    p: float | ArrayLike, n: int, seed: int | np.random.SeedSequence | np.random.Generator
) -> int | NDArray[np.int64]:
    """Binomial number of successes in ``n`` shots with success probability ``p``.

    Args:
        p: Probability (scalar or array).
        n: Shots per probability.
        seed: Integer seed, seed sequence or generator.

    Raises:
        ValueError: If any ``p`` lies outside [0, 1] or ``n`` is negative.
    """
    arr = np.asarray(p, dtype=float)
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ValueError("probability out of range [0, 1]")
    if n < 0:
        raise ValueError("shot count must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = np.asarray(rng.binomial(n, arr), dtype=np.int64)
    return int(counts) if counts.ndim == 0 else counts


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Probabilities on a λ × τ product grid (axis 0: λ, axis 1: τ).

    Attributes:
        lambdas: Bias values.
        taus: Interaction times.
        p_exact: Exact probabilities.
        shots: Shots per point (0 for noise-free sweeps).
        counts: Success counts, ``None`` when ``shots == 0``.
    """

    lambdas: NDArray[np.float64]
    taus: NDArray[np.float64]
    p_exact: NDArray[np.float64]
    shots: int = 0
    counts: NDArray[np.int64] | None = None

    @property
    def p_sampled(self) -> NDArray[np.float64] | None:
        if self.counts is None:
            return None
        return self.counts / self.shots

    @property
    def stderr(self) -> NDArray[np.float64] | None:
        """Binomial standard error ``√(p̂(1−p̂)/n)``."""
        ps = self.p_sampled
        if ps is None:
            return None
        return np.sqrt(ps * (1 - ps) / self.shots)

    @property
    def p(self) -> NDArray[np.float64]:
        """Sampled estimate if available, else the exact probability."""
        ps = self.p_sampled
        return self.p_exact if ps is None else ps


def _sweep_row(args) -> tuple[NDArray[np.float64], NDArray[np.int64] | None]:
    model, prep, meas, lam, taus, shots, seed, row = args
    p = ExactEvaluator(model, lam).probabilities(prep, meas, taus)
    if shots == 0:
        return p, None
    rng = np.random.default_rng(_seed_sequence(seed, (row,)))
    return p, sample_shots(p, shots, rng)


def run_sweep(
    model: ProbeSystemModel,
    prep: ProbePureState,
    meas: ProbePureState,
    lambdas: ArrayLike,
    taus: ArrayLike,
    shots: int = 0,
    seed: int | np.random.SeedSequence = 0,
    jobs: int = 1,
) -> SweepResult:
    """Exact (and optionally sampled) probabilities on a λ × τ grid.

    Each λ row is an independent task with its own random stream derived from
    ``(seed, row index)``, so the output does not depend on ``jobs``.

    Args:
        model: Probe–system model.
        prep: Probe preparation state.
        meas: Probe measurement state.
        lambdas: Bias values.
        taus: Interaction times.
        shots: Shots per point; 0 gives noise-free output.
        seed: Master seed.
        jobs: Worker processes (1 runs in-process).

    Raises:
        ValueError: On an empty grid or negative shots.
    """
    lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
    tau = np.atleast_1d(np.asarray(taus, dtype=float))
    if lam.size == 0 or tau.size == 0:
        raise ValueError("sweep grid is empty")
    if shots < 0:
        raise ValueError("shots must be non-negative")
    if np.any(tau < 0):
        raise ValueError("interaction times must be non-negative")
    tasks = [(model, prep, meas, float(l), tau, int(shots), seed, i) for i, l in enumerate(lam)]
    jobs = max(1, min(int(jobs), len(tasks)))
    if jobs == 1:
        rows = [_sweep_row(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_row, tasks))
    p_exact = np.vstack([r[0] for r in rows])
    counts = None if shots == 0 else np.vstack([r[1] for r in rows])
    return SweepResult(lam, tau, p_exact, int(shots), counts)


def default_jobs() -> int:
    """Number of worker processes to use when the caller does not say."""
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Dyson-series oracle
# ---------------------------------------------------------------------------


def _complete_homogeneous(w: NDArray[np.complex128], order: int) -> list[complex]:
    """h_0 … h_order of the points ``w`` via Newton's identities."""
    power = [complex(np.sum(w**k)) for k in range(order + 1)]
    h = [1.0 + 0j]
    for m in range(1, order + 1):
        h.append(sum(power[i] * h[m - i] for i in range(1, m + 1)) / m)
    return h


def divided_difference_exp(
    energies: ArrayLike, tau: float, tol: float = DEGENERATE_PHASE_TOL
) -> complex:
    """Divided difference of ``exp`` at the points ``z_m = −iτ e_m``.

    This equals ``τ^{-x}`` times the nested integral
    ``∫_{0<t₁<…<t_x<τ} exp(−i[e_x(τ−t_x) + … + e₀t₁]) dt`` over x+1 energies.
    Clusters of energies whose phase spread ``|Δe·τ|`` is below ``tol`` are
    evaluated with the exact coalescent limit ``e^{z̄} Σ_m h_m(z − z̄)/(m+x)!``.
    """
    pts = tuple(sorted(float(e) for e in np.atleast_1d(energies)))
    return _dd_sorted(pts, float(tau), tol, {})


def _dd_sorted(pts: tuple[float, ...], tau: float, tol: float, memo: dict) -> complex:
    cached = memo.get(pts)
    if cached is not None:
        return cached
    x = len(pts) - 1
    if x == 0:
        val = complex(np.exp(-1j * tau * pts[0]))
    elif abs(pts[-1] - pts[0]) * tau < tol:
        centre = sum(pts) / len(pts)
        w = -1j * tau * (np.asarray(pts) - centre)
        h = _complete_homogeneous(w, 3)
        series = sum(h[m] / math.factorial(m + x) for m in range(4))
        val = complex(np.exp(-1j * tau * centre) * series)
    else:
        val = (_dd_sorted(pts[1:], tau, tol, memo) - _dd_sorted(pts[:-1], tau, tol, memo)) / (
            -1j * tau * (pts[-1] - pts[0])
        )
    memo[pts] = val
    return val


class DysonExpansion:
    """Order-by-order Dyson terms of ``p_{β:α}`` for fixed (λ, τ).

    The unperturbed Hamiltonian is block diagonal in the control basis,
    ``H₀ = diag(λ/2 + A₀, −λ/2 + A₁)``, and the perturbation is the flip part
    ``W`` built from ``B``. Operators are represented in the eigenbasis of
    ``H₀``, ordered block 0 then block 1.

    Args:
        blocks: Coupling blocks in the control basis.
        rho_s: Initial system state.
        prep: Probe preparation.
        meas: Probe measurement.
        lam: Bias λ.
        tau: Interaction time τ.
        cap: Largest total order x + y that may be requested.
        tol: Phase-spread threshold for the coalescent limit.
    """

    def __init__(
        self,
        blocks: CouplingBlocks,
        rho_s: ArrayLike,
        prep: ProbePureState,
        meas: ProbePureState,
        lam: float,
        tau: float,
        cap: int = DEFAULT_DYSON_CAP,
        tol: float = DEGENERATE_PHASE_TOL,
    ) -> None:
        self.cap = int(cap)
        self.tau = float(tau)
        self.tol = tol
        d = blocks.dim
        self.d = d
        e0, phi0 = blocks.a0.eig()
        e1, phi1 = blocks.a1.eig()
        self.level = (e0 + 0.5 * lam, e1 - 0.5 * lam)
        self.bt = phi0.conj().T @ blocks.b @ phi1
        frame = np.zeros((2 * d, 2 * d), dtype=np.complex128)
        frame[:d, :d] = phi0
        frame[d:, d:] = phi1
        rho = check_density(rho_s)
        alpha = np.conj(prep.overlaps)
        beta = np.conj(meas.overlaps)
        self.rho0 = frame.conj().T @ np.kron(np.outer(alpha, alpha.conj()), rho) @ frame
        self.proj = frame.conj().T @ np.kron(np.outer(beta, beta.conj()), np.eye(d)) @ frame
        self._memo: dict = {}
        self._v: dict[int, NDArray[np.complex128]] = {}

    def _dd_tensor(self, seq: list[int]) -> NDArray[np.complex128]:
        d = self.d
        out = np.empty((d,) * len(seq), dtype=np.complex128)
        levels = [self.level[l] for l in seq]
        for idx in product(range(d), repeat=len(seq)):
            pts = tuple(sorted(levels[m][j] for m, j in enumerate(idx)))
            out[idx] = _dd_sorted(pts, self.tau, self.tol, self._memo)
        return out

    def amplitude(self, x: int) -> NDArray[np.complex128]:
        """The order-x evolution term ``V_x`` (so that ``U = Σ_x V_x``)."""
        if x in self._v:
            return self._v[x]
        d = self.d
        v = np.zeros((2 * d, 2 * d), dtype=np.complex128)
        for l0 in (0, 1):
            seq = [(l0 + m) % 2 for m in range(x + 1)]
            dd = self._dd_tensor(seq)
            if x == 0:
                block = np.diag(dd)
            else:
                letters = "abcdefghijklmnop"[: x + 1]
                couplings = [
                    self.bt if seq[m + 1] == 0 else self.bt.conj().T for m in range(x)
                ]
                spec = ",".join(letters[m + 1] + letters[m] for m in range(x))
                block = np.einsum(
                    f"{letters},{spec}->{letters[x]}{letters[0]}", dd, *couplings, optimize=True
                )
            block = block * (-1j * self.tau) ** x
            rows = slice(0, d) if seq[-1] == 0 else slice(d, 2 * d)
            cols = slice(0, d) if l0 == 0 else slice(d, 2 * d)
            v[rows, cols] = block
        self._v[x] = v
        return v

    def term(self, x: int, y: int) -> complex:
        """``tr[P_β V_x ρ₀ V_y†]``."""
        if x < 0 or y < 0:
            raise ValueError("orders must be non-negative")
        if x + y > self.cap:
            raise ValueError(f"requested order x+y = {x + y} exceeds the cap {self.cap}")
        vx = self.amplitude(x)
        vy = self.amplitude(y)
        return complex(np.trace(self.proj @ vx @ self.rho0 @ vy.conj().T))

    def partial_sum(self, order: int) -> float:
        """``Σ_{x+y ≤ order}`` of the Dyson terms (real by construction)."""
        total = sum(self.term(x, r - x) for r in range(order + 1) for x in range(r + 1))
        return float(np.real(total))


def dyson_term(
    blocks: CouplingBlocks,
    rho_s: ArrayLike,
    prep: ProbePureState,
    meas: ProbePureState,
    lam: float,
    tau: float,
    x: int,
    y: int,
    cap: int = DEFAULT_DYSON_CAP,
) -> complex:
    """Single Dyson contribution of order (x, y) to ``p_{β:α}``.

    Raises:
        ValueError: If ``x + y`` exceeds ``cap``.
    """
    if x + y > cap:
        raise ValueError(f"requested order x+y = {x + y} exceeds the cap {cap}")
    return DysonExpansion(blocks, rho_s, prep, meas, lam, tau, cap).term(x, y)
