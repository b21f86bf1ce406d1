"""Schema-validated YAML run configurations for the command-line front end.

Every subcommand reads one YAML document. Unknown keys are rejected and each
validation problem is reported with the line of the offending entry.
Matrices are written as flattened row-major lists of ``[re, im]`` pairs.
A run manifest written by the CLI is itself an accepted configuration: its
``config`` entry is used.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Any, Literal, Union

import numpy as np
import yaml
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .model import CouplingBlocks, ProbePureState, ProbeSystemModel, random_model

ComplexPair = tuple[float, float]
# Spawn key of the random-model stream; sweep rows use small keys.
MODEL_STREAM = 2**31 + 3
MAX_RANDOM_DIM = 64


class ConfigError(Exception):
    """A configuration file could not be read or failed validation."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def pairs_to_matrix(pairs: list[ComplexPair], dim: int, name: str) -> NDArray[np.complex128]:
    """Row-major ``[re, im]`` pairs to a ``dim × dim`` complex matrix."""
    if len(pairs) != dim * dim:
        raise ValueError(f"{name} needs {dim * dim} [re, im] pairs, got {len(pairs)}")
    arr = np.array(pairs, dtype=float).reshape(dim, dim, 2)
    return arr[..., 0] + 1j * arr[..., 1]


def matrix_to_pairs(m: NDArray) -> list[list[float]]:
    """Inverse of :func:`pairs_to_matrix`."""
    flat = np.asarray(m, dtype=np.complex128).ravel()
    return [[float(z.real), float(z.imag)] for z in flat]


class BlocksSpec(Strict):
    a0: list[ComplexPair]
    a1: list[ComplexPair]
    b: list[ComplexPair]


class MatricesModelSpec(Strict):
    """Explicit matrices; give exactly one of ``v_ps``, ``blocks`` or ``h_s``/``v``."""

    kind: Literal["matrices"]
    dim: int = Field(ge=1, le=2048)
    rho: list[ComplexPair]
    v_ps: list[ComplexPair] | None = None
    h_s: list[ComplexPair] | None = None
    v: list[ComplexPair] | None = None
    blocks: BlocksSpec | None = None
    theta: float = 0.0
    phi: float = 0.0

    @model_validator(mode="after")
    def _one_source(self) -> "MatricesModelSpec":
        sources = [self.v_ps is not None, self.blocks is not None, self.h_s is not None or self.v is not None]
        if sum(sources) != 1:
            raise ValueError("give exactly one of v_ps, blocks, or h_s/v")
        d = self.dim
        checks = [("rho", self.rho, d)]
        if self.v_ps is not None:
            checks.append(("v_ps", self.v_ps, 2 * d))
        if self.v is not None:
            checks.append(("v", self.v, 2 * d))
        if self.h_s is not None:
            checks.append(("h_s", self.h_s, d))
        if self.blocks is not None:
            checks += [(n, getattr(self.blocks, n), d) for n in ("a0", "a1", "b")]
        for name, pairs, n in checks:
            if len(pairs) != n * n:
                raise ValueError(f"{name} needs {n * n} [re, im] pairs, got {len(pairs)}")
        return self


class RandomModelSpec(Strict):
    """Random bounded ``V_PS`` and full-rank ``ρ_S`` drawn from the master seed."""

    kind: Literal["random"]
    dim: int = Field(ge=1, le=MAX_RANDOM_DIM)
    theta: float = 0.0
    phi: float = 0.0


class SpinModelSpec(Strict):
    """The spin-demo cluster with the probe at one of the demo positions.

    Biases are in peV and interaction times in ns.
    """

    kind: Literal["spin"]
    n_spins: int = Field(default=4, ge=1, le=8)
    cluster_radius_nm: float = Field(default=0.03, gt=0)
    min_separation_nm: float = Field(default=0.02, ge=0)
    b_field_t: tuple[float, float, float] = (1e-3, 0.0, 0.0)
    probe_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    probe_moment: float = Field(default=0.3, ge=0)
    probe_shell_nm: tuple[float, float] = (1.8, 2.4)
    n_positions: int = Field(default=4, ge=1)
    probe_index: int = Field(default=0, ge=0)
    tau_step_ns: float = Field(default=100.0, gt=0)

    @model_validator(mode="after")
    def _index(self) -> "SpinModelSpec":
        if self.probe_index >= self.n_positions:
            raise ValueError("probe_index must be smaller than n_positions")
        return self


class VibronicModelSpec(Strict):
    """Polaron-frame donor–acceptor blocks in a truncated Fock space.

    Biases are in meV and interaction times in ps.
    """

    kind: Literal["vibronic"]
    omega: list[float] = Field(min_length=1)
    gamma_d: list[float]
    gamma_a: list[float]
    V: float = Field(gt=0)
    temperature: float = Field(ge=0)
    cutoff: int = Field(default=12, ge=2, le=40)

    @model_validator(mode="after")
    def _lengths(self) -> "VibronicModelSpec":
        if not len(self.omega) == len(self.gamma_d) == len(self.gamma_a):
            raise ValueError("omega, gamma_d and gamma_a must have equal lengths")
        if self.cutoff ** len(self.omega) > 2048:
            raise ValueError("cutoff^modes exceeds the supported Hilbert-space size 2048")
        return self


ModelSpec = Annotated[
    Union[MatricesModelSpec, RandomModelSpec, SpinModelSpec, VibronicModelSpec],
    Field(discriminator="kind"),
]


class ProbeStateSpec(Strict):
    """A control state (``control: 0`` or ``1``) or Bloch angles relative to the control axis."""

    control: Literal[0, 1] | None = None
    bloch: tuple[float, float] | None = None

    @model_validator(mode="after")
    def _one(self) -> "ProbeStateSpec":
        if (self.control is None) == (self.bloch is None):
            raise ValueError("give exactly one of control or bloch")
        return self

    def build(self) -> ProbePureState:
        if self.control is not None:
            return ProbePureState.control(self.control)
        return ProbePureState.bloch(*self.bloch)


class GridSpec(Strict):
    """Either explicit ``values`` or ``start``/``stop``/``num`` (inclusive, evenly spaced)."""

    values: list[float] | None = None
    start: float | None = None
    stop: float | None = None
    num: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _form(self) -> "GridSpec":
        ranged = (self.start, self.stop, self.num)
        if self.values is not None:
            if any(x is not None for x in ranged):
                raise ValueError("give either values or start/stop/num, not both")
            if not self.values:
                raise ValueError("grid is empty")
        elif any(x is None for x in ranged):
            raise ValueError("give values, or all of start, stop and num")
        return self

    def array(self) -> NDArray[np.float64]:
        if self.values is not None:
            return np.asarray(self.values, dtype=float)
        return np.linspace(self.start, self.stop, self.num)


class SweepConfig(Strict):
    seed: int = 0
    model: ModelSpec
    prep: ProbeStateSpec
    meas: ProbeStateSpec
    lambdas: GridSpec
    taus: GridSpec
    shots: int = Field(default=0, ge=0)
    validity_margin: float = Field(default=10.0, gt=0)


TimeUnit = Union[Annotated[float, Field(gt=0)], Literal["spin", "vibronic"]]


def _pair_states(cfg: Any) -> Any:
    if (cfg.prep is None) != (cfg.meas is None):
        raise ValueError("prep and meas must be given together")
    return cfg


class FitConfig(Strict):
    """Fit every τ of a sweep CSV.

    ``envelope_order: auto`` takes the order from ``prep``/``meas`` when they
    are given and otherwise estimates the power of 1/λ from the amplitude
    decay across λ windows. ``subtract: auto`` removes the incoherent weight
    ``q`` of the given states, or else the fitted mean of ``p``.
    ``time_unit`` converts the CSV's τ column to the core's inverse-energy
    time: ``spin`` for ns with biases in peV, ``vibronic`` for ps with
    biases in meV, or a number.
    """

    seed: int = 0
    input: str
    time_unit: TimeUnit = 1.0
    envelope_order: Literal[0, 1, 2, "auto"] = "auto"
    subtract: float | Literal["auto"] = "auto"
    prep: ProbeStateSpec | None = None
    meas: ProbeStateSpec | None = None
    weighted: bool = True
    convergence_windows: int = Field(default=3, ge=3)
    rel_tol: float = Field(default=0.02, gt=0)
    n_sigma: float = Field(default=3.0, gt=0)

    @model_validator(mode="after")
    def _states(self) -> "FitConfig":
        return _pair_states(self)


class ReconstructConfig(Strict):
    """Turn a fit CSV into a τ-series and its spectrum.

    The series value is ``D e^{iφ}/(2·factor)``; the factor is given directly
    or derived from ``prep``/``meas``.
    """

    seed: int = 0
    input: str
    time_unit: TimeUnit = 1.0
    factor: ComplexPair | None = None
    prep: ProbeStateSpec | None = None
    meas: ProbeStateSpec | None = None
    window: Literal["rect", "hann"] = "rect"
    padding: int = Field(default=1, ge=1)
    peak_factor: float = Field(default=5.0, gt=0)
    abs_floor: float = Field(default=1e-12, ge=0)

    @model_validator(mode="after")
    def _factor(self) -> "ReconstructConfig":
        states = (self.prep is not None, self.meas is not None)
        if self.factor is not None and any(states):
            raise ValueError("give either factor or prep/meas, not both")
        if any(states) and not all(states):
            raise ValueError("prep and meas must be given together")
        return self


class ValidatePoint(Strict):
    """One (λ, τ) point; ``lam: auto`` uses the spin demo's λ₀ (spin models only)."""

    lam: float | Literal["auto"]
    tau: float = Field(ge=0)


class ValidateConfig(Strict):
    seed: int = 0
    model: ModelSpec
    prep: ProbeStateSpec
    meas: ProbeStateSpec
    points: list[ValidatePoint] = Field(min_length=1)
    margin: float = Field(default=10.0, gt=0)
    resonance_width: float | None = Field(default=None, gt=0)


class NmrSpec(Strict):
    budget_ns: float = Field(default=2e6, gt=0)
    tau_step_ns: float = Field(default=100.0, gt=0)
    n_lambda: int = Field(default=100, ge=5)
    shots: int = Field(default=1_000_000, ge=0)
    margin: float = Field(default=1e3, gt=0)
    clearance: float = Field(default=10.0, gt=1)
    sub_budgets_ns: list[float] = Field(default_factory=lambda: [8e4, 1.6e5])
    padding: int = Field(default=16, ge=1)


class SpinDemoRunConfig(Strict):
    seed: int = 0
    n_spins: int = Field(default=4, ge=1, le=8)
    cluster_radius_nm: float = Field(default=0.03, gt=0)
    min_separation_nm: float = Field(default=0.02, ge=0)
    moments: list[float] | None = None
    b_field_t: tuple[float, float, float] = (1e-3, 0.0, 0.0)
    probe_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    probe_moment: float = Field(default=0.3, ge=0)
    probe_shell_nm: tuple[float, float] = (1.8, 2.4)
    n_positions: int = Field(default=4, ge=1)
    nyquist_fraction: float = Field(default=0.8, gt=0)
    nmr: NmrSpec = Field(default_factory=NmrSpec)


class VibronicDemoRunConfig(Strict):
    seed: int = 0
    omega: list[float] = Field(default_factory=lambda: [8.0, 20.0], min_length=1)
    gamma_d: list[float] = Field(default_factory=lambda: [1.6, 5.0])
    gamma_a: list[float] = Field(default_factory=lambda: [0.0, 0.0])
    V: float = Field(default=1.0, gt=0)
    lam: float = Field(default=100.0, gt=0)
    temperature: float = Field(default=300.0, ge=0)
    tau_step_ps: float = Field(default=0.06582119569, gt=0)
    n_tau: int = Field(default=100, ge=8)
    n_lambda: int = Field(default=64, ge=5)
    shots: int = Field(default=0, ge=0)
    literal: bool = False
    fock_cutoff: int = Field(default=0, ge=0, le=40)
    fock_points: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _lengths(self) -> "VibronicDemoRunConfig":
        if not len(self.omega) == len(self.gamma_d) == len(self.gamma_a):
            raise ValueError("omega, gamma_d and gamma_a must have equal lengths")
        return self


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _node_at(node: yaml.Node | None, loc: tuple[Any, ...]) -> yaml.Node | None:
    """Deepest YAML node along a pydantic error location."""
    best = node
    for key in loc:
        nxt = None
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if isinstance(k, yaml.ScalarNode) and k.value == str(key):
                    # Point at the key: a block value starts on the next line.
                    nxt, best = v, k
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = best = node.value[key]
        if nxt is None:
            break
        node = nxt
    return best


def _format_errors(err: ValidationError, root: yaml.Node | None, source: str, offset: tuple) -> str:
    lines = []
    for e in err.errors():
        # Discriminated unions add the tag name to the location; drop it.
        loc = tuple(x for x in e["loc"] if x not in ("matrices", "random", "spin", "vibronic"))
        node = _node_at(root, offset + loc)
        where = f"{source}:{node.start_mark.line + 1}" if node is not None else source
        dotted = ".".join(str(x) for x in loc) or "<root>"
        lines.append(f"{where}: {dotted}: {e['msg']}")
    return "\n".join(lines)


def load_config(path: str | Path, schema: type[Strict]) -> Strict:
    """Read and validate ``path`` against ``schema``.

    Raises:
        ConfigError: Unreadable file, malformed YAML or schema violations;
            the message names the file and line of every problem.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration ({exc.strerror})") from exc
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from exc
    offset: tuple = ()
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("config")
        offset = ("config",)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: the configuration must be a mapping")
    try:
        return schema.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, root, str(path), offset)) from None


def resolve_input(config_path: str | Path, name: str) -> Path:
    """An input path from a config, relative to the config file's directory."""
    p = Path(name)
    return p if p.is_absolute() else (Path(config_path).parent / p).resolve()


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------


def resolve_time_unit(unit: float | str) -> float:
    """Numeric value of a ``time_unit`` setting."""
    if unit == "spin":
        from .spin import HBAR_PEV_NS

        return HBAR_PEV_NS
    if unit == "vibronic":
        from .vibronic import HBAR_MEV_PS

        return HBAR_MEV_PS
    return float(unit)


def time_unit(spec: ModelSpec) -> float:
    """Factor dividing configured τ values to get the inverse-energy time of the core."""
    if isinstance(spec, SpinModelSpec):
        from .spin import HBAR_PEV_NS

        return HBAR_PEV_NS
    if isinstance(spec, VibronicModelSpec):
        from .vibronic import HBAR_MEV_PS

        return HBAR_MEV_PS
    return 1.0


def build_model(spec: ModelSpec, seed: int) -> ProbeSystemModel:
    """The probe–system model described by ``spec``.

    Random models and spin geometries draw from streams of the master seed.
    """
    if isinstance(spec, MatricesModelSpec):
        d = spec.dim
        rho = pairs_to_matrix(spec.rho, d, "rho")
        if spec.blocks is not None:
            blocks = CouplingBlocks.from_arrays(
                pairs_to_matrix(spec.blocks.a0, d, "a0"),
                pairs_to_matrix(spec.blocks.a1, d, "a1"),
                pairs_to_matrix(spec.blocks.b, d, "b"),
            )
            return ProbeSystemModel.from_blocks(blocks, rho, spec.theta, spec.phi)
        if spec.v_ps is not None:
            return ProbeSystemModel(pairs_to_matrix(spec.v_ps, 2 * d, "v_ps"), rho, spec.theta, spec.phi)
        h_s = None if spec.h_s is None else pairs_to_matrix(spec.h_s, d, "h_s")
        v = None if spec.v is None else pairs_to_matrix(spec.v, 2 * d, "v")
        return ProbeSystemModel.from_parts(rho, h_s, v, spec.theta, spec.phi)
    if isinstance(spec, RandomModelSpec):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(MODEL_STREAM,)))
        return random_model(rng, spec.dim, spec.theta, spec.phi)
    if isinstance(spec, SpinModelSpec):
        from .spin import spin_blocks

        geom = spin_geometry(spec, seed)
        blocks = spin_blocks(geom)
        rho = np.eye(blocks.dim, dtype=np.complex128) / blocks.dim
        return ProbeSystemModel.from_blocks(blocks, rho)
    from .vibronic import VibronicModel, fock_blocks

    vm = VibronicModel(
        np.asarray(spec.omega), np.asarray(spec.gamma_d), np.asarray(spec.gamma_a),
        spec.V, 10 * spec.V, spec.temperature,
    )
    blocks, rho = fock_blocks(vm, spec.cutoff)
    return ProbeSystemModel.from_blocks(blocks, rho)


def spin_demo_config(cfg: SpinDemoRunConfig | SpinModelSpec, seed: int):
    """The :class:`~biasprobe.spin.SpinDemoConfig` matching a run or model config."""
    from .spin import NmrRunConfig, SpinDemoConfig

    common = dict(
        n_spins=cfg.n_spins,
        cluster_radius_nm=cfg.cluster_radius_nm,
        min_separation_nm=cfg.min_separation_nm,
        b_field_t=tuple(cfg.b_field_t),
        probe_axis=tuple(cfg.probe_axis),
        probe_moment=cfg.probe_moment,
        probe_shell_nm=tuple(cfg.probe_shell_nm),
        n_positions=cfg.n_positions,
        seed=seed,
    )
    if isinstance(cfg, SpinModelSpec):
        return SpinDemoConfig(**common, nmr=NmrRunConfig(tau_step_ns=cfg.tau_step_ns, shots=0))
    nmr = cfg.nmr
    return SpinDemoConfig(
        **common,
        moments=None if cfg.moments is None else tuple(cfg.moments),
        nyquist_fraction=cfg.nyquist_fraction,
        nmr=NmrRunConfig(
            budget_ns=nmr.budget_ns,
            tau_step_ns=nmr.tau_step_ns,
            n_lambda=nmr.n_lambda,
            shots=nmr.shots,
            seed=seed,
            margin=nmr.margin,
            clearance=nmr.clearance,
            sub_budgets_ns=tuple(nmr.sub_budgets_ns),
            padding=nmr.padding,
        ),
    )


def spin_geometry(spec: SpinModelSpec, seed: int):
    """Geometry of a spin model spec, with the probe at ``probe_index``."""
    from .spin import demo_geometry

    geom, probes = demo_geometry(spin_demo_config(spec, seed))
    return geom.with_probe(probes[spec.probe_index])
