"""Command-line front end.

Every subcommand reads one YAML configuration and writes CSV/JSON files plus
a ``manifest.json`` into the output directory. The manifest holds the
configuration with the effective seed, library versions and the SHA-256 of
every output, and it is itself a valid configuration for rerunning. Outputs
do not depend on ``--jobs``.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 when a
numerical step fails.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import sys
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable, Sequence

import click
import numpy as np
import scipy

from . import __version__
from .config import (
    ConfigError,
    FitConfig,
    ReconstructConfig,
    SpinDemoRunConfig,
    SpinModelSpec,
    Strict,
    SweepConfig,
    ValidateConfig,
    VibronicDemoRunConfig,
    build_model,
    load_config,
    resolve_input,
    resolve_time_unit,
    spin_demo_config,
    time_unit,
)
from .dynamics import run_sweep
from .estimation import (
    InsufficientCoverageError,
    OscillationFit,
    SpectrumEstimate,
    TauSeries,
    convergence_check,
    estimate_envelope_order,
    find_peaks,
    fit_oscillation,
    fourier_spectrum,
    peak_fwhm,
    split_windows,
)
from .perturbation import classify_leading_order, leading_series_scale, transfer_weight

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
MANIFEST_VERSION = 1
NUMERICAL_ERRORS = (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def fmt(x: Any) -> str:
    """Shortest round-trip text of a number; empty for ``None``."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def json_text(obj: Any) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


class RunWriter:
    """Writes outputs into one directory and records their hashes."""

    def __init__(self, out: Path) -> None:
        self.out = out
        self.hashes: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        data = text.encode()
        (self.out / name).write_bytes(data)
        self.hashes[name] = hashlib.sha256(data).hexdigest()

    def manifest(self, command: str, cfg: Strict) -> None:
        body = {
            "manifest_version": MANIFEST_VERSION,
            "command": command,
            "seed": cfg.seed,
            "config": cfg.model_dump(mode="json"),
            "versions": {
                "biasprobe": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": dict(sorted(self.hashes.items())),
        }
        (self.out / "manifest.json").write_text(json_text(body))


def spectrum_rows(spec: SpectrumEstimate) -> list[list[float]]:
    w = spec.weights
    return [[o, z.real, z.imag, abs(z)] for o, z in zip(spec.omega, w)]


def peak_rows(spec: SpectrumEstimate, factor: float, floor: float) -> list[list[float]]:
    rows = []
    for pk in find_peaks(spec, factor, floor):
        rows.append([pk.omega, pk.weight.real, pk.weight.imag, abs(pk.weight), pk.height,
                     peak_fwhm(spec, pk)])
    return rows


SPECTRUM_HEADER = ["omega", "re_weight", "im_weight", "abs_weight"]
PEAK_HEADER = SPECTRUM_HEADER + ["height", "fwhm"]
FIT_HEADER = ["tau", "envelope_order", "eta", "D", "phi", "eta_stderr", "D_stderr",
              "phi_stderr", "residual_rms", "n_samples"]


def fit_row(tau: float, fit: OscillationFit) -> list[Any]:
    se = fit.stderr
    return [tau, fit.envelope_order, fit.eta, fit.D, fit.phi, se[0], se[1], se[2],
            fit.residual_rms, fit.n_samples]


def read_csv(path: Path, required: Sequence[str]) -> dict[str, list[str]]:
    """Columns of a CSV written by this tool."""
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in required if c not in (reader.fieldnames or [])]
            if missing:
                raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
            cols: dict[str, list[str]] = defaultdict(list)
            for row in reader:
                for key, value in row.items():
                    cols[key].append(value)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read input ({exc.strerror})") from exc
    if not cols:
        raise ConfigError(f"{path}: no data rows")
    return cols


def floats(values: list[str], path: Path, name: str) -> np.ndarray:
    try:
        return np.array([float(v) if v != "" else np.nan for v in values])
    except ValueError as exc:
        raise ConfigError(f"{path}: column {name} is not numeric") from exc


def with_seed(cfg: Strict, seed: int | None) -> Strict:
    return cfg if seed is None else cfg.model_copy(update={"seed": seed})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def common_options(fn):
    fn = click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
                      help="Worker processes; results do not depend on it.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed, overriding the config.")(fn)
    fn = click.option("--out", "out", type=click.Path(file_okay=False, path_type=Path),
                      default=Path("."), show_default=True, help="Output directory.")(fn)
    fn = click.option("--config", "config", type=click.Path(dir_okay=False, path_type=Path),
                      required=True, help="YAML configuration or a previous manifest.json.")(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="biasprobe")
def cli() -> None:
    """Simulate and analyse biased-qubit probing experiments."""


@cli.command()
@common_options
def sweep(config: Path, out: Path, seed: int | None, jobs: int) -> None:
    """Probabilities on a λ × τ grid, with optional shot noise."""
    cfg = with_seed(load_config(config, SweepConfig), seed)
    model = build_model(cfg.model, cfg.seed)
    unit = time_unit(cfg.model)
    prep, meas = cfg.prep.build(), cfg.meas.build()
    lams = cfg.lambdas.array()
    taus = cfg.taus.array()
    res = run_sweep(model, prep, meas, lams, taus / unit, cfg.shots, cfg.seed, jobs)
    ps, se = res.p_sampled, res.stderr
    rows = []
    for i, lam in enumerate(lams):
        for j, tau in enumerate(taus):
            rows.append([lam, tau, res.p_exact[i, j],
                         None if ps is None else ps[i, j], None if se is None else se[i, j]])
    order = classify_leading_order(prep, meas).order
    report = _validity(model, float(np.min(lams)), float(np.max(taus)) / unit, order,
                       cfg.validity_margin, None)
    w = RunWriter(out)
    w.write("sweep.csv", csv_text(["lambda", "tau", "p_exact", "p_sampled", "stderr"], rows))
    w.write("validity.json", json_text({"leading_order": order, "points": [report]}))
    w.manifest("sweep", cfg)


def _validity(model, lam: float, tau: float, order: int, margin: float, width: float | None) -> dict:
    from .validity import validity_report

    return validity_report(model.blocks, model.rho_s, lam, tau, order, margin, width).to_dict()


def _shot_count(p: np.ndarray, se: np.ndarray) -> float | None:
    """Shots per point implied by binomial standard errors."""
    ok = np.isfinite(se) & (se > 0) & (p > 0) & (p < 1)
    if not ok.any():
        return None
    return float(np.median(p[ok] * (1 - p[ok]) / se[ok] ** 2))


def _weights(lam: np.ndarray, p: np.ndarray, order: int, subtract: float, shots: float) -> np.ndarray:
    """Binomial inverse variances with ``p`` replaced by its λ-envelope."""
    scaled = lam**order * (p - subtract)
    env = subtract + np.mean(scaled) / lam**order
    env = np.clip(env, 1.0 / shots, 1 - 1.0 / shots)
    return shots / (env * (1 - env))


@cli.command()
@common_options
def fit(config: Path, out: Path, seed: int | None, jobs: int) -> None:
    """Per-τ oscillation fits of a sweep CSV and a λ-convergence report."""
    cfg = with_seed(load_config(config, FitConfig), seed)
    src = resolve_input(config, cfg.input)
    cfg = cfg.model_copy(update={"input": str(src)})
    cols = read_csv(src, ["lambda", "tau", "p_exact"])
    lam_all = floats(cols["lambda"], src, "lambda")
    tau_all = floats(cols["tau"], src, "tau")
    p_all = floats(cols["p_exact"], src, "p_exact")
    se_all = np.full(lam_all.size, np.nan)
    if "p_sampled" in cols and all(v != "" for v in cols["p_sampled"]):
        p_all = floats(cols["p_sampled"], src, "p_sampled")
        if "stderr" in cols:
            se_all = floats(cols["stderr"], src, "stderr")
    unit = resolve_time_unit(cfg.time_unit)

    order = cfg.envelope_order
    subtract = cfg.subtract
    if cfg.prep is not None:
        prep, meas = cfg.prep.build(), cfg.meas.build()
        if order == "auto":
            order = classify_leading_order(prep, meas).order
        if subtract == "auto":
            subtract = transfer_weight(prep, meas)
    taus = np.unique(tau_all)
    groups = [np.flatnonzero(tau_all == t) for t in taus]
    if order == "auto":
        est = [estimate_envelope_order(lam_all[g], p_all[g], t / unit).slope
               for t, g in zip(taus, groups)]
        order = int(np.clip(np.rint(-np.median(est)), 0, 2))
    shots = _shot_count(p_all, se_all) if cfg.weighted else None

    fit_rows, conv = [], []
    for t, g in zip(taus, groups):
        lam, p = lam_all[g], p_all[g]
        tc = t / unit
        sub = subtract
        if sub == "auto":
            sub = 0.0 if order == 0 else fit_oscillation(lam, p, tc).eta
            if order == 2:
                sub = float(np.rint(sub))
        wts = None if shots is None else _weights(lam, p, order, sub, shots)
        f = fit_oscillation(lam, p, tc, weights=wts, subtract=sub, envelope_order=order)
        fit_rows.append(fit_row(t, f))
        conv.append(_convergence(lam, p, tc, wts, sub, order, cfg) | {"tau": float(t)})
    w = RunWriter(out)
    w.write("fit.csv", csv_text(FIT_HEADER, fit_rows))
    w.write("convergence.json", json_text({"envelope_order": order, "taus": conv}))
    w.manifest("fit", cfg)


def _convergence(lam, p, tau, wts, sub, order, cfg: FitConfig) -> dict:
    try:
        fits = [
            fit_oscillation(lam[i], p[i], tau, None if wts is None else wts[i], sub, order)
            for i in split_windows(lam, cfg.convergence_windows)
        ]
    except InsufficientCoverageError as exc:
        return {"passed": False, "error": str(exc)}
    rep = convergence_check(fits, cfg.rel_tol, cfg.n_sigma)
    return {
        "passed": rep.passed,
        "D": rep.d_values,
        "eta": rep.eta_values,
        "D_differences": rep.d_differences,
        "eta_differences": rep.eta_differences,
        "D_thresholds": rep.d_thresholds,
        "eta_thresholds": rep.eta_thresholds,
    }


@cli.command()
@common_options
def reconstruct(config: Path, out: Path, seed: int | None, jobs: int) -> None:
    """Spectrum and peaks of the τ-series from a fit CSV."""
    cfg = with_seed(load_config(config, ReconstructConfig), seed)
    src = resolve_input(config, cfg.input)
    cfg = cfg.model_copy(update={"input": str(src)})
    cols = read_csv(src, ["tau", "D", "phi"])
    taus = floats(cols["tau"], src, "tau")
    amp = floats(cols["D"], src, "D") * np.exp(1j * floats(cols["phi"], src, "phi"))
    if cfg.prep is not None:
        _, factor = leading_series_scale(classify_leading_order(cfg.prep.build(), cfg.meas.build()))
    elif cfg.factor is not None:
        factor = complex(*cfg.factor)
    else:
        factor = 1.0
    if factor == 0:
        raise ConfigError(f"{config}: the series factor is zero")
    order = np.argsort(taus, kind="stable")
    series = TauSeries(taus[order] / resolve_time_unit(cfg.time_unit), amp[order] / (2 * factor))
    spec = fourier_spectrum(series, cfg.window, cfg.padding)
    w = RunWriter(out)
    w.write("spectrum.csv", csv_text(SPECTRUM_HEADER, spectrum_rows(spec)))
    w.write("peaks.csv", csv_text(PEAK_HEADER, peak_rows(spec, cfg.peak_factor, cfg.abs_floor)))
    w.manifest("reconstruct", cfg)


@cli.command()
@common_options
def validate(config: Path, out: Path, seed: int | None, jobs: int) -> None:
    """Validity report of the expansion at the configured (λ, τ) points."""
    cfg = with_seed(load_config(config, ValidateConfig), seed)
    model = build_model(cfg.model, cfg.seed)
    unit = time_unit(cfg.model)
    order = classify_leading_order(cfg.prep.build(), cfg.meas.build()).order
    reports = []
    for pt in cfg.points:
        tau = pt.tau / unit
        lam = pt.lam
        if lam == "auto":
            if not isinstance(cfg.model, SpinModelSpec):
                raise ConfigError(f"{config}: lam: auto needs a spin model")
            from .spin import NmrRunConfig, choose_lambda0

            nmr = NmrRunConfig()
            lam = choose_lambda0(model.blocks, model.rho_s, tau, nmr.margin, nmr.clearance, cfg.margin)
        reports.append(_validity(model, float(lam), tau, order, cfg.margin, cfg.resonance_width))
    passed = all(r["passed"] for r in reports)
    w = RunWriter(out)
    w.write("validity.json", json_text({"leading_order": order, "passed": passed, "points": reports}))
    w.manifest("validate", cfg)


def _budget_label(budget_ns: float) -> str:
    return f"{budget_ns / 1e3:g}us"


@cli.command("spin-demo")
@common_options
def spin_demo(config: Path, out: Path, seed: int | None, jobs: int) -> None:
    """Nuclear-spin spectroscopy with a probe at several positions around a cluster."""
    from dataclasses import replace

    from .spin import build_spin_hamiltonian, run_spin_demo

    cfg = with_seed(load_config(config, SpinDemoRunConfig), seed)
    demo = spin_demo_config(cfg, cfg.seed)
    demo = replace(demo, nmr=replace(demo.nmr, jobs=jobs))
    res = run_spin_demo(demo)
    w = RunWriter(out)
    g0 = res.geometries[0]
    summary = {
        "levels_pev": build_spin_hamiltonian(g0).eigenvalues,
        "positions_nm": g0.positions,
        "moments": g0.moments,
        "b_field_t": g0.b_field,
        "probes": [],
    }
    for i, (g, r) in enumerate(zip(res.geometries, res.results)):
        summary["probes"].append({
            "position_nm": g.probe_position,
            "lam0_pev": r.lam0,
            "degraded_taus": list(r.degraded),
            "validity": r.validity.to_dict(),
        })
        w.write(f"fits_p{i}.csv", csv_text(
            FIT_HEADER, [fit_row(t, f) for t, f in zip(r.taus_ns, r.fits)]))
        w.write(f"reference_p{i}.csv", csv_text(
            SPECTRUM_HEADER + ["n", "m"],
            [[pk.omega, pk.weight.real, pk.weight.imag, abs(pk.weight), pk.n, pk.m]
             for pk in r.reference]))
        for budget, spec in sorted(r.spectra.items()):
            label = _budget_label(budget)
            w.write(f"spectrum_p{i}_{label}.csv", csv_text(SPECTRUM_HEADER, spectrum_rows(spec)))
            w.write(f"peaks_p{i}_{label}.csv", csv_text(PEAK_HEADER, peak_rows(spec, 5.0, 1e-12)))
    w.write("summary.json", json_text(summary))
    w.manifest("spin-demo", cfg)


@cli.command("vibronic-demo")
@common_options
def vibronic_demo(config: Path, out: Path, seed: int | None, jobs: int) -> None:
    """Reorganisation energy, spectral density and temperature of a donor–acceptor pair."""
    from .vibronic import VibronicDemoConfig, f_tau, run_vibronic_demo

    cfg = with_seed(load_config(config, VibronicDemoRunConfig), seed)
    fields = cfg.model_dump()
    for key in ("omega", "gamma_d", "gamma_a"):
        fields[key] = tuple(fields[key])
    res = run_vibronic_demo(VibronicDemoConfig(**fields))
    model, rec = res.model, res.reconstruction
    f_true = f_tau(model, res.taus_ps)
    w = RunWriter(out)
    w.write("probabilities.csv", csv_text(
        ["tau", "lambda", "p"],
        [[t, lam, p] for t, lrow, prow in zip(res.taus_ps, res.lambdas, res.p)
         for lam, p in zip(lrow, prow)]))
    w.write("f_tau.csv", csv_text(
        ["tau", "f", "f_stderr", "f_true", "phase"],
        [[t, f, s, ft, ph] for t, f, s, ft, ph in
         zip(res.taus_ps, rec.f, rec.f_stderr, f_true, rec.phase)]))
    modes = []
    if res.density is not None:
        jw = res.density.J_weights
        for k, om in enumerate(res.density.omega):
            modes.append([om, res.density.f_weights[k], None if jw is None else jw[k]])
    w.write("modes.csv", csv_text(["omega", "f_weight", "J_weight"], modes))
    if res.fock_taus_ps.size:
        w.write("fock.csv", csv_text(
            ["tau", "p_fock", "p_analytic"],
            [list(r) for r in zip(res.fock_taus_ps, res.p_fock, res.p_analytic)]))
    w.write("summary.json", json_text({
        "reorganization_energy_true": model.reorganization_energy,
        "reorganization_energy": rec.reorganization_energy,
        "reorganization_stderr": rec.reorganization_stderr,
        "unresolved_taus": list(rec.unresolved),
        "temperature_true": model.temperature,
        "temperature": res.temperature,
        "modes_true": {"omega": model.omega, "J_weight": model.spectral_weights},
    }))
    w.manifest("vibronic-demo", cfg)


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and map failures to exit codes."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            cli.main(args=argv, prog_name="biasprobe", standalone_mode=False)
    except ConfigError as exc:
        click.echo(f"configuration error:\n{exc}", err=True)
        return EXIT_CONFIG
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG if isinstance(exc, click.UsageError) else exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except NUMERICAL_ERRORS as exc:
        click.echo(f"numerical failure: {type(exc).__name__}: {exc}", err=True)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
