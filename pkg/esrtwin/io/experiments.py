from __future__ import annotations

import json
import logging
import math
import tempfile
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd
import torch
import yaml
from joblib import Parallel, delayed

from esrtwin.config import EXPERIMENT_KINDS, ExperimentConfig, config_from_dict
from esrtwin.constants import TWO_PI
from esrtwin.core.detection import (
    FluctuationModel,
    add_noise,
    cpmg_snr,
    echo_integral,
    echo_pulse_ratio,
    effective_repetition_rate,
    estimate_spin_count,
    ou_series,
    phase_cycle,
    repetition_seed,
    sensitivity_report,
    sigma_scaling,
    snr_from_repetitions,
)
from esrtwin.core.dynamics import (
    SimulationOptions,
    cycled_trace,
    echo_decay,
    eseem_kernel,
    field_sweep,
    fit_echo_decay,
    fit_power_law,
    fit_recovery,
    purcell_rate,
    rabi_angle,
    selected_coupling,
    simulate,
    simulate_cycled,
    t1_sweep,
)
from esrtwin.core.hamiltonian import (
    default_table_builder,
    hamiltonian_levels,
    transition_fields,
    transitions,
)
from esrtwin.core.resonator import (
    ReflectionTrace,
    beta_to_power,
    bistability_onset,
    coupling_strength,
    field_map,
    fit_s11,
    read_reflection_csv,
    s11_linear,
)
from esrtwin.core.sample import (
    G_BINS,
    SpinEnsemble,
    build_ensemble,
    coupling_histogram,
    hyperfine_shift,
    nuclear_bath,
    strain_statistics,
)
from esrtwin.core.sequences import build_rabi_nutation
from esrtwin.core.utils import counter_rng
from esrtwin.errors import ConfigError, ManifestError, NotFoundError
from esrtwin.io import plots
from esrtwin.io.records import (
    REPORT_SCHEMA,
    TraceRecord,
    sha256_file,
    write_csv,
    write_json,
    write_trace,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_SCHEMA = "esrtwin.manifest/1"
CONFIG_COPY = "config.yaml"


def _version() -> str:
    from esrtwin import __version__

    return __version__


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class Run:
    """
    One experiment execution: resolved models, a worker map and the artifact ledger.

    Every file goes through `write_*` so it lands in the manifest with its stochastic flag.
    """

    def __init__(self, config: ExperimentConfig, out_dir: Union[str, Path], threads: int = 1):
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}", path="--threads")
        self.config = config
        self.out_dir = Path(out_dir)
        self.threads = threads
        self.model = config.resonator.build()
        self.system = config.spin_system.build()
        self.options = SimulationOptions(
            sample_rate=config.detection.sample_rate_hz, record_frozen=False, record_spins=False
        )
        self.files: Dict[str, bool] = {}
        self._profile = None
        self._strain = None

    @property
    def b0(self) -> float:
        return self.config.experiment.b0

    def map(self, fn: Callable, items: Iterable) -> List[Any]:
        """Ordered map over joblib threads; results do not depend on the thread count."""
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(item) for item in items]
        return list(Parallel(n_jobs=self.threads, prefer="threads")(delayed(fn)(i) for i in items))

    def header(self, stochastic: bool = False) -> Dict[str, Any]:
        seeds = {"ensemble": self.config.seeds.ensemble, "bath": self.config.seeds.bath}
        if stochastic:
            seeds["noise"] = self.config.seeds.noise
        return {
            "config_hash": self.config.hash,
            "esrtwin_version": _version(),
            "kind": self.config.experiment.kind,
            "seeds": seeds,
        }

    def write_frame(self, name: str, frame: pd.DataFrame, stochastic: bool = False) -> Path:
        self.files[name] = stochastic
        return write_csv(frame, self.out_dir / name, self.header(stochastic))

    def write_report(self, name: str, data: Dict[str, Any], stochastic: bool = False) -> Path:
        self.files[name] = stochastic
        payload = {"schema": REPORT_SCHEMA, **self.header(stochastic), **_clean(data)}
        return write_json(payload, self.out_dir / name)

    def write_trace(self, name: str, trace: TraceRecord, stochastic: bool = False) -> Path:
        path = write_trace(trace, self.out_dir / name, self.header(stochastic))
        self.files[name] = stochastic
        self.files[path.with_suffix(".json").name] = stochastic
        return path

    def plot(self, name: str, fn: Callable[..., Path], *args: Any, stochastic: bool = False,
             **kwargs: Any) -> None:
        if not self.config.output.plots:
            return
        fn(self.out_dir / name, *args, **kwargs)
        self.files[name] = stochastic

    def write_manifest(self) -> Path:
        config_path = self.out_dir / CONFIG_COPY
        with open(config_path, "w") as fh:
            yaml.safe_dump(self.config.identity(), fh, sort_keys=True)
        # the copy records the noise seed
        self.files[CONFIG_COPY] = True
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "esrtwin_version": _version(),
            "kind": self.config.experiment.kind,
            "config_hash": self.config.hash,
            "config": self.config.identity(),
            "files": {
                name: {"sha256": sha256_file(self.out_dir / name), "stochastic": flag}
                for name, flag in sorted(self.files.items())
            },
        }
        return write_json(manifest, self.out_dir / MANIFEST)

    def ensemble(self, B0: float) -> SpinEnsemble:
        sample = self.config.sample
        if self._profile is None:
            self._profile = sample.profile()
            self._strain = sample.strain_map(self.model)
        ensemble = build_ensemble(
            self._profile,
            self._strain,
            self.model,
            self.system,
            B0,
            sample.n_packets,
            self.config.seeds.ensemble,
            x_half_width=sample.x_half_width_m,
            threshold=self.config.spin_system.threshold,
            detuning_window=sample.detuning_window,
            T2=sample.t2_s,
        )
        return ensemble if sample.spin_scale == 1.0 else ensemble.scaled(sample.spin_scale)


def _detection_beta(run: Run) -> float:
    beta = run.config.sequence.build().metadata.get("beta")
    if beta is None:
        raise ConfigError("sequence carries no drive amplitude", path="sequence.params")
    return float(beta)


def run_spectrum(run: Run) -> None:
    cfg = run.config
    fields = cfg.sweep.points(default=list(np.linspace(0.0, 10.0, 21))) * 1e-3
    betas = cfg.sequence.betas or [_detection_beta(run)]
    frames = []
    curves = {}
    for beta in betas:
        seq = cfg.sequence.build(beta=beta)
        table = field_sweep(fields, seq, run.ensemble, run.model, run.options, map_fn=run.map)
        table.insert(0, "beta", beta)
        frames.append(table)
        peak = float(np.max(np.abs(table["Ae"]))) or 1.0
        curves[f"beta={beta:.3g}"] = (table["B0_T"].to_numpy() * 1e3, table["Ae"].to_numpy() / peak)
    spectrum = pd.concat(frames, ignore_index=True)
    run.write_frame("spectrum.csv", spectrum)

    builder = default_table_builder(run.system, cfg.spin_system.threshold)
    b_max = max(float(fields.max()), 1e-4)
    expected = []
    for line in builder(max(float(fields.min()), 1e-5)):
        try:
            for b in transition_fields(
                builder, line.label, run.model.omega0, b_max=b_max, b_min=1e-5
            ):
                expected.append({"transition": str(line.label), "B0_mT": b * 1e3})
        except NotFoundError:
            continue
    run.write_report(
        "spectrum.json",
        {"betas": betas, "fields_mT": fields * 1e3, "expected_lines": expected},
    )
    run.plot("spectrum.svg", plots.line_plot, curves, "B0 (mT)", "Ae (normalized)", markers=True)


def run_echo_decay(run: Run) -> None:
    cfg = run.config
    sample = cfg.sample
    taus = cfg.sweep.points(default=list(np.linspace(2e-6, 1.5e-3, 300)))
    envelope = echo_decay(taus, sample.t2_s)
    kernel = np.ones_like(taus)
    if sample.bath_concentration > 0:
        kernels = [
            eseem_kernel(
                nuclear_bath(
                    sample.bath_concentration,
                    sample.bath_r_max_m,
                    run.b0,
                    repetition_seed(cfg.seeds.bath, k),
                ),
                taus,
            )
            for k in range(max(1, sample.bath_realizations))
        ]
        kernel = np.mean(kernels, axis=0)
    amplitude = envelope * kernel
    fit = fit_echo_decay(2 * taus, amplitude)
    run.write_frame(
        "echo_decay.csv",
        pd.DataFrame(
            {
                "tau_s": taus,
                "two_tau_s": 2 * taus,
                "envelope": envelope,
                "eseem": kernel,
                "amplitude": amplitude,
            }
        ),
    )
    run.write_report(
        "echo_decay.json",
        {
            "B0_mT": cfg.experiment.b0_mt,
            "concentration": sample.bath_concentration,
            "T2_configured_s": sample.t2_s,
            "T2_fit_s": fit.time_constant,
            "T2_fit_stderr_s": fit.stderr,
            "modulation_depth": float(1.0 - kernel.min()),
        },
    )
    run.plot(
        "echo_decay.svg",
        plots.line_plot,
        {"echo": (2e3 * taus, amplitude)},
        "2 tau (ms)",
        "echo amplitude",
        reference={"exp(-2 tau / T2)": (2e3 * taus, envelope)},
    )


def run_t1(run: Run) -> None:
    cfg = run.config
    seq_cfg = cfg.sequence
    delays = cfg.sweep.points(default=list(np.geomspace(0.1e-3, 10e-3, 8)))
    betas = seq_cfg.betas or [_detection_beta(run)]
    ensemble = run.ensemble(run.b0)
    kappa = run.model.kappa
    rows, fits, curves, fitted = [], [], {}, {}
    for beta in betas:
        detection = seq_cfg.build(beta=beta)
        curve = t1_sweep(
            delays,
            detection,
            ensemble,
            run.model,
            run.options,
            saturation_duration=seq_cfg.saturation_duration,
            saturation_beta=seq_cfg.saturation_beta,
            map_fn=run.map,
        )
        curve.insert(0, "beta", beta)
        curve["Ae_abs"] = curve["Ae"].abs()
        rows.append(curve)
        fit = fit_recovery(curve["T_delay_s"], curve["Ae_abs"])
        g_sel = selected_coupling(beta, detection.metadata["dt"], kappa)
        fits.append(
            {
                "beta": beta,
                "T1_s": fit.time_constant,
                "T1_stderr_s": fit.stderr,
                "A_inf": fit.amplitude,
                "g0_selected_hz": g_sel / TWO_PI,
                "T1_purcell_s": 1.0 / float(purcell_rate(g_sel, kappa)),
            }
        )
        label = f"beta={beta:.3g}"
        curves[label] = (1e3 * delays, curve["Ae_abs"].to_numpy())
        fitted[f"{label} fit"] = (
            1e3 * delays,
            fit.amplitude * (1 - np.exp(-delays / fit.time_constant)),
        )
    run.write_frame("t1_recovery.csv", pd.concat(rows, ignore_index=True))
    report: Dict[str, Any] = {"B0_mT": cfg.experiment.b0_mt, "fits": fits}
    if len(betas) >= 2:
        law = fit_power_law([f["beta"] for f in fits], [f["T1_s"] for f in fits])
        report["power_law"] = law._asdict()
    run.write_report("t1.json", report)
    run.plot(
        "t1_recovery.svg",
        plots.line_plot,
        curves,
        "T (ms)",
        "|Ae|",
        markers=True,
        reference=fitted,
    )


def _first_zero(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    for k in range(len(y) - 1):
        if y[k] == 0:
            return float(x[k])
        if y[k] * y[k + 1] < 0:
            return float(x[k] - y[k] * (x[k + 1] - x[k]) / (y[k + 1] - y[k]))
    return None


def run_rabi(run: Run) -> None:
    cfg = run.config
    seq_cfg = cfg.sequence
    detection = seq_cfg.build()
    beta_det = _detection_beta(run)
    betas_inv = cfg.sweep.points(default=list(np.linspace(0.0, 2.0 * beta_det, 21)))
    ensemble = run.ensemble(run.b0)

    def one(beta_inv: float) -> float:
        seq = build_rabi_nutation(float(beta_inv), seq_cfg.dt_inv, detection, seq_cfg.wait)
        trace = cycled_trace(seq, ensemble, run.model, run.options)
        return echo_integral(trace, seq.acquire_windows()[0]).integral_Ae

    ae = np.array(run.map(one, betas_inv))
    g_sel = selected_coupling(beta_det, detection.metadata["dt"], run.model.kappa)
    theta = np.array(
        [
            rabi_angle(b, seq_cfg.dt_inv, g_sel, run.model.kappa, run.model.kappa_ext)
            for b in betas_inv
        ]
    )
    run.write_frame(
        "rabi.csv", pd.DataFrame({"beta_inv": betas_inv, "theta_dominant_rad": theta, "Ae": ae})
    )
    zero = _first_zero(betas_inv, ae)
    run.write_report(
        "rabi.json",
        {
            "g0_selected_hz": g_sel / TWO_PI,
            "dt_inv_s": seq_cfg.dt_inv,
            "beta_inv_first_zero": zero,
            "theta_first_zero_rad": None
            if zero is None
            else rabi_angle(zero, seq_cfg.dt_inv, g_sel, run.model.kappa, run.model.kappa_ext),
        },
    )
    run.plot("rabi.svg", plots.line_plot, {"Ae": (betas_inv, ae)}, "beta_inv (s^-1/2)", "Ae")


def _integral_sigma(run: Run, n_samples: int) -> float:
    """Noise std of a boxcar integral over n_samples of a phase-cycled trace."""
    det = run.config.detection
    sigma = det.noise_model().sigma(det.sample_rate_hz) / math.sqrt(2.0)
    return sigma * math.sqrt(n_samples) / det.sample_rate_hz


def run_cpmg(run: Run) -> None:
    cfg = run.config
    seq = cfg.sequence.build()
    windows = seq.acquire_windows()
    if len(windows) < 1:
        raise ConfigError("cpmg sequence has no echo windows", path="sequence")
    trace = cycled_trace(seq, run.ensemble(run.b0), run.model, run.options)
    ae = np.array([echo_integral(trace, w).integral_Ae for w in windows])
    n_window = trace.window_slice(windows[0]).stop - trace.window_slice(windows[0]).start
    result = cpmg_snr(np.abs(ae), noise_sigma=_integral_sigma(run, n_window))
    frame = result.to_frame()
    frame.insert(1, "echo_time_s", seq.echo_times)
    frame.insert(2, "Ae", ae)
    run.write_frame("cpmg_echoes.csv", frame)
    run.write_trace("cpmg_trace.csv", trace)
    amps = np.abs(ae)
    run.write_report(
        "cpmg.json",
        {
            "n_echoes": len(ae),
            "best_n": result.best_n,
            "max_improvement": result.max_improvement,
            "ideal_improvement": math.sqrt(len(ae)),
            "decays_after_first": bool(np.all(np.diff(amps[1:]) <= 0)) if len(amps) > 2 else None,
        },
    )
    if cfg.detection.repetitions > 0:
        noisy = add_noise(trace, cfg.detection.noise_model(), cfg.seeds.noise)
        run.write_trace("cpmg_trace_noisy.csv", noisy, stochastic=True)
    n = np.arange(1, len(ae) + 1)
    run.plot(
        "cpmg_improvement.svg",
        plots.line_plot,
        {"simulated": (n, result.improvement)},
        "n echoes",
        "SNR(n) / SNR(1)",
        markers=True,
        reference={"sqrt(n)": (n, np.sqrt(n))},
    )
    run.plot("cpmg_trace.svg", plots.trace_plot, trace.times, {"I": trace.i, "Q": trace.q}, windows)


def run_stats(run: Run) -> None:
    cfg = run.config
    det = cfg.detection
    seed = cfg.seeds.noise
    rate = det.rep_rate_hz
    n_values = cfg.sweep.points(default=list(np.unique(np.round(np.geomspace(1, 1e4, 17)))))
    series = ou_series(
        det.mean_echo, det.fluctuation(), det.white_sigma, det.n_series, rate,
        repetition_seed(seed, 0),
    )
    control = ou_series(
        det.mean_echo,
        FluctuationModel(0.0, det.correlation_time_s),
        det.white_sigma,
        det.n_series,
        rate,
        repetition_seed(seed, 1),
    )
    tables, curves, reference, departures = [], {}, {}, {}
    sources = [("echo", series, d) for d in det.decimation] + [("control", control, 1)]
    for source, data, decimation in sources:
        available = math.ceil(len(data) / decimation)
        valid = [int(n) for n in n_values if available // int(n) >= 2]
        if len(valid) < len(n_values):
            logger.warning(
                "%s, decimation %d: block sizes above %d dropped", source, decimation,
                available // 2,
            )
        table = sigma_scaling(data, valid, decimation)
        table.insert(0, "decimation", decimation)
        table.insert(0, "source", source)
        tables.append(table)
        label = f"{source} /{decimation}"
        curves[label] = (table["n"].to_numpy(), table["sigma"].to_numpy())
        reference[f"{label} ideal"] = (table["n"].to_numpy(), table["ideal"].to_numpy())
        beyond = table[table["deviation"].abs() > 0.1]
        departures[label] = {
            "departure_n": int(beyond["n"].iloc[0]) if len(beyond) else None,
            "effective_rate_hz": effective_repetition_rate(rate, decimation),
        }
    run.write_frame("sigma_scaling.csv", pd.concat(tables, ignore_index=True), stochastic=True)
    run.write_report(
        "stats.json",
        {
            "n_series": det.n_series,
            "rep_rate_hz": rate,
            "relative_sigma": det.relative_sigma,
            "correlation_time_s": det.correlation_time_s,
            "curves": departures,
        },
        stochastic=True,
    )
    run.plot(
        "sigma_scaling.svg",
        plots.line_plot,
        curves,
        "n",
        "sigma(n)",
        logx=True,
        logy=True,
        reference=reference,
        stochastic=True,
    )


def run_s11_fit(run: Run) -> None:
    cfg = run.config
    model = run.model
    stochastic = False
    truth: Optional[Dict[str, float]] = None
    if cfg.experiment.input:
        trace = read_reflection_csv(cfg.experiment.input)
    else:
        width = model.kappa / TWO_PI
        detunings = cfg.sweep.points(default=list(np.linspace(-5 * width, 5 * width, 401)))
        omega = model.omega0 + TWO_PI * detunings
        s11 = s11_linear(model, omega)
        if cfg.detection.snr_db is not None:
            sigma = 10 ** (-cfg.detection.snr_db / 20) / math.sqrt(2)
            draws = counter_rng(cfg.seeds.noise, 0).standard_normal((len(omega), 2))
            s11 = s11 + sigma * (draws[:, 0] + 1j * draws[:, 1])
            stochastic = True
        trace = ReflectionTrace(frequencies=omega, s11=s11)
        truth = {"f0_hz": model.omega0 / TWO_PI, "q_ext": model.q_ext, "q_int": model.q_int}
    fit = fit_s11(trace)
    fitted = s11_linear(
        type(model)(omega0=fit.omega0, q_ext=fit.q_ext, q_int=fit.q_int), trace.frequencies
    )
    frame = trace.to_frame()
    frame["re_s11_fit"] = fitted.real
    frame["im_s11_fit"] = fitted.imag
    run.write_frame("s11.csv", frame, stochastic=stochastic)
    onset_detuning, onset_beta = bistability_onset(model)
    report: Dict[str, Any] = {
        "f0_hz": fit.omega0 / TWO_PI,
        "q_ext": fit.q_ext,
        "q_int": fit.q_int,
        "q_total": 1.0 / (1.0 / fit.q_ext + 1.0 / fit.q_int),
        "fit_residual": fit.fit_residual,
        "bistability_onset": {
            "detuning_hz": onset_detuning / TWO_PI,
            "beta": onset_beta,
            "power_dbm": float(beta_to_power(onset_beta, model.omega0)),
        },
    }
    if truth is not None:
        report["truth"] = truth
        report["relative_error"] = {
            "f0": abs(report["f0_hz"] / truth["f0_hz"] - 1),
            "q_ext": abs(fit.q_ext / truth["q_ext"] - 1),
            "q_int": abs(fit.q_int / truth["q_int"] - 1),
        }
    run.write_report("s11_fit.json", report, stochastic=stochastic)
    offset = (trace.frequencies - fit.omega0) / TWO_PI * 1e-3
    run.plot(
        "s11.svg",
        plots.line_plot,
        {"data": (offset, 20 * np.log10(np.abs(trace.s11)))},
        "f - f0 (kHz)",
        "|S11| (dB)",
        reference={"fit": (offset, 20 * np.log10(np.abs(fitted)))},
        stochastic=stochastic,
    )


def run_coupling_map(run: Run) -> None:
    model = run.model
    table = transitions(hamiltonian_levels(run.system, max(run.b0, 1e-7)),
                        run.config.spin_system.threshold)
    line = min(table, key=lambda t: abs(t.frequency - model.omega0))
    xs = np.linspace(-500e-9, 500e-9, 101)
    ys = -np.linspace(300e-9, 2.5e-9, 60)
    fmap = field_map(model, xs, ys)
    g0 = coupling_strength(np.stack([fmap.bx, fmap.by], axis=-1), line.sx_matrix_element,
                           run.system.gamma_e)
    frame = fmap.to_frame()
    frame["g0_Hz"] = g0.ravel() / TWO_PI
    run.write_frame("coupling_map.csv", frame)

    ensemble = run.ensemble(run.b0)
    edges, counts = coupling_histogram(ensemble, bins=G_BINS, transition_id=line.transition_id)
    run.write_frame(
        "coupling_histogram.csv",
        pd.DataFrame({"g0_low_Hz": edges[:-1] / TWO_PI, "g0_high_Hz": edges[1:] / TWO_PI,
                      "donors": counts}),
    )
    summary = ensemble.summary
    run.write_report(
        "coupling_map.json",
        {
            "transition": str(line.label),
            "sx_matrix_element": line.sx_matrix_element,
            "max_g0_hz": summary.max_g0 / TWO_PI if summary else None,
            "max_g0_position_m": summary.max_g0_position if summary else None,
            "max_g0_distance_m": summary.max_g0_distance if summary else None,
            "total_donors": summary.total_donors if summary else None,
        },
    )
    run.plot("coupling_map.svg", plots.map_plot, xs, ys, g0 / TWO_PI * 1e-3, "g0 / 2pi (kHz)")
    run.plot("coupling_histogram.svg", plots.histogram_plot, edges / TWO_PI, counts,
             "g0 / 2pi (Hz)", logx=True)


def run_strain_map(run: Run) -> None:
    sample = run.config.sample
    strain = sample.strain_map(run.model)
    profile = sample.profile()
    frame = strain.to_frame()
    frame["delta_A_Hz"] = hyperfine_shift(frame["eps_h"].to_numpy()) / TWO_PI
    run.write_frame("strain_map.csv", frame)
    stats = strain_statistics(strain, profile, run.system.nuclear_spin)
    X, Y = np.meshgrid(strain.xs, strain.ys)
    counts, edges = np.histogram(
        frame["delta_A_Hz"].to_numpy(), bins=60, weights=profile(-Y).ravel()
    )
    run.write_frame(
        "hyperfine_shift_histogram.csv",
        pd.DataFrame(
            {"delta_A_low_Hz": edges[:-1], "delta_A_high_Hz": edges[1:], "weight": counts}
        ),
    )
    run.write_report("strain_map.json", {"source": strain.source, **stats._asdict()})
    run.plot("strain_map.svg", plots.map_plot, strain.xs, strain.ys, strain.epsilon_h, "eps_h")


def run_sensitivity(run: Run) -> None:
    cfg = run.config
    det = cfg.detection
    seq = cfg.sequence.build()
    beta, dt = float(seq.metadata["beta"]), float(seq.metadata["dt"])
    kappa = run.model.kappa
    g0 = TWO_PI * det.g0_hz if det.g0_hz is not None else selected_coupling(beta, dt, kappa)
    ensemble = run.ensemble(run.b0)
    runs = simulate_cycled(seq, ensemble, run.model, run.options)
    template = runs[0][1] if len(runs) == 1 else phase_cycle(runs[0][1], runs[1][1])
    window = seq.acquire_windows()[0]
    noise = det.noise_model()
    sigma = noise.sigma(det.sample_rate_hz) / math.sqrt(len(runs))
    analytic = echo_integral(
        template, window, det.integration, template=template, phase=det.phase,
        noise_sigma=sigma,
    ).snr
    stochastic = det.repetitions >= 2
    snr_single = analytic
    if stochastic:
        def one(k: int) -> float:
            shots = [
                add_noise(trace, noise, repetition_seed(cfg.seeds.noise, len(runs) * k + j))
                for j, (_, trace) in enumerate(runs)
            ]
            noisy = shots[0] if len(shots) == 1 else phase_cycle(shots[0], shots[1])
            return echo_integral(
                noisy, window, det.integration, template=template, phase=det.phase
            ).integral_Ae

        values = run.map(one, range(det.repetitions))
        snr_single = snr_from_repetitions(values)
        run.write_frame(
            "echo_integrals.csv",
            pd.DataFrame({"repetition": np.arange(det.repetitions), "Ae": values}),
            stochastic=True,
        )
    report = sensitivity_report(
        kappa,
        g0,
        snr_single,
        det.n_spin,
        det.rep_rate_hz,
        det.n_tilde,
        det.polarization,
        det.cpmg_improvement,
    )
    report.update({"snr_analytic": analytic, "g0_hz": g0 / TWO_PI,
                   "ensemble_donors": ensemble.total_weight})
    if det.measured_ratio is not None:
        plain = seq.variants()[0][1]
        pulse_window = plain.drive_windows()[-1]

        def handle(scale: float) -> float:
            trace = simulate(plain, ensemble.scaled(scale), run.model, run.options)
            return echo_pulse_ratio(trace, window, pulse_window)

        estimate = estimate_spin_count(
            det.measured_ratio, handle, ensemble.total_weight, ratio_sigma=det.ratio_sigma
        )
        report["spin_count"] = estimate._asdict()
    run.write_report("sensitivity.json", report, stochastic=stochastic)
    run.write_trace("echo_template.csv", template)
    run.plot("echo_template.svg", plots.trace_plot, template.times,
             {"I": template.i, "Q": template.q}, [window])


RUNNERS: Dict[str, Callable[[Run], None]] = {
    "spectrum": run_spectrum,
    "echo_decay": run_echo_decay,
    "t1": run_t1,
    "rabi": run_rabi,
    "cpmg": run_cpmg,
    "stats": run_stats,
    "s11_fit": run_s11_fit,
    "coupling_map": run_coupling_map,
    "strain_map": run_strain_map,
    "sensitivity": run_sensitivity,
}
assert set(RUNNERS) == set(EXPERIMENT_KINDS)


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    threads: int = 1,
    kind: Optional[str] = None,
) -> Path:
    """
    Execute one experiment and write its outputs, config copy and manifest.

    Args:
        config (ExperimentConfig): validated config.
        out_dir (str | Path, optional): output directory; defaults to output.directory.
        threads (int): worker threads for sweep points.
        kind (str, optional): expected experiment kind; must match the config.

    Returns:
        Path: the manifest written into the output directory.
    """
    if kind is not None and kind != config.experiment.kind:
        raise ConfigError(
            f"config describes a '{config.experiment.kind}' experiment, not '{kind}'",
            path="experiment.kind",
        )
    out = Path(out_dir if out_dir is not None else config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    # intra-op threads would change reduction order
    torch.set_num_threads(1)
    run = Run(config, out, threads)
    logger.info("running %s into %s (config %s)", config.experiment.kind, out, config.hash[:12])
    RUNNERS[config.experiment.kind](run)
    return run.write_manifest()


class FileCheck(NamedTuple):
    name: str
    match: bool
    edited: bool
    stochastic: bool
    line: Optional[int] = None
    row: Optional[int] = None


class ReplayReport(NamedTuple):
    results_dir: str
    config_hash: str
    files: List[FileCheck]

    @property
    def all_match(self) -> bool:
        return all(f.match for f in self.files)

    @property
    def mismatched(self) -> List[str]:
        return [f.name for f in self.files if not f.match]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "results_dir": self.results_dir,
            "config_hash": self.config_hash,
            "all_match": self.all_match,
            "files": [f._asdict() for f in self.files],
        }


def _first_difference(a: Path, b: Path) -> tuple:
    """1-based line of the first differing line and, for CSV files, its data row (0-based)."""
    with open(a) as fa, open(b) as fb:
        lines_a, lines_b = fa.read().splitlines(), fb.read().splitlines()
    for k in range(max(len(lines_a), len(lines_b))):
        la = lines_a[k] if k < len(lines_a) else None
        lb = lines_b[k] if k < len(lines_b) else None
        if la != lb:
            row = None
            if a.suffix == ".csv":
                skipped = sum(1 for line in lines_a[:k] if line.startswith("#"))
                row = k - skipped - 1 if k - skipped >= 1 else None
            return k + 1, row
    return None, None


def load_manifest(results_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(results_dir) / MANIFEST
    if not path.is_file():
        raise ManifestError(f"no manifest in {results_dir}", path=str(path))
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except ValueError as err:
        raise ManifestError(f"corrupt manifest: {err}", path=str(path))
    if manifest.get("schema") != MANIFEST_SCHEMA or "config" not in manifest:
        raise ManifestError("not an esrtwin manifest", path=str(path))
    return manifest


def replay(
    results_dir: Union[str, Path], seed_override: Optional[int] = None, threads: int = 1
) -> ReplayReport:
    """
    Re-run a results directory from its stored config and compare every file byte for byte.

    Files that changed since the run are flagged `edited`; mismatches in text files are
    located to the first differing line (and CSV data row).
    """
    results_dir = Path(results_dir)
    manifest = load_manifest(results_dir)
    config = config_from_dict(manifest["config"])
    if seed_override is not None:
        config = config.with_seed(seed_override)
    checks = []
    with tempfile.TemporaryDirectory(prefix="esrtwin-replay-") as tmp:
        run_experiment(config, tmp, threads)
        fresh = Path(tmp)
        for name, entry in sorted(manifest["files"].items()):
            original = results_dir / name
            rerun = fresh / name
            current = sha256_file(original) if original.is_file() else None
            match = current is not None and rerun.is_file() and current == sha256_file(rerun)
            line = row = None
            if not match and current is not None and rerun.is_file():
                line, row = _first_difference(original, rerun)
            checks.append(
                FileCheck(
                    name=name,
                    match=match,
                    edited=current != entry["sha256"],
                    stochastic=bool(entry["stochastic"]),
                    line=line,
                    row=row,
                )
            )
    report = ReplayReport(str(results_dir), manifest["config_hash"], checks)
    for check in checks:
        if not check.match:
            logger.warning("drift in %s (line %s, row %s)", check.name, check.line, check.row)
    return report
