from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from scipy.optimize import minimize_scalar
from scipy.signal import lfilter

from esrtwin.core.utils import blocked_draw, check_positive, counter_rng
from esrtwin.errors import NumericalError, ValidationError
from esrtwin.io.records import TraceRecord

logger = logging.getLogger(__name__)

PHASE_PRESERVING = "phase_preserving"
DEGENERATE = "degenerate"
QUANTUM_LIMIT = 0.5
REPETITION_BITS = 20

Window = Tuple[float, float]


@dataclass(frozen=True)
class NoiseModel:
    """
    Input-referred detection noise.

    Attributes:
        n_tilde: noise in photons; 1/2 is the quantum limit.
        gain: power gain applied to signal and noise alike.
        mode: "phase_preserving" keeps both quadratures, "degenerate" keeps the quadrature at
            `phase` and discards the conjugate one.
        phase: angle of the amplified quadrature, rad.
    """

    n_tilde: float = QUANTUM_LIMIT
    gain: float = 1.0
    mode: str = DEGENERATE
    phase: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in (PHASE_PRESERVING, DEGENERATE):
            raise ValidationError(f"unknown noise mode '{self.mode}'")
        if self.n_tilde < 0 or self.gain <= 0:
            raise ValidationError("n_tilde must be >= 0 and gain > 0")
        if self.mode == PHASE_PRESERVING and 0 < self.n_tilde < QUANTUM_LIMIT:
            logger.warning(
                "n_tilde=%.3g is below the quantum limit of a phase-preserving amplifier",
                self.n_tilde,
            )

    def sigma(self, sample_rate: float) -> float:
        """Per-quadrature standard deviation sqrt(n_tilde / (2 dt)), s^-1/2, before gain."""
        return math.sqrt(self.n_tilde * sample_rate / 2.0)


def _normal_pairs(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.standard_normal((size, 2))


def repetition_seed(seed: int, k: int) -> int:
    """Distinct noise seed for repetition k of a run seeded with `seed`."""
    if not 0 <= k < 1 << REPETITION_BITS:
        raise ValidationError(f"repetition index out of range: {k}")
    return (seed << REPETITION_BITS) + k


def add_noise(trace: TraceRecord, noise: NoiseModel, seed: int) -> TraceRecord:
    """
    Add white Gaussian noise of variance n_tilde / (2 dt) to each kept quadrature.

    The draws come from counter streams keyed by `seed`, so the same seed gives the same
    noisy trace. In degenerate mode the output holds the `phase` quadrature in I and Q is
    zero.
    """
    sigma = noise.sigma(trace.sample_rate)
    signal = trace.signal
    if noise.mode == DEGENERATE:
        signal = (np.exp(-1j * noise.phase) * signal).real + 0j
    if sigma > 0:
        draws = blocked_draw(seed, len(trace), _normal_pairs).reshape(-1, 2)
        signal = signal + sigma * draws[:, 0]
        if noise.mode == PHASE_PRESERVING:
            signal = signal + 1j * sigma * draws[:, 1]
    amp = math.sqrt(noise.gain)
    metadata = {**trace.metadata, "noise": {"n_tilde": noise.n_tilde, "mode": noise.mode}}
    return trace.with_signal(amp * signal.real, amp * signal.imag, seed=seed, metadata=metadata)


def phase_cycle(trace_plus: TraceRecord, trace_minus: TraceRecord) -> TraceRecord:
    """(trace_plus - trace_minus) / 2: drive leakage cancels, the sign-flipping echo stays."""
    if len(trace_plus) != len(trace_minus) or trace_plus.sample_rate != trace_minus.sample_rate:
        raise ValidationError(
            "phase-cycled traces differ in shape",
            lengths=(len(trace_plus), len(trace_minus)),
            rates=(trace_plus.sample_rate, trace_minus.sample_rate),
        )
    return trace_plus.with_signal(
        (trace_plus.i - trace_minus.i) / 2, (trace_plus.q - trace_minus.q) / 2
    )


class EchoResult(NamedTuple):
    integral_Ae: float
    window: Window
    snr: Optional[float]
    seed: Optional[int]
    mode: str


def _quadrature(values: np.ndarray, phase: float) -> np.ndarray:
    return (np.exp(-1j * phase) * values).real


def matched_weights(template: np.ndarray) -> np.ndarray:
    """Filter h = T sum(T) / sum(T^2): the noiseless template integrates to the boxcar value."""
    energy = float(np.dot(template, template))
    if energy == 0:
        raise ValidationError("matched-filter template is identically zero")
    return template * template.sum() / energy


def echo_integral(
    trace: TraceRecord,
    window: Window,
    mode: str = "boxcar",
    template: Optional[Union[TraceRecord, ArrayLike]] = None,
    phase: float = 0.0,
    noise_sigma: Optional[float] = None,
) -> EchoResult:
    """
    Integral Ae of the signal quadrature over a window.

    Args:
        trace (TraceRecord): detected or simulated trace.
        window (Tuple[float, float]): (t0, t1) in s, inside the trace span.
        mode (str): "boxcar" integrates dt * sum(x); "matched" weights the samples with the
            normalized noiseless template.
        template (TraceRecord | ArrayLike, optional): noiseless trace (sliced with the same
            window) or the template samples inside the window; required for "matched".
        phase (float): angle of the signal quadrature, rad.
        noise_sigma (float, optional): per-sample noise std of the signal quadrature; when
            given, `snr` is |Ae| over the integral's noise std.

    Returns:
        EchoResult: integral, window, snr (or None), seed of the trace and mode.
    """
    sl = trace.window_slice(window)
    x = _quadrature(trace.signal[sl], phase)
    if mode == "boxcar":
        h = np.ones_like(x)
    elif mode == "matched":
        if template is None:
            raise ValidationError("matched filtering needs a template")
        if isinstance(template, TraceRecord):
            tmpl = _quadrature(template.signal[template.window_slice(window)], phase)
        else:
            tmpl = _quadrature(np.asarray(template, dtype=complex), phase)
        if tmpl.shape != x.shape:
            raise ValidationError(
                "template does not match the window", template=tmpl.shape, window=x.shape
            )
        h = matched_weights(tmpl)
    else:
        raise ValidationError(f"unknown integration mode '{mode}'")
    dt = trace.dt
    ae = dt * float(np.dot(h, x))
    snr = None
    if noise_sigma is not None:
        std = dt * noise_sigma * math.sqrt(float(np.dot(h, h)))
        snr = abs(ae) / std if std > 0 else math.inf
    return EchoResult(ae, (float(window[0]), float(window[1])), snr, trace.seed, mode)


def echo_pulse_ratio(trace: TraceRecord, echo_window: Window, pulse_window: Window) -> float:
    """Peak |a_out| in the echo window over the peak |a_out| in the pulse window."""
    pulse = np.abs(trace.signal[trace.window_slice(pulse_window)]).max()
    if pulse == 0:
        raise ValidationError("no reflected pulse in the pulse window")
    echo = np.abs(trace.signal[trace.window_slice(echo_window)]).max()
    return float(echo / pulse)


def snr_from_repetitions(values: ArrayLike) -> float:
    """mean / std (ddof=1) over repeated echo integrals."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValidationError("an SNR estimate needs at least 2 repetitions")
    std = float(v.std(ddof=1))
    return math.inf if std == 0 else abs(float(v.mean())) / std


class SpinCountEstimate(NamedTuple):
    n_spin: float
    uncertainty: float
    scale: float
    sensitivity: float


def estimate_spin_count(
    measured_ratio: float,
    simulator_handle: Callable[[float], float],
    baseline_count: float,
    bounds: Tuple[float, float] = (1e-2, 10.0),
    ratio_sigma: Optional[float] = None,
    xatol: float = 1e-6,
) -> SpinCountEstimate:
    """
    Scale the ensemble until the simulated echo/pulse ratio matches the measured one.

    Args:
        measured_ratio (float): measured echo-to-pulse amplitude ratio.
        simulator_handle (Callable): ensemble scale factor -> simulated ratio.
        baseline_count (float): donors in the unscaled ensemble.
        bounds (Tuple[float, float]): search interval for the scale factor.
        ratio_sigma (float, optional): standard error of the measured ratio.

    Returns:
        SpinCountEstimate: scale * baseline_count, its uncertainty (|dN/dratio| * ratio_sigma,
        nan without ratio_sigma), the scale factor and dN/dratio.
    """
    if measured_ratio < 0:
        raise ValidationError(f"measured ratio must be >= 0, got {measured_ratio}")
    if measured_ratio == 0:
        return SpinCountEstimate(0.0, 0.0, 0.0, math.nan)
    lo, hi = bounds

    def loss(scale: float) -> float:
        return (simulator_handle(scale) - measured_ratio) ** 2

    result = minimize_scalar(loss, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
    scale = float(result.x)
    edge = 1e3 * xatol
    if not result.success or scale - lo < edge or hi - scale < edge:
        raise NumericalError(
            "spin-count minimum not bracketed", last_iterate=scale, bounds=bounds
        )
    step = 1e-3 * scale
    slope = (simulator_handle(scale + step) - simulator_handle(scale - step)) / (2 * step)
    sensitivity = baseline_count / slope if slope != 0 else math.inf
    uncertainty = abs(sensitivity) * ratio_sigma if ratio_sigma is not None else math.nan
    n_spin = scale * baseline_count
    logger.info("spin count %.4g (scale %.4g, residual %.3g)", n_spin, scale, result.fun)
    return SpinCountEstimate(n_spin, uncertainty, scale, sensitivity)


def sensitivity_formula(
    kappa: float, g0: float, n_tilde: float = QUANTUM_LIMIT, polarization: float = 1.0
) -> float:
    """
    Minimum spin number for unit SNR in one echo, N_min = kappa / (2 P g0) sqrt(n_tilde).

    Examples:
        ```python exec="on" source="above" result="json"
        import math
        from esrtwin.core.detection import sensitivity_formula
        print(sensitivity_formula(2 * math.pi * 332e3, 2 * math.pi * 2.7e3))  # ~43.5
        ```
    """
    check_positive(kappa=kappa, g0=g0, n_tilde=n_tilde, polarization=polarization)
    return kappa / (2 * polarization * g0) * math.sqrt(n_tilde)


class Sensitivity(NamedTuple):
    n_min_single: float
    spins_per_sqrt_hz: float


def sensitivity_pipeline(snr_single: float, n_spin: float, rep_rate: float) -> Sensitivity:
    """N_min = n_spin / snr_single and N_min / sqrt(rep_rate) spins per sqrt(Hz)."""
    check_positive(snr_single=snr_single, rep_rate=rep_rate)
    n_min = n_spin / snr_single
    return Sensitivity(n_min, n_min / math.sqrt(rep_rate))


def effective_repetition_rate(rep_rate: float, decimation: int = 1) -> float:
    if decimation < 1:
        raise ValidationError(f"decimation must be >= 1, got {decimation}")
    return rep_rate / decimation


def cpmg_sensitivity(n_min_single: float, improvement: float, rep_rate: float) -> float:
    """Spins per sqrt(Hz) when each repetition carries a CPMG train with the given SNR gain."""
    check_positive(improvement=improvement, rep_rate=rep_rate)
    return n_min_single / improvement / math.sqrt(rep_rate)


def sensitivity_report(
    kappa: float,
    g0: float,
    snr_single: float,
    n_spin: float,
    rep_rate: float,
    n_tilde: float = QUANTUM_LIMIT,
    polarization: float = 1.0,
    cpmg_improvement: Optional[float] = None,
) -> Dict[str, Any]:
    """Formula and pipeline estimates side by side; they are reported, not reconciled."""
    pipeline = sensitivity_pipeline(snr_single, n_spin, rep_rate)
    report: Dict[str, Any] = {
        "n_min_formula": sensitivity_formula(kappa, g0, n_tilde, polarization),
        "n_min_single": pipeline.n_min_single,
        "spins_per_sqrt_hz": pipeline.spins_per_sqrt_hz,
        "snr_single": snr_single,
        "n_spin": n_spin,
        "rep_rate_hz": rep_rate,
    }
    if cpmg_improvement is not None:
        report["cpmg_improvement"] = cpmg_improvement
        report["spins_per_sqrt_hz_cpmg"] = cpmg_sensitivity(
            pipeline.n_min_single, cpmg_improvement, rep_rate
        )
    return report


def sigma_scaling(
    series: ArrayLike, n_values: Sequence[int], decimation: int = 1
) -> pd.DataFrame:
    """
    Standard deviation of block averages versus block size n.

    The series is decimated (every `decimation`-th value kept) and cut into disjoint blocks of
    n; sigma is the ddof=1 standard deviation of the block means. The table also carries the
    ideal sigma(1)/sqrt(n) and its 3-sigma band, sigma/sqrt(2(m - 1)) for m blocks.

    Returns:
        pd.DataFrame: columns n, n_blocks, sigma, ideal, lower_3sigma, upper_3sigma, deviation.
    """
    if decimation < 1:
        raise ValidationError(f"decimation must be >= 1, got {decimation}")
    x = np.asarray(series, dtype=float)[::decimation]
    if x.size < 2:
        raise ValidationError("insufficient data", samples=x.size)
    sigma1 = float(x.std(ddof=1))
    rows = []
    for n in n_values:
        n = int(n)
        m = x.size // n if n > 0 else 0
        if m < 2:
            raise ValidationError(
                "insufficient data", n=n, samples=x.size, decimation=decimation
            )
        means = x[: m * n].reshape(m, n).mean(axis=1)
        sigma = float(means.std(ddof=1))
        ideal = sigma1 / math.sqrt(n)
        band = 3.0 / math.sqrt(2 * (m - 1))
        rows.append(
            {
                "n": n,
                "n_blocks": m,
                "sigma": sigma,
                "ideal": ideal,
                "lower_3sigma": ideal * max(0.0, 1 - band),
                "upper_3sigma": ideal * (1 + band),
                "deviation": sigma / ideal - 1 if ideal > 0 else 0.0,
            }
        )
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class FluctuationModel:
    """Ornstein-Uhlenbeck fluctuation of the contributing spin number (relative units)."""

    relative_sigma: float = 0.0
    correlation_time: float = 3.0

    def __post_init__(self) -> None:
        if self.relative_sigma < 0 or self.correlation_time < 0:
            raise ValidationError("relative_sigma and correlation_time must be >= 0")


def ou_process(
    n_samples: int, rate: float, sigma: float, correlation_time: float, seed: int, stream: int = 0
) -> np.ndarray:
    """Stationary OU samples: eta_k = rho eta_{k-1} + sigma sqrt(1 - rho^2) eps_k."""
    check_positive(rate=rate)
    eps = counter_rng(seed, stream).standard_normal(n_samples)
    if n_samples == 0 or sigma == 0:
        return np.zeros(n_samples)
    rho = math.exp(-1.0 / (rate * correlation_time)) if correlation_time > 0 else 0.0
    eta0 = sigma * eps[0]
    rest = lfilter([sigma * math.sqrt(1 - rho**2)], [1.0, -rho], eps[1:], zi=[rho * eta0])[0]
    return np.concatenate([[eta0], rest])


def ou_series(
    mean_A: float,
    fluct: FluctuationModel,
    white_sigma: float,
    n_samples: int,
    rate: float,
    seed: int,
) -> np.ndarray:
    """
    Synthetic echo integrals X_k = mean_A (1 + eta_k) + xi_k sampled at the repetition rate.

    eta is the OU process of `fluct` (stream 0) and xi white noise of std white_sigma
    (stream 1).
    """
    if n_samples < 0:
        raise ValidationError(f"n_samples must be >= 0, got {n_samples}")
    eta = ou_process(n_samples, rate, fluct.relative_sigma, fluct.correlation_time, seed, 0)
    xi = white_sigma * counter_rng(seed, 1).standard_normal(n_samples)
    return mean_A * (1.0 + eta) + xi


class CPMGSNR(NamedTuple):
    snr: np.ndarray
    improvement: np.ndarray
    best_n: int
    max_improvement: float

    def to_frame(self) -> pd.DataFrame:
        n = np.arange(1, len(self.snr) + 1)
        return pd.DataFrame({"n": n, "snr": self.snr, "improvement": self.improvement})


def cpmg_snr(
    echo_amplitudes: ArrayLike,
    noise_sigma: float = 1.0,
    with_correlations: bool = False,
    covariance: Optional[ArrayLike] = None,
) -> CPMGSNR:
    """
    SNR of the sum of the first n echoes of a CPMG train.

    Uncorrelated: SNR(n) = sum_{k<=n} A_k / (sqrt(n) sigma). With correlations the noise of the
    sum is sqrt(1^T C_n 1) from the leading n x n block of `covariance`.
    """
    a = np.asarray(echo_amplitudes, dtype=float)
    if a.size == 0:
        raise ValidationError("no echo amplitudes")
    signal = np.cumsum(a)
    n = np.arange(1, a.size + 1)
    if with_correlations:
        if covariance is None:
            raise ValidationError("correlated noise needs a covariance matrix")
        cov = np.asarray(covariance, dtype=float)
        if cov.shape != (a.size, a.size):
            raise ValidationError("covariance does not match the echo train", shape=cov.shape)
        noise = np.sqrt(np.array([cov[:k, :k].sum() for k in n]))
    else:
        check_positive(noise_sigma=noise_sigma)
        noise = np.sqrt(n) * noise_sigma
    snr = signal / noise
    improvement = snr / snr[0]
    best = int(np.argmax(improvement))
    return CPMGSNR(snr, improvement, best + 1, float(improvement[best]))
