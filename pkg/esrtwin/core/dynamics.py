from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import lmfit
import numpy as np
import pandas as pd
import torch
from numpy.typing import ArrayLike

from esrtwin.core.detection import echo_integral, phase_cycle
from esrtwin.core.resonator import ResonatorModel
from esrtwin.core.sequences import PulseSequence, Segment, build_saturation_recovery
from esrtwin.errors import NumericalError, ValidationError
from esrtwin.io.records import TraceRecord
from esrtwin.modules.evolution import CavityBlochEvolution
from esrtwin.modules.utils import bloch_excess

if TYPE_CHECKING:
    from esrtwin.core.sample import NuclearBath, SpinEnsemble

logger = logging.getLogger(__name__)

S_EQ = -0.5
SAMPLE_RATE = 10e6
SETTLE_TIME_CONSTANTS = 50
MAX_SUBSTEPS = 100_000


def purcell_rate(g0: ArrayLike, kappa: float, detuning: ArrayLike = 0.0) -> np.ndarray:
    """
    Cavity-enhanced relaxation rate Gamma1 = kappa g0^2 / ((kappa/2)^2 + detuning^2).

    Args:
        g0 (ArrayLike): coupling, rad/s.
        kappa (float): total cavity linewidth, 1/s.
        detuning (ArrayLike): spin minus cavity frequency, rad/s.

    Returns:
        np.ndarray: Gamma1 in 1/s.

    Examples:
        ```python exec="on" source="above" result="json"
        import math
        from esrtwin.core.dynamics import purcell_rate
        print(1 / purcell_rate(2 * math.pi * 2.7e3, 2 * math.pi * 332e3))  # ~1.8 ms
        ```
    """
    if kappa <= 0:
        raise ValidationError(f"kappa must be > 0, got {kappa}")
    g = np.asarray(g0, dtype=float)
    d = np.asarray(detuning, dtype=float)
    return kappa * g**2 / ((kappa / 2) ** 2 + d**2)


def selected_coupling(beta: float, dt: float, kappa: float) -> float:
    """g0 of the spins turned by pi under a pulse (beta, dt), pi sqrt(kappa) / (4 beta dt).

    Assumes kappa_ext ~ kappa.
    """
    for name, value in (("beta", beta), ("dt", dt), ("kappa", kappa)):
        if not value > 0:
            raise ValidationError(f"'{name}' must be > 0, got {value}")
    return math.pi * math.sqrt(kappa) / (4 * beta * dt)


def rabi_angle(beta: float, dt: float, g0: float, kappa: float, kappa_ext: float) -> float:
    """Rotation angle 2 g0 alpha_ss dt, alpha_ss = 2 sqrt(kappa_ext) beta / kappa."""
    if kappa <= 0 or kappa_ext < 0:
        raise ValidationError("kappa must be > 0 and kappa_ext >= 0")
    alpha_ss = 2 * math.sqrt(kappa_ext) * beta / kappa
    return 2 * g0 * alpha_ss * dt


@dataclass(frozen=True)
class SimulationOptions:
    """
    Integrator settings.

    Attributes:
        sample_rate: output sampling rate, Hz; segment edges are snapped to this grid.
        freeze_after: segments of kind drive/delay longer than this (s) are integrated with
            RK4 for SETTLE_TIME_CONSTANTS/kappa and then propagated exactly with the cavity
            held at its drive steady state. Defaults to 100/kappa; math.inf disables it.
        record_frozen: sample the output inside frozen stretches (otherwise the spin-free
            steady output is written there).
        bloch_tol: allowed excess over the Bloch sphere.
        s_eq: thermal equilibrium s_z.
        device: torch device.
    """

    sample_rate: float = SAMPLE_RATE
    freeze_after: Optional[float] = None
    record_frozen: bool = True
    record_spins: bool = True
    bloch_tol: float = 1e-9
    s_eq: float = S_EQ
    max_substeps: int = MAX_SUBSTEPS
    device: str = "cpu"


def _drive(seg: Segment) -> complex:
    if seg.kind != "drive":
        return 0j
    return seg.beta * complex(math.cos(seg.phase), math.sin(seg.phase))


def _n_samples(seg: Segment, dt_s: float) -> int:
    if seg.kind == "instant":
        return 0
    return max(1, int(round(seg.duration / dt_s)))


def step_size(
    kappa: float, detuning: np.ndarray, sequence: PulseSequence, dt_s: float
) -> Tuple[float, int]:
    """RK4 step h <= min(1/(20 kappa), 1/(20 max|delta|), dt/50), a whole fraction of a sample."""
    limits = [1.0 / (20 * kappa)]
    if detuning.size and np.max(np.abs(detuning)) > 0:
        limits.append(1.0 / (20 * float(np.max(np.abs(detuning)))))
    drives = [s.duration for s in sequence.segments if s.kind == "drive"]
    if drives:
        limits.append(min(drives) / 50)
    m = max(1, math.ceil(dt_s / min(limits) - 1e-9))
    return dt_s / m, m


def _check_state(
    evo: CavityBlochEvolution, state: torch.Tensor, t: float, tol: float
) -> None:
    if not bool(torch.all(torch.isfinite(torch.view_as_real(state)))):
        raise NumericalError("non-finite state", time=t)
    _, s_minus, s_z = evo.split(state)
    excess = float(bloch_excess(s_minus, s_z))
    if excess > tol:
        raise NumericalError(
            "Bloch-ball violation",
            time=t,
            excess=excess,
            packet=int(torch.argmax(torch.abs(s_minus) ** 2 + s_z.real**2)),
        )


def build_evolution(
    ensemble: "SpinEnsemble", model: ResonatorModel, options: SimulationOptions
) -> CavityBlochEvolution:
    t = ensemble.tensors(options.device)
    gamma1 = torch.where(torch.isfinite(t["T1"]), 1.0 / t["T1"], torch.zeros_like(t["T1"]))
    gamma2 = 1.0 / t["T2"] + gamma1 / 2
    return CavityBlochEvolution(
        g=t["g0"],
        detuning=t["detuning"],
        weight=t["weight"],
        gamma1=gamma1,
        gamma2=gamma2,
        kappa=model.kappa,
        kappa_ext=model.kappa_ext,
        s_eq=options.s_eq,
    ).to(options.device)


def _kerr_check(sequence: PulseSequence, model: ResonatorModel) -> None:
    betas = [s.beta for s in sequence.segments if s.kind == "drive"]
    if not betas or model.kerr_K == 0:
        return
    n_max = model.kappa_ext * max(betas) ** 2 / (model.kappa / 2) ** 2
    n_onset = model.kappa / (math.sqrt(3.0) * abs(model.kerr_K))
    if n_max > n_onset:
        logger.warning(
            "drive of %.3g photons exceeds the Kerr bistability onset (%.3g photons); "
            "the cavity is treated as linear",
            n_max,
            n_onset,
        )


def simulate(
    sequence: PulseSequence,
    ensemble: "SpinEnsemble",
    resonator_model: ResonatorModel,
    options: Optional[SimulationOptions] = None,
    initial_state: Optional[torch.Tensor] = None,
) -> TraceRecord:
    """
    Noiseless output field of the cavity and spin packets under a pulse sequence.

    Integrates, in the frame rotating at omega0,
        d alpha/dt = -(kappa/2) alpha + sqrt(kappa_ext) beta e^{i phi} - i sum_j w_j g_j s-_j
        d s-_j/dt = -(1/T2_j + Gamma1_j/2 + i delta_j) s-_j + 2 i g_j alpha s_z_j
        d s_z_j/dt = -Gamma1_j (s_z_j - s_eq) + i g_j (alpha* s-_j - alpha s-_j*)
    with fixed-step RK4, and samples a_out = sqrt(kappa_ext) alpha - beta e^{i phi}.

    The sequence is played as given (phase-cycle variants are the caller's business, see
    `simulate_cycled`).

    Args:
        sequence (PulseSequence): validated sequence.
        ensemble (SpinEnsemble): spin packets, may be empty.
        resonator_model (ResonatorModel): omega0, kappa and kappa_ext.
        options (SimulationOptions, optional): integrator settings.
        initial_state (torch.Tensor, optional): packed state to start from; thermal otherwise.

    Returns:
        TraceRecord: one sample per 1/sample_rate; `final_state` holds the packed state.
    """
    opts = options or SimulationOptions()
    model = resonator_model
    _kerr_check(sequence, model)
    evo = build_evolution(ensemble, model, opts)
    dt_s = 1.0 / opts.sample_rate
    h, m = step_size(model.kappa, np.asarray(ensemble.detuning), sequence, dt_s)
    if m > opts.max_substeps:
        raise NumericalError("step size underflow", step=h, substeps=m)
    freeze_after = 100.0 / model.kappa if opts.freeze_after is None else opts.freeze_after
    n_settle = math.ceil(SETTLE_TIME_CONSTANTS / model.kappa / dt_s)
    total_weight = float(np.sum(ensemble.weight)) if len(ensemble) else 0.0
    weights = torch.as_tensor(np.asarray(ensemble.weight), dtype=torch.double)

    state = evo.init_state(opts.device) if initial_state is None else initial_state.clone()
    out: List[complex] = []
    spin_z: List[float] = []
    t = 0.0

    def record(st: torch.Tensor, drive: complex, alpha: Optional[torch.Tensor] = None) -> None:
        a = st[0] if alpha is None else alpha
        out.append(complex(evo.sqrt_kappa_ext * a - drive))
        if opts.record_spins:
            if total_weight > 0:
                sz = evo.split(st)[2].real.cpu()
                spin_z.append(float(torch.dot(weights, sz)) / total_weight)
            else:
                spin_z.append(opts.s_eq)

    for seg in sequence.segments:
        if seg.kind == "instant":
            state = evo.rotate(state, seg.angle, seg.phase)
            _check_state(evo, state, t, opts.bloch_tol)
            continue
        n = _n_samples(seg, dt_s)
        drive = _drive(seg)
        frozen = seg.kind in ("drive", "delay") and seg.duration > freeze_after and n > n_settle
        n_rk4 = n_settle if frozen else n
        for _ in range(n_rk4):
            state = evo(state, drive, h, m)
            t += dt_s
            _check_state(evo, state, t, opts.bloch_tol)
            record(state, drive)
        if not frozen:
            continue
        n_rest = n - n_rk4
        alpha_ss = complex(2.0 * evo.sqrt_kappa_ext * drive / model.kappa)
        generator = evo.bloch_generator(alpha_ss)
        if opts.record_frozen:
            step = torch.linalg.matrix_exp(generator * dt_s)
            for _ in range(n_rest):
                state = evo.propagate_spins(state, step)
                t += dt_s
                record(state, drive, evo.adiabatic_alpha(state, drive))
        else:
            jump = torch.linalg.matrix_exp(generator * (n_rest * dt_s))
            state = evo.propagate_spins(state, jump)
            out.extend([complex(evo.sqrt_kappa_ext * alpha_ss - drive)] * (n_rest - 1))
            if opts.record_spins:
                spin_z.extend([math.nan] * (n_rest - 1))
            t += n_rest * dt_s
            record(state, drive, evo.adiabatic_alpha(state, drive))
        state = state.clone()
        state[0] = evo.adiabatic_alpha(state, drive)
        _check_state(evo, state, t, opts.bloch_tol)

    signal = np.array(out, dtype=complex)
    times = dt_s * np.arange(1, len(signal) + 1)
    logger.debug(
        "simulated %s: %d samples, %d packets, h=%.3g s",
        sequence.name,
        len(signal),
        len(ensemble),
        h,
    )
    return TraceRecord(
        times=times,
        i=signal.real.copy(),
        q=signal.imag.copy(),
        sample_rate=opts.sample_rate,
        sequence=sequence.to_json(),
        metadata={"n_packets": len(ensemble), "step": h, "spins": total_weight},
        spin_z=np.array(spin_z) if opts.record_spins else None,
        final_state=state,
    )


def simulate_cycled(
    sequence: PulseSequence,
    ensemble: "SpinEnsemble",
    resonator_model: ResonatorModel,
    options: Optional[SimulationOptions] = None,
) -> List[Tuple[int, TraceRecord]]:
    """Simulate every phase-cycle variant, returning (sign, trace) pairs."""
    return [
        (sign, simulate(variant, ensemble, resonator_model, options))
        for sign, variant in sequence.variants()
    ]


def bloch_steady_cavity(
    sequence: PulseSequence, resonator_model: ResonatorModel, sample_rate: float = SAMPLE_RATE
) -> np.ndarray:
    """
    Closed-form a_out of the empty cavity for a piecewise-constant drive on the sample grid.

    Between sample edges alpha relaxes exactly:
    alpha(t + dt) = alpha_ss + (alpha - alpha_ss) e^{-kappa dt / 2}.
    """
    model = resonator_model
    dt_s = 1.0 / sample_rate
    decay = math.exp(-0.5 * model.kappa * dt_s)
    alpha = 0j
    out = []
    for seg in sequence.segments:
        n = _n_samples(seg, dt_s)
        drive = _drive(seg)
        alpha_ss = 2.0 * math.sqrt(model.kappa_ext) * drive / model.kappa
        for _ in range(n):
            alpha = alpha_ss + (alpha - alpha_ss) * decay
            out.append(math.sqrt(model.kappa_ext) * alpha - drive)
    return np.array(out, dtype=complex)


def _mims_factors(
    bath: "NuclearBath",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    w_i = bath.omega_I
    a, b = bath.a_secular, bath.b_pseudosecular
    w_alpha = np.sqrt((w_i + a / 2) ** 2 + (b / 2) ** 2)
    w_beta = np.sqrt((w_i - a / 2) ** 2 + (b / 2) ** 2)
    return w_alpha, w_beta, a


def eseem_kernel(bath: "NuclearBath", tau: ArrayLike) -> np.ndarray:
    """
    Two-pulse envelope modulation, the product over nuclei of
    1 - (k/4) [2 - 2cos(w_a tau) - 2cos(w_b tau) + cos((w_a - w_b) tau) + cos((w_a + w_b) tau)]
    with k = (b w_I / (w_a w_b))^2 and the branch frequencies
    w_a,b = sqrt((w_I +- a/2)^2 + (b/2)^2), which reduce to |w_I +- a/2| when b = 0.

    Nuclei with w_a or w_b = 0 are skipped with a warning.
    """
    tau = np.asarray(tau, dtype=float)
    v = np.ones_like(tau)
    if len(bath) == 0:
        return v
    w_a, w_b, _ = _mims_factors(bath)
    ok = (w_a > 0) & (w_b > 0)
    if not np.all(ok):
        logger.warning("%d nucleus/nuclei with a zero branch frequency skipped", int((~ok).sum()))
    w_a, w_b = w_a[ok], w_b[ok]
    b = bath.b_pseudosecular[ok]
    k = (b * bath.omega_I / (w_a * w_b)) ** 2
    for kj, wa, wb in zip(k, w_a, w_b):
        v = v * (
            1
            - kj
            / 4
            * (
                2
                - 2 * np.cos(wa * tau)
                - 2 * np.cos(wb * tau)
                + np.cos((wa - wb) * tau)
                + np.cos((wa + wb) * tau)
            )
        )
    return v


def echo_decay(
    taus: ArrayLike,
    T2: float,
    bath: Optional["NuclearBath"] = None,
    amplitude: float = 1.0,
) -> np.ndarray:
    """Two-pulse echo amplitude versus tau: amplitude e^{-2 tau / T2} times the ESEEM kernel."""
    if T2 <= 0:
        raise ValidationError(f"T2 must be > 0, got {T2}")
    taus = np.asarray(taus, dtype=float)
    envelope = amplitude * np.exp(-2 * taus / T2)
    if bath is None:
        return envelope
    return envelope * eseem_kernel(bath, taus)


class DecayFit(NamedTuple):
    amplitude: float
    time_constant: float
    stderr: float


def fit_echo_decay(two_tau: ArrayLike, amplitude: ArrayLike) -> DecayFit:
    """Exponential fit A exp(-2 tau / T2) of echo amplitude versus 2 tau; returns T2."""
    x = np.asarray(two_tau, dtype=float)
    y = np.asarray(amplitude, dtype=float)
    model = lmfit.models.ExponentialModel()
    params = model.guess(y, x=x)
    result = model.fit(y, params, x=x)
    if not result.success:
        raise NumericalError(
            "echo decay fit did not converge", last_iterate=result.params.valuesdict()
        )
    best = result.params
    return DecayFit(best["amplitude"].value, best["decay"].value, best["decay"].stderr or math.nan)


def _recovery(t: np.ndarray, a_inf: float, t1: float) -> np.ndarray:
    return a_inf * (1.0 - np.exp(-t / t1))


def fit_recovery(delays: ArrayLike, amplitudes: ArrayLike) -> DecayFit:
    """Saturation recovery A(T) = A_inf (1 - e^{-T/T1}); returns (A_inf, T1, stderr of T1)."""
    x = np.asarray(delays, dtype=float)
    y = np.asarray(amplitudes, dtype=float)
    if x.size < 3:
        raise ValidationError("a recovery fit needs at least 3 delays")
    model = lmfit.Model(_recovery)
    t1_guess = float(np.interp(0.63 * y.max(), np.sort(y), x[np.argsort(y)])) or float(x.mean())
    params = model.make_params(a_inf=float(y.max()), t1=max(t1_guess, 1e-12))
    params["t1"].set(min=0.0)
    result = model.fit(y, params, t=x)
    if not result.success:
        raise NumericalError(
            "recovery fit did not converge", last_iterate=result.params.valuesdict()
        )
    best = result.params
    return DecayFit(best["a_inf"].value, best["t1"].value, best["t1"].stderr or math.nan)


class PowerLawFit(NamedTuple):
    prefactor: float
    exponent: float
    exponent_stderr: float


def fit_power_law(x: ArrayLike, y: ArrayLike) -> PowerLawFit:
    """y = c x^p fitted in log space with lmfit."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValidationError("power-law fit needs positive data")
    model = lmfit.models.LinearModel()
    lx, ly = np.log(x), np.log(y)
    result = model.fit(ly, model.guess(ly, x=lx), x=lx)
    best = result.params
    return PowerLawFit(
        math.exp(best["intercept"].value), best["slope"].value, best["slope"].stderr or math.nan
    )


EnsembleBuilder = Callable[[float], "SpinEnsemble"]
EchoExtractor = Callable[[TraceRecord], float]


def cycled_trace(
    sequence: PulseSequence,
    ensemble: "SpinEnsemble",
    resonator_model: ResonatorModel,
    options: Optional[SimulationOptions] = None,
) -> TraceRecord:
    """Phase-cycled difference of the sequence variants (the plain trace if it has none)."""
    runs = simulate_cycled(sequence, ensemble, resonator_model, options)
    if len(runs) == 1:
        return runs[0][1]
    return phase_cycle(runs[0][1], runs[1][1])


def _first_window_extractor(
    sequence: PulseSequence, extractor: Optional[EchoExtractor]
) -> EchoExtractor:
    if extractor is not None:
        return extractor
    windows = sequence.acquire_windows()
    if not windows:
        raise ValidationError("sequence has no acquire window to integrate")
    return lambda trace: echo_integral(trace, windows[0]).integral_Ae


def field_sweep(
    fields: Sequence[float],
    sequence: PulseSequence,
    ensemble_builder: EnsembleBuilder,
    resonator_model: ResonatorModel,
    options: Optional[SimulationOptions] = None,
    extractor: Optional[EchoExtractor] = None,
    map_fn: Callable = map,
) -> pd.DataFrame:
    """
    Echo integral versus B0: rebuild the ensemble at each field, simulate the phase-cycled
    sequence and integrate the first echo window.

    Args:
        fields (Sequence[float]): B0 values, T.
        sequence (PulseSequence): detection sequence.
        ensemble_builder (Callable): B0 -> SpinEnsemble.
        resonator_model (ResonatorModel): cavity.
        options (SimulationOptions, optional): integrator settings.
        extractor (Callable, optional): trace -> Ae; boxcar over the first acquire window
            by default.
        map_fn (Callable): map-like used to spread the field points over workers; results
            come back in input order.

    Returns:
        pd.DataFrame: columns B0_T, Ae, n_packets.
    """
    extract = _first_window_extractor(sequence, extractor)

    def one(b0: float) -> Tuple[float, float, int]:
        ensemble = ensemble_builder(b0)
        trace = cycled_trace(sequence, ensemble, resonator_model, options)
        return float(b0), extract(trace), len(ensemble)

    rows = list(map_fn(one, list(fields)))
    return pd.DataFrame(rows, columns=["B0_T", "Ae", "n_packets"])


def t1_sweep(
    delays: Sequence[float],
    detection: PulseSequence,
    ensemble: "SpinEnsemble",
    resonator_model: ResonatorModel,
    options: Optional[SimulationOptions] = None,
    saturation_duration: Optional[float] = None,
    saturation_beta: Optional[float] = None,
    extractor: Optional[EchoExtractor] = None,
    map_fn: Callable = map,
) -> pd.DataFrame:
    """
    Saturation-recovery curve: echo integral after saturating the spins and waiting T.

    Returns:
        pd.DataFrame: columns T_delay_s, Ae.
    """
    extra = {} if saturation_duration is None else {"saturation_duration": saturation_duration}

    def one(delay: float) -> Tuple[float, float]:
        seq = build_saturation_recovery(
            float(delay), detection, saturation_beta=saturation_beta, **extra
        )
        extract = _first_window_extractor(seq, extractor)
        return float(delay), extract(cycled_trace(seq, ensemble, resonator_model, options))

    rows = list(map_fn(one, list(delays)))
    return pd.DataFrame(rows, columns=["T_delay_s", "Ae"])


def free_decay(
    t: ArrayLike, gamma1: float, s_start: float = 0.5, s_eq: float = S_EQ
) -> np.ndarray:
    """s_z(t) relaxing from s_start to s_eq at rate gamma1."""
    t = np.asarray(t, dtype=float)
    return s_eq + (s_start - s_eq) * np.exp(-gamma1 * t)


def rotation_from_spin_z(s_z: Union[float, np.ndarray]) -> np.ndarray:
    """Rotation angle that takes s_z = -1/2 to the given s_z."""
    return np.arccos(np.clip(-2.0 * np.asarray(s_z, dtype=float), -1.0, 1.0))
