from __future__ import annotations

import logging
import math

import numpy as np
import pytest
import torch

from conftest import packets
from esrtwin.core.dynamics import (
    SimulationOptions,
    bloch_steady_cavity,
    cycled_trace,
    echo_decay,
    eseem_kernel,
    field_sweep,
    fit_echo_decay,
    fit_power_law,
    fit_recovery,
    free_decay,
    purcell_rate,
    rabi_angle,
    rotation_from_spin_z,
    selected_coupling,
    simulate,
    step_size,
    t1_sweep,
)
from esrtwin.core.resonator import ResonatorModel
from esrtwin.core.sample import NuclearBath, SpinEnsemble, nuclear_bath
from esrtwin.core.sequences import PulseSequence, Segment, build_hahn
from esrtwin.errors import NumericalError, ValidationError
from esrtwin.io.records import TraceRecord

TWO_PI = 2 * math.pi


def test_purcell_time(s1: ResonatorModel) -> None:
    rate = float(purcell_rate(TWO_PI * 2.7e3, s1.kappa))
    assert math.isclose(1 / rate, 1.81e-3, rel_tol=1e-2)
    detuned = float(purcell_rate(TWO_PI * 2.7e3, s1.kappa, detuning=s1.kappa / 2))
    assert math.isclose(detuned, rate / 2, rel_tol=1e-12)
    with pytest.raises(ValidationError):
        purcell_rate(1.0, 0.0)


def test_selected_coupling(s1: ResonatorModel) -> None:
    g0 = selected_coupling(6e4, 1e-6, s1.kappa)
    assert math.isclose(g0 / TWO_PI, 3.0e3, rel_tol=0.15)
    # the selected packets see a pi rotation when kappa_ext = kappa
    assert math.isclose(rabi_angle(6e4, 1e-6, g0, s1.kappa, s1.kappa), math.pi, rel_tol=1e-12)
    with pytest.raises(ValidationError):
        selected_coupling(0.0, 1e-6, s1.kappa)


def test_rotation_from_spin_z() -> None:
    assert math.isclose(float(rotation_from_spin_z(-0.5)), 0.0, abs_tol=1e-12)
    assert math.isclose(float(rotation_from_spin_z(0.0)), math.pi / 2)
    assert math.isclose(float(rotation_from_spin_z(0.5)), math.pi)


def test_step_size_divides_sample(s1: ResonatorModel) -> None:
    seq = build_hahn(6e4, 1e-6, 10e-6)
    h, m = step_size(s1.kappa, np.array([TWO_PI * 1e6]), seq, 1e-7)
    assert math.isclose(h * m, 1e-7, rel_tol=1e-12)
    assert h <= 1 / (20 * TWO_PI * 1e6)


def test_empty_ensemble_matches_closed_form(s1: ResonatorModel) -> None:
    seq = build_hahn(6e4, 1e-6, 10e-6, phase_cycle="none")
    trace = simulate(seq, SpinEnsemble.empty(), s1)
    ref = bloch_steady_cavity(seq, s1, trace.sample_rate)
    assert len(trace) == len(ref)
    assert np.allclose(trace.signal, ref, rtol=0.0, atol=1e-6 * 6e4)


def test_spins_stay_in_bloch_ball(s1: ResonatorModel) -> None:
    g0 = selected_coupling(6e4, 1e-6, s1.kappa) / TWO_PI
    ens = packets(np.full(5, g0), np.linspace(-2e5, 2e5, 5), weight=np.full(5, 1e3))
    trace = simulate(build_hahn(6e4, 1e-6, 10e-6, phase_cycle="none"), ens, s1)
    _, s_minus, s_z = torch.split(trace.final_state, [1, 5, 5])
    assert torch.all(torch.abs(s_minus) ** 2 + s_z.real**2 <= 0.25 + 1e-9)
    assert trace.spin_z is not None and len(trace.spin_z) == len(trace)


def test_purcell_free_decay(s1: ResonatorModel, purcell_packet: SpinEnsemble) -> None:
    T1 = float(purcell_packet.T1[0])
    seq = PulseSequence((Segment("delay", 5 * T1),), repetition_rate=10.0, name="decay")
    start = torch.tensor([0.0, 0.0, 0.5], dtype=torch.cdouble)
    trace = simulate(
        seq, purcell_packet, s1, SimulationOptions(sample_rate=1e6), initial_state=start
    )
    assert trace.spin_z is not None
    expected = free_decay(trace.times, 1 / T1)
    assert np.allclose(trace.spin_z, expected, rtol=0.0, atol=5e-3)
    assert math.isclose(trace.spin_z[-1], -0.5 + np.exp(-5), abs_tol=5e-3)


def test_ideal_echo_refocuses(s1: ResonatorModel) -> None:
    tau = 20e-6
    seq = PulseSequence(
        (
            Segment("instant", 0.0, angle=math.pi / 2),
            Segment("delay", tau),
            Segment("instant", 0.0, angle=math.pi),
            Segment("delay", tau),
        ),
        name="refocus",
    )
    ens = packets(np.zeros(7), np.linspace(-5e4, 5e4, 7))
    trace = simulate(seq, ens, s1, SimulationOptions(record_spins=False))
    s_minus = trace.final_state[1:8]
    expected = torch.full_like(s_minus, 0.5j)
    assert torch.allclose(s_minus, expected, rtol=0.0, atol=1e-6)
    assert trace.spin_z is None


def test_substep_limit(s1: ResonatorModel) -> None:
    seq = build_hahn(6e4, 1e-6, 10e-6, phase_cycle="none")
    with pytest.raises(NumericalError):
        simulate(seq, SpinEnsemble.empty(), s1, SimulationOptions(max_substeps=1))


def test_kerr_warning(s1: ResonatorModel, caplog: pytest.LogCaptureFixture) -> None:
    seq = PulseSequence((Segment("drive", 1e-6, beta=1e6),), name="strong")
    with caplog.at_level(logging.WARNING, logger="esrtwin.core.dynamics"):
        simulate(seq, SpinEnsemble.empty(), s1)
    assert any("bistability" in r.getMessage() for r in caplog.records)


def test_cycled_trace_without_cycle(s1: ResonatorModel) -> None:
    seq = build_hahn(6e4, 1e-6, 10e-6, phase_cycle="none")
    plain = cycled_trace(seq, SpinEnsemble.empty(), s1)
    assert np.array_equal(plain.signal, simulate(seq, SpinEnsemble.empty(), s1).signal)


def test_field_sweep_frame(s1: ResonatorModel) -> None:
    seq = build_hahn(6e4, 1e-6, 10e-6)
    frame = field_sweep([1e-3, 2e-3], seq, lambda b0: SpinEnsemble.empty(), s1)
    assert list(frame.columns) == ["B0_T", "Ae", "n_packets"]
    assert frame["B0_T"].tolist() == [1e-3, 2e-3]
    assert frame["n_packets"].tolist() == [0, 0]
    assert np.all(np.isfinite(frame["Ae"]))


def test_t1_sweep_frame(s1: ResonatorModel) -> None:
    detection = build_hahn(6e4, 1e-6, 10e-6)
    seen: list[float] = []

    def extractor(trace: TraceRecord) -> float:
        seen.append(trace.span[1])
        return float(len(seen))

    frame = t1_sweep(
        [0.0, 20e-6],
        detection,
        SpinEnsemble.empty(),
        s1,
        saturation_duration=10e-6,
        extractor=extractor,
    )
    assert list(frame.columns) == ["T_delay_s", "Ae"]
    assert frame["T_delay_s"].tolist() == [0.0, 20e-6]
    assert frame["Ae"].tolist() == [1.0, 2.0]
    # the longer wait pushes the record further out
    assert seen[1] > seen[0]


def test_eseem_kernel() -> None:
    tau = np.linspace(0, 20e-6, 200)
    assert np.array_equal(eseem_kernel(nuclear_bath(0.0, 2e-9, 5e-4, seed=0), tau), np.ones(200))
    bath = nuclear_bath(0.0467, 3e-9, 5e-4, seed=1)
    v = eseem_kernel(bath, tau)
    assert math.isclose(v[0], 1.0, abs_tol=1e-12)
    assert np.all(np.abs(v) <= 1.0 + 1e-12)


def test_eseem_single_nucleus_branches() -> None:
    # strong pseudosecular coupling: the branches differ from |w_I +- a/2|
    w_i, a, b = TWO_PI * 4.2e3, TWO_PI * 3e3, TWO_PI * 5e3
    bath = NuclearBath(np.zeros((1, 3)), w_i, np.array([a]), np.array([b]), 1, 1.0)
    sx = np.array([[0, 0.5], [0.5, 0]])
    sz = np.diag([0.5, -0.5])
    branches = []
    for m_s in (0.5, -0.5):
        levels = np.linalg.eigvalsh(w_i * sz + 2 * m_s * (a / 2 * sz + b / 2 * sx))
        branches.append(levels[1] - levels[0])
    w_a, w_b = branches
    k = (b * w_i / (w_a * w_b)) ** 2
    tau = np.linspace(0, 1e-3, 400)
    expected = 1 - k / 4 * (
        2
        - 2 * np.cos(w_a * tau)
        - 2 * np.cos(w_b * tau)
        + np.cos((w_a - w_b) * tau)
        + np.cos((w_a + w_b) * tau)
    )
    assert not math.isclose(w_a, w_i + a / 2, rel_tol=1e-3)
    assert np.allclose(eseem_kernel(bath, tau), expected, rtol=0.0, atol=1e-12)


def test_echo_decay_and_fit() -> None:
    taus = np.linspace(2e-6, 1.5e-3, 120)
    amp = echo_decay(taus, 0.85e-3, amplitude=2.0)
    assert math.isclose(amp[0], 2.0 * math.exp(-4e-6 / 0.85e-3))
    fit = fit_echo_decay(2 * taus, amp)
    assert math.isclose(fit.time_constant, 0.85e-3, rel_tol=1e-4)
    assert math.isclose(fit.amplitude, 2.0, rel_tol=1e-4)
    with pytest.raises(ValidationError):
        echo_decay(taus, 0.0)


def test_fit_recovery() -> None:
    delays = np.geomspace(0.1e-3, 10e-3, 8)
    amp = 3.0 * (1 - np.exp(-delays / 1.81e-3))
    fit = fit_recovery(delays, amp)
    assert math.isclose(fit.time_constant, 1.81e-3, rel_tol=1e-4)
    assert math.isclose(fit.amplitude, 3.0, rel_tol=1e-4)
    with pytest.raises(ValidationError):
        fit_recovery(delays[:2], amp[:2])


def test_fit_power_law() -> None:
    x = np.array([1e4, 3e4, 6e4, 1.5e5])
    fit = fit_power_law(x, 7.0 * x**-0.5)
    assert math.isclose(fit.exponent, -0.5, rel_tol=1e-9)
    assert math.isclose(fit.prefactor, 7.0, rel_tol=1e-9)
    with pytest.raises(ValidationError):
        fit_power_law([1.0, -1.0], [1.0, 1.0])


@pytest.mark.slow
def test_phase_cycled_echo_is_in_phase(s1: ResonatorModel) -> None:
    g0 = selected_coupling(6e4, 1e-6, s1.kappa) / TWO_PI
    n = 41
    ens = packets(np.full(n, g0), np.linspace(-1.5e5, 1.5e5, n), weight=np.full(n, 1e3))
    seq = build_hahn(6e4, 1e-6, 20e-6)
    trace = cycled_trace(seq, ens, s1)
    empty = cycled_trace(seq, SpinEnsemble.empty(), s1)
    window = trace.window_slice(seq.acquire_windows()[0])
    echo = trace.signal[window] - empty.signal[window]
    assert np.max(np.abs(echo)) > 0
    # the refocused echo is carried by the I quadrature
    assert np.sum(np.abs(echo.real)) > np.sum(np.abs(echo.imag))


@pytest.mark.slow
def test_rabi_angle_matches_full_dynamics(s1: ResonatorModel) -> None:
    # a 20 us pulse is far longer than the cavity response 2/kappa
    g0, dt, target = TWO_PI * 3e3, 20e-6, 1.0
    beta = target / rabi_angle(1.0, dt, g0, s1.kappa, s1.kappa_ext)
    seq = PulseSequence(
        (Segment("drive", dt, beta=beta), Segment("delay", 10e-6)), repetition_rate=10.0
    )
    trace = simulate(seq, packets(np.array([3e3]), 0.0), s1)
    assert trace.spin_z is not None
    theta = float(rotation_from_spin_z(trace.spin_z[-1]))
    assert math.isclose(theta, rabi_angle(beta, dt, g0, s1.kappa, s1.kappa_ext), rel_tol=0.05)


@pytest.mark.slow
def test_selected_t1_scales_as_beta_squared(s1: ResonatorModel) -> None:
    dt = 1e-6
    betas = [3e4, 6e4, 1.2e5]
    t1s = []
    for beta in betas:
        g_sel = selected_coupling(beta, dt, s1.kappa)
        # log-uniform couplings, eight per octave, around the selected one
        g0 = g_sel * 2.0 ** (np.arange(-24, 17) / 8)
        ens = packets(g0 / TWO_PI, 0.0, T1=1.0 / purcell_rate(g0, s1.kappa), T2=2e-4)
        t1_sel = 1.0 / float(purcell_rate(g_sel, s1.kappa))
        delays = t1_sel * np.array([0.1, 0.3, 0.6, 1.0, 2.0, 4.0])
        detection = build_hahn(beta, dt, 50e-6, acquire_window=20e-6)
        curve = t1_sweep(delays, detection, ens, s1)
        t1s.append(fit_recovery(delays, curve["Ae"].abs()).time_constant)
    law = fit_power_law(betas, t1s)
    assert math.isclose(law.exponent, 2.0, abs_tol=0.1)
