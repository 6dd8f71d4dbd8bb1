from __future__ import annotations

import math
import random

import numpy as np
import pytest
import torch

from esrtwin.core.hamiltonian import (
    SpinSystem,
    breit_rabi,
    build_hamiltonian,
    default_table_builder,
    hamiltonian_levels,
    sx_sum_rule,
    transition_field,
    transition_fields,
    transitions,
)
from esrtwin.core.utils import counter_rng
from esrtwin.errors import NotFoundError, ValidationError
from esrtwin.modules.utils import is_hermitian

random.seed(0)
np.random.seed(0)
torch.manual_seed(0)

TWO_PI = 2 * math.pi


def test_hamiltonian_is_hermitian(spin_system: SpinSystem) -> None:
    H = build_hamiltonian(spin_system, 3e-3)
    assert H.shape == (20, 20)
    assert H.dtype == torch.cdouble
    assert is_hermitian(H)


@pytest.mark.parametrize("B0", np.random.uniform(0.0, 0.05, 25).tolist() + [0.0, 0.05])
def test_eigenvalues_match_breit_rabi(spin_system: SpinSystem, B0: float) -> None:
    levels = hamiltonian_levels(spin_system, B0)
    exact = breit_rabi(spin_system, B0)
    scale = float(torch.max(torch.abs(exact)))
    assert torch.allclose(levels.energies, exact, rtol=0.0, atol=1e-9 * scale)


def test_breit_rabi_over_random_fields(spin_system: SpinSystem) -> None:
    # 1000 fields in [0, 50 mT], drawn from a fixed counter stream
    fields = counter_rng(0).uniform(0.0, 0.05, 1000)
    for B0 in fields:
        levels = hamiltonian_levels(spin_system, float(B0))
        exact = breit_rabi(spin_system, float(B0))
        scale = float(torch.max(torch.abs(exact)))
        assert torch.allclose(levels.energies, exact, rtol=0.0, atol=1e-9 * scale), B0


def test_breit_rabi_with_nuclear_zeeman() -> None:
    sys = SpinSystem(include_nuclear_zeeman=True)
    levels = hamiltonian_levels(sys, 20e-3)
    exact = breit_rabi(sys, 20e-3)
    assert torch.allclose(levels.energies, exact, rtol=0.0, atol=1e-9 * float(exact.abs().max()))


def test_zero_field_splitting(spin_system: SpinSystem) -> None:
    e = hamiltonian_levels(spin_system, 0.0).energies
    gap = float(e[-1] - e[0])
    assert math.isclose(gap, 5 * spin_system.hyperfine_A, rel_tol=1e-12)
    assert math.isclose(gap / TWO_PI, 7.377e9, rel_tol=1e-4)


def test_levels_carry_f_labels(spin_system: SpinSystem) -> None:
    levels = hamiltonian_levels(spin_system, 1e-4)
    f = levels.f_label.tolist()
    assert f.count(4.0) == 9
    assert f.count(5.0) == 11


def test_sx_sum_rule(spin_system: SpinSystem) -> None:
    # tr(Sx^2) = 20 / 4
    levels = hamiltonian_levels(spin_system, 7e-3)
    assert math.isclose(sx_sum_rule(levels), 5.0, rel_tol=1e-10)


def test_ten_transitions_at_low_field(spin_system: SpinSystem) -> None:
    table = transitions(hamiltonian_levels(spin_system, 0.1e-3), threshold=0.05)
    assert len(table) == 10
    assert [t.transition_id for t in table] == list(range(10))
    freqs = [t.frequency for t in table]
    assert freqs == sorted(freqs)
    assert all(t.sx_matrix_element >= 0.05 for t in table)


def test_strongest_low_field_matrix_element(spin_system: SpinSystem) -> None:
    # |<F=5, -5| Sx |F=4, -4>| = (1/2) sqrt(9/10) at zero field
    table = transitions(hamiltonian_levels(spin_system, 0.1e-3), threshold=0.05)
    best = max(t.sx_matrix_element for t in table)
    assert math.isclose(best, 0.5 * math.sqrt(0.9), abs_tol=1e-3)


def test_transition_table_frame(spin_system: SpinSystem) -> None:
    frame = transitions(hamiltonian_levels(spin_system, 1e-3)).to_frame()
    assert len(frame) == 10
    assert {"freq_Hz", "sx_elem", "dfreq_dA"} <= set(frame.columns)


@pytest.mark.parametrize("threshold", [0.0, 0.5, -0.1])
def test_threshold_out_of_range(spin_system: SpinSystem, threshold: float) -> None:
    with pytest.raises(ValidationError):
        transitions(hamiltonian_levels(spin_system, 1e-3), threshold=threshold)


def test_non_half_integer_spin() -> None:
    with pytest.raises(ValidationError):
        SpinSystem(nuclear_spin=4.3)


def test_transition_fields_recover_field(spin_system: SpinSystem) -> None:
    builder = default_table_builder(spin_system)
    line = builder(5e-3)[0]
    roots = transition_fields(builder, line.label, line.frequency, b_max=0.02, b_min=1e-5)
    assert any(math.isclose(b, 5e-3, abs_tol=1e-9) for b in roots)
    for b in roots:
        assert abs(builder(b).frequency_of(line.label) - line.frequency) <= TWO_PI


def test_transition_field_not_reached(spin_system: SpinSystem) -> None:
    builder = default_table_builder(spin_system)
    with pytest.raises(NotFoundError):
        transition_field(builder, 0, TWO_PI * 100e9, b_max=0.01)


def test_strain_shifts_line(spin_system: SpinSystem) -> None:
    plain = transitions(hamiltonian_levels(spin_system, 1e-3))
    shifted = transitions(hamiltonian_levels(spin_system, 1e-3, delta_A=TWO_PI * 1e3))
    line = plain[0]
    moved = shifted.frequency_of(line.label) - line.frequency
    assert math.isclose(moved, line.dfreq_dA * TWO_PI * 1e3, rel_tol=1e-3)
