from __future__ import annotations

import math
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import pytest

from esrtwin.constants import SI_LATTICE
from esrtwin.core.hamiltonian import SpinSystem
from esrtwin.core.resonator import ResonatorModel
from esrtwin.core.sample import (
    StrainMap,
    build_ensemble,
    coupling_histogram,
    diamond_sites,
    hyperfine_shift,
    implant_profile,
    nuclear_bath,
    read_implant_csv,
    strain_analytic,
    strain_export,
    strain_import,
    strain_statistics,
)
from conftest import packets
from esrtwin.errors import DataFormatError, ValidationError

TWO_PI = 2 * math.pi
B1 = Callable[[np.ndarray, np.ndarray], np.ndarray]


def test_default_implant_profile() -> None:
    profile = implant_profile()
    assert math.isclose(float(profile(75e-9)), 8e22)
    assert math.isclose(float(profile(50e-9)), 8e22)
    assert float(profile(200e-9)) == 0.0
    assert 0.0 < float(profile(40e-9)) < 8e22
    # plateau plus two raised-cosine ramps of equal area
    assert math.isclose(profile.areal_dose, 8e22 * 75e-9, rel_tol=1e-4)


@pytest.mark.parametrize(
    "kwargs",
    [{"peak_density": -1.0}, {"depth_range": (100e-9, 50e-9)}, {"straggle": -1e-9}],
)
def test_invalid_profile(kwargs: dict) -> None:
    with pytest.raises(ValidationError):
        implant_profile(**kwargs)


def test_read_implant_csv(tmp_path: Path) -> None:
    path = tmp_path / "implant.csv"
    pd.DataFrame({"depth_m": [2e-8, 0.0, 1e-8], "density_m3": [0.0, 1e22, 2e22]}).to_csv(
        path, index=False
    )
    profile = read_implant_csv(str(path))
    assert np.all(np.diff(profile.depth_grid) > 0)
    assert math.isclose(float(profile(1e-8)), 2e22)
    (tmp_path / "bad.csv").write_text("depth,n\n0,1\n")
    with pytest.raises(DataFormatError):
        read_implant_csv(str(tmp_path / "bad.csv"))


def test_zero_stress_gives_zero_strain(s1: ResonatorModel) -> None:
    strain = strain_analytic(s1, film_stress=0.0)
    assert np.all(strain.epsilon_h == 0.0)


def test_analytic_strain_is_symmetric(s1: ResonatorModel) -> None:
    strain = strain_analytic(s1, xs=np.linspace(-400e-9, 400e-9, 81))
    scale = np.max(np.abs(strain.epsilon_h))
    assert np.allclose(strain.epsilon_h, strain.epsilon_h[:, ::-1], rtol=1e-9, atol=1e-9 * scale)
    assert np.max(np.abs(strain.epsilon_h)) < 1e-2
    # the evaluator reproduces the nodes
    X, Y = np.meshgrid(strain.xs, strain.ys)
    assert np.allclose(strain(X, Y), strain.epsilon_h, rtol=1e-12, atol=0.0)


def test_strain_scaling(s1: ResonatorModel) -> None:
    strain = strain_analytic(s1)
    stretched = strain.scaled(1.5)
    assert np.allclose(stretched.epsilon_h, 1.5 * strain.epsilon_h)
    assert math.isclose(float(stretched(10e-9, -60e-9)), 1.5 * float(strain(10e-9, -60e-9)))


def test_strain_scaling_keeps_bound(s1: ResonatorModel) -> None:
    strain = strain_analytic(s1)
    # the default map peaks above 5e-3 next to the wire edges
    assert np.max(np.abs(strain.epsilon_h)) > 5e-3
    with pytest.raises(ValidationError):
        strain.scaled(2.0)


def test_strain_file_round_trip(tmp_path: Path, s1: ResonatorModel) -> None:
    xs, ys = np.linspace(-2e-7, 2e-7, 5), -np.linspace(2e-7, 1e-8, 4)
    strain = strain_analytic(s1, xs=xs, ys=ys)
    path = tmp_path / "strain.csv"
    strain_export(strain, str(path))
    loaded = strain_import(str(path))
    assert loaded.source == "imported"
    assert np.allclose(loaded.epsilon_h, strain.epsilon_h, rtol=1e-12, atol=0.0)
    # bilinear interpolation between nodes
    mid = 0.5 * (loaded.xs[1] + loaded.xs[2])
    expected = 0.5 * (loaded.epsilon_h[0, 1] + loaded.epsilon_h[0, 2])
    assert math.isclose(float(loaded(mid, loaded.ys[0])), expected, rel_tol=1e-9)


def test_strain_import_rejects_ragged_grid(tmp_path: Path) -> None:
    path = tmp_path / "ragged.csv"
    pd.DataFrame({"x_m": [0.0, 1.0, 0.0], "y_m": [0.0, 0.0, 1.0], "eps_h": [0.0, 0.0, 0.0]}).to_csv(
        path, index=False
    )
    with pytest.raises(DataFormatError):
        strain_import(str(path))


def test_hyperfine_shift_bound() -> None:
    assert math.isclose(float(hyperfine_shift(1e-4)), TWO_PI * 29e9 * 1e-4)
    with pytest.raises(ValidationError):
        hyperfine_shift(0.02)


def test_strain_statistics(s1: ResonatorModel) -> None:
    strain = strain_analytic(s1)
    stats = strain_statistics(strain, implant_profile())
    assert stats.std > 0
    assert math.isclose(stats.zero_field_spread_hz, 5 * 29e9 * stats.std, rel_tol=1e-9)
    flat = strain_statistics(strain_analytic(s1, film_stress=0.0), implant_profile())
    assert flat.mean == 0.0 and flat.std == 0.0
    # the zero map spans only the surface and 1 um, where no donors sit
    with pytest.raises(ValidationError):
        strain_statistics(StrainMap.zero(), implant_profile())


def test_ensemble_is_reproducible(
    s1: ResonatorModel, spin_system: SpinSystem, uniform_b1: B1
) -> None:
    args = (implant_profile(), StrainMap.zero(), s1, spin_system, 1e-3, 500)
    first = build_ensemble(*args, seed=3, b1_provider=uniform_b1)
    again = build_ensemble(*args, seed=3, b1_provider=uniform_b1)
    other = build_ensemble(*args, seed=4, b1_provider=uniform_b1)
    assert np.array_equal(first.y, again.y) and np.array_equal(first.weight, again.weight)
    assert not np.array_equal(first.y, other.y)


def test_ensemble_weights_and_summary(
    s1: ResonatorModel, spin_system: SpinSystem, uniform_b1: B1
) -> None:
    profile = implant_profile()
    ens = build_ensemble(
        profile, StrainMap.zero(), s1, spin_system, 1e-3, 800, seed=1, b1_provider=uniform_b1
    )
    summary = ens.summary
    assert summary is not None and summary.n_draws == 800
    expected_total = profile.areal_dose * 2e-6 * s1.wire_length
    assert math.isclose(summary.total_donors, expected_total, rel_tol=1e-12)
    # no window: every donor sits on all ten lines with an equal share
    assert math.isclose(ens.total_weight, expected_total, rel_tol=1e-9)
    assert len(summary.weight_per_transition) == 10
    # uniform B1: g0 is set by the matrix element alone
    assert np.all(ens.y < 0)
    assert math.isclose(summary.max_g0, float(ens.g0.max()), rel_tol=1e-12)


def test_ensemble_without_strain_has_line_detunings(
    s1: ResonatorModel, spin_system: SpinSystem, uniform_b1: B1
) -> None:
    ens = build_ensemble(
        implant_profile(), StrainMap.zero(), s1, spin_system, 1e-3, 200, 0, b1_provider=uniform_b1
    )
    for tid in np.unique(ens.transition_id):
        line = ens.detuning[ens.transition_id == tid]
        assert np.allclose(line, line[0], rtol=1e-12, atol=0.0)


def test_detuning_window_can_empty_ensemble(
    s1: ResonatorModel, spin_system: SpinSystem, uniform_b1: B1
) -> None:
    # at 1 mT every line is far from 7.25 GHz
    ens = build_ensemble(
        implant_profile(),
        StrainMap.zero(),
        s1,
        spin_system,
        1e-3,
        100,
        0,
        b1_provider=uniform_b1,
        detuning_window=TWO_PI * 1e3,
    )
    assert len(ens) == 0
    assert ens.summary is not None and ens.summary.n_packets == 0


def test_ensemble_scaling_and_selection(
    s1: ResonatorModel, spin_system: SpinSystem, uniform_b1: B1
) -> None:
    ens = build_ensemble(
        implant_profile(), StrainMap.zero(), s1, spin_system, 1e-3, 300, 2, b1_provider=uniform_b1
    )
    assert math.isclose(ens.scaled(2.5).total_weight, 2.5 * ens.total_weight)
    with pytest.raises(ValidationError):
        ens.scaled(0.0)
    line = ens.select(0)
    assert np.all(line.transition_id == 0)
    edges, counts = coupling_histogram(ens, bins=10, transition_id=0)
    assert len(edges) == 11
    assert math.isclose(counts.sum(), line.total_weight, rel_tol=1e-9)
    assert len(ens.to_frame()) == len(ens)


def test_ensemble_rejects_bad_packets() -> None:
    with pytest.raises(ValidationError):
        packets(np.array([1e3]), 0.0, weight=np.array([0.0]))


def test_diamond_nearest_neighbours() -> None:
    nn = SI_LATTICE * math.sqrt(3) / 4
    sites = diamond_sites(1.01 * nn)
    assert len(sites) == 4
    assert np.allclose(np.linalg.norm(sites, axis=1), nn)


def test_nuclear_bath() -> None:
    empty = nuclear_bath(0.0, 2e-9, 5e-4, seed=0)
    assert len(empty) == 0
    full = nuclear_bath(1.0, 1e-9, 5e-4, seed=0)
    assert len(full) == full.n_sites > 0
    assert math.isclose(full.expected_count, full.n_sites)
    assert np.all(np.isfinite(full.a_secular)) and np.all(np.isfinite(full.b_pseudosecular))
    with pytest.raises(ValidationError):
        nuclear_bath(1.5, 1e-9, 5e-4, seed=0)


def test_ensemble_with_wire_field(s1: ResonatorModel, spin_system: SpinSystem) -> None:
    # default provider: |B1| from the wire current, one magnitude per donor
    ens = build_ensemble(implant_profile(), StrainMap.zero(), s1, spin_system, 1e-4, 50_000, 0)
    summary = ens.summary
    assert summary is not None and summary.n_draws == 50_000
    assert np.all(np.isfinite(ens.g0)) and np.all(ens.g0 > 0)
    assert 3e3 <= summary.max_g0 / TWO_PI <= 5e3
    assert summary.max_g0_distance <= 40e-9
