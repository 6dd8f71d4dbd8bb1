from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

from esrtwin.config import ExperimentConfig, load_config
from esrtwin.core.hamiltonian import default_table_builder, transition_fields
from esrtwin.core.resonator import ResonatorModel
from esrtwin.errors import NotFoundError
from esrtwin.io.experiments import run_experiment
from esrtwin.io.records import read_csv


def with_changes(config: ExperimentConfig, **sections: dict) -> ExperimentConfig:
    """Copy of `config` with fields of the named sections replaced."""
    replaced = {
        name: dataclasses.replace(getattr(config, name), **changes)
        for name, changes in sections.items()
    }
    return dataclasses.replace(config, **replaced)


def report(out: Path, name: str) -> dict:
    return json.loads((out / name).read_text())


def values(points: list) -> dict:
    """Sweep section changes for an explicit axis."""
    return {"values": points, "start": None, "stop": None, "num": None}


def test_eseem_modulation_on_echo_decay(tmp_path: Path) -> None:
    config = load_config("echo_decay")
    out = tmp_path / "bath"
    run_experiment(config, out)
    assert report(out, "echo_decay.json")["modulation_depth"] > 0.02

    clean = tmp_path / "clean"
    run_experiment(with_changes(config, sample={"bath_concentration": 0.0}), clean)
    result = report(clean, "echo_decay.json")
    assert result["modulation_depth"] < 0.02
    assert math.isclose(result["T2_fit_s"], 0.85e-3, rel_tol=1e-3)
    frame, _ = read_csv(clean / "echo_decay.csv")
    expected = np.exp(-frame["two_tau_s"] / 0.85e-3)
    assert np.allclose(frame["envelope"], expected, rtol=1e-12, atol=0.0)


def test_slow_fluctuations_break_averaging(tmp_path: Path) -> None:
    out = tmp_path / "stats"
    run_experiment(load_config("averaging_stats"), out)
    curves = report(out, "stats.json")["curves"]
    departure = curves["echo /1"]["departure_n"]
    assert departure is not None and 100 <= departure <= 1000
    frame, _ = read_csv(out / "sigma_scaling.csv")
    # white noise, and the series decimated past the correlation time, stay in the 3-sigma band
    for source, decimation in (("control", 1), ("echo", 100)):
        rows = frame[(frame["source"] == source) & (frame["decimation"] == decimation)]
        assert len(rows) > 5
        assert np.all(rows["sigma"] >= rows["lower_3sigma"])
        assert np.all(rows["sigma"] <= rows["upper_3sigma"])


@pytest.mark.slow
def test_cpmg_train_decays_after_first_echo(tmp_path: Path) -> None:
    out = tmp_path / "cpmg"
    run_experiment(load_config("cpmg_train"), out)
    result = report(out, "cpmg.json")
    assert result["n_echoes"] == 20
    assert result["decays_after_first"] is True
    assert 1.5 <= result["max_improvement"] <= 2.5
    frame, _ = read_csv(out / "cpmg_echoes.csv")
    assert np.all(np.diff(np.abs(frame["Ae"].to_numpy())[1:]) <= 0)


@pytest.mark.slow
def test_unstrained_spectrum_peaks_at_line_fields(tmp_path: Path) -> None:
    config = load_config("field_spectrum")
    omega0 = ResonatorModel.preset("S1").omega0
    builder = default_table_builder(config.spin_system.build(), config.spin_system.threshold)
    peaks = []
    for line in builder(1e-5):
        try:
            peaks += transition_fields(builder, line.label, omega0, b_max=10e-3, b_min=1e-5)
        except NotFoundError:
            continue
    assert peaks
    fields_mt = sorted(set(np.linspace(0.0, 10.0, 41).tolist() + [1e3 * b for b in peaks]))
    out = tmp_path / "spectrum"
    run_experiment(
        with_changes(
            config,
            sample={"strain": "zero"},
            sequence={"betas": [1.5e5]},
            sweep=values(fields_mt),
        ),
        out,
    )
    frame, _ = read_csv(out / "spectrum.csv")
    b0 = frame["B0_T"].to_numpy()
    on_line = np.isclose(b0[:, None], np.array(peaks)[None, :], rtol=1e-9, atol=0.0).any(axis=1)
    assert on_line.any()
    empty = frame["n_packets"] == 0
    assert empty.any()
    off = float(np.max(np.abs(frame.loc[empty, "Ae"])))
    assert np.all(frame.loc[on_line, "n_packets"] > 0)
    assert np.all(np.abs(frame.loc[on_line, "Ae"]) > 100 * off)


@pytest.mark.slow
def test_strained_spectrum_is_flat(tmp_path: Path) -> None:
    config = load_config("field_spectrum")
    out = tmp_path / "spectrum"
    run_experiment(
        with_changes(
            config,
            sample={"n_packets": 20_000},
            sequence={"betas": [6e4]},
            sweep=values([0.0, 2.0, 4.0, 6.0, 8.0, 10.0]),
        ),
        out,
    )
    frame, _ = read_csv(out / "spectrum.csv")
    ae = np.abs(frame["Ae"].to_numpy())
    assert np.all(np.abs(ae / ae.mean() - 1) <= 0.3)
