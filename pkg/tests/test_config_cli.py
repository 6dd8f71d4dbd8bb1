from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from esrtwin.cli import EXIT_DRIFT, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_SCHEMA, main
from esrtwin.config import (
    EXPERIMENT_KINDS,
    bundled_configs,
    config_from_dict,
    load_config,
)
from esrtwin.errors import ConfigError, ManifestError
from esrtwin.io import experiments
from esrtwin.io.experiments import MANIFEST, load_manifest, replay, run_experiment


def minimal(**sections: dict) -> dict:
    data = {"experiment": {"kind": "strain_map"}, "resonator": {"preset": "S1"}}
    data.update(sections)
    return data


@pytest.mark.parametrize("name", bundled_configs())
def test_bundled_configs_load(name: str) -> None:
    config = load_config(name)
    assert config.experiment.kind in EXPERIMENT_KINDS
    assert config.experiment.name == name
    assert len(config.hash) == 64


def test_every_kind_has_a_bundled_config() -> None:
    kinds = {load_config(name).experiment.kind for name in bundled_configs()}
    assert kinds == set(EXPERIMENT_KINDS)


@pytest.mark.parametrize(
    "data, path",
    [
        (minimal(experiment={"kind": "strain_map", "bogus": 1}), "experiment.bogus"),
        ({"experiment": {"kind": "strain_map"}}, "resonator"),
        (minimal(experiment={"kind": "nmr"}), "experiment.kind"),
        (minimal(resonator={"preset": "S7"}), "resonator.preset"),
        (minimal(sample={"n_packets": "many"}), "sample.n_packets"),
        (minimal(seeds={"noise": -1}), "seeds.noise"),
        (minimal(extras={}), "extras"),
    ],
)
def test_config_errors_carry_path(data: dict, path: str) -> None:
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.path == path


def test_exponent_without_dot_is_a_number() -> None:
    config = config_from_dict(yaml.safe_load("experiment: {kind: t1, b0_mt: 1e0}\nresonator: {}"))
    assert config.experiment.b0 == 1e-3


def test_hash_ignores_noise_seed_and_output() -> None:
    config = load_config("s11_fit")
    assert config.with_seed(12345).hash == config.hash
    assert config.with_output("elsewhere").hash == config.hash
    seeds = {"ensemble": 1, "noise": 72, "bath": 73}
    changed = config_from_dict({**config.to_dict(), "seeds": seeds})
    assert changed.hash != config.hash


def test_kind_mismatch(tmp_path: Path) -> None:
    with pytest.raises(ConfigError) as info:
        run_experiment(load_config("strain_map"), tmp_path, kind="t1")
    assert info.value.path == "experiment.kind"


def test_cli_schema_error(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(minimal(experiment={"kind": "strain_map", "typo": 1})))
    code = main(["run", "strain_map", "--config", str(bad), "--out", str(tmp_path / "out")])
    assert code == EXIT_SCHEMA
    err = capsys.readouterr().err
    assert "code=2" in err and "path=experiment.typo" in err


def test_cli_missing_manifest(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert main(["replay", str(tmp_path)]) == EXIT_IO
    assert "code=4" in capsys.readouterr().err
    with pytest.raises(ManifestError):
        load_manifest(tmp_path)


@pytest.mark.parametrize(
    "error", [RuntimeError("linalg failed to converge"), FloatingPointError("overflow")]
)
def test_cli_numeric_failure(
    error: Exception,
    tmp_path: Path,
    monkeypatch: pytest.MonkeyPatch,
    capsys: pytest.CaptureFixture,
) -> None:
    def failing(*args: object, **kwargs: object) -> Path:
        raise error

    monkeypatch.setattr(experiments, "run_experiment", failing)
    code = main(["run", "strain_map", "--config", "strain_map", "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC
    assert "code=3" in capsys.readouterr().err


def test_run_and_replay(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    out = tmp_path / "strain"
    code = main(["run", "strain_map", "--config", "strain_map", "--out", str(out)])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == str(out)
    manifest = load_manifest(out)
    assert {"strain_map.csv", "strain_map.json", "config.yaml"} <= set(manifest["files"])
    assert (out / MANIFEST).is_file()

    assert main(["replay", str(out)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["all_match"]


def test_replay_locates_edited_cell(tmp_path: Path) -> None:
    out = tmp_path / "strain"
    run_experiment(load_config("strain_map"), out)
    csv = out / "strain_map.csv"
    lines = csv.read_text().splitlines(keepends=True)
    n_comments = sum(1 for line in lines if line.startswith("#"))
    target = n_comments + 1 + 3
    cells = lines[target].rstrip("\n").split(",")
    cells[-1] = "0.5"
    lines[target] = ",".join(cells) + "\n"
    csv.write_text("".join(lines))

    report = replay(out)
    assert not report.all_match
    assert report.mismatched == ["strain_map.csv"]
    (check,) = [f for f in report.files if f.name == "strain_map.csv"]
    assert check.edited and not check.stochastic
    assert check.line == target + 1
    assert check.row == 3


def test_seed_override_only_moves_stochastic_files(tmp_path: Path) -> None:
    out = tmp_path / "strain"
    run_experiment(load_config("strain_map"), out)
    report = replay(out, seed_override=999)
    assert report.mismatched == ["config.yaml"]
    assert all(f.stochastic for f in report.files if not f.match)
    assert main(["replay", str(out), "--seed-override", "999"]) == EXIT_DRIFT


@pytest.mark.slow
def test_noisy_s11_fit_replays(tmp_path: Path) -> None:
    out = tmp_path / "s11"
    run_experiment(load_config("s11_fit"), out)
    fit = json.loads((out / "s11_fit.json").read_text())
    assert fit["seeds"]["noise"] == 72
    assert fit["relative_error"]["f0"] < 1e-5
    assert replay(out).all_match
    moved = replay(out, seed_override=5)
    assert moved.mismatched
    assert all(f.stochastic for f in moved.files if not f.match)
