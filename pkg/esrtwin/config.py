from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union, get_type_hints

import numpy as np
import yaml

from esrtwin.constants import TWO_PI
from esrtwin.core.detection import FluctuationModel, NoiseModel
from esrtwin.core.hamiltonian import SpinSystem
from esrtwin.core.resonator import ResonatorModel
from esrtwin.core.sample import (
    ImplantProfile,
    StrainMap,
    implant_profile,
    read_implant_csv,
    strain_analytic,
    strain_import,
)
from esrtwin.core.sequences import PulseSequence, build_sequence
from esrtwin.errors import ConfigError, EsrTwinError
from esrtwin.io.records import canonical_json, sha256_text

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"
EXPERIMENT_KINDS = (
    "spectrum",
    "echo_decay",
    "t1",
    "rabi",
    "cpmg",
    "stats",
    "s11_fit",
    "coupling_map",
    "strain_map",
    "sensitivity",
)
REQUIRED_SECTIONS = ("experiment", "resonator")


@dataclass(frozen=True)
class ExperimentSection:
    kind: str
    name: str = ""
    description: str = ""
    b0_mt: float = 1.0
    input: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"unknown experiment kind '{self.kind}', expected one of {list(EXPERIMENT_KINDS)}",
                path="experiment.kind",
            )

    @property
    def b0(self) -> float:
        return self.b0_mt * 1e-3


@dataclass(frozen=True)
class SpinSystemSection:
    hyperfine_a_hz: Optional[float] = None
    include_nuclear_zeeman: bool = False
    threshold: float = 0.05

    def build(self) -> SpinSystem:
        if self.hyperfine_a_hz is None:
            return SpinSystem(include_nuclear_zeeman=self.include_nuclear_zeeman)
        return SpinSystem(
            hyperfine_A=TWO_PI * self.hyperfine_a_hz,
            include_nuclear_zeeman=self.include_nuclear_zeeman,
        )


@dataclass(frozen=True)
class ResonatorSection:
    preset: str = "S1"
    f0_ghz: Optional[float] = None
    q_ext: Optional[float] = None
    q_int: Optional[float] = None
    impedance_ohm: Optional[float] = None
    wire_width_m: Optional[float] = None
    wire_thickness_m: Optional[float] = None
    wire_length_m: Optional[float] = None
    kerr_rad_s: Optional[float] = None

    def __post_init__(self) -> None:
        if self.preset not in ("S1", "S2"):
            raise ConfigError(f"unknown preset '{self.preset}'", path="resonator.preset")

    def build(self) -> ResonatorModel:
        base = ResonatorModel.preset(self.preset)
        overrides = {
            "omega0": None if self.f0_ghz is None else TWO_PI * self.f0_ghz * 1e9,
            "q_ext": self.q_ext,
            "q_int": self.q_int,
            "impedance_Zc": self.impedance_ohm,
            "wire_width": self.wire_width_m,
            "wire_thickness": self.wire_thickness_m,
            "wire_length": self.wire_length_m,
            "kerr_K": self.kerr_rad_s,
        }
        return dataclasses.replace(base, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(frozen=True)
class SampleSection:
    peak_density_m3: Optional[float] = None
    depth_min_m: Optional[float] = None
    depth_max_m: Optional[float] = None
    straggle_m: Optional[float] = None
    implant_csv: Optional[str] = None
    strain: str = "analytic"
    strain_csv: Optional[str] = None
    film_stress_pa: Optional[float] = None
    strain_scale: float = 1.0
    n_packets: int = 2000
    x_half_width_m: float = 1e-6
    t2_s: float = 0.85e-3
    detuning_window_hz: Optional[float] = None
    spin_scale: float = 1.0
    bath_concentration: float = 0.0
    bath_r_max_m: float = 3e-9
    bath_realizations: int = 1

    def __post_init__(self) -> None:
        if self.strain not in ("analytic", "zero", "file"):
            raise ConfigError(f"unknown strain source '{self.strain}'", path="sample.strain")
        if self.strain == "file" and not self.strain_csv:
            raise ConfigError("strain 'file' needs strain_csv", path="sample.strain_csv")
        if self.spin_scale <= 0:
            raise ConfigError("spin_scale must be > 0", path="sample.spin_scale")

    def profile(self) -> ImplantProfile:
        if self.implant_csv:
            return read_implant_csv(self.implant_csv)
        depth_range = None
        if self.depth_min_m is not None or self.depth_max_m is not None:
            if self.depth_min_m is None or self.depth_max_m is None:
                raise ConfigError("give both depth_min_m and depth_max_m", path="sample")
            depth_range = (self.depth_min_m, self.depth_max_m)
        return implant_profile(self.peak_density_m3, depth_range, self.straggle_m)

    def strain_map(self, model: ResonatorModel) -> StrainMap:
        if self.strain == "zero":
            return StrainMap.zero()
        if self.strain == "file":
            strain = strain_import(str(self.strain_csv))
        else:
            strain = strain_analytic(model, film_stress=self.film_stress_pa)
        return strain if self.strain_scale == 1.0 else strain.scaled(self.strain_scale)

    @property
    def detuning_window(self) -> Optional[float]:
        return None if self.detuning_window_hz is None else TWO_PI * self.detuning_window_hz


def _maybe_number(value: Any) -> Any:
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


@dataclass(frozen=True)
class SequenceSection:
    """Detection block by builder name plus the experiment-level pulse settings."""

    name: str = "hahn"
    params: Dict[str, Any] = field(default_factory=dict)
    betas: Optional[List[float]] = None
    dt_inv: float = 1e-6
    wait: float = 100e-6
    saturation_duration: float = 10e-3
    saturation_beta: Optional[float] = None

    def build(self, **overrides: Any) -> PulseSequence:
        params = {k: _maybe_number(v) for k, v in self.params.items()}
        try:
            return build_sequence(self.name, **{**params, **overrides})
        except TypeError as err:
            raise ConfigError(str(err), path="sequence.params")


@dataclass(frozen=True)
class DetectionSection:
    n_tilde: float = 0.5
    gain: float = 1.0
    mode: str = "degenerate"
    phase: float = 0.0
    integration: str = "matched"
    sample_rate_hz: float = 10e6
    repetitions: int = 0
    snr_db: Optional[float] = None
    relative_sigma: float = 0.0
    correlation_time_s: float = 3.0
    decimation: List[int] = field(default_factory=lambda: [1])
    mean_echo: float = 0.33
    white_sigma: float = 1.0
    n_series: int = 100_000
    rep_rate_hz: float = 100.0
    n_spin: float = 36.0
    polarization: float = 1.0
    g0_hz: Optional[float] = None
    measured_ratio: Optional[float] = None
    ratio_sigma: Optional[float] = None
    cpmg_improvement: Optional[float] = None

    def __post_init__(self) -> None:
        if self.integration not in ("boxcar", "matched"):
            raise ConfigError(
                f"unknown integration '{self.integration}'", path="detection.integration"
            )
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be > 0", path="detection.sample_rate_hz")

    def noise_model(self) -> NoiseModel:
        try:
            return NoiseModel(self.n_tilde, self.gain, self.mode, self.phase)
        except EsrTwinError as err:
            raise ConfigError(str(err), path="detection")

    def fluctuation(self) -> FluctuationModel:
        return FluctuationModel(self.relative_sigma, self.correlation_time_s)


@dataclass(frozen=True)
class SweepSection:
    """Experiment axis: explicit `values`, or `num` points from `start` to `stop`."""

    values: Optional[List[float]] = None
    start: Optional[float] = None
    stop: Optional[float] = None
    num: Optional[int] = None
    log: bool = False

    def __post_init__(self) -> None:
        ranged = (self.start, self.stop, self.num)
        if self.values is not None and any(v is not None for v in ranged):
            raise ConfigError("give either values or start/stop/num", path="sweep")
        if self.values is None and any(v is not None for v in ranged):
            if any(v is None for v in ranged):
                raise ConfigError("start, stop and num go together", path="sweep")
            if int(self.num) < 1 or (self.log and min(self.start, self.stop) <= 0):
                raise ConfigError("invalid sweep range", path="sweep")

    def points(self, default: Optional[List[float]] = None) -> np.ndarray:
        if self.values is not None:
            return np.asarray(self.values, dtype=float)
        if self.num is not None:
            if self.log:
                return np.geomspace(self.start, self.stop, int(self.num))
            return np.linspace(self.start, self.stop, int(self.num))
        if default is None:
            raise ConfigError("experiment needs a sweep axis", path="sweep")
        return np.asarray(default, dtype=float)


@dataclass(frozen=True)
class SeedsSection:
    ensemble: int = 0
    noise: int = 1
    bath: int = 2

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError("seeds must be >= 0", path=f"seeds.{f.name}")


@dataclass(frozen=True)
class OutputSection:
    directory: str = "results"
    plots: bool = True


SECTIONS = {
    "experiment": ExperimentSection,
    "spin_system": SpinSystemSection,
    "resonator": ResonatorSection,
    "sample": SampleSection,
    "sequence": SequenceSection,
    "detection": DetectionSection,
    "sweep": SweepSection,
    "seeds": SeedsSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: every section resolved to its dataclass, hashable through `hash`."""

    experiment: ExperimentSection
    resonator: ResonatorSection
    spin_system: SpinSystemSection = field(default_factory=SpinSystemSection)
    sample: SampleSection = field(default_factory=SampleSection)
    sequence: SequenceSection = field(default_factory=SequenceSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def identity(self) -> Dict[str, Any]:
        """The config without the output directory: what a replay re-runs."""
        data = self.to_dict()
        del data["output"]["directory"]
        return data

    @property
    def hash(self) -> str:
        """
        SHA-256 of the canonical JSON identity with the noise seed left out.

        The noise seed is recorded next to the hash in stochastic outputs, so changing it
        leaves deterministic outputs byte-identical.
        """
        data = self.identity()
        del data["seeds"]["noise"]
        return sha256_text(canonical_json(data))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Replace the noise seed; fabrication seeds (ensemble, bath) stay."""
        return dataclasses.replace(self, seeds=dataclasses.replace(self.seeds, noise=seed))

    def with_output(self, directory: Union[str, Path]) -> "ExperimentConfig":
        return dataclasses.replace(
            self, output=dataclasses.replace(self.output, directory=str(directory))
        )


def _type_name(hint: Any) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = getattr(hint, "__origin__", None)
    args = getattr(hint, "__args__", ())
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path=path)
        return [_coerce(v, args[0], f"{path}[{k}]") for k, v in enumerate(value)]
    if origin in (dict, Dict):
        if not isinstance(value, Mapping):
            raise ConfigError(f"expected a mapping, got {type(value).__name__}", path=path)
        return dict(value)
    if hint is Any:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path=path)
        return value
    if hint is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"expected a number, got {value!r}", path=path)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path=path)
        if not math.isfinite(value):
            raise ConfigError(f"expected a finite number, got {value!r}", path=path)
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path=path)
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path=path)
        return value
    raise ConfigError(f"unsupported field type {_type_name(hint)}", path=path)


def _build_section(cls: Any, data: Any, path: str) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path=path)
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key '{key}'", path=f"{path}.{key}")
    kwargs = {key: _coerce(value, hints[key], f"{path}.{key}") for key, value in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(str(err), path=path)


def config_from_dict(data: Any) -> ExperimentConfig:
    """Validate a parsed document; unknown keys and missing required sections raise ConfigError."""
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping of sections", path="")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(f"unknown section '{key}'", path=str(key))
    for key in REQUIRED_SECTIONS:
        if key not in data:
            raise ConfigError("missing required section", path=key)
    sections = {key: _build_section(SECTIONS[key], value, key) for key, value in data.items()}
    return ExperimentConfig(**sections)


def resolve_config_path(name_or_path: Union[str, Path]) -> Path:
    """A file path, or the name of a bundled config (e.g. `t1_recovery`)."""
    path = Path(name_or_path)
    if path.is_file():
        return path
    bundled = CONFIG_DIR / f"{name_or_path}.yaml"
    if bundled.is_file():
        return bundled
    raise FileNotFoundError(f"no config file or bundled config named '{name_or_path}'")


def bundled_configs() -> List[str]:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.yaml"))


def load_config(name_or_path: Union[str, Path]) -> ExperimentConfig:
    path = resolve_config_path(name_or_path)
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}", path="")
    config = config_from_dict(data)
    logger.debug("loaded %s config from %s (hash %s)", config.experiment.kind, path, config.hash)
    return config
