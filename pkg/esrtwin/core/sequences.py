from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

from esrtwin.core.resonator import ResonatorModel
from esrtwin.errors import DataFormatError, ValidationError

logger = logging.getLogger(__name__)

SCHEMA = "esrtwin.sequence/1"
KINDS = ("drive", "delay", "acquire", "instant")
PHASE_CYCLES = ("none", "first_pulse")
ACQUIRE_TIME_CONSTANTS = 8
SATURATION_DURATION = 10e-3
NUTATION_WAIT = 100e-6
_EPS = 1e-15


@dataclass(frozen=True)
class Segment:
    """One piece of a pulse sequence.

    `drive` carries a rectangular pulse of amplitude `beta` (s^-1/2) and `phase`; `instant` is
    an ideal rotation by `angle` about the `phase` axis taking no time.
    """

    kind: str
    duration: float
    beta: float = 0.0
    phase: float = 0.0
    angle: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"unknown segment kind '{self.kind}'")
        for name in ("duration", "beta", "phase", "angle"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"segment {name} must be finite")
        if self.kind == "instant":
            if self.duration != 0:
                raise ValidationError("instant rotations take no time")
            return
        if self.duration <= 0:
            raise ValidationError(f"{self.kind} duration must be > 0, got {self.duration}")
        if self.kind == "drive" and self.beta < 0:
            raise ValidationError(f"drive amplitude must be >= 0, got {self.beta}")
        if self.kind != "drive" and (self.beta != 0 or self.phase != 0):
            raise ValidationError(f"{self.kind} segments carry no drive")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "duration": self.duration,
            "beta": self.beta,
            "phase": self.phase,
            "angle": self.angle,
        }


@dataclass(frozen=True)
class PulseSequence:
    """
    Validated, immutable pulse sequence; construction fails for any invalid combination.

    Attributes:
        segments: ordered segments, played back to back.
        repetition_rate: shots per second, Hz.
        phase_cycle: "none" or "first_pulse" (first drive phase alternated by pi).
        echo_times: nominal echo times from the sequence start, s.
        name: builder name.
        metadata: free-form builder parameters, JSON-serializable.
        cycled_segment: index of the phase-cycled pulse, the first pulse when None.
    """

    segments: Tuple[Segment, ...]
    repetition_rate: float = 100.0
    phase_cycle: str = "none"
    echo_times: Tuple[float, ...] = ()
    name: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)
    cycled_segment: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "echo_times", tuple(self.echo_times))
        if not self.segments:
            raise ValidationError("a sequence needs at least one segment")
        if not (self.repetition_rate > 0 and math.isfinite(self.repetition_rate)):
            raise ValidationError(f"repetition_rate must be > 0, got {self.repetition_rate}")
        if self.phase_cycle not in PHASE_CYCLES:
            raise ValidationError(f"unknown phase cycle '{self.phase_cycle}'")
        period = 1.0 / self.repetition_rate
        if self.duration > period * (1 + 1e-12):
            raise ValidationError(
                f"sequence lasts {self.duration:.6g} s, longer than the {period:.6g} s period"
            )
        k = self.cycled_index
        cyclable = k is not None and k < len(self.segments)
        if cyclable and self.segments[k].kind not in ("drive", "instant"):  # type: ignore[index]
            cyclable = False
        if self.phase_cycle == "first_pulse" and not cyclable:
            raise ValidationError("phase cycling needs a drive or instant segment to cycle")
        windows = self.acquire_windows()
        for t in self.echo_times:
            if not any(t0 - _EPS <= t <= t1 + _EPS for t0, t1 in windows):
                raise ValidationError(f"echo at {t:.6g} s lies outside every acquire window")

    @property
    def duration(self) -> float:
        return math.fsum(s.duration for s in self.segments)

    @property
    def first_pulse_index(self) -> Optional[int]:
        for k, s in enumerate(self.segments):
            if s.kind in ("drive", "instant"):
                return k
        return None

    @property
    def cycled_index(self) -> Optional[int]:
        return self.first_pulse_index if self.cycled_segment is None else self.cycled_segment

    def start_times(self) -> List[float]:
        out, t = [], 0.0
        for s in self.segments:
            out.append(t)
            t += s.duration
        return out

    def acquire_windows(self) -> List[Tuple[float, float]]:
        return [
            (t, t + s.duration)
            for t, s in zip(self.start_times(), self.segments)
            if s.kind == "acquire"
        ]

    def drive_windows(self) -> List[Tuple[float, float]]:
        return [
            (t, t + s.duration)
            for t, s in zip(self.start_times(), self.segments)
            if s.kind == "drive" and s.beta > 0
        ]

    def variants(self) -> Tuple[Tuple[int, "PulseSequence"], ...]:
        """(sign, sequence) pairs: one for "none", two first-pulse variants otherwise."""
        if self.phase_cycle == "none":
            return ((1, self),)
        k = self.cycled_index
        assert k is not None
        flipped = list(self.segments)
        flipped[k] = replace(flipped[k], phase=flipped[k].phase + math.pi)
        plain = replace(self, phase_cycle="none")
        return ((1, plain), (-1, replace(plain, segments=tuple(flipped))))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "repetition_rate": self.repetition_rate,
            "phase_cycle": self.phase_cycle,
            "echo_times": list(self.echo_times),
            "segments": [s.to_dict() for s in self.segments],
            "metadata": self.metadata,
            "cycled_segment": self.cycled_segment,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PulseSequence":
        if data.get("schema") != SCHEMA:
            raise DataFormatError(f"expected schema '{SCHEMA}', got {data.get('schema')!r}")
        try:
            segments = tuple(Segment(**s) for s in data["segments"])
            return cls(
                segments=segments,
                repetition_rate=float(data["repetition_rate"]),
                phase_cycle=data["phase_cycle"],
                echo_times=tuple(float(t) for t in data.get("echo_times", ())),
                name=data.get("name", ""),
                metadata=dict(data.get("metadata", {})),
                cycled_segment=data.get("cycled_segment"),
            )
        except (KeyError, TypeError) as err:
            raise DataFormatError(f"malformed sequence: {err}")

    @classmethod
    def from_json(cls, text: str) -> "PulseSequence":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise DataFormatError(f"sequence is not valid JSON: {err}")
        return cls.from_dict(data)


def default_acquire_window(kappa: Optional[float] = None) -> float:
    """8 cavity time constants, 8 * 2 / kappa; kappa defaults to the S1 device."""
    k = ResonatorModel.preset("S1").kappa if kappa is None else kappa
    if k <= 0:
        raise ValidationError(f"kappa must be > 0, got {k}")
    return ACQUIRE_TIME_CONSTANTS * 2.0 / k


def _assemble(
    events: List[Tuple[float, Segment]], name: str
) -> Tuple[Segment, ...]:
    """Place (start, segment) events on a timeline, filling gaps with delays."""
    out: List[Segment] = []
    t = 0.0
    for start, seg in sorted(events, key=lambda e: (e[0], e[1].kind != "acquire")):
        gap = start - t
        if gap < -1e-12 * max(1.0, abs(start)):
            raise ValidationError(
                f"{name}: {seg.kind} at {start:.6g} s overlaps the segment ending at {t:.6g} s"
            )
        if gap > 1e-12 * max(1.0, abs(start)):
            out.append(Segment("delay", gap))
        out.append(seg)
        t = max(t, start) + seg.duration
    return tuple(out)


def _pulse(center: float, dt: float, beta: float, phase: float) -> Tuple[float, Segment]:
    if dt == 0:
        raise ValidationError("pulse duration must be > 0")
    return center - dt / 2, Segment("drive", dt, beta=beta, phase=phase)


def _window(echo: float, width: float) -> Tuple[float, Segment]:
    return echo - width / 2, Segment("acquire", width)


def _check_positive(**values: float) -> None:
    for key, value in values.items():
        if not (math.isfinite(value) and value > 0):
            raise ValidationError(f"'{key}' must be > 0, got {value}")


def _echo_train(
    beta: float,
    dt: float,
    tau: float,
    n_refocus: int,
    first_phase: float,
    refocus_phase: float,
    window: float,
    t0: float = 0.0,
) -> Tuple[List[Tuple[float, Segment]], List[float]]:
    c1 = t0 + dt / 2
    c2 = c1 + dt + tau
    events = [_pulse(c1, dt, beta / 2, first_phase), _pulse(c2, dt, beta, refocus_phase)]
    echoes = [2 * c2 - c1]
    # later pulses sit one pulse gap after the previous echo: uniform Meiboom-Gill grid
    for _ in range(n_refocus - 1):
        c = echoes[-1] + (c2 - c1)
        events.append(_pulse(c, dt, beta, refocus_phase))
        echoes.append(2 * c - echoes[-1])
    events.extend(_window(e, window) for e in echoes)
    return events, echoes


def build_hahn(
    beta: float,
    dt: float,
    tau: float,
    acquire_window: Optional[float] = None,
    kappa: Optional[float] = None,
    repetition_rate: float = 100.0,
    phase_cycle: str = "first_pulse",
    first_phase: float = 0.0,
    refocus_phase: float = 0.0,
) -> PulseSequence:
    """
    Two-pulse echo: drive beta/2 for dt, wait tau, drive beta for dt, acquire around the echo.

    The echo sits at 2 c2 - c1 from the pulse centers c1, c2; the acquire window is centered
    on it and must not reach back into the refocusing pulse.

    Args:
        beta (float): refocusing amplitude, s^-1/2.
        dt (float): pulse duration, s.
        tau (float): free delay between the pulses, s.
        acquire_window (float, optional): window length. Defaults to 8 * 2 / kappa.
        kappa (float, optional): cavity linewidth used for the default window.
        repetition_rate (float): Hz.
        phase_cycle (str): "first_pulse" or "none".

    Returns:
        PulseSequence: validated sequence.
    """
    _check_positive(beta=beta, dt=dt, tau=tau)
    window = default_acquire_window(kappa) if acquire_window is None else acquire_window
    _check_positive(acquire_window=window)
    events, echoes = _echo_train(beta, dt, tau, 1, first_phase, refocus_phase, window)
    return PulseSequence(
        segments=_assemble(events, "hahn"),
        repetition_rate=repetition_rate,
        phase_cycle=phase_cycle,
        echo_times=tuple(echoes),
        name="hahn",
        metadata={"beta": beta, "dt": dt, "tau": tau, "acquire_window": window},
    )


def build_cpmg(
    beta: float,
    dt: float,
    tau: float,
    n_refocus: int,
    acquire_window: Optional[float] = None,
    kappa: Optional[float] = None,
    repetition_rate: float = 100.0,
    phase_cycle: str = "first_pulse",
) -> PulseSequence:
    """
    (pi/2)_x - tau - pi_y - tau - echo, then n-1 blocks of tau - pi_y - tau - echo.

    Pulses sit on a uniform grid: the refocusing pulses are 2 (tau + dt) apart and the first
    one follows the excitation after half that, with the pi_y axis along the excited spins.
    """
    _check_positive(beta=beta, dt=dt, tau=tau)
    if n_refocus < 1:
        raise ValidationError(f"n_refocus must be >= 1, got {n_refocus}")
    window = default_acquire_window(kappa) if acquire_window is None else acquire_window
    _check_positive(acquire_window=window)
    events, echoes = _echo_train(beta, dt, tau, n_refocus, 0.0, math.pi / 2, window)
    return PulseSequence(
        segments=_assemble(events, "cpmg"),
        repetition_rate=repetition_rate,
        phase_cycle=phase_cycle,
        echo_times=tuple(echoes),
        name="cpmg",
        metadata={
            "beta": beta,
            "dt": dt,
            "tau": tau,
            "n_refocus": n_refocus,
            "acquire_window": window,
        },
    )


def _prepend(
    block: List[Segment], detection: PulseSequence
) -> Tuple[Tuple[Segment, ...], Tuple[float, ...], Optional[int]]:
    offset = math.fsum(s.duration for s in block)
    segments = tuple(block) + detection.segments
    k = detection.cycled_index
    cycled = None if k is None else len(block) + k
    return segments, tuple(offset + t for t in detection.echo_times), cycled


def build_saturation_recovery(
    T_delay: float,
    detection: PulseSequence,
    saturation_duration: float = SATURATION_DURATION,
    saturation_beta: Optional[float] = None,
    repetition_rate: float = 10.0,
) -> PulseSequence:
    """Long saturation drive, wait T_delay (omitted when 0), then the Hahn detection block."""
    if not (math.isfinite(T_delay) and T_delay >= 0):
        raise ValidationError(f"T_delay must be >= 0, got {T_delay}")
    beta = detection.metadata.get("beta") if saturation_beta is None else saturation_beta
    if beta is None:
        raise ValidationError("saturation amplitude not given and detection carries no beta")
    block = [Segment("drive", saturation_duration, beta=float(beta))]
    if T_delay > 0:
        block.append(Segment("delay", T_delay))
    segments, echoes, cycled = _prepend(block, detection)
    return PulseSequence(
        segments=segments,
        repetition_rate=repetition_rate,
        phase_cycle=detection.phase_cycle,
        echo_times=echoes,
        name="saturation_recovery",
        cycled_segment=cycled,
        metadata={
            "T_delay": T_delay,
            "saturation_duration": saturation_duration,
            "saturation_beta": float(beta),
            "detection": detection.metadata,
        },
    )


def build_rabi_nutation(
    beta_inv: float,
    dt_inv: float,
    detection: PulseSequence,
    wait: float = NUTATION_WAIT,
    repetition_rate: float = 50.0,
) -> PulseSequence:
    """Inversion drive (beta_inv, dt_inv), wait, then the Hahn detection block."""
    if not (math.isfinite(beta_inv) and beta_inv >= 0):
        raise ValidationError(f"beta_inv must be >= 0, got {beta_inv}")
    _check_positive(dt_inv=dt_inv, wait=wait)
    block = [Segment("drive", dt_inv, beta=beta_inv), Segment("delay", wait)]
    segments, echoes, cycled = _prepend(block, detection)
    return PulseSequence(
        segments=segments,
        repetition_rate=repetition_rate,
        phase_cycle=detection.phase_cycle,
        echo_times=echoes,
        name="rabi_nutation",
        cycled_segment=cycled,
        metadata={
            "beta_inv": beta_inv,
            "dt_inv": dt_inv,
            "wait": wait,
            "repetition_rate": repetition_rate,
            "detection": detection.metadata,
        },
    )


def build_ideal_hahn(
    tau: float,
    acquire_window: Optional[float] = None,
    kappa: Optional[float] = None,
    repetition_rate: float = 100.0,
) -> PulseSequence:
    """Instant pi/2 at t = 0 and instant pi at tau; echo at 2 tau."""
    _check_positive(tau=tau)
    window = default_acquire_window(kappa) if acquire_window is None else acquire_window
    events = [
        (0.0, Segment("instant", 0.0, angle=math.pi / 2)),
        (tau, Segment("instant", 0.0, angle=math.pi, phase=0.0)),
        _window(2 * tau, window),
    ]
    return PulseSequence(
        segments=_assemble(events, "ideal_hahn"),
        repetition_rate=repetition_rate,
        echo_times=(2 * tau,),
        name="ideal_hahn",
        metadata={"tau": tau, "acquire_window": window},
    )


def build_coherent_control(
    beta: float, dt: float, spacing: float, repetition_rate: float = 100.0
) -> PulseSequence:
    """Two identical weak pulses; their reflection is the spin-free averaging reference."""
    _check_positive(beta=beta, dt=dt, spacing=spacing)
    events = [_pulse(dt / 2, dt, beta, 0.0), _pulse(dt / 2 + dt + spacing, dt, beta, 0.0)]
    return PulseSequence(
        segments=_assemble(events, "coherent_control"),
        repetition_rate=repetition_rate,
        name="coherent_control",
        metadata={"beta": beta, "dt": dt, "spacing": spacing},
    )


SEQUENCE_BUILDERS: Dict[str, Callable[..., PulseSequence]] = {
    "hahn": build_hahn,
    "cpmg": build_cpmg,
    "ideal_hahn": build_ideal_hahn,
    "coherent_control": build_coherent_control,
}


def build_sequence(name: str, **params: Any) -> PulseSequence:
    """Named builder lookup used by experiment configs."""
    try:
        builder = SEQUENCE_BUILDERS[name]
    except KeyError:
        raise ValidationError(
            f"unknown sequence '{name}', expected one of {sorted(SEQUENCE_BUILDERS)}"
        )
    return builder(**params)
