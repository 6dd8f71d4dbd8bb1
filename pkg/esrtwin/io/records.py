from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from esrtwin.errors import DataFormatError, ValidationError

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "esrtwin.report/1"
PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class TraceRecord:
    """
    Sampled output field a_out = I + iQ (s^-1/2) at `times` (s).

    Attributes:
        times: sample times, uniformly spaced by 1 / sample_rate.
        i, q: quadratures.
        sample_rate: Hz.
        seed: noise seed, None for a noiseless trace.
        sequence: JSON description of the played sequence.
        metadata: free-form provenance.
        spin_z: donor-weighted mean s_z at each sample, when recorded.
    """

    times: np.ndarray
    i: np.ndarray
    q: np.ndarray
    sample_rate: float
    seed: Optional[int] = None
    sequence: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    spin_z: Optional[np.ndarray] = None
    final_state: Any = field(default=None, repr=False)

    def __post_init__(self) -> None:
        n = len(self.times)
        if len(self.i) != n or len(self.q) != n:
            raise ValidationError("times, i and q must have equal lengths")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be > 0, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def signal(self) -> np.ndarray:
        return self.i + 1j * self.q

    @property
    def span(self) -> Tuple[float, float]:
        if len(self) == 0:
            return (0.0, 0.0)
        return float(self.times[0] - self.dt), float(self.times[-1])

    def with_signal(self, i: np.ndarray, q: np.ndarray, **changes: Any) -> "TraceRecord":
        return replace(self, i=np.asarray(i, dtype=float), q=np.asarray(q, dtype=float), **changes)

    def window_slice(self, window: Tuple[float, float]) -> slice:
        """Samples whose interval ends inside (t0, t1]; raises on an empty or out-of-span window."""
        t0, t1 = window
        lo, hi = self.span
        tol = 1e-9 * self.dt
        if t1 <= t0 or t0 < lo - tol or t1 > hi + tol:
            raise ValidationError(
                f"window ({t0:.6g}, {t1:.6g}) not inside the trace ({lo:.6g}, {hi:.6g})"
            )
        k0 = int(np.ceil((t0 - lo) / self.dt - 1e-9))
        k1 = int(np.floor((t1 - lo) / self.dt + 1e-9))
        if k1 <= k0:
            raise ValidationError(f"window ({t0:.6g}, {t1:.6g}) holds no samples")
        return slice(k0, k1)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t_s": self.times, "I": self.i, "Q": self.q})

    def provenance(self) -> Dict[str, Any]:
        return {
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "sequence": json.loads(self.sequence) if self.sequence else None,
            **self.metadata,
        }


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(
    frame: pd.DataFrame, path: PathLike, header: Optional[Mapping[str, Any]] = None
) -> Path:
    """CSV with `# key: value` provenance lines in front; floats keep full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key, value in sorted((header or {}).items()):
            fh.write(f"# {key}: {canonical_json(value)}\n")
        frame.to_csv(fh, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_csv(path: PathLike) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    header: Dict[str, Any] = {}
    try:
        with open(path) as fh:
            for line in fh:
                if not line.startswith("# "):
                    break
                key, _, value = line[2:].partition(": ")
                header[key] = json.loads(value)
        frame = pd.read_csv(path, comment="#")
    except (OSError, ValueError) as err:
        raise DataFormatError(f"cannot read {path}: {err}", source=str(path))
    return frame, header


def write_json(data: Mapping[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(data, sort_keys=True, indent=2, default=_json_default))
        fh.write("\n")
    return path


def write_trace(
    trace: TraceRecord, path: PathLike, header: Optional[Mapping[str, Any]] = None
) -> Path:
    """Trace as CSV (t_s, I, Q) plus a sibling `.json` with the metadata."""
    path = Path(path)
    meta = {**trace.provenance(), **(header or {})}
    write_json(meta, path.with_suffix(".json"))
    csv_header = {"seed": trace.seed, "sample_rate": trace.sample_rate}
    csv_header.update(header or {})
    return write_csv(trace.to_frame(), path, csv_header)
