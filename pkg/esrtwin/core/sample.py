from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from numpy.typing import ArrayLike
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import RegularGridInterpolator

from esrtwin.constants import (
    DA_DEPS,
    GAMMA_E,
    GAMMA_SI29,
    HBAR,
    MU0,
    SI_BULK_MODULUS,
    SI_LATTICE,
    SI_POISSON,
    TWO_PI,
    constant,
    film_mismatch_stress,
)
from esrtwin.core.dynamics import purcell_rate
from esrtwin.core.hamiltonian import SpinSystem, hamiltonian_levels, transitions
from esrtwin.core.resonator import ResonatorModel, b1_field_points, coupling_strength
from esrtwin.core.utils import blocked_draw, check_finite, counter_rng
from esrtwin.errors import DataFormatError, ValidationError

logger = logging.getLogger(__name__)

STRAIN_BOUND = 1e-2
R_MIN = 1e-9
PACKET_CAP = 50_000
G_BINS = 60
DETUNING_BINS = 40
B0_FLOOR = 1e-7

B1Provider = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ImplantProfile:
    """Donor density N(depth) in m^-3, linear between nodes and zero outside the grid."""

    depth_grid: np.ndarray
    density: np.ndarray

    def __post_init__(self) -> None:
        if self.depth_grid.shape != self.density.shape or self.depth_grid.ndim != 1:
            raise ValidationError("depth_grid and density must be 1D arrays of equal length")
        check_finite(depth_grid=self.depth_grid, density=self.density)
        if np.any(self.density < 0):
            raise ValidationError("implant density must be >= 0")
        if np.any(np.diff(self.depth_grid) <= 0) or self.depth_grid[0] < 0:
            raise ValidationError("depth grid must be >= 0 and strictly increasing")

    def __call__(self, depth: ArrayLike) -> np.ndarray:
        return np.interp(depth, self.depth_grid, self.density, left=0.0, right=0.0)

    @property
    def areal_dose(self) -> float:
        """Donors per m^2 of surface."""
        return float(trapezoid(self.density, self.depth_grid))

    @property
    def peak(self) -> float:
        return float(self.density.max())

    def scaled(self, factor: float) -> "ImplantProfile":
        return replace(self, density=self.density * factor)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"depth_m": self.depth_grid, "density_m3": self.density})


def implant_profile(
    peak_density: Optional[float] = None,
    depth_range: Optional[Tuple[float, float]] = None,
    straggle: Optional[float] = None,
    n_grid: int = 601,
) -> ImplantProfile:
    """
    Raised-cosine plateau: flat between the depth range, cosine ramps of width `straggle`.

    Args:
        peak_density (float): plateau density in m^-3. Defaults to 8e22 (8e16 cm^-3).
        depth_range (Tuple[float, float]): plateau edges in m. Defaults to (50 nm, 100 nm).
        straggle (float): ramp width in m. Defaults to 25 nm.
        n_grid (int): number of depth nodes.

    Returns:
        ImplantProfile: tabulated profile.
    """
    peak = constant("implant", "peak_density_m3") if peak_density is None else peak_density
    d_min, d_max = depth_range or (
        constant("implant", "depth_min_m"),
        constant("implant", "depth_max_m"),
    )
    s = constant("implant", "straggle_m") if straggle is None else straggle
    if peak < 0:
        raise ValidationError(f"negative peak density {peak}")
    if not 0 <= d_min < d_max:
        raise ValidationError(f"need 0 <= depth_min < depth_max, got ({d_min}, {d_max})")
    if s < 0:
        raise ValidationError(f"negative straggle {s}")
    lo, hi = max(0.0, d_min - s), d_max + s
    grid = np.union1d(np.linspace(lo, hi, n_grid), [d_min, d_max, 0.5 * (d_min + d_max)])
    density = np.full_like(grid, peak)
    if s > 0:
        below = grid < d_min
        above = grid > d_max
        density[below] = peak * 0.5 * (1 + np.cos(np.pi * (d_min - grid[below]) / s))
        density[above] = peak * 0.5 * (1 + np.cos(np.pi * (grid[above] - d_max) / s))
    return ImplantProfile(depth_grid=grid, density=density)


def read_implant_csv(path: str) -> ImplantProfile:
    try:
        frame = pd.read_csv(path, comment="#")
    except (OSError, ValueError) as err:
        raise DataFormatError(f"cannot read implant profile: {err}", source=path)
    if not {"depth_m", "density_m3"} <= set(frame.columns):
        raise DataFormatError("expected columns depth_m, density_m3", source=path)
    frame = frame.sort_values("depth_m")
    return ImplantProfile(
        depth_grid=frame["depth_m"].to_numpy(dtype=float),
        density=frame["density_m3"].to_numpy(dtype=float),
    )


@dataclass(frozen=True, eq=False)
class StrainMap:
    """Hydrostatic strain on a rectilinear (x, y) grid; epsilon_h has shape (len(ys), len(xs)).

    Analytic maps keep their exact evaluator; imported maps are bilinear between nodes and
    clamped to the grid outside it.
    """

    xs: np.ndarray
    ys: np.ndarray
    epsilon_h: np.ndarray
    source: str = "analytic"
    evaluator: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(
        default=None, repr=False
    )

    def __post_init__(self) -> None:
        if self.epsilon_h.shape != (len(self.ys), len(self.xs)):
            raise ValidationError("epsilon_h must have shape (len(ys), len(xs))")
        if self.source not in ("analytic", "imported"):
            raise ValidationError(f"unknown strain source '{self.source}'")
        if np.any(np.abs(self.epsilon_h) > STRAIN_BOUND):
            raise ValidationError(f"|epsilon_h| exceeds {STRAIN_BOUND}")

    @classmethod
    def zero(cls) -> "StrainMap":
        xs = np.array([-1e-6, 1e-6])
        ys = np.array([-1e-6, 0.0])
        return cls(xs, ys, np.zeros((2, 2)), "analytic", lambda x, y: np.zeros(np.shape(x)))

    def __call__(self, x: ArrayLike, y: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.evaluator is not None:
            return self.evaluator(x, y)
        interp = RegularGridInterpolator((self.ys, self.xs), self.epsilon_h, method="linear")
        yc = np.clip(y, self.ys[0], self.ys[-1])
        xc = np.clip(x, self.xs[0], self.xs[-1])
        return interp(np.stack([yc, xc], axis=-1))

    def scaled(self, factor: float) -> "StrainMap":
        evaluator = self.evaluator
        scaled_eval = None if evaluator is None else (lambda x, y: factor * evaluator(x, y))
        return replace(self, epsilon_h=factor * self.epsilon_h, evaluator=scaled_eval)

    def to_frame(self) -> pd.DataFrame:
        X, Y = np.meshgrid(self.xs, self.ys)
        return pd.DataFrame({"x_m": X.ravel(), "y_m": Y.ravel(), "eps_h": self.epsilon_h.ravel()})


def _flamant_trace(
    x: np.ndarray, y: np.ndarray, x0: float, q: float, poisson: float, r_min: float
) -> Tuple[np.ndarray, int]:
    # tangential line force q (N/m, along +x) at (x0, 0) on the half-space y <= 0
    dx = x - x0
    r2 = dx**2 + y**2
    clamped = r2 < r_min**2
    if np.any(clamped):
        scale = r_min / np.sqrt(np.maximum(r2[clamped], 1e-300))
        dx = dx.copy()
        dx[clamped] = np.where(r2[clamped] > 0, dx[clamped] * scale, r_min)
        r2 = np.maximum(r2, r_min**2)
    sigma_rr = -2.0 * q * dx / (np.pi * r2)
    return (1.0 + poisson) * sigma_rr, int(np.count_nonzero(clamped))


def analytic_strain(
    x: ArrayLike,
    y: ArrayLike,
    wire_width: float,
    film_force: float,
    bulk_modulus: float = SI_BULK_MODULUS,
    poisson: float = SI_POISSON,
    r_min: float = R_MIN,
) -> np.ndarray:
    """Hydrostatic strain from the two edge forces of a contracting film, clipped to the bound."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    right, n_right = _flamant_trace(x, y, wire_width / 2, -film_force, poisson, r_min)
    left, n_left = _flamant_trace(x, y, -wire_width / 2, film_force, poisson, r_min)
    if n_right + n_left:
        logger.warning(
            "%d strain evaluation(s) closer than r_min=%.3g m to a wire edge were clamped",
            n_right + n_left,
            r_min,
        )
    eps = (right + left) / (3.0 * bulk_modulus)
    over = np.abs(eps) > STRAIN_BOUND
    if np.any(over):
        logger.warning("%d strain value(s) clipped at |eps| = %g", int(over.sum()), STRAIN_BOUND)
        eps = np.clip(eps, -STRAIN_BOUND, STRAIN_BOUND)
    return eps


def strain_analytic(
    model: ResonatorModel,
    film_stress: Optional[float] = None,
    bulk_modulus: float = SI_BULK_MODULUS,
    poisson: float = SI_POISSON,
    xs: Optional[ArrayLike] = None,
    ys: Optional[ArrayLike] = None,
    r_min: float = R_MIN,
) -> StrainMap:
    """
    Plane-strain map of the substrate under a thermally contracted wire.

    The film pulls on the substrate through two opposite tangential line forces
    f = film_stress * wire_thickness at x = +-w/2. Each force gives the Flamant radial stress
    sigma_rr = -2 f cos(theta) / (pi r), with sigma_zz = nu sigma_rr in plane strain, and
    eps_h = (sigma_xx + sigma_yy + sigma_zz) / (3 K).

    Args:
        model (ResonatorModel): wire geometry.
        film_stress (float, optional): film stress in Pa. Defaults to the Al/Si contraction
            mismatch from the constants file.
        bulk_modulus (float): silicon bulk modulus K, Pa.
        poisson (float): silicon Poisson ratio.
        xs, ys (ArrayLike, optional): grid nodes in m (y < 0 in the substrate).
        r_min (float): clamp radius around each edge.

    Returns:
        StrainMap: tabulated map that evaluates the closed form between nodes.
    """
    stress = film_mismatch_stress() if film_stress is None else film_stress
    check_finite(film_stress=stress)
    if bulk_modulus <= 0 or not 0 <= poisson < 0.5:
        raise ValidationError("bulk_modulus must be > 0 and poisson in [0, 0.5)")
    force = stress * model.wire_thickness
    w = model.wire_width
    xs = np.linspace(-1e-6, 1e-6, 201) if xs is None else np.asarray(xs, dtype=float)
    ys = -np.linspace(300e-9, 2.5e-9, 120) if ys is None else np.asarray(ys, dtype=float)

    def evaluator(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return analytic_strain(x, y, w, force, bulk_modulus, poisson, r_min)

    X, Y = np.meshgrid(xs, ys)
    return StrainMap(xs, ys, evaluator(X, Y), "analytic", evaluator)


def strain_import(path: str) -> StrainMap:
    """Read a CSV grid (x_m, y_m, eps_h); every (x, y) combination must appear exactly once."""
    try:
        frame = pd.read_csv(path, comment="#")
    except (OSError, ValueError) as err:
        raise DataFormatError(f"cannot read strain map: {err}", source=path)
    if not {"x_m", "y_m", "eps_h"} <= set(frame.columns):
        raise DataFormatError("expected columns x_m, y_m, eps_h", source=path)
    xs = np.unique(frame["x_m"].to_numpy(dtype=float))
    ys = np.unique(frame["y_m"].to_numpy(dtype=float))
    if len(frame) != len(xs) * len(ys) or frame.duplicated(["x_m", "y_m"]).any():
        raise DataFormatError(
            "non-rectilinear grid", source=path, rows=len(frame), nx=len(xs), ny=len(ys)
        )
    if len(xs) < 2 or len(ys) < 2:
        raise DataFormatError("grid needs at least 2 nodes per axis", source=path)
    grid = frame.pivot(index="y_m", columns="x_m", values="eps_h").reindex(index=ys, columns=xs)
    return StrainMap(xs, ys, grid.to_numpy(dtype=float), "imported")


def strain_export(strain: StrainMap, path: str) -> None:
    strain.to_frame().to_csv(path, index=False)


def hyperfine_shift(epsilon_h: ArrayLike, dA_deps: float = DA_DEPS) -> np.ndarray:
    """Strain shift of the hyperfine constant, delta_A = (dA/deps) eps in rad/s."""
    eps = np.asarray(epsilon_h, dtype=float)
    if np.any(np.abs(eps) > STRAIN_BOUND):
        raise ValidationError(f"|epsilon_h| exceeds {STRAIN_BOUND}")
    return dA_deps * eps


class StrainStatistics(NamedTuple):
    mean: float
    std: float
    zero_field_spread_hz: float


def strain_statistics(
    strain: StrainMap, profile: ImplantProfile, nuclear_spin: float = 4.5
) -> StrainStatistics:
    """Donor-weighted mean and spread of eps_h over the map, and the implied (I+1/2) dA spread."""
    X, Y = np.meshgrid(strain.xs, strain.ys)
    weights = profile(-Y)
    if weights.sum() <= 0:
        raise ValidationError("strain map does not overlap the donor layer")
    eps = strain.epsilon_h
    mean = float(np.average(eps, weights=weights))
    std = float(np.sqrt(np.average((eps - mean) ** 2, weights=weights)))
    spread = (nuclear_spin + 0.5) * DA_DEPS * std / TWO_PI
    return StrainStatistics(mean, std, spread)


class SpinPacket(NamedTuple):
    position: Tuple[float, float]
    g0: float
    transition_id: int
    detuning: float
    weight: float
    T1: float
    T2: float


class EnsembleSummary(NamedTuple):
    total_donors: float
    weight_per_transition: Dict[int, float]
    max_g0: float
    max_g0_position: Tuple[float, float]
    max_g0_distance: float
    n_draws: int
    n_packets: int


@dataclass(frozen=True, eq=False)
class SpinEnsemble:
    """Spin packets as parallel arrays; rates in rad/s, times in s, positions in m."""

    g0: np.ndarray
    detuning: np.ndarray
    weight: np.ndarray
    transition_id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    T1: np.ndarray
    T2: np.ndarray
    summary: Optional[EnsembleSummary] = None

    def __post_init__(self) -> None:
        n = len(self.g0)
        for name in ("detuning", "weight", "transition_id", "x", "y", "T1", "T2"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"ensemble field '{name}' has the wrong length")
        if np.any(self.g0 < 0) or np.any(self.weight <= 0):
            raise ValidationError("packets need g0 >= 0 and weight > 0")

    def __len__(self) -> int:
        return len(self.g0)

    @classmethod
    def empty(cls) -> "SpinEnsemble":
        z = np.zeros(0)
        return cls(z, z, z, np.zeros(0, dtype=int), z, z, z, z)

    @classmethod
    def from_packets(cls, packets: Sequence[SpinPacket]) -> "SpinEnsemble":
        if not packets:
            return cls.empty()
        cols = list(zip(*packets))
        pos = np.array(cols[0], dtype=float).reshape(-1, 2)
        return cls(
            g0=np.array(cols[1], dtype=float),
            detuning=np.array(cols[3], dtype=float),
            weight=np.array(cols[4], dtype=float),
            transition_id=np.array(cols[2], dtype=int),
            x=pos[:, 0],
            y=pos[:, 1],
            T1=np.array(cols[5], dtype=float),
            T2=np.array(cols[6], dtype=float),
        )

    @property
    def packets(self) -> List[SpinPacket]:
        fields = ("x", "y", "g0", "transition_id", "detuning", "weight", "T1", "T2")
        rows = zip(*(getattr(self, f).tolist() for f in fields))
        return [SpinPacket((x, y), g, t, d, w, t1, t2) for x, y, g, t, d, w, t1, t2 in rows]

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def scaled(self, factor: float) -> "SpinEnsemble":
        """Same packets with every weight multiplied by `factor` (> 0)."""
        if factor <= 0:
            raise ValidationError(f"scale factor must be > 0, got {factor}")
        return replace(self, weight=self.weight * factor)

    def select(self, transition_id: int) -> "SpinEnsemble":
        keep = self.transition_id == transition_id
        arrays = {f: getattr(self, f)[keep] for f in _ARRAY_FIELDS}
        return SpinEnsemble(**arrays, summary=self.summary)

    def tensors(self, device: Union[str, torch.device] = "cpu") -> Dict[str, torch.Tensor]:
        return {
            f: torch.as_tensor(getattr(self, f), dtype=torch.double, device=device)
            for f in ("g0", "detuning", "weight", "T1", "T2")
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "transition_id": self.transition_id,
                "x_m": self.x,
                "y_m": self.y,
                "g0_Hz": self.g0 / TWO_PI,
                "detuning_Hz": self.detuning / TWO_PI,
                "weight": self.weight,
                "T1_s": self.T1,
                "T2_s": self.T2,
            }
        )


_ARRAY_FIELDS = ("g0", "detuning", "weight", "transition_id", "x", "y", "T1", "T2")


def _bin_index(values: np.ndarray, n_bins: int, log: bool) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if log:
        positive = values[values > 0]
        if positive.size == 0:
            return np.zeros(values.shape, dtype=int)
        lo = float(positive.min())
    degenerate = hi <= lo * (1 + 1e-12) if log else hi <= lo
    if degenerate:
        return np.zeros(values.shape, dtype=int)
    edges = np.geomspace(lo, hi, n_bins + 1) if log else np.linspace(lo, hi, n_bins + 1)
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)


def _aggregate(
    g: np.ndarray,
    det: np.ndarray,
    w: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    g_bins: int,
    d_bins: int,
) -> Tuple[np.ndarray, ...]:
    key = _bin_index(g, g_bins, log=True) * d_bins + _bin_index(det, d_bins, log=False)
    _, inverse = np.unique(key, return_inverse=True)
    weight = np.bincount(inverse, weights=w)
    return (
        weight,
        np.bincount(inverse, weights=w * g) / weight,
        np.bincount(inverse, weights=w * det) / weight,
        np.bincount(inverse, weights=w * x) / weight,
        np.bincount(inverse, weights=w * y) / weight,
    )


def _draw_positions(
    profile: ImplantProfile, x_half_width: float, n: int, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    grid, dens = profile.depth_grid, profile.density
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    if cdf[-1] <= 0:
        raise ValidationError("implant profile has zero total density")
    cdf = cdf / cdf[-1]
    u = blocked_draw(seed, n, lambda rng, size: rng.random((size, 2)))
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    depth = np.interp(u[:, 0], cdf[keep], grid[keep])
    x = x_half_width * (2.0 * u[:, 1] - 1.0)
    return x, -depth


def build_ensemble(
    profile: ImplantProfile,
    strain_map: StrainMap,
    resonator_model: ResonatorModel,
    spin_system: SpinSystem,
    B0: float,
    n_packets: int,
    seed: int,
    x_half_width: float = 1e-6,
    b1_provider: Optional[B1Provider] = None,
    threshold: float = 0.05,
    detuning_window: Optional[float] = None,
    T2: float = 0.85e-3,
    g_bins: int = G_BINS,
    detuning_bins: int = DETUNING_BINS,
) -> SpinEnsemble:
    """
    Monte Carlo donor ensemble of the wire cross-section at field B0.

    `n_packets` donor positions are drawn (depth following N(y), x uniform over
    +-x_half_width) and each stands for an equal share of the donors under the wire,
    counting the wire length as a multiplicity. Every donor contributes equally to all
    transitions of the table at B0. Detunings from omega0 follow the strain shift of the
    hyperfine constant to first order; donors outside +-detuning_window are dropped (None
    keeps all). Surviving donors are aggregated per transition into (g0, detuning) bins.

    Args:
        profile (ImplantProfile): implantation profile.
        strain_map (StrainMap): hydrostatic strain, or StrainMap.zero().
        resonator_model (ResonatorModel): wire geometry, omega0 and kappa.
        spin_system (SpinSystem): donor spin Hamiltonian parameters.
        B0 (float): static field in T.
        n_packets (int): Monte Carlo draws, capped at 50,000.
        seed (int): counter RNG seed.
        x_half_width (float): lateral extent of the sampled region, m.
        b1_provider (Callable, optional): (x, y) -> |B1,perp| in T. Defaults to the wire field.
        threshold (float): matrix-element threshold of the transition table.
        detuning_window (float, optional): kept detuning range, rad/s.
        T2 (float): phenomenological coherence time of every packet, s.
        g_bins (int): number of log-spaced g0 bins per transition.
        detuning_bins (int): number of linear detuning bins per transition.

    Returns:
        SpinEnsemble: packets ordered by transition, carrying an EnsembleSummary.
    """
    if n_packets < 1:
        raise ValidationError(f"n_packets must be >= 1, got {n_packets}")
    if n_packets > PACKET_CAP:
        logger.warning("n_packets=%d capped at %d", n_packets, PACKET_CAP)
        n_packets = PACKET_CAP
    check_finite(B0=B0)
    if profile.areal_dose <= 0:
        raise ValidationError("implant profile has zero total density")
    x, y = _draw_positions(profile, x_half_width, n_packets, seed)
    total = profile.areal_dose * 2 * x_half_width * resonator_model.wire_length
    donor_weight = total / n_packets

    b1 = (b1_provider or (lambda px, py: np.hypot(*b1_field_points(resonator_model, px, py))))(x, y)
    b1 = np.broadcast_to(np.asarray(b1, dtype=float), x.shape)
    delta_A = hyperfine_shift(strain_map(x, y))
    table = transitions(hamiltonian_levels(spin_system, max(abs(B0), B0_FLOOR)), threshold)
    if len(table) == 0:
        raise ValidationError(f"no ESR-allowed transition at B0={B0}")
    share = donor_weight / len(table)
    kappa = resonator_model.kappa

    columns: Dict[str, List[np.ndarray]] = {f: [] for f in _ARRAY_FIELDS}
    per_line: Dict[int, float] = {}
    best = (-1.0, (0.0, 0.0))
    for line in table:
        g = coupling_strength(b1, line.sx_matrix_element, spin_system.gamma_e, magnitude=True)
        k = int(np.argmax(g))
        if g[k] > best[0]:
            best = (float(g[k]), (float(x[k]), float(y[k])))
        det = line.frequency + line.dfreq_dA * delta_A - resonator_model.omega0
        keep = np.ones_like(det, dtype=bool)
        if detuning_window is not None:
            keep = np.abs(det) <= detuning_window
        per_line[line.transition_id] = float(share * keep.sum())
        if not np.any(keep):
            continue
        weight, gm, dm, xm, ym = _aggregate(
            g[keep],
            det[keep],
            np.full(int(keep.sum()), share),
            x[keep],
            y[keep],
            g_bins,
            detuning_bins,
        )
        rate = purcell_rate(gm, kappa, dm)
        columns["g0"].append(gm)
        columns["detuning"].append(dm)
        columns["weight"].append(weight)
        columns["transition_id"].append(np.full(len(gm), line.transition_id, dtype=int))
        columns["x"].append(xm)
        columns["y"].append(ym)
        columns["T1"].append(np.divide(1.0, rate, out=np.full_like(rate, np.inf), where=rate > 0))
        columns["T2"].append(np.full(len(gm), T2))

    bx, by = best[1]
    distance = float(np.hypot(max(abs(bx) - resonator_model.wire_width / 2, 0.0), by))
    arrays = {
        f: (np.concatenate(v) if v else getattr(SpinEnsemble.empty(), f))
        for f, v in columns.items()
    }
    summary = EnsembleSummary(
        total_donors=float(total),
        weight_per_transition=per_line,
        max_g0=best[0],
        max_g0_position=best[1],
        max_g0_distance=distance,
        n_draws=n_packets,
        n_packets=len(arrays["g0"]),
    )
    logger.debug(
        "ensemble at B0=%.4g T: %d packets from %d draws, max g0/2pi=%.4g Hz",
        B0,
        summary.n_packets,
        n_packets,
        summary.max_g0 / TWO_PI,
    )
    return SpinEnsemble(**arrays, summary=summary)


def coupling_histogram(
    ensemble: SpinEnsemble, bins: Union[int, ArrayLike] = G_BINS, transition_id: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Donor-weighted histogram of g0 (rad/s) for one transition."""
    sub = ensemble.select(transition_id)
    if len(sub) == 0:
        raise ValidationError(f"no packets for transition {transition_id}")
    counts, edges = np.histogram(sub.g0, bins=bins, weights=sub.weight)
    return edges, counts


@dataclass(frozen=True, eq=False)
class NuclearBath:
    """29Si nuclei around a donor at the origin; couplings and Larmor frequency in rad/s."""

    positions: np.ndarray
    omega_I: float
    a_secular: np.ndarray
    b_pseudosecular: np.ndarray
    n_sites: int = 0
    concentration: float = 0.0

    def __len__(self) -> int:
        return len(self.a_secular)

    @property
    def expected_count(self) -> float:
        return self.concentration * self.n_sites


def diamond_sites(r_max: float, lattice: float = SI_LATTICE) -> np.ndarray:
    """Silicon lattice sites with 0 < |r| <= r_max around a substitutional site at the origin."""
    fcc = np.array([[0, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0]])
    basis = np.concatenate([fcc, fcc + 1])  # quarter-cell units
    n = int(np.ceil(r_max / lattice)) + 1
    cells = np.arange(-n, n + 1)
    grid = np.stack(np.meshgrid(cells, cells, cells, indexing="ij"), axis=-1).reshape(-1, 3)
    sites = (4 * grid[:, None, :] + basis[None, :, :]).reshape(-1, 3)
    sites = np.unique(sites, axis=0)
    r = np.linalg.norm(sites, axis=1) * lattice / 4
    keep = (r > 0) & (r <= r_max * (1 + 1e-12))
    return sites[keep] * lattice / 4


def dipolar_couplings(
    positions: np.ndarray, gamma_n: float = GAMMA_SI29, gamma_e: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Point-dipole secular a = T(3cos^2 - 1) and pseudo-secular b = 3T sin cos, B0 along z."""
    ge = GAMMA_E if gamma_e is None else gamma_e
    r = np.linalg.norm(positions, axis=1)
    cos = positions[:, 2] / r
    sin = np.sqrt(np.clip(1.0 - cos**2, 0.0, 1.0))
    T = MU0 * HBAR * ge * abs(gamma_n) / (4 * np.pi * r**3)
    return T * (3 * cos**2 - 1), 3 * T * sin * cos


def nuclear_bath(
    concentration: float,
    r_max: float,
    B0: float,
    seed: int,
    lattice: float = SI_LATTICE,
    gamma_n: float = GAMMA_SI29,
) -> NuclearBath:
    """
    Random 29Si occupation of the lattice around a donor.

    Args:
        concentration (float): occupation probability of each site, in [0, 1].
        r_max (float): radius of the included shell, m.
        B0 (float): static field along z, T.
        seed (int): counter RNG seed.

    Returns:
        NuclearBath: occupied sites with their dipolar couplings.
    """
    if not 0 <= concentration <= 1:
        raise ValidationError(f"concentration must lie in [0, 1], got {concentration}")
    if r_max <= 0:
        raise ValidationError(f"r_max must be > 0, got {r_max}")
    check_finite(B0=B0)
    sites = diamond_sites(r_max, lattice)
    occupied = counter_rng(seed, 0).random(len(sites)) < concentration
    positions = sites[occupied]
    if len(positions):
        a, b = dipolar_couplings(positions, gamma_n)
    else:
        a = b = np.zeros(0)
    return NuclearBath(
        positions=positions,
        omega_I=abs(gamma_n) * abs(B0),
        a_secular=a,
        b_pseudosecular=b,
        n_sites=len(sites),
        concentration=concentration,
    )
