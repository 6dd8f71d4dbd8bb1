from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import lmfit
import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from scipy.integrate import quad

from esrtwin.constants import GAMMA_E, HBAR, MU0, TWO_PI, constant
from esrtwin.core.utils import check_finite, check_positive
from esrtwin.errors import DataFormatError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

GL_NODES = 64


@dataclass(frozen=True)
class ResonatorModel:
    """Lumped LC resonator with a nanowire inductor, rates in rad/s and lengths in m.

    The wire runs along z on top of the substrate surface (y = 0) and occupies
    |x| <= width/2, 0 <= y <= thickness. The substrate is y < 0.
    """

    omega0: float
    q_ext: float
    q_int: float
    impedance_Zc: float = 15.0
    wire_width: float = 100e-9
    wire_thickness: float = 50e-9
    wire_length: float = 10e-6
    kerr_K: float = 5.5

    def __post_init__(self) -> None:
        check_positive(
            omega0=self.omega0,
            q_ext=self.q_ext,
            q_int=self.q_int,
            impedance_Zc=self.impedance_Zc,
            wire_width=self.wire_width,
            wire_thickness=self.wire_thickness,
            wire_length=self.wire_length,
        )
        check_finite(kerr_K=self.kerr_K)

    @classmethod
    def preset(cls, name: str = "S1") -> "ResonatorModel":
        """Device presets `S1` (7.25 GHz) and `S2` (7.56 GHz, strongly over-coupled)."""
        section = f"resonator_{name.lower()}"
        try:
            return cls(
                omega0=TWO_PI * constant(section, "f0_hz"),
                q_ext=constant(section, "q_ext"),
                q_int=constant(section, "q_int"),
                impedance_Zc=constant(section, "impedance_ohm"),
                wire_width=constant(section, "wire_width_m"),
                wire_thickness=constant(section, "wire_thickness_m"),
                wire_length=constant(section, "wire_length_m"),
                kerr_K=constant(section, "kerr_K_rad_s"),
            )
        except KeyError:
            raise ValidationError(f"unknown resonator preset '{name}'")

    @property
    def kappa_ext(self) -> float:
        return self.omega0 / self.q_ext

    @property
    def kappa_int(self) -> float:
        return self.omega0 / self.q_int

    @property
    def kappa(self) -> float:
        return self.kappa_ext + self.kappa_int

    @property
    def q_total(self) -> float:
        return self.omega0 / self.kappa

    def with_q_int(self, q_int: float) -> "ResonatorModel":
        return replace(self, q_int=q_int)


class ModeParameters(NamedTuple):
    kappa: float
    kappa_ext: float
    kappa_int: float
    q_total: float
    linewidth_hz: float


def mode_parameters(model: ResonatorModel) -> ModeParameters:
    return ModeParameters(
        model.kappa, model.kappa_ext, model.kappa_int, model.q_total, model.kappa / TWO_PI
    )


def photon_current(model: ResonatorModel) -> float:
    """Vacuum current fluctuation di = omega0 sqrt(hbar / 2 Zc), in A."""
    return model.omega0 * np.sqrt(HBAR / (2.0 * model.impedance_Zc))


def power_to_beta(p_dbm: ArrayLike, omega0: float) -> np.ndarray:
    """Input power in dBm to beta = sqrt(P / hbar omega0), in s^-1/2."""
    p_w = 1e-3 * 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0)
    return np.sqrt(p_w / (HBAR * omega0))


def beta_to_power(beta: ArrayLike, omega0: float) -> np.ndarray:
    p_w = np.asarray(beta, dtype=float) ** 2 * HBAR * omega0
    return 10.0 * np.log10(p_w / 1e-3)


def mean_photon_number(model: ResonatorModel, beta: ArrayLike, detuning: float = 0.0) -> np.ndarray:
    """Linear steady-state |alpha|^2 = kappa_ext beta^2 / ((kappa/2)^2 + detuning^2)."""
    beta = np.asarray(beta, dtype=float)
    return model.kappa_ext * beta**2 / ((model.kappa / 2) ** 2 + detuning**2)


def _strip_kernel(
    x: np.ndarray, Y: np.ndarray, w: float
) -> Tuple[np.ndarray, np.ndarray]:
    # field of a current sheet of width w per unit sheet current, times 2 pi / mu0
    a1 = x + w / 2
    a2 = x - w / 2
    angle = np.arctan2(w * Y, Y**2 + a1 * a2)
    log = 0.5 * np.log((a1**2 + Y**2) / (a2**2 + Y**2))
    return -angle, log


def _current_density(model: ResonatorModel, current: Optional[float]) -> float:
    i = photon_current(model) if current is None else current
    return i / (model.wire_width * model.wire_thickness)


def b1_field(
    model: ResonatorModel,
    point: Tuple[float, float],
    current: Optional[float] = None,
    epsrel: float = 1e-10,
) -> np.ndarray:
    """
    Magnetic field (Bx, By) at `point` of the wire carrying a uniform current density.

    The sheet integral over the width is done in closed form and the thickness integral
    by adaptive quadrature.

    Args:
        model (ResonatorModel): wire geometry and photon current.
        point (Tuple[float, float]): (x, y) in metres.
        current (float, optional): total current in A. Defaults to photon_current(model).
        epsrel (float): relative quadrature tolerance.

    Returns:
        np.ndarray: (Bx, By) in tesla.

    Examples:
        ```python exec="on" source="above" result="json"
        from esrtwin.core.resonator import ResonatorModel, b1_field
        model = ResonatorModel.preset("S1")
        print(b1_field(model, (0.0, -100e-9)))
        ```
    """
    x, y = float(point[0]), float(point[1])
    check_finite(x=x, y=y)
    w, t = model.wire_width, model.wire_thickness
    prefactor = MU0 * _current_density(model, current) / TWO_PI
    inside = [y] if 0.0 < y < t else None
    out = []
    for component in (0, 1):

        def integrand(yp: float) -> float:
            return float(_strip_kernel(np.array(x), np.array(y - yp), w)[component])

        value, abserr, info, *message = quad(
            integrand, 0.0, t, points=inside, epsabs=0.0, epsrel=epsrel, limit=200, full_output=1
        )
        if message or abserr > max(100 * epsrel * abs(value), 1e-300):
            raise NumericalError(
                "field quadrature did not converge",
                point=(x, y),
                component="xy"[component],
                achieved_abserr=abserr,
                value=value,
            )
        out.append(prefactor * value)
    return np.array(out)


@dataclass(frozen=True, eq=False)
class FieldMap:
    xs: np.ndarray
    ys: np.ndarray
    bx: np.ndarray
    by: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.bx, self.by)

    def to_frame(self) -> pd.DataFrame:
        X, Y = np.meshgrid(self.xs, self.ys)
        return pd.DataFrame(
            {
                "x_m": X.ravel(),
                "y_m": Y.ravel(),
                "Bx_T": self.bx.ravel(),
                "By_T": self.by.ravel(),
                "|B|_T": self.magnitude.ravel(),
            }
        )


def b1_field_points(
    model: ResonatorModel,
    x: ArrayLike,
    y: ArrayLike,
    current: Optional[float] = None,
    n_nodes: int = GL_NODES,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized (Bx, By) at points outside the wire, fixed Gauss-Legendre rule over the thickness.

    The rule is fixed, so values are bit-identical for any partition of the points.
    Points inside the wire fall back to b1_field.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w, t = model.wire_width, model.wire_thickness
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    yp = 0.5 * t * (nodes + 1.0)
    prefactor = MU0 * _current_density(model, current) / TWO_PI * 0.5 * t
    bx = np.zeros(np.broadcast(x, y).shape)
    by = np.zeros_like(bx)
    for node, weight in zip(yp, weights):
        kx, ky = _strip_kernel(x, y - node, w)
        bx = bx + weight * kx
        by = by + weight * ky
    bx, by = prefactor * bx, prefactor * by
    inside = (np.abs(x) <= w / 2) & (y >= 0.0) & (y <= t)
    if np.any(inside):
        for idx in zip(*np.nonzero(inside)):
            bx[idx], by[idx] = b1_field(model, (float(x[idx]), float(y[idx])), current)
    return bx, by


def field_map(
    model: ResonatorModel, xs: ArrayLike, ys: ArrayLike, current: Optional[float] = None
) -> FieldMap:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    X, Y = np.meshgrid(xs, ys)
    bx, by = b1_field_points(model, X, Y, current)
    return FieldMap(xs=xs, ys=ys, bx=bx, by=by)


def coupling_strength(
    b1: Union[float, ArrayLike],
    sx_elem: Union[float, ArrayLike],
    gamma_e: float = GAMMA_E,
    b0_axis: Optional[Sequence[float]] = None,
    magnitude: bool = False,
) -> np.ndarray:
    """
    Spin-photon coupling g0 = gamma_e |<0|Sx|1>| |B1,perp| in rad/s.

    `b1` is either a magnitude already transverse to B0, a 2D in-plane field (B0 lies along
    the wire, so the whole cross-section field is transverse), or a 3-vector whose component
    along `b0_axis` is removed. The last axis holds the vector components, unless
    `magnitude` is set: then every element is a transverse magnitude.
    """
    b = np.asarray(b1, dtype=float)
    sx = np.asarray(sx_elem, dtype=float)
    check_finite(b1=b, sx_elem=sx)
    if np.any(sx < 0):
        raise ValidationError("sx_elem must be >= 0")
    if b.ndim == 0 or magnitude:
        if np.any(b < 0):
            raise ValidationError("|B1| must be >= 0")
        perp = b
    else:
        if b0_axis is not None:
            n = np.asarray(b0_axis, dtype=float)
            n = n / np.linalg.norm(n)
            if b.shape[-1] != n.shape[0]:
                raise ValidationError("b1 and b0_axis dimensions differ")
            b = b - np.tensordot(b @ n, n, axes=0)
        perp = np.linalg.norm(b, axis=-1)
    return gamma_e * sx * perp


def s11_linear(model: ResonatorModel, omega: ArrayLike) -> np.ndarray:
    """S11 = (kappa_ext - kappa_int - 2i D) / (kappa_ext + kappa_int + 2i D), D = omega - omega0."""
    delta = np.asarray(omega, dtype=float) - model.omega0
    ke, ki = model.kappa_ext, model.kappa_int
    return (ke - ki - 2j * delta) / (ke + ki + 2j * delta)


@dataclass(frozen=True, eq=False)
class ReflectionTrace:
    frequencies: np.ndarray
    s11: np.ndarray
    input_power: float = 0.0

    def __post_init__(self) -> None:
        if np.shape(self.frequencies) != np.shape(self.s11):
            raise DataFormatError("frequencies and s11 differ in length")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "freq_Hz": self.frequencies / TWO_PI,
                "re_s11": self.s11.real,
                "im_s11": self.s11.imag,
            }
        )


def read_reflection_csv(path: str, input_power: float = 0.0) -> ReflectionTrace:
    """Load (freq_Hz, re_s11, im_s11) or (freq_Hz, mag_db, phase_deg) columns."""
    try:
        frame = pd.read_csv(path, comment="#")
    except (OSError, ValueError) as err:
        raise DataFormatError(f"cannot read reflection trace: {err}", source=path)
    cols = set(frame.columns)
    if "freq_Hz" not in cols:
        raise DataFormatError("missing 'freq_Hz' column", source=path)
    freq = TWO_PI * frame["freq_Hz"].to_numpy(dtype=float)
    if {"re_s11", "im_s11"} <= cols:
        s11 = frame["re_s11"].to_numpy(dtype=float) + 1j * frame["im_s11"].to_numpy(dtype=float)
    elif {"mag_db", "phase_deg"} <= cols:
        mag = 10.0 ** (frame["mag_db"].to_numpy(dtype=float) / 20.0)
        s11 = mag * np.exp(1j * np.deg2rad(frame["phase_deg"].to_numpy(dtype=float)))
    else:
        raise DataFormatError(
            "expected re_s11/im_s11 or mag_db/phase_deg columns", source=path, columns=sorted(cols)
        )
    return ReflectionTrace(frequencies=freq, s11=s11, input_power=input_power)


def reflection(
    f: np.ndarray,
    f_ref: float,
    f0: float,
    q_ext: float,
    q_int: float,
    amplitude: float,
    phase: float,
    delay: float,
) -> np.ndarray:
    x = (f - f0) / f0
    core = (1 / q_ext - 1 / q_int - 2j * x) / (1 / q_ext + 1 / q_int + 2j * x)
    return amplitude * np.exp(1j * (phase - TWO_PI * (f - f_ref) * delay)) * core


class ReflectionModel(lmfit.model.Model):
    __doc__ = "one-port resonator reflection with cable nuisances" + lmfit.models.COMMON_INIT_DOC

    def __init__(self, *args, **kwargs):  # type: ignore[no-untyped-def]
        super().__init__(reflection, *args, independent_vars=["f", "f_ref"], **kwargs)
        self.set_param_hint("q_ext", min=1.0)
        self.set_param_hint("q_int", min=1.0)
        self.set_param_hint("amplitude", min=0.0)

    def guess(self, data, f=None, f_ref=None, **kwargs):  # type: ignore[no-untyped-def]
        """Initial values from the dip: f0 at the deepest point, Q from the half-depth width."""
        f = np.asarray(f, dtype=float)
        data = np.asarray(data)
        n_edge = max(3, len(f) // 20)
        left, right = data[:n_edge], data[-n_edge:]
        amplitude = float(np.median(np.abs(np.concatenate([left, right]))))
        slopes = []
        for edge, fe in ((left, f[:n_edge]), (right, f[-n_edge:])):
            slopes.append(np.polyfit(fe, np.unwrap(np.angle(edge)), 1)[0])
        delay = -float(np.mean(slopes)) / TWO_PI
        phase = float(np.angle(np.mean(left * np.exp(1j * TWO_PI * (f[:n_edge] - f_ref) * delay))))
        norm = data / (amplitude * np.exp(1j * (phase - TWO_PI * (f - f_ref) * delay)))
        lorentz = 1.0 - np.abs(norm) ** 2
        k = int(np.argmax(lorentz))
        depth = float(lorentz[k])
        noise = float(np.std(np.abs(np.concatenate([left, right])) / amplitude))
        if depth < max(1e-3, 5 * noise):
            raise NumericalError("no resonance found in the trace", dip_depth=depth, noise=noise)
        above = lorentz >= depth / 2
        lo, hi = k, k
        while lo > 0 and above[lo - 1]:
            lo -= 1
        while hi < len(f) - 1 and above[hi + 1]:
            hi += 1
        width = max(f[hi] - f[lo], float(np.min(np.diff(f))))
        f0 = float(f[k])
        q_tot = f0 / width
        r0 = float(np.clip(norm[k].real, -0.999, 0.999))
        params = self.make_params(
            f0=f0,
            q_ext=2 * q_tot / (1 + r0),
            q_int=2 * q_tot / (1 - r0),
            amplitude=amplitude,
            phase=phase,
            delay=delay,
        )
        params[f"{self.prefix}f0"].set(min=float(f.min()), max=float(f.max()))
        return lmfit.models.update_param_vals(params, self.prefix, **kwargs)


class S11Fit(NamedTuple):
    omega0: float
    q_ext: float
    q_int: float
    fit_residual: float
    report: str = ""


def fit_s11(trace: ReflectionTrace, max_nfev: int = 2000) -> S11Fit:
    """
    Complex least-squares fit of a reflection trace.

    Overall amplitude, phase and electrical delay are fitted as nuisance parameters.

    Args:
        trace (ReflectionTrace): at least 50 points spanning the resonance.
        max_nfev (int): bound on model evaluations.

    Returns:
        S11Fit: omega0 (rad/s), q_ext, q_int and the rms residual relative to the mean |S11|.
    """
    if len(trace.frequencies) < 50:
        raise ValidationError(f"need >= 50 points, got {len(trace.frequencies)}")
    order = np.argsort(trace.frequencies)
    f = trace.frequencies[order] / TWO_PI
    data = trace.s11[order]
    f_ref = float(np.mean(f))
    model = ReflectionModel()
    params = model.guess(data, f=f, f_ref=f_ref)
    span = (f[-1] - f[0]) * (1 / params["q_ext"].value + 1 / params["q_int"].value) ** -1
    if span / params["f0"].value < 5:
        logger.warning("trace spans fewer than 5 linewidths, fit may be poorly constrained")
    result = model.fit(data, params, f=f, f_ref=f_ref, max_nfev=max_nfev)
    best = result.params
    at_edge = best["f0"].value <= f[0] or best["f0"].value >= f[-1]
    if not result.success or at_edge:
        raise NumericalError(
            "reflection fit did not converge",
            message=result.message,
            nfev=result.nfev,
            last_iterate=best.valuesdict(),
        )
    residual = float(np.sqrt(np.mean(np.abs(result.residual.view(complex)) ** 2)))
    residual /= float(np.mean(np.abs(data)))
    return S11Fit(
        omega0=TWO_PI * best["f0"].value,
        q_ext=best["q_ext"].value,
        q_int=best["q_int"].value,
        fit_residual=residual,
        report=result.fit_report(),
    )


class TLSModel(NamedTuple):
    q_tls0: float
    n_c: float
    q_other: float

    @classmethod
    def default(cls) -> "TLSModel":
        return cls(constant("tls", "q_tls0"), constant("tls", "n_c"), constant("tls", "q_other"))


def _inverse_q(n: np.ndarray, q_tls0: float, n_c: float, q_other: float) -> np.ndarray:
    return (1.0 / q_tls0) / np.sqrt(1.0 + n / n_c) + 1.0 / q_other


def tls_qint(model_tls: TLSModel, n_photons: ArrayLike) -> np.ndarray:
    """Two-level-system loss: 1/Qint = (1/Q_tls0)/sqrt(1 + n/n_c) + 1/Q_other."""
    check_positive(q_tls0=model_tls.q_tls0, n_c=model_tls.n_c, q_other=model_tls.q_other)
    n = np.asarray(n_photons, dtype=float)
    if np.any(n < 0):
        raise ValidationError("photon numbers must be >= 0")
    return 1.0 / _inverse_q(n, *model_tls)


def fit_tls(
    n_photons: ArrayLike, q_int: ArrayLike, n_c: Optional[float] = None
) -> TLSModel:
    """Fit the TLS model; n_c is held fixed (default 1 photon) unless >= 3 points are given."""
    n = np.asarray(n_photons, dtype=float)
    q = np.asarray(q_int, dtype=float)
    check_positive(q_int=q)
    if n.shape != q.shape or n.size < 2:
        raise ValidationError("need matching arrays with at least 2 points")
    model = lmfit.Model(_inverse_q, independent_vars=["n"])
    q_hi, q_lo = float(q.max()), float(q.min())
    tls_guess = 1.0 / max(1.0 / q_lo - 1.0 / q_hi, 1e-3 / q_lo)
    params = model.make_params(q_tls0=tls_guess, n_c=1.0 if n_c is None else n_c, q_other=q_hi)
    params["q_tls0"].set(min=1.0)
    params["q_other"].set(min=1.0)
    params["n_c"].set(min=1e-6, vary=n_c is None and n.size >= 3)
    data = 1.0 / q
    result = model.fit(data, params, n=n, weights=1.0 / data)
    if not result.success:
        raise NumericalError("TLS fit did not converge", last_iterate=result.params.valuesdict())
    best = result.params
    return TLSModel(best["q_tls0"].value, best["n_c"].value, best["q_other"].value)


class DuffingSolution(NamedTuple):
    stable: Tuple[float, ...]
    unstable: Tuple[float, ...]

    @property
    def photons(self) -> Tuple[float, ...]:
        return tuple(sorted(self.stable + self.unstable))


def _drive_curve_slope(model: ResonatorModel, detuning: float, n: float) -> float:
    K = model.kerr_K
    return 3 * K**2 * n**2 + 4 * K * detuning * n + (model.kappa / 2) ** 2 + detuning**2


def duffing_steady_state(model: ResonatorModel, detuning: float, beta: float) -> DuffingSolution:
    """
    Steady intracavity photon numbers n of the Kerr cavity.

    Solves n[(kappa/2)^2 + (detuning + K n)^2] = kappa_ext beta^2 and classifies each root as
    stable when the left-hand side increases with n.

    Args:
        model (ResonatorModel): includes the Kerr coefficient K (rad/s per photon).
        detuning (float): drive minus resonance frequency, rad/s.
        beta (float): drive amplitude, s^-1/2.

    Returns:
        DuffingSolution: stable and unstable photon numbers, ascending.
    """
    check_finite(detuning=detuning, beta=beta)
    K = model.kerr_K
    drive = model.kappa_ext * beta**2
    linear = (model.kappa / 2) ** 2 + detuning**2
    if K == 0 or drive == 0:
        return DuffingSolution(stable=(drive / linear,), unstable=())
    scale = drive / linear
    roots = np.roots([K**2, 2 * K * detuning, linear, -drive])
    tol = 1e-5 * max(scale, abs(detuning / K), 1.0)
    real = sorted(float(r.real) for r in roots if abs(r.imag) <= tol and r.real >= -tol)
    merged: list = []
    for r in real:
        if merged and abs(r - merged[-1]) <= tol:
            continue
        merged.append(max(r, 0.0))
    stable, unstable = [], []
    slope_tol = 1e-9 * linear
    for r in merged:
        (stable if _drive_curve_slope(model, detuning, r) >= -slope_tol else unstable).append(r)
    return DuffingSolution(stable=tuple(stable), unstable=tuple(unstable))


def bistability_onset(model: ResonatorModel) -> Tuple[float, float]:
    """(detuning, beta) at the bistability cusp, detuning = -sign(K) sqrt(3) kappa / 2."""
    K = model.kerr_K
    if K == 0:
        raise ValidationError("a linear cavity has no bistability")
    kappa = model.kappa
    detuning = -np.sign(K) * np.sqrt(3.0) * kappa / 2
    n_c = -2 * detuning / (3 * K)
    drive = n_c * ((kappa / 2) ** 2 + (detuning + K * n_c) ** 2)
    return float(detuning), float(np.sqrt(drive / model.kappa_ext))


def duffing_sweep(
    model: ResonatorModel, detuning: float, betas: ArrayLike
) -> np.ndarray:
    """Follow the stable branch closest to the previous point while beta is swept in order."""
    out = []
    previous: Optional[float] = None
    for beta in np.asarray(betas, dtype=float):
        stable = duffing_steady_state(model, detuning, float(beta)).stable
        if previous is None:
            choice = stable[0] if beta >= 0 else stable[-1]
        else:
            choice = min(stable, key=lambda n: abs(n - previous))  # type: ignore[operator]
        out.append(choice)
        previous = choice
    return np.array(out)
