from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy.optimize import brentq

from esrtwin.constants import GAMMA_E, GAMMA_N_BI, HYPERFINE_A, TWO_PI
from esrtwin.core.utils import check_finite
from esrtwin.errors import NotFoundError, NumericalError, ValidationError
from esrtwin.matrices import product_operators, s_dot_i, total_fz
from esrtwin.modules.utils import is_hermitian, is_real

logger = logging.getLogger(__name__)

DEGENERACY_RTOL = 1e-9
FD_STEP = 1e-6
ONE_HZ = TWO_PI


@dataclass(frozen=True)
class SpinSystem:
    """Electron spin S coupled to a nuclear spin I by an isotropic hyperfine interaction.

    Angular frequencies are in rad/s and gyromagnetic ratios in rad/s/T.
    """

    electron_spin: float = 0.5
    nuclear_spin: float = 4.5
    hyperfine_A: float = HYPERFINE_A
    gamma_e: float = GAMMA_E
    include_nuclear_zeeman: bool = False
    gamma_n: float = GAMMA_N_BI

    def __post_init__(self) -> None:
        check_finite(hyperfine_A=self.hyperfine_A, gamma_e=self.gamma_e, gamma_n=self.gamma_n)
        if self.hyperfine_A <= 0 or self.gamma_e <= 0:
            raise ValidationError("hyperfine_A and gamma_e must be > 0")
        for name in ("electron_spin", "nuclear_spin"):
            j = getattr(self, name)
            if j <= 0 or abs(2 * j - round(2 * j)) > 1e-12:
                raise ValidationError(f"'{name}' must be a positive half-integer, got {j}")

    @property
    def dim(self) -> int:
        return int(round((2 * self.electron_spin + 1) * (2 * self.nuclear_spin + 1)))

    @property
    def f_max(self) -> float:
        return self.electron_spin + self.nuclear_spin

    @property
    def zero_field_splitting(self) -> float:
        """(I + 1/2) A, the F = I +- 1/2 gap at B0 = 0 for S = 1/2."""
        return (self.nuclear_spin + 0.5) * self.hyperfine_A


@dataclass(frozen=True, eq=False)
class EnergyLevels:
    field_B0: float
    energies: torch.Tensor
    eigenvectors: torch.Tensor
    system: Optional[SpinSystem] = None
    delta_A: float = 0.0
    m_f: Optional[torch.Tensor] = None
    f_label: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return int(self.energies.shape[0])

    def label_index(self) -> Dict[Tuple[float, float], int]:
        if self.m_f is None or self.f_label is None:
            raise ValidationError("levels carry no (F, mF) labels, see hamiltonian_levels")
        return {
            (float(f), float(m)): k
            for k, (f, m) in enumerate(zip(self.f_label.tolist(), self.m_f.tolist()))
        }


class TransitionLabel(NamedTuple):
    f_low: float
    m_low: float
    f_high: float
    m_high: float

    def __str__(self) -> str:
        return f"|{self.f_low:g},{self.m_low:+g}>-|{self.f_high:g},{self.m_high:+g}>"


class Transition(NamedTuple):
    transition_id: int
    level_low: int
    level_high: int
    frequency: float
    sx_matrix_element: float
    dfreq_dA: float
    label: TransitionLabel
    multiplicity: int = 1


@dataclass(frozen=True, eq=False)
class TransitionTable:
    entries: List[Transition]
    levels: EnergyLevels
    threshold: float

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):  # type: ignore[no-untyped-def]
        return iter(self.entries)

    def __getitem__(self, k: int) -> Transition:
        return self.entries[k]

    def frequency_of(self, label: TransitionLabel) -> float:
        """Transition frequency of `label` from the stored levels, listed or not."""
        index = self.levels.label_index()
        try:
            low = index[(label.f_low, label.m_low)]
            high = index[(label.f_high, label.m_high)]
        except KeyError:
            raise NotFoundError(f"no level pair {label} at B0={self.levels.field_B0}")
        return float(self.levels.energies[high] - self.levels.energies[low])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "transition_id": [t.transition_id for t in self.entries],
                "B0_T": [self.levels.field_B0] * len(self.entries),
                "freq_Hz": [t.frequency / TWO_PI for t in self.entries],
                "sx_elem": [t.sx_matrix_element for t in self.entries],
                "dfreq_dA": [t.dfreq_dA for t in self.entries],
            }
        )


def build_hamiltonian(sys: SpinSystem, B0: float, delta_A: float = 0.0) -> torch.Tensor:
    """
    Spin Hamiltonian H/hbar = gamma_e B0 Sz + (A + dA) S.I [- gamma_n B0 Iz] in rad/s.

    The static field is along z; the matrix is written in the product basis |mS> x |mI>
    with both projections in descending order.

    Args:
        sys (SpinSystem): spin parameters.
        B0 (float): static field in tesla, >= 0.
        delta_A (float): hyperfine shift in rad/s (strain), A + delta_A > 0.

    Returns:
        torch.Tensor: Hermitian (dim, dim) complex128 matrix.

    Examples:
        ```python exec="on" source="above" result="json"
        from esrtwin.core.hamiltonian import SpinSystem, build_hamiltonian
        H = build_hamiltonian(SpinSystem(), 1e-3)
        print(H.shape)  # torch.Size([20, 20])
        ```
    """
    check_finite(B0=B0, delta_A=delta_A)
    if B0 < 0:
        raise ValidationError(f"B0 must be >= 0, got {B0}")
    a = sys.hyperfine_A + delta_A
    if a <= 0:
        raise ValidationError(f"A + delta_A must be > 0, got {a}")
    electron, nuclear = product_operators(sys.electron_spin, sys.nuclear_spin)
    H = sys.gamma_e * B0 * electron[2] + a * s_dot_i(sys.electron_spin, sys.nuclear_spin)
    if sys.include_nuclear_zeeman:
        H = H - sys.gamma_n * B0 * nuclear[2]
    return H


def _fix_phase(vectors: torch.Tensor) -> torch.Tensor:
    mags = torch.abs(vectors)
    # first component within rounding of the column maximum
    lead = torch.argmax((mags >= mags.max(dim=0).values - 1e-12).to(torch.int32), dim=0)
    pivots = vectors[lead, torch.arange(vectors.shape[1])]
    return vectors * (pivots.conj() / torch.abs(pivots))


def eigensystem(
    H: torch.Tensor, tie_breaker: Optional[torch.Tensor] = None, field_B0: float = float("nan")
) -> EnergyLevels:
    """
    Exact diagonalization with a deterministic ordering.

    Energies come out ascending. Inside a degenerate cluster (relative gap below 1e-9 of the
    spectral radius) the eigenvectors are rotated to diagonalize `tie_breaker` and sorted by
    its eigenvalue ascending; without a tie breaker they are sorted by the index of their
    dominant product-basis component. Each eigenvector's largest component is made real
    and positive.

    Args:
        H (torch.Tensor): Hermitian matrix.
        tie_breaker (torch.Tensor, optional): Hermitian operator commuting with H, e.g. Fz.
        field_B0 (float): field recorded on the result.

    Returns:
        EnergyLevels: energies and unitary eigenvector matrix (columns).
    """
    if not is_hermitian(H):
        raise ValidationError("eigensystem needs a Hermitian matrix")
    H = H.to(torch.cdouble)
    if is_real(H):
        evals, evecs = torch.linalg.eigh(H.real)
        evecs = evecs.to(torch.cdouble)
    else:
        evals, evecs = torch.linalg.eigh(H)

    scale = float(torch.max(torch.abs(evals))) if evals.numel() else 0.0
    tol = DEGENERACY_RTOL * max(scale, 1e-300)
    start = 0
    n = evals.shape[0]
    while start < n:
        stop = start + 1
        while stop < n and float(evals[stop] - evals[stop - 1]) <= tol:
            stop += 1
        if stop - start > 1:
            block = evecs[:, start:stop]
            if tie_breaker is not None:
                sub = block.conj().T @ tie_breaker.to(torch.cdouble) @ block
                _, u = torch.linalg.eigh(0.5 * (sub + sub.conj().T))
                block = block @ u
            else:
                lead = torch.argmax(torch.abs(block), dim=0)
                block = block[:, torch.argsort(lead)]
            evecs[:, start:stop] = block
        start = stop
    return EnergyLevels(field_B0=field_B0, energies=evals, eigenvectors=_fix_phase(evecs))


def _label_levels(levels: EnergyLevels, sys: SpinSystem) -> Tuple[torch.Tensor, torch.Tensor]:
    fz = total_fz(sys.electron_spin, sys.nuclear_spin)
    v = levels.eigenvectors
    m_f = torch.round(2 * torch.real(torch.sum(v.conj() * (fz @ v), dim=0))) / 2
    f_label = torch.empty_like(m_f)
    for m in torch.unique(m_f).tolist():
        idx = torch.nonzero(m_f == m).flatten()
        # highest energy in an mF block continues the largest F
        order = idx[torch.argsort(levels.energies[idx], descending=True)]
        for rank, k in enumerate(order.tolist()):
            f_label[k] = sys.f_max - rank
    return m_f, f_label


def hamiltonian_levels(sys: SpinSystem, B0: float, delta_A: float = 0.0) -> EnergyLevels:
    """Diagonalize the donor Hamiltonian and attach (F, mF) labels to every level."""
    H = build_hamiltonian(sys, B0, delta_A)
    fz = total_fz(sys.electron_spin, sys.nuclear_spin)
    levels = eigensystem(H, tie_breaker=fz, field_B0=B0)
    m_f, f_label = _label_levels(levels, sys)
    return EnergyLevels(
        field_B0=B0,
        energies=levels.energies,
        eigenvectors=levels.eigenvectors,
        system=sys,
        delta_A=delta_A,
        m_f=m_f,
        f_label=f_label,
    )


def breit_rabi(sys: SpinSystem, B0: float) -> torch.Tensor:
    """
    Closed-form energies of the S = 1/2 hyperfine Hamiltonian, ascending, in rad/s.

    Args:
        sys (SpinSystem): spin parameters, electron_spin must be 1/2.
        B0 (float): static field in tesla.

    Returns:
        torch.Tensor: the 2(2I+1) energies.
    """
    if abs(sys.electron_spin - 0.5) > 1e-12:
        raise ValidationError("breit_rabi needs electron_spin = 1/2")
    check_finite(B0=B0)
    i = sys.nuclear_spin
    a = sys.hyperfine_A
    we = sys.gamma_e * B0
    wn = sys.gamma_n * B0 if sys.include_nuclear_zeeman else 0.0
    top = i + 0.5
    energies = [
        -we / 2 + wn * i + a * i / 2,
        we / 2 - wn * i + a * i / 2,
    ]
    for k in range(1, int(round(2 * top))):
        m = -top + k
        root = 0.5 * np.sqrt((we + wn) ** 2 + 2 * a * m * (we + wn) + (a * top) ** 2)
        centre = -a / 4 - wn * m
        energies.extend([centre + root, centre - root])
    return torch.sort(torch.tensor(energies, dtype=torch.double)).values


def _level_frequency(levels: EnergyLevels, label: TransitionLabel) -> float:
    index = levels.label_index()
    low, high = index[(label.f_low, label.m_low)], index[(label.f_high, label.m_high)]
    return float(levels.energies[high] - levels.energies[low])


def sx_matrix(levels: EnergyLevels) -> torch.Tensor:
    sys = levels.system or SpinSystem()
    electron, _ = product_operators(sys.electron_spin, sys.nuclear_spin)
    v = levels.eigenvectors
    return v.conj().T @ electron[0] @ v


def sx_sum_rule(levels: EnergyLevels) -> float:
    """Sum of |<i|Sx|j>|^2 over all ordered level pairs; equals tr(Sx^2)."""
    return float(torch.sum(torch.abs(sx_matrix(levels)) ** 2))


def transitions(
    levels: EnergyLevels,
    threshold: float = 0.05,
    merge_rtol: float = 1e-9,
    min_frequency: Optional[float] = None,
) -> TransitionTable:
    """
    ESR-allowed transitions: level pairs with |<i|Sx|j>| >= threshold in the microwave band.

    The band starts at `min_frequency`, by default half the zero-field splitting, which
    drops the low-frequency transitions inside one hyperfine multiplet.

    Pairs on the same line, i.e. with equal (F_low, F_high, mF_low + mF_high) and
    frequencies equal to `merge_rtol`, are reported once through the member with the
    largest matrix element; `multiplicity` counts the members. dfreq_dA comes from a
    central difference with step 1e-6 A.

    Args:
        levels (EnergyLevels): labelled levels from hamiltonian_levels.
        threshold (float): minimum |Sx| matrix element, in (0, 0.5).
        merge_rtol (float): relative frequency tolerance for merging members of a line.
        min_frequency (float, optional): lower edge of the band in rad/s.

    Returns:
        TransitionTable: entries sorted by ascending frequency.
    """
    if not 0 < threshold < 0.5:
        raise ValidationError(f"threshold must lie in (0, 0.5), got {threshold}")
    sys = levels.system
    if sys is None or levels.m_f is None or levels.f_label is None:
        raise ValidationError("transitions needs labelled levels (see hamiltonian_levels)")

    sx = torch.abs(sx_matrix(levels))
    e = levels.energies
    floor = DEGENERACY_RTOL * float(torch.max(torch.abs(e)))
    if min_frequency is None:
        min_frequency = 0.5 * sys.zero_field_splitting
    floor = max(floor, min_frequency)
    step = FD_STEP * sys.hyperfine_A
    plus = hamiltonian_levels(sys, levels.field_B0, levels.delta_A + step)
    minus = hamiltonian_levels(sys, levels.field_B0, levels.delta_A - step)

    groups: Dict[Tuple[float, float, float], List[Transition]] = {}
    n = len(levels)
    for lo in range(n):
        for hi in range(lo + 1, n):
            freq = float(e[hi] - e[lo])
            elem = float(sx[lo, hi])
            if freq <= floor or elem < threshold:
                continue
            label = TransitionLabel(
                float(levels.f_label[lo]),
                float(levels.m_f[lo]),
                float(levels.f_label[hi]),
                float(levels.m_f[hi]),
            )
            slope = (_level_frequency(plus, label) - _level_frequency(minus, label)) / (2 * step)
            key = (label.f_low, label.f_high, label.m_low + label.m_high)
            groups.setdefault(key, []).append(Transition(-1, lo, hi, freq, elem, slope, label))

    lines: List[Transition] = []
    for members in groups.values():
        members.sort(key=lambda t: t.frequency)
        cluster = [members[0]]
        for t in members[1:] + [None]:  # type: ignore[list-item]
            gap = None if t is None else t.frequency - cluster[-1].frequency
            close = gap is not None and gap <= merge_rtol * t.frequency
            if close:
                cluster.append(t)
                continue
            best = max(cluster, key=lambda c: c.sx_matrix_element)
            lines.append(best._replace(multiplicity=len(cluster)))
            if t is not None:
                cluster = [t]
    lines.sort(key=lambda t: (t.frequency, t.level_low))
    entries = [t._replace(transition_id=k) for k, t in enumerate(lines)]
    return TransitionTable(entries=entries, levels=levels, threshold=threshold)


TableBuilder = Callable[[float], TransitionTable]


def default_table_builder(
    sys: SpinSystem, threshold: float = 0.05, delta_A: float = 0.0
) -> TableBuilder:
    def build(B0: float) -> TransitionTable:
        return transitions(hamiltonian_levels(sys, B0, delta_A), threshold)

    return build


def _resolve_label(
    table_builder: TableBuilder, transition_id: Union[int, TransitionLabel], b_ref: float
) -> TransitionLabel:
    if isinstance(transition_id, TransitionLabel):
        return transition_id
    table = table_builder(b_ref)
    try:
        return table.entries[int(transition_id)].label
    except IndexError:
        raise NotFoundError(
            f"transition {transition_id} not in the table at B0={b_ref} ({len(table)} lines)"
        )


def transition_fields(
    table_builder: TableBuilder,
    transition_id: Union[int, TransitionLabel],
    f_target: float,
    b_max: float = 0.05,
    b_min: float = 0.0,
    n_grid: int = 401,
) -> List[float]:
    """Every field in [b_min, b_max] where the transition frequency equals f_target (rad/s)."""
    label = _resolve_label(table_builder, transition_id, max(b_min, 1e-5))

    def mismatch(b: float) -> float:
        return table_builder(b).frequency_of(label) - f_target

    grid = np.linspace(b_min, b_max, n_grid)
    values = np.array([mismatch(b) for b in grid])
    roots: List[float] = []
    if abs(values[0]) <= ONE_HZ:
        roots.append(float(grid[0]))
    for k in range(n_grid - 1):
        if abs(values[k + 1]) <= ONE_HZ:
            roots.append(float(grid[k + 1]))
            continue
        if abs(values[k]) <= ONE_HZ or values[k] * values[k + 1] > 0:
            continue
        root = brentq(mismatch, grid[k], grid[k + 1], xtol=1e-14, maxiter=200)
        residual = mismatch(root)
        if abs(residual) > ONE_HZ:
            raise NumericalError(
                "root refinement missed the 1 Hz target",
                label=str(label),
                B0=root,
                residual_hz=residual / TWO_PI,
            )
        roots.append(float(root))
    return roots


def transition_field(
    table_builder: TableBuilder,
    transition_id: Union[int, TransitionLabel],
    f_target: float,
    b_max: float = 0.05,
    b_min: float = 0.0,
) -> float:
    """
    Lowest field at which a transition reaches f_target (rad/s), to within 1 Hz.

    The transition is followed through its (F, mF) label, so crossings with other lines
    do not confuse it. An int `transition_id` indexes the table at B0 = 10 uT.

    Args:
        table_builder (Callable): B0 -> TransitionTable.
        transition_id (int | TransitionLabel): which transition.
        f_target (float): target angular frequency.
        b_max (float): upper end of the search range, tesla. Defaults to 50 mT.
        b_min (float): lower end of the search range, tesla.

    Returns:
        float: B0 in tesla.
    """
    roots = transition_fields(table_builder, transition_id, f_target, b_max, b_min)
    if not roots:
        raise NotFoundError(
            "transition never reaches the target frequency",
            transition=str(transition_id),
            f_target_hz=f_target / TWO_PI,
            b_range=(b_min, b_max),
        )
    logger.debug(
        "transition %s reaches %.6g Hz at %.6g T", transition_id, f_target / TWO_PI, roots[0]
    )
    return roots[0]
