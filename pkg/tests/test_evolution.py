from __future__ import annotations

import math
import random

import numpy as np
import pytest
import torch

from esrtwin.core.utils import blocked_draw, counter_rng, tree_sum
from esrtwin.errors import ValidationError
from esrtwin.modules import CavityBlochEvolution, bloch_excess, is_hermitian, is_real

random.seed(0)
np.random.seed(0)
torch.manual_seed(0)
torch.use_deterministic_algorithms(not torch.cuda.is_available())

KAPPA = 2 * math.pi * 332e3
KAPPA_EXT = KAPPA * 8 / 11


def evolution(n_packets: int = 3, s_eq: float = -0.5) -> CavityBlochEvolution:
    g = 2 * math.pi * 1e3 * (1 + torch.rand(n_packets, dtype=torch.double))
    return CavityBlochEvolution(
        g=g,
        detuning=2 * math.pi * 1e5 * torch.randn(n_packets, dtype=torch.double),
        weight=torch.ones(n_packets, dtype=torch.double),
        gamma1=1e2 * torch.rand(n_packets, dtype=torch.double),
        gamma2=1e3 * (1 + torch.rand(n_packets, dtype=torch.double)),
        kappa=KAPPA,
        kappa_ext=KAPPA_EXT,
        s_eq=s_eq,
    )


def test_init_state() -> None:
    evo = evolution(4)
    state = evo.init_state()
    alpha, s_minus, s_z = evo.split(state)
    assert state.dtype == torch.cdouble and state.shape == (9,)
    assert alpha == 0 and torch.all(s_minus == 0)
    assert torch.all(s_z == -0.5)
    assert "n_packets=4" in repr(evo)


def test_empty_cavity_rings_up() -> None:
    evo = evolution(0)
    beta = 6e4
    h, n = 1e-8, 200
    state = evo(evo.init_state(), beta, h, n)
    alpha_ss = 2 * math.sqrt(KAPPA_EXT) * beta / KAPPA
    expected = alpha_ss * (1 - math.exp(-KAPPA * h * n / 2))
    assert math.isclose(state[0].real.item(), expected, rel_tol=1e-9)
    assert abs(state[0].imag.item()) < 1e-12 * alpha_ss
    out = evo.output(state, beta)
    assert math.isclose(out.real, math.sqrt(KAPPA_EXT) * expected - beta, rel_tol=1e-9)


@pytest.mark.parametrize("phase", [0.0, math.pi / 2, 1.234])
def test_rotation_keeps_bloch_length(phase: float) -> None:
    evo = evolution(3)
    state = evo.rotate(evo.init_state(), 1.0, phase)
    state = evo.rotate(state, 0.7, phase + 0.3)
    _, s_minus, s_z = evo.split(state)
    length = torch.abs(s_minus) ** 2 + s_z.real**2
    assert torch.allclose(length, torch.full_like(length, 0.25), rtol=0.0, atol=1e-14)


def test_rotation_convention() -> None:
    evo = evolution(1)
    half = evo.rotate(evo.init_state(), math.pi / 2, 0.0)
    _, s_minus, s_z = evo.split(half)
    # a phase-0 drive turns s- toward -i/2
    assert torch.allclose(s_minus, torch.tensor([-0.5j], dtype=torch.cdouble), atol=1e-15)
    assert abs(s_z.real.item()) < 1e-15
    flipped = evo.rotate(evo.init_state(), math.pi, 0.0)
    assert math.isclose(evo.split(flipped)[2].real.item(), 0.5, rel_tol=1e-14)


def test_drive_matches_rotation_sign() -> None:
    evo = evolution(1)
    d = evo.rhs(evo.init_state() + torch.tensor([1.0, 0, 0], dtype=torch.cdouble), 0j)
    # with alpha > 0, s- leaves the ground state along -i
    assert d[1].real.item() == 0.0
    assert d[1].imag.item() < 0


def test_bloch_generator_matches_rhs() -> None:
    evo = evolution(5)
    alpha = 0.3 - 0.7j
    state = evo.init_state()
    p = evo.n_packets
    state[0] = alpha
    state[1 : 1 + p] = 0.2 * torch.randn(p, dtype=torch.cdouble)
    state[1 + p :] = (0.4 * torch.rand(p, dtype=torch.double) - 0.2).to(torch.cdouble)
    d = evo.rhs(state, 0j)
    _, s_minus, s_z = evo.split(state)
    vec = torch.stack(
        [s_minus.real, s_minus.imag, s_z.real, torch.ones(p, dtype=torch.double)], dim=-1
    )
    A = evo.bloch_generator(alpha)
    flow = torch.einsum("pij,pj->pi", A, vec)
    assert torch.allclose(flow[:, 0], d[1 : 1 + p].real, rtol=1e-12, atol=1e-9)
    assert torch.allclose(flow[:, 1], d[1 : 1 + p].imag, rtol=1e-12, atol=1e-9)
    assert torch.allclose(flow[:, 2], d[1 + p :].real, rtol=1e-12, atol=1e-9)


def test_free_precession_propagator() -> None:
    delta = 2 * math.pi * 3e4
    evo = CavityBlochEvolution(
        g=torch.zeros(1, dtype=torch.double),
        detuning=torch.tensor([delta], dtype=torch.double),
        weight=torch.ones(1, dtype=torch.double),
        gamma1=torch.zeros(1, dtype=torch.double),
        gamma2=torch.zeros(1, dtype=torch.double),
        kappa=KAPPA,
        kappa_ext=KAPPA_EXT,
    )
    start = evo.rotate(evo.init_state(), math.pi / 2, 0.0)
    t = 7e-6
    step = torch.linalg.matrix_exp(evo.bloch_generator(0j) * t)
    end = evo.propagate_spins(start, step)
    expected = start[1] * complex(math.cos(delta * t), -math.sin(delta * t))
    assert torch.allclose(end[1], expected, atol=1e-14)
    assert end[0] == start[0]


def test_rk4_conserves_length_without_decay() -> None:
    evo = CavityBlochEvolution(
        g=torch.tensor([2 * math.pi * 5e3], dtype=torch.double),
        detuning=torch.zeros(1, dtype=torch.double),
        weight=torch.ones(1, dtype=torch.double),
        gamma1=torch.zeros(1, dtype=torch.double),
        gamma2=torch.zeros(1, dtype=torch.double),
        kappa=KAPPA,
        kappa_ext=KAPPA_EXT,
    )
    state = evo(evo.init_state(), 6e4, 1e-9, 5000)
    _, s_minus, s_z = evo.split(state)
    assert abs(float(bloch_excess(s_minus, s_z))) < 1e-10
    assert s_z.imag.item() == 0.0


def test_bloch_excess_and_matrix_checks() -> None:
    assert float(bloch_excess(torch.zeros(0, dtype=torch.cdouble), torch.zeros(0))) == 0.0
    s_minus = torch.tensor([0.5 + 0j, 0.1j], dtype=torch.cdouble)
    s_z = torch.tensor([0.2, 0.0], dtype=torch.cdouble)
    assert math.isclose(float(bloch_excess(s_minus, s_z)), 0.04, rel_tol=1e-12)
    assert is_real(torch.eye(3, dtype=torch.cdouble))
    assert not is_real(torch.tensor([[0, 1j], [-1j, 0]], dtype=torch.cdouble))
    assert is_hermitian(torch.tensor([[0, 1j], [-1j, 0]], dtype=torch.cdouble))
    assert not is_hermitian(torch.tensor([[0, 1j], [1j, 0]], dtype=torch.cdouble))


def test_tree_sum_is_order_fixed() -> None:
    x = torch.randn(37, dtype=torch.cdouble)
    assert torch.allclose(tree_sum(x), x.sum(), rtol=1e-12)
    assert tree_sum(x) == tree_sum(x.clone())
    assert tree_sum(torch.zeros(0, dtype=torch.cdouble)) == 0


def test_counter_rng_streams() -> None:
    a = counter_rng(7, 0).standard_normal(5)
    assert np.array_equal(a, counter_rng(7, 0).standard_normal(5))
    assert not np.array_equal(a, counter_rng(7, 1).standard_normal(5))
    with pytest.raises(ValidationError):
        counter_rng(-1)


def test_blocked_draw_is_prefix_stable() -> None:
    def draw(rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.standard_normal(size)

    long = blocked_draw(3, 10, draw, block=4)
    short = blocked_draw(3, 6, draw, block=4)
    assert len(long) == 10
    assert np.array_equal(long[:4], short[:4])
    assert len(blocked_draw(3, 0, draw)) == 0
