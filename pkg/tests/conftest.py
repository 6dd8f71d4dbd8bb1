from __future__ import annotations

import math
import random
from typing import Callable

import numpy as np
import pytest
import torch

from esrtwin.core.dynamics import purcell_rate
from esrtwin.core.hamiltonian import SpinSystem
from esrtwin.core.resonator import ResonatorModel
from esrtwin.core.sample import SpinEnsemble

random.seed(42)
np.random.seed(42)
torch.manual_seed(42)
torch.use_deterministic_algorithms(not torch.cuda.is_available())

TWO_PI = 2 * math.pi


def packets(
    g0_hz: np.ndarray,
    detuning_hz: np.ndarray,
    weight: np.ndarray | None = None,
    T1: np.ndarray | float = math.inf,
    T2: np.ndarray | float = 1e9,
) -> SpinEnsemble:
    """Hand-built ensemble; frequencies in Hz, all on transition 0 at the origin."""
    g = TWO_PI * np.atleast_1d(np.asarray(g0_hz, dtype=float))
    n = len(g)
    det = TWO_PI * np.broadcast_to(np.asarray(detuning_hz, dtype=float), (n,)).copy()
    w = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
    return SpinEnsemble(
        g0=g,
        detuning=det,
        weight=w,
        transition_id=np.zeros(n, dtype=int),
        x=np.zeros(n),
        y=np.zeros(n),
        T1=np.broadcast_to(np.asarray(T1, dtype=float), (n,)).copy(),
        T2=np.broadcast_to(np.asarray(T2, dtype=float), (n,)).copy(),
    )


@pytest.fixture
def spin_system() -> SpinSystem:
    return SpinSystem()


@pytest.fixture
def s1() -> ResonatorModel:
    return ResonatorModel.preset("S1")


@pytest.fixture
def uniform_b1() -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """|B1| of 1e-7 T everywhere, skipping the wire quadrature."""
    return lambda x, y: np.full_like(np.asarray(x, dtype=float), 1e-7)


@pytest.fixture
def purcell_packet(s1: ResonatorModel) -> SpinEnsemble:
    """One resonant packet with g0/2pi = 2.7 kHz and its Purcell T1."""
    g0 = TWO_PI * 2.7e3
    return packets(np.array([2.7e3]), 0.0, T1=1.0 / float(purcell_rate(g0, s1.kappa)))
