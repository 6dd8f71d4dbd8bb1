from __future__ import annotations

import math
from typing import Tuple

import torch

from esrtwin.core.utils import tree_sum


class CavityBlochEvolution(torch.nn.Module):
    def __init__(
        self,
        g: torch.Tensor,
        detuning: torch.Tensor,
        weight: torch.Tensor,
        gamma1: torch.Tensor,
        gamma2: torch.Tensor,
        kappa: float,
        kappa_ext: float,
        s_eq: float = -0.5,
    ):
        """
        Mean-field cavity + spin-packet equations in the frame rotating at the cavity frequency.

        The state is packed as [alpha, s_minus(P), s_z(P)] in one complex128 tensor.

        Args:
            g (torch.Tensor): per-packet coupling g_j, rad/s.
            detuning (torch.Tensor): per-packet detuning delta_j, rad/s.
            weight (torch.Tensor): donors represented by each packet.
            gamma1 (torch.Tensor): longitudinal relaxation rate Gamma1_j, 1/s.
            gamma2 (torch.Tensor): total transverse decay 1/T2_j + Gamma1_j/2, 1/s.
            kappa (float): total cavity energy decay rate, 1/s.
            kappa_ext (float): coupling rate to the line, 1/s.
            s_eq (float): thermal equilibrium s_z.
        """
        super().__init__()
        self.g: torch.Tensor
        self.detuning: torch.Tensor
        self.wg: torch.Tensor
        self.gamma1: torch.Tensor
        self.gamma2: torch.Tensor
        for name, value in (
            ("g", g),
            ("detuning", detuning),
            ("wg", weight * g),
            ("gamma1", gamma1),
            ("gamma2", gamma2),
        ):
            self.register_buffer(name, value.to(torch.cdouble))
        self.kappa = float(kappa)
        self.kappa_ext = float(kappa_ext)
        self.sqrt_kappa_ext = math.sqrt(kappa_ext)
        self.s_eq = float(s_eq)
        self.n_packets = int(g.shape[0])

    def extra_repr(self) -> str:
        return f"n_packets={self.n_packets}, kappa={self.kappa:.6g}, kappa_ext={self.kappa_ext:.6g}"

    def init_state(self, device: str = "cpu") -> torch.Tensor:
        state = torch.zeros(1 + 2 * self.n_packets, dtype=torch.cdouble, device=device)
        state[1 + self.n_packets :] = self.s_eq
        return state

    def split(self, state: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        p = self.n_packets
        return state[0], state[1 : 1 + p], state[1 + p :]

    def rhs(self, state: torch.Tensor, drive: complex) -> torch.Tensor:
        alpha, s_minus, s_z = self.split(state)
        source = tree_sum(self.wg * s_minus)
        d_alpha = -0.5 * self.kappa * alpha + self.sqrt_kappa_ext * drive - 1j * source
        d_minus = -(self.gamma2 + 1j * self.detuning) * s_minus + 2j * self.g * alpha * s_z
        d_z = -self.gamma1 * (s_z - self.s_eq) + 1j * self.g * (
            alpha.conj() * s_minus - alpha * s_minus.conj()
        )
        return torch.cat([d_alpha.reshape(1), d_minus, d_z])

    def apply(self, state: torch.Tensor, drive: complex, h: float, n_steps: int) -> torch.Tensor:
        """
        Advance the state by n_steps fixed RK4 steps of size h under a constant drive.

        Args:
            state (torch.Tensor): packed state.
            drive (complex): beta * exp(i phi), s^-1/2.
            h (float): step size, s.
            n_steps (int): number of steps.

        Returns:
            torch.Tensor: the evolved state.
        """
        _state = state.clone()
        for _ in range(n_steps):
            k1 = self.rhs(_state, drive)
            k2 = self.rhs(_state + h / 2 * k1, drive)
            k3 = self.rhs(_state + h / 2 * k2, drive)
            k4 = self.rhs(_state + h * k3, drive)
            _state = _state + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        # s_z is real; drop the round-off imaginary part
        p = self.n_packets
        _state[1 + p :] = _state[1 + p :].real.to(torch.cdouble)
        return _state

    def forward(self, state: torch.Tensor, drive: complex, h: float, n_steps: int) -> torch.Tensor:
        return self.apply(state, drive, h, n_steps)

    def output(self, state: torch.Tensor, drive: complex) -> complex:
        """Reflected field a_out = sqrt(kappa_ext) alpha - drive."""
        return complex(self.sqrt_kappa_ext * state[0] - drive)

    def adiabatic_alpha(self, state: torch.Tensor, drive: complex) -> torch.Tensor:
        """Cavity field slaved to the drive and the spins, d(alpha)/dt = 0."""
        _, s_minus, _ = self.split(state)
        source = tree_sum(self.wg * s_minus)
        return (2.0 / self.kappa) * (self.sqrt_kappa_ext * drive - 1j * source)

    def bloch_generator(self, alpha: complex) -> torch.Tensor:
        """
        Affine generator (P, 4, 4) on (Re s-, Im s-, s_z, 1) for a fixed cavity field alpha.

        Used to propagate the spins exactly with torch.linalg.matrix_exp when the cavity has
        settled to a constant field.
        """
        p = self.n_packets
        g = self.g.real
        d = self.detuning.real
        g1 = self.gamma1.real
        g2 = self.gamma2.real
        ar, ai = alpha.real, alpha.imag
        A = torch.zeros((p, 4, 4), dtype=torch.double, device=g.device)
        A[:, 0, 0] = -g2
        A[:, 0, 1] = d
        A[:, 0, 2] = -2 * g * ai
        A[:, 1, 0] = -d
        A[:, 1, 1] = -g2
        A[:, 1, 2] = 2 * g * ar
        A[:, 2, 0] = 2 * g * ai
        A[:, 2, 1] = -2 * g * ar
        A[:, 2, 2] = -g1
        A[:, 2, 3] = g1 * self.s_eq
        return A

    def propagate_spins(self, state: torch.Tensor, propagator: torch.Tensor) -> torch.Tensor:
        """Apply a (P, 4, 4) affine propagator to the spin part; alpha is left unchanged."""
        alpha, s_minus, s_z = self.split(state)
        vec = torch.stack(
            [s_minus.real, s_minus.imag, s_z.real, torch.ones_like(s_z.real)], dim=-1
        ).unsqueeze(-1)
        out = torch.bmm(propagator, vec).squeeze(-1)
        new_minus = torch.complex(out[:, 0], out[:, 1])
        new_z = out[:, 2].to(torch.cdouble)
        return torch.cat([alpha.reshape(1), new_minus, new_z])

    def rotate(self, state: torch.Tensor, angle: float, phase: float) -> torch.Tensor:
        """Ideal instantaneous rotation of every packet, as driven by a field of phase `phase`."""
        alpha, s_minus, s_z = self.split(state)
        # Bloch vector with s_minus = sx - i sy; a drive of phase phi turns it about
        # n = (cos phi, -sin phi, 0)
        v = torch.stack([s_minus.real, -s_minus.imag, s_z.real], dim=-1)
        n = torch.tensor(
            [math.cos(phase), -math.sin(phase), 0.0], dtype=torch.double, device=v.device
        ).expand_as(v)
        c, s = math.cos(angle), math.sin(angle)
        dot = (v * n).sum(dim=-1, keepdim=True)
        v = v * c + torch.cross(n, v, dim=-1) * s + n * dot * (1 - c)
        new_minus = torch.complex(v[:, 0], -v[:, 1])
        return torch.cat([alpha.reshape(1), new_minus, v[:, 2].to(torch.cdouble)])
