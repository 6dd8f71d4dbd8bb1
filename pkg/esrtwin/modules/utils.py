from __future__ import annotations

import torch


def is_real(H: torch.Tensor) -> bool:
    """
    Check if the matrix H has no imaginary part.

    Args:
        H (torch.Tensor): The matrix (real or complex).

    Returns:
        bool: True if every imaginary entry is exactly zero.

    Examples:
        ```python exec="on" source="above" result="json"
        import torch
        from esrtwin.modules.utils import is_real

        H = torch.tensor([[1, 0], [0, 2]], dtype=torch.cdouble)
        print(is_real(H))  # True
        ```
    """
    if not torch.is_complex(H):
        return True
    return len(torch.imag(H).to_sparse().coalesce().values()) == 0


def is_hermitian(H: torch.Tensor, rtol: float = 1e-10) -> bool:
    """
    Check ||H - H^dagger|| <= rtol * ||H|| (Frobenius norms).

    Args:
        H (torch.Tensor): square matrix.
        rtol (float): relative tolerance.

    Returns:
        bool: True if H is Hermitian to the tolerance.
    """
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        return False
    scale = torch.linalg.norm(H)
    diff = torch.linalg.norm(H - H.conj().T)
    return bool(diff <= rtol * scale) or bool(scale == 0)


def bloch_excess(s_minus: torch.Tensor, s_z: torch.Tensor) -> torch.Tensor:
    """Largest |s-|^2 + s_z^2 - 1/4 over packets; <= 0 inside the Bloch ball."""
    if s_minus.numel() == 0:
        return torch.zeros((), dtype=torch.double)
    return torch.max(torch.abs(s_minus) ** 2 + s_z.real**2 - 0.25)
