# Copyright 2024 esrtwin developers

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
from __future__ import annotations

from functools import lru_cache
from typing import Tuple, Union

import torch


def _dim(j: float) -> int:
    d = int(round(2 * j + 1))
    if d < 1 or abs(d - (2 * j + 1)) > 1e-9:
        raise ValueError(f"'{j}' is not a valid angular momentum quantum number")
    return d


def m_values(j: float) -> torch.Tensor:
    """Projection quantum numbers j, j-1, ..., -j (descending, the basis order used here)."""
    return j - torch.arange(_dim(j), dtype=torch.double)


def jp(j: float, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    """Raising operator J+ in the |j, m> basis ordered by descending m."""
    m = m_values(j)[1:]
    elems = torch.sqrt(j * (j + 1) - m * (m + 1))
    return torch.diag(elems, diagonal=1).to(torch.cdouble).to(device)


def jx(j: float, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    p = jp(j, device)
    return 0.5 * (p + p.conj().T)


def jy(j: float, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    p = jp(j, device)
    return -0.5j * (p - p.conj().T)


def jz(j: float, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    return torch.diag(m_values(j)).to(torch.cdouble).to(device)


def identity(j: float, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    return torch.eye(_dim(j), dtype=torch.cdouble).to(device)


@lru_cache(maxsize=16)
def product_operators(
    s: float, i: float
) -> Tuple[Tuple[torch.Tensor, ...], Tuple[torch.Tensor, ...]]:
    """Electron and nuclear spin components embedded in the |mS> x |mI> product space.

    Args:
        s (float): electron spin quantum number.
        i (float): nuclear spin quantum number.

    Returns:
        ((Sx, Sy, Sz), (Ix, Iy, Iz)), each of shape ((2s+1)(2i+1), (2s+1)(2i+1)).

    Examples:
        ```python exec="on" source="above" result="json"
        from esrtwin.matrices import product_operators
        (sx, sy, sz), _ = product_operators(0.5, 4.5)
        print(sx.shape)  # torch.Size([20, 20])
        ```
    """
    e_ops = (jx(s), jy(s), jz(s))
    n_ops = (jx(i), jy(i), jz(i))
    one_e, one_n = identity(s), identity(i)
    electron = tuple(torch.kron(op, one_n) for op in e_ops)
    nuclear = tuple(torch.kron(one_e, op) for op in n_ops)
    return electron, nuclear  # type: ignore[return-value]


def s_dot_i(s: float, i: float) -> torch.Tensor:
    electron, nuclear = product_operators(s, i)
    op = electron[0] @ nuclear[0]
    for e_op, n_op in zip(electron[1:], nuclear[1:]):
        op = op + e_op @ n_op
    return op


def total_fz(s: float, i: float) -> torch.Tensor:
    electron, nuclear = product_operators(s, i)
    return electron[2] + nuclear[2]
