from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Any, Dict

import numpy as np
import yaml
from scipy import constants as sc

HBAR = sc.hbar
MU0 = sc.mu_0
TWO_PI = 2.0 * np.pi

CONSTANTS_FILE = Path(__file__).parent / "data" / "constants.yaml"


@lru_cache(maxsize=4)
def load_constants(path: str = str(CONSTANTS_FILE)) -> Dict[str, Any]:
    """Read the versioned key/value constants file.

    Args:
        path (str): location of the YAML file. Defaults to the bundled one.

    Returns:
        Dict[str, Any]: nested mapping section -> key -> value.
    """
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or "version" not in data:
        raise ValueError(f"constants file '{path}' has no 'version' key")
    return data


def constant(section: str, key: str) -> float:
    return float(load_constants()[section][key])


def constants_version() -> int:
    return int(load_constants()["version"])


# Bismuth donor in silicon
HYPERFINE_A = TWO_PI * constant("bismuth", "hyperfine_A_hz")
GAMMA_E = TWO_PI * constant("bismuth", "gamma_e_hz_per_t")
GAMMA_N_BI = TWO_PI * constant("bismuth", "gamma_n_hz_per_t")
DA_DEPS = TWO_PI * constant("bismuth", "dA_deps_hz")

# Silicon host
SI_LATTICE = constant("silicon", "lattice_constant_m")
SI_BULK_MODULUS = constant("silicon", "bulk_modulus_pa")
SI_POISSON = constant("silicon", "poisson_ratio")
GAMMA_SI29 = TWO_PI * constant("silicon", "si29_gamma_hz_per_t")


def film_mismatch_stress() -> float:
    """Biaxial Al film stress from the differential thermal contraction on cooldown, in Pa."""
    mismatch = constant("aluminum", "thermal_contraction") - constant(
        "silicon", "thermal_contraction"
    )
    return constant("aluminum", "youngs_modulus_pa") / (
        1.0 - constant("aluminum", "poisson_ratio")
    ) * mismatch
