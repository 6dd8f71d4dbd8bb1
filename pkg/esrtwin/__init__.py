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

__version__ = "0.1.0"

from esrtwin.config import ExperimentConfig, load_config
from esrtwin.core.detection import NoiseModel, add_noise, echo_integral, phase_cycle
from esrtwin.core.dynamics import SimulationOptions, simulate, simulate_cycled
from esrtwin.core.hamiltonian import SpinSystem, hamiltonian_levels, transition_field, transitions
from esrtwin.core.resonator import ResonatorModel, coupling_strength, field_map, fit_s11
from esrtwin.core.sample import SpinEnsemble, build_ensemble, implant_profile, strain_analytic
from esrtwin.core.sequences import PulseSequence, build_cpmg, build_hahn, build_sequence
from esrtwin.errors import EsrTwinError
from esrtwin.io.records import TraceRecord
