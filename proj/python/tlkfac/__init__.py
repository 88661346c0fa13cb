# Copyright 2026 The tlkfac Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Two-level Kronecker-factored curvature optimizer for deep MLPs."""

import json as _json

from ._core import (
    ConfigError,
    DimensionError,
    Error,
    InputError,
    IoError,
    Network,
    NumericalError,
    SizeError,
    StateError,
    coarse_fisher,
    dense_kron,
    gen_planted,
    kron_apply,
    kron_elem_sum,
    spd_solve,
    sym_eig,
    tikhonov_pi,
)
from ._core import train as _train


def train(config, write_files=False):
    """Train from a run config given as a dict or JSON text."""
    if not isinstance(config, str):
        config = _json.dumps(config)
    return _train(config, write_files)


__all__ = [
    "ConfigError",
    "DimensionError",
    "Error",
    "InputError",
    "IoError",
    "Network",
    "NumericalError",
    "SizeError",
    "StateError",
    "coarse_fisher",
    "dense_kron",
    "gen_planted",
    "kron_apply",
    "kron_elem_sum",
    "spd_solve",
    "sym_eig",
    "tikhonov_pi",
    "train",
]
