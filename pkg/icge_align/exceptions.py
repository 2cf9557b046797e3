# Copyright 2026 The ICGE-Align Authors.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
Exceptions
==========

**Module name:** :mod:`icge_align.exceptions`

.. currentmodule:: icge_align.exceptions

Every error raised on purpose by ICGE-Align derives from :class:`IcgeError`,
which is what the command line maps to exit code 1.

Classes
-------

.. autosummary::
   IcgeError
   InvalidTrace
   InvalidSpec
   TaskError
   NumericalFault
   CheckpointError
   DatasetFormatError
   ConfigError
   DegenerateEmbeddingWarning

Code details
~~~~~~~~~~~~
"""


class IcgeError(Exception):
    """Base class for all ICGE-Align errors."""


class InvalidTrace(IcgeError):
    """Raised when a reasoning trace violates the IC-CoT invariants.

    Args:
        message (str): description of the problem
        report (ValidationReport or None): the validation report, if one was produced
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InvalidSpec(IcgeError):
    """Raised when a scene specification falls outside the world configuration."""


class TaskError(IcgeError):
    """Raised when a task kind cannot be sampled or interpreted under a world configuration."""


class NumericalFault(IcgeError):
    """Raised when a loss, ratio or trajectory becomes non-finite or diverges."""


class CheckpointError(IcgeError):
    """Raised when a checkpoint file cannot be read or does not match its header."""


class DatasetFormatError(IcgeError):
    """Raised for malformed dataset files.

    Args:
        message (str): description of the problem
        path (str): the offending file
        line (int or None): 1-based line number, if known
    """

    def __init__(self, message, path, line=None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class ConfigError(IcgeError):
    """Raised for unreadable or inconsistent configuration."""


class DegenerateEmbeddingWarning(RuntimeWarning):
    """Issued when a cosine similarity is requested for a zero embedding."""
