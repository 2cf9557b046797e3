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
Configuration
=============

**Module name:** :mod:`icge_align.config`

.. currentmodule:: icge_align.config

The run configuration file is a JSON object with one optional section per
stage. Absent sections and fields take their documented defaults; unknown keys
are rejected.

.. code-block:: json

    {
        "world": {"D": 128, "ambiguity_rate": 0.3},
        "sft": {"steps": 500, "optimizer": "adam"},
        "align": {"group_size": 8}
    }

``model.D`` defaults to ``world.D`` and ``model.vocab_size`` to the size of
the world's token vocabulary.

Classes
-------

.. autosummary::
   DataConfig
   EvalConfig
   Config

Functions
---------

.. autosummary::
   load_config
   config_from_dict
   dump_config

Code details
~~~~~~~~~~~~
"""
from dataclasses import asdict, dataclass, field, fields, replace
import json

from .align import AlignConfig
from .datafactory import FilterThresholds
from .exceptions import ConfigError
from .model import ModelConfig, Tokenizer
from .sft import SftConfig
from .world import WorldConfig


@dataclass(frozen=True)
class DataConfig:
    """Dataset construction settings.

    Args:
        n (int): number of records
        corruption_rate (float): fraction of deliberately corrupted targets
        kind_mix (dict[str, float] or None): task-kind distribution, uniform when ``None``
    """

    n: int = 1000
    corruption_rate: float = 0.2
    kind_mix: dict = None

    def validate(self):
        # pylint: disable=missing-function-docstring
        if self.n < 1:
            raise ConfigError(f"data.n must be positive, got {self.n}.")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError(f"data.corruption_rate must lie in [0, 1], got {self.corruption_rate}.")


@dataclass(frozen=True)
class EvalConfig:
    """Benchmark settings.

    Args:
        steps (int): ode steps at evaluation
        suite_size (int): number of benchmark tasks
        use_cot (bool): condition generation on a sampled trace
    """

    steps: int = 50
    suite_size: int = 100
    use_cot: bool = True

    def validate(self):
        # pylint: disable=missing-function-docstring
        if self.steps < 1:
            raise ConfigError(f"eval.steps must be positive, got {self.steps}.")
        if self.suite_size < 1:
            raise ConfigError(f"eval.suite_size must be positive, got {self.suite_size}.")


@dataclass(frozen=True)
class Config:
    """Complete run configuration."""

    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    filter: FilterThresholds = field(default_factory=FilterThresholds)
    sft: SftConfig = field(default_factory=SftConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        """Validate every section and the cross-section constraints.

        Raises:
            ConfigError: naming the offending field or fields
        """
        for f in fields(self):
            getattr(self, f.name).validate()
        if self.world.D != self.model.D:
            raise ConfigError(f"world.D ({self.world.D}) and model.D ({self.model.D}) must be equal.")
        vocab = len(Tokenizer.from_world(self.world))
        if self.model.vocab_size != vocab:
            raise ConfigError(
                f"model.vocab_size ({self.model.vocab_size}) does not match the world vocabulary "
                f"derived from world ({vocab} tokens)."
            )


_SECTIONS = {f.name: f.default_factory for f in fields(Config)}


def _coerce(section, f, value):
    key = f"{section}.{f.name}"
    kind = f.type
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}.")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}.")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}.")
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}.")
    elif kind is dict:
        if value is not None and not isinstance(value, dict):
            raise ConfigError(f"{key} must be an object or null, got {value!r}.")
    return value


def config_from_dict(data):
    """Build and validate a :class:`Config` from a parsed JSON object.

    Raises:
        ConfigError: for unknown keys, ill-typed values or inconsistent fields
    """
    if not isinstance(data, dict):
        raise ConfigError("The configuration must be a JSON object.")
    sections = {}
    for name, values in data.items():
        if name not in _SECTIONS:
            raise ConfigError(f"Unknown configuration section {name!r}.")
        if not isinstance(values, dict):
            raise ConfigError(f"Configuration section {name!r} must be an object.")
        known = {f.name: f for f in fields(_SECTIONS[name])}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"Unknown configuration key {name}.{key}.")
            kwargs[key] = _coerce(name, known[key], value)
        sections[name] = kwargs

    world = WorldConfig(**sections.get("world", {}))
    model_kwargs = sections.get("model", {})
    model = ModelConfig(**model_kwargs)
    if "D" not in model_kwargs:
        model = replace(model, D=world.D)
    if not model_kwargs.get("vocab_size"):
        world.validate()
        model = replace(model, vocab_size=len(Tokenizer.from_world(world)))

    cfg = Config(
        world=world,
        model=model,
        **{name: _SECTIONS[name](**sections.get(name, {})) for name in ("data", "filter", "sft", "align", "eval")},
    )
    cfg.validate()
    return cfg


def load_config(path):
    """Read a configuration file.

    Args:
        path (str): JSON file

    Returns:
        Config: the validated configuration

    Raises:
        ConfigError: for unreadable files, JSON syntax errors (with line and
            column) and invalid content
    """
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read configuration {path}: {e.strerror}.") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        return config_from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def dump_config(cfg):
    """Canonical JSON text of a configuration; :func:`load_config` reads it back unchanged."""
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"
