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
Dataset factory
===============

**Module name:** :mod:`icge_align.datafactory`

.. currentmodule:: icge_align.datafactory

Builds training records in stages: references and an instruction are drawn
from an :class:`InstructionSource`, a :class:`ReasoningAnnotator` writes the
trace without seeing any target, and a :class:`TargetRenderer` produces the
target image. Records are scored and then filtered on caption similarity,
visual quality and instruction adherence.

Only oracle implementations of the three stages ship; they sit behind
abstract interfaces so that an external generator can replace any of them.

Classes
-------

.. autosummary::
   DatasetRecord
   FilterThresholds
   FilterReport
   InstructionSource
   ReasoningAnnotator
   TargetRenderer
   OracleInstructionSource
   OracleReasoningAnnotator
   OracleTargetRenderer

Functions
---------

.. autosummary::
   build_records
   filter_dataset
   write_jsonl
   read_jsonl

Code details
~~~~~~~~~~~~
"""
import abc
from dataclasses import dataclass, field
import json
import logging

import numpy as np

from .embed import quality_score, surrogate_reward
from .exceptions import ConfigError, DatasetFormatError, InvalidTrace
from .iccot import ReasoningTrace, validate_trace
from .world import Reference, SceneSpec, TaskKind, get_world

log = logging.getLogger(__name__)

SCORE_RULES = ("caption_sim", "quality", "instruction_score")
CORRUPTIONS = ("mismatch", "noise")


@dataclass
class DatasetRecord:
    """One training record.

    Args:
        id (str): record identifier
        task_kind (TaskKind): task kind
        refs (tuple[Reference]): reference images with their specs
        instruction (str): instruction text
        trace (ReasoningTrace): reasoning trace
        target_image (array[float]): target image vector
        target_spec (SceneSpec): spec the target was rendered from
        scores (dict[str, float]): ``caption_sim``, ``quality`` and ``instruction_score``
        corruption (str or None): injected corruption, ``"mismatch"`` or ``"noise"``
    """

    id: str
    task_kind: TaskKind
    refs: tuple
    instruction: str
    trace: ReasoningTrace
    target_image: np.ndarray
    target_spec: SceneSpec
    scores: dict = field(default_factory=dict)
    corruption: str = None

    @property
    def ref_images(self):
        """list[array[float]]: reference image vectors"""
        return [r.image for r in self.refs]

    @property
    def ref_specs(self):
        """list[SceneSpec]: reference specs"""
        return [r.spec for r in self.refs]

    def to_dict(self):
        """JSON-ready dictionary in the fixed field order."""
        return {
            "id": self.id,
            "task_kind": TaskKind(self.task_kind).value,
            "refs": [{"image": np.asarray(r.image).tolist(), "spec": r.spec.to_dict()} for r in self.refs],
            "instruction": self.instruction,
            "trace": {"out_caption": self.trace.caption, "relations": list(self.trace.relations)},
            "target_image": np.asarray(self.target_image).tolist(),
            "target_spec": self.target_spec.to_dict(),
            "scores": {rule: self.scores[rule] for rule in SCORE_RULES if rule in self.scores},
            "corruption": self.corruption,
        }

    @classmethod
    def from_dict(cls, data):
        """Inverse of :meth:`to_dict`."""
        return cls(
            id=data["id"],
            task_kind=TaskKind(data["task_kind"]),
            refs=tuple(
                Reference(np.array(r["image"], dtype=np.float64), SceneSpec.from_dict(r["spec"])) for r in data["refs"]
            ),
            instruction=data["instruction"],
            trace=ReasoningTrace(data["trace"]["out_caption"], data["trace"]["relations"]),
            target_image=np.array(data["target_image"], dtype=np.float64),
            target_spec=SceneSpec.from_dict(data["target_spec"]),
            scores={k: float(v) for k, v in data["scores"].items()},
            corruption=data["corruption"],
        )


class InstructionSource(abc.ABC):
    """Draws reference images and an instruction for a task kind."""

    @abc.abstractmethod
    def sample(self, kind, rng):
        """Draw the references and instruction of one task.

        Args:
            kind (TaskKind): task kind
            rng (np.random.Generator): random stream

        Returns:
            tuple[tuple[Reference], str]: references and instruction
        """
        raise NotImplementedError


class ReasoningAnnotator(abc.ABC):
    """Writes the reasoning trace of a task from its references and instruction."""

    @abc.abstractmethod
    def annotate(self, kind, refs, instruction):
        """Produce a trace; no target is available at this stage.

        Returns:
            ReasoningTrace: the trace
        """
        raise NotImplementedError


class TargetRenderer(abc.ABC):
    """Produces the target image of a task."""

    @abc.abstractmethod
    def render(self, kind, refs, instruction, trace):
        """Produce the target.

        Returns:
            tuple[array[float], SceneSpec]: the target image and its spec
        """
        raise NotImplementedError


class OracleInstructionSource(InstructionSource):
    """Template instructions over the symbolic world."""

    def __init__(self, world_cfg):
        self.world = get_world(world_cfg)

    def sample(self, kind, rng):
        task = self.world.sample_task(kind, rng)
        return task.refs, task.instruction


class OracleReasoningAnnotator(ReasoningAnnotator):
    """Ground-truth traces from the instruction semantics."""

    def __init__(self, world_cfg):
        self.world = get_world(world_cfg)

    def annotate(self, kind, refs, instruction):
        return self.world.oracle_trace([r.spec for r in refs], instruction, kind)


class OracleTargetRenderer(TargetRenderer):
    """Renders the spec the instruction implies."""

    def __init__(self, world_cfg):
        self.world = get_world(world_cfg)

    def render(self, kind, refs, instruction, trace):
        spec = self.world.interpret(kind, [r.spec for r in refs], instruction).gt_spec
        return self.world.render(spec), spec


def instruction_score(kind, ref_specs, instruction, image, world_cfg):
    """10 times the fraction of instruction-required features present in ``image``."""
    world = get_world(world_cfg)
    clauses = world.interpret(kind, ref_specs, instruction).instruction_clauses
    present = set(world.features(world.decode(image)))
    return 10.0 * sum(c in present for c in clauses) / len(clauses)


def score_record(record, world_cfg):
    """Fill in ``record.scores``."""
    record.scores = {
        "caption_sim": surrogate_reward(record.target_image, record.trace.caption, world_cfg),
        "quality": quality_score(record.target_image, world_cfg),
        "instruction_score": instruction_score(
            record.task_kind, record.ref_specs, record.instruction, record.target_image, world_cfg
        ),
    }
    return record


def _kind_distribution(kind_mix):
    if kind_mix is None:
        kinds = list(TaskKind)
        return kinds, np.full(len(kinds), 1.0 / len(kinds))
    try:
        kinds = [TaskKind(k) for k in kind_mix]
    except ValueError as e:
        raise ConfigError(f"Unknown task kind in kind mix: {e}") from e
    probs = np.array([float(p) for p in kind_mix.values()])
    if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, rtol=0, atol=1e-9):
        raise ConfigError(f"Kind mix must be non-negative and sum to 1, got {dict(kind_mix)}.")
    return kinds, probs


def _corrupt(image, spec, kind, world, rng):
    if kind == "mismatch":
        other = world.random_spec(rng)
        while other == spec:
            other = world.random_spec(rng)
        return world.render(other)
    noise = rng.standard_normal(image.shape)
    noisy = image + noise / np.linalg.norm(noise)
    return noisy / np.linalg.norm(noisy)


def build_records(n, kind_mix, world_cfg, corruption_rate, rng, source=None, annotator=None, renderer=None):
    """Build and score ``n`` records.

    Args:
        n (int): number of records
        kind_mix (dict[str, float] or None): probability per task kind;
            uniform when ``None``
        world_cfg (WorldConfig): world configuration
        corruption_rate (float): probability that a record's target is corrupted
        rng (np.random.Generator): random stream
        source (InstructionSource): stage one and two; oracle by default
        annotator (ReasoningAnnotator): stage three; oracle by default
        renderer (TargetRenderer): stage four; oracle by default

    Returns:
        list[DatasetRecord]: scored records

    Raises:
        ConfigError: for an invalid kind mix or corruption rate
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}.")
    if not 0.0 <= corruption_rate <= 1.0:
        raise ConfigError(f"corruption_rate must lie in [0, 1], got {corruption_rate}.")
    kinds, probs = _kind_distribution(kind_mix)
    world = get_world(world_cfg)
    source = source or OracleInstructionSource(world_cfg)
    annotator = annotator or OracleReasoningAnnotator(world_cfg)
    renderer = renderer or OracleTargetRenderer(world_cfg)

    records = []
    for i in range(n):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        refs, instruction = source.sample(kind, rng)
        trace = annotator.annotate(kind, refs, instruction)
        report = validate_trace(trace, len(refs))
        if not report.ok:
            raise InvalidTrace(f"Annotator produced an invalid trace for record {i}: {report}", report)
        image, spec = renderer.render(kind, refs, instruction, trace)

        corruption = None
        if rng.random() < corruption_rate:
            corruption = CORRUPTIONS[int(rng.integers(len(CORRUPTIONS)))]
            image = _corrupt(image, spec, corruption, world, rng)
        record = DatasetRecord(f"rec-{i:06d}", kind, tuple(refs), instruction, trace, image, spec, {}, corruption)
        records.append(score_record(record, world_cfg))

    log.info(
        "Built %d records, %d corrupted.", len(records), sum(r.corruption is not None for r in records)
    )
    return records


@dataclass(frozen=True)
class FilterThresholds:
    """Minimum scores a record needs to be kept."""

    min_caption_sim: float = 0.9
    min_quality: float = 0.95
    min_instruction_score: float = 8.0

    def validate(self):
        """Check each threshold lies in its score's range.

        Raises:
            ConfigError: naming the offending field
        """
        for name, (lo, hi) in {
            "min_caption_sim": (-1.0, 1.0),
            "min_quality": (0.0, 1.0),
            "min_instruction_score": (0.0, 10.0),
        }.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ConfigError(f"filter.{name} must lie in [{lo}, {hi}], got {value}.")

    def minimum(self, rule):
        # pylint: disable=missing-function-docstring
        return getattr(self, f"min_{rule}")


@dataclass(frozen=True)
class FilterReport:
    """Outcome of :func:`filter_dataset`.

    Each removed record is attributed to its first failing rule, so
    ``kept + sum(removed_by_rule.values()) == total``.
    """

    total: int
    kept: int
    removed_by_rule: dict
    removal_fraction: float

    def to_dict(self):
        # pylint: disable=missing-function-docstring
        return {
            "total": self.total,
            "kept": self.kept,
            "removed_by_rule": dict(self.removed_by_rule),
            "removal_fraction": self.removal_fraction,
        }


def filter_dataset(records, thresholds):
    """Keep records whose every score meets its threshold.

    Args:
        records (Sequence[DatasetRecord]): scored records
        thresholds (FilterThresholds): minimum scores

    Returns:
        tuple[list[DatasetRecord], FilterReport]: kept records in input order, and the report
    """
    thresholds.validate()
    kept = []
    removed = {rule: 0 for rule in SCORE_RULES}
    for record in records:
        failing = next((rule for rule in SCORE_RULES if record.scores[rule] < thresholds.minimum(rule)), None)
        if failing is None:
            kept.append(record)
        else:
            removed[failing] += 1
    total = len(records)
    fraction = 1.0 - len(kept) / total if total else 0.0
    report = FilterReport(total, len(kept), removed, fraction)
    log.info("Filter kept %d of %d records (%s).", len(kept), total, removed)
    return kept, report


def write_jsonl(records, path):
    """Write records as JSON lines.

    Returns:
        int: number of records written
    """
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), ensure_ascii=False, allow_nan=False))
            f.write("\n")
    return len(records)


def read_jsonl(path):
    """Read records written by :func:`write_jsonl`.

    Raises:
        DatasetFormatError: naming the path and line of the first malformed record
    """
    records = []
    try:
        f = open(path, encoding="utf-8")  # pylint: disable=consider-using-with
    except OSError as e:
        raise DatasetFormatError(f"cannot open dataset: {e.strerror}", path) from e
    with f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetFormatError(f"malformed record ({e})", path, lineno) from e
    return records
