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
Evaluation
==========

**Module name:** :mod:`icge_align.evaluation`

.. currentmodule:: icge_align.evaluation

Oracle judging and benchmark aggregation. A generated image is decoded and
checked against the clauses of its instruction: prompt following (PF) counts
instruction-required features, subject consistency (SC) counts
reference-derived features, both on a 0 to 10 scale. The per-sample overall
score is their geometric mean and aggregates are means of per-sample scores.

``caption_sim`` is the raw cosine reward against the target caption, so it is
only directionally comparable to scaled CLIP scores.

Classes
-------

.. autosummary::
   SampleScore
   EvalReport

Functions
---------

.. autosummary::
   judge_sample
   run_benchmark
   format_table

Code details
~~~~~~~~~~~~
"""
from collections import defaultdict
from dataclasses import asdict, dataclass
import hashlib
import json
import logging
import math

import numpy as np
from tqdm import tqdm

from .embed import surrogate_reward
from .exceptions import IcgeError
from .model import Prompt, generate, sample_trace
from .world import get_world

log = logging.getLogger(__name__)

METRICS = ("pf", "sc", "overall", "caption_sim")


def overall_score(pf, sc):
    """Geometric mean of PF and SC."""
    return math.sqrt(pf * sc)


@dataclass(frozen=True)
class SampleScore:
    """Judge scores of one sample."""

    pf: float
    sc: float
    overall: float
    caption_sim: float

    @classmethod
    def from_scores(cls, pf, sc, caption_sim):
        # pylint: disable=missing-function-docstring
        return cls(pf, sc, overall_score(pf, sc), caption_sim)


def judge_sample(task, generated, world_cfg):
    """Score a generated image for a task.

    Args:
        task (TaskInstance): the task
        generated (array[float]): generated image vector
        world_cfg (WorldConfig): world configuration

    Returns:
        SampleScore: the scores
    """
    world = get_world(world_cfg)
    interp = world.interpret(task.task_kind, task.ref_specs, task.instruction)
    present = set(world.features(world.decode(generated)))

    def fraction(clauses):
        return 10.0 * sum(c in present for c in clauses) / len(clauses) if clauses else 10.0

    caption_sim = surrogate_reward(generated, world.caption(interp.gt_spec), world_cfg)
    return SampleScore.from_scores(
        fraction(interp.instruction_clauses), fraction(interp.reference_clauses), caption_sim
    )


@dataclass(frozen=True)
class EvalReport:
    """Aggregated benchmark results.

    Args:
        sample_count (int): number of tasks
        failed (int): tasks whose generation failed and scored 0
        overall (dict[str, float]): mean of each metric over all samples
        per_kind (dict[str, dict]): means and counts per task kind
        per_ref_count (dict[str, dict]): means and counts per number of references
        config_digest (str): SHA-256 of the evaluation settings
    """

    sample_count: int
    failed: int
    overall: dict
    per_kind: dict
    per_ref_count: dict
    config_digest: str

    def to_dict(self):
        # pylint: disable=missing-function-docstring
        return asdict(self)


def _aggregate(rows):
    return {**{m: float(np.mean([r[m] for r in rows])) for m in METRICS}, "count": len(rows)}


def config_digest(settings):
    """SHA-256 hex digest of a JSON-serializable settings dictionary."""
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def run_benchmark(params, suite, steps, use_cot, seed, world_cfg, progress=False):
    """Generate and judge every task of a suite.

    Task ``i`` draws its randomness from ``default_rng([seed, i])``. With
    ``use_cot`` a greedy trace conditions the generator, otherwise the
    null-trace path is used. Generation runs the ode sampler. A task whose
    sampling or generation raises an :class:`IcgeError` scores 0 everywhere
    and is counted as failed.

    Args:
        params (Parameters): policy parameters
        suite (Sequence[TaskInstance]): tasks
        steps (int): ode steps
        use_cot (bool): condition on a sampled trace
        seed (int): base seed
        world_cfg (WorldConfig): world configuration
        progress (bool): show a progress bar

    Returns:
        tuple[EvalReport, list[dict]]: report and per-sample log lines
    """
    if not suite:
        raise ValueError("run_benchmark needs a non-empty suite.")
    sample_log = []
    for i, task in enumerate(tqdm(suite, desc="eval", unit="task", disable=not progress)):
        rng = np.random.default_rng([seed, i])
        prompt = Prompt.from_task(task)
        failed = False
        try:
            trace = sample_trace(prompt, params, 0.0, rng).token_ids if use_cot else None
            image = generate(prompt, trace, params, steps, "ode", 0.0, rng).image
            score = judge_sample(task, image, world_cfg)
        except IcgeError as e:
            log.warning("Task %d (%s) failed: %s", i, task.task_kind.value, e)
            failed = True
            score = SampleScore(0.0, 0.0, 0.0, 0.0)
        sample_log.append(
            {
                "index": i,
                "task_kind": task.task_kind.value,
                "num_refs": len(task.refs),
                "pf": score.pf,
                "sc": score.sc,
                "overall": score.overall,
                "caption_sim": score.caption_sim,
                "failed": failed,
            }
        )

    by_kind, by_refs = defaultdict(list), defaultdict(list)
    for row in sample_log:
        by_kind[row["task_kind"]].append(row)
        by_refs[str(row["num_refs"])].append(row)
    settings = {
        "world": asdict(world_cfg),
        "model": asdict(params.config),
        "steps": steps,
        "use_cot": use_cot,
        "seed": seed,
        "suite_size": len(suite),
    }
    report = EvalReport(
        sample_count=len(sample_log),
        failed=sum(r["failed"] for r in sample_log),
        overall=_aggregate(sample_log),
        per_kind={k: _aggregate(v) for k, v in sorted(by_kind.items())},
        per_ref_count={k: _aggregate(v) for k, v in sorted(by_refs.items())},
        config_digest=config_digest(settings),
    )
    return report, sample_log


def format_table(report, title=None):
    """Plain-text table of a report: one row per task kind, per reference count, and overall."""
    header = f"{'group':<22}{'n':>6}{'PF':>8}{'SC':>8}{'Overall':>9}{'CapSim':>9}"
    lines = [title] if title else []
    lines += [header, "-" * len(header)]

    def row(name, agg):
        return (
            f"{name:<22}{agg['count']:>6d}{agg['pf']:>8.2f}{agg['sc']:>8.2f}"
            f"{agg['overall']:>9.2f}{agg['caption_sim']:>9.4f}"
        )

    lines += [row(kind, agg) for kind, agg in report.per_kind.items()]
    lines.append("-" * len(header))
    lines += [row(f"{n} ref(s)", agg) for n, agg in report.per_ref_count.items()]
    lines.append("-" * len(header))
    lines.append(row("all", report.overall))
    if report.failed:
        lines.append(f"failed samples: {report.failed}")
    return "\n".join(lines)
