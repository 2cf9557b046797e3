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
Command line
============

**Module name:** :mod:`icge_align.harness`

.. currentmodule:: icge_align.harness

The ``icge-align`` command. Every subcommand accepts ``--config``, ``--seed``,
``--out``, ``-v`` and ``--progress``, writes its artifacts into the ``--out``
directory together with a ``manifest.json``, and exits with 0 on success, 1 on
an :class:`~.IcgeError` and 2 on a usage error.

Subcommands:

* ``build-data``: build and score a dataset
* ``filter``: filter a dataset by the configured thresholds
* ``train-sft``: supervised fine-tuning from random initialization
* ``train-align``: alignment from a checkpoint
* ``eval``: benchmark a checkpoint
* ``infer``: run one prompt file through a checkpoint
* ``inspect-cot``: parse, validate and JSON-convert a trace file
* ``ablate``: untrained, fine-tuned, aligned, and aligned-with-diversity rows

Functions
---------

.. autosummary::
   dispatch
   main

Code details
~~~~~~~~~~~~
"""
import argparse
from dataclasses import replace
import hashlib
import json
import logging
import os
import sys

import numpy as np

from ._version import __version__
from .align import train_align
from .config import config_from_dict, dump_config, load_config
from .datafactory import build_records, filter_dataset, read_jsonl, write_jsonl
from .evaluation import format_table, run_benchmark
from .exceptions import ConfigError, IcgeError, InvalidTrace
from .iccot import ReasoningTrace, parse_trace, trace_to_json
from .model import Prompt, Tokenizer, generate, init_params, load_checkpoint, sample_trace
from .sft import train_sft
from .world import SceneSpec, TaskKind, get_world

log = logging.getLogger(__name__)

ABLATION_ROWS = ("none", "SFT", "SFT+RGA", "SFT+RGA+RID")


def _common_options():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=0, help="seed of every random stream (default: 0)")
    common.add_argument("--out", default="runs", help="run directory for artifacts (default: runs)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    common.add_argument("--progress", action="store_true", help="show progress bars")
    return common


def build_parser():
    """The argument parser of the ``icge-align`` command."""
    parser = argparse.ArgumentParser(prog="icge-align", description="In-context generation with aligned reasoning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    common = _common_options()

    p = sub.add_parser("build-data", parents=[common], help="build and score a dataset")
    p.add_argument("--n", type=int, help="number of records")
    p.add_argument("--corruption-rate", type=float, help="fraction of corrupted targets")

    p = sub.add_parser("filter", parents=[common], help="filter a dataset")
    p.add_argument("--input", required=True, help="dataset JSONL")

    p = sub.add_parser("train-sft", parents=[common], help="supervised fine-tuning")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--steps", type=int, help="gradient steps")

    p = sub.add_parser("train-align", parents=[common], help="reasoning-generation alignment")
    p.add_argument("--checkpoint", required=True, help="starting checkpoint")
    p.add_argument("--steps", type=int, help="alignment steps")
    p.add_argument("--prompts", type=int, default=64, help="size of the prompt suite (default: 64)")
    p.add_argument("--no-rid", action="store_true", help="share one trace across each group")

    p = sub.add_parser("eval", parents=[common], help="benchmark a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--suite-size", type=int, help="number of benchmark tasks")
    p.add_argument("--steps", type=int, help="ode steps")
    p.add_argument("--no-cot", action="store_true", help="generate without a reasoning trace")

    p = sub.add_parser("infer", parents=[common], help="run one prompt")
    p.add_argument("--checkpoint", required=True, help="checkpoint to use")
    p.add_argument("--prompt", required=True, help="prompt JSON file")
    p.add_argument("--steps", type=int, help="ode steps")
    p.add_argument("--no-cot", action="store_true", help="generate without a reasoning trace")

    p = sub.add_parser("inspect-cot", parents=[common], help="parse and validate a trace file")
    p.add_argument("--trace", required=True, help="file holding a tagged trace")
    p.add_argument("--num-refs", type=int, required=True, help="number of reference images")

    p = sub.add_parser("ablate", parents=[common], help="run the four-row ablation")
    p.add_argument("--suite-size", type=int, help="number of benchmark tasks")
    return parser


class Run:
    """Artifacts and manifest of one command invocation."""

    def __init__(self, command, args, cfg):
        self.command = command
        self.seed = args.seed
        self.cfg = cfg
        self.out = args.out
        self.progress = args.progress
        self.artifacts = []
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        """Register and return the path of artifact ``name``."""
        if name not in self.artifacts:
            self.artifacts.append(name)
        return os.path.join(self.out, name)

    def write_text(self, name, text):
        # pylint: disable=missing-function-docstring
        with open(self.path(name), "w", encoding="utf-8") as f:
            f.write(text)

    def write_json(self, name, obj):
        # pylint: disable=missing-function-docstring
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self):
        """Write the configuration and ``manifest.json``."""
        config_text = dump_config(self.cfg)
        self.write_text("config.json", config_text)
        manifest = {
            "command": self.command,
            "seed": self.seed,
            "config_digest": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
            "version": __version__,
            "artifacts": list(self.artifacts),
        }
        with open(os.path.join(self.out, "manifest.json"), "w", encoding="utf-8") as f:
            f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else config_from_dict({})
    return replace(
        cfg,
        sft=replace(cfg.sft, seed=args.seed),
        align=replace(cfg.align, seed=args.seed),
    )


def sample_suite(world_cfg, n, rng):
    """``n`` tasks with kinds cycling through every task kind."""
    world = get_world(world_cfg)
    kinds = list(TaskKind)
    return [world.sample_task(kinds[i % len(kinds)], rng) for i in range(n)]


def _init(cfg, seed):
    vocabulary = Tokenizer.from_world(cfg.world).vocabulary
    return init_params(cfg.model, vocabulary, np.random.default_rng([seed, 0]))


def _build_data(run, args):
    cfg = run.cfg
    n = args.n if args.n is not None else cfg.data.n
    rate = args.corruption_rate if args.corruption_rate is not None else cfg.data.corruption_rate
    records = build_records(n, cfg.data.kind_mix, cfg.world, rate, np.random.default_rng(run.seed))
    write_jsonl(records, run.path("data.jsonl"))
    print(f"wrote {len(records)} records to {os.path.join(run.out, 'data.jsonl')}")


def _filter(run, args):
    records = read_jsonl(args.input)
    kept, report = filter_dataset(records, run.cfg.filter)
    write_jsonl(kept, run.path("filtered.jsonl"))
    run.write_json("filter_report.json", report.to_dict())
    print(f"kept {report.kept} of {report.total} records (removed {report.removal_fraction:.1%})")


def _train_sft(run, args):
    records = read_jsonl(args.data)
    sft_cfg = run.cfg.sft.with_overrides(steps=args.steps)
    _, metrics = train_sft(
        records,
        _init(run.cfg, run.seed),
        sft_cfg,
        checkpoint_path=run.path("sft.ckpt"),
        metrics_path=run.path("sft_metrics.jsonl"),
        progress=run.progress,
    )
    if metrics:
        print(f"final loss {metrics[-1]['loss']:.5f} after {len(metrics)} steps")


def _train_align(run, args):
    params = load_checkpoint(args.checkpoint)
    align_cfg = run.cfg.align.with_overrides(align_steps=args.steps)
    if args.no_rid:
        align_cfg = replace(align_cfg, rid_enabled=False)
    suite = sample_suite(run.cfg.world, args.prompts, np.random.default_rng([run.seed, 1]))
    _, metrics = train_align(
        params,
        [Prompt.from_task(t) for t in suite],
        align_cfg,
        run.cfg.world,
        checkpoint_path=run.path("align.ckpt"),
        metrics_path=run.path("align_metrics.jsonl"),
        progress=run.progress,
    )
    if metrics:
        print(f"mean reward of the last step {metrics[-1]['mean_reward']:.4f}")


def _evaluate(run, params, suite_size, steps, use_cot, name="eval"):
    cfg = run.cfg
    suite = sample_suite(cfg.world, suite_size, np.random.default_rng([run.seed, 2]))
    report, samples = run_benchmark(params, suite, steps, use_cot, run.seed, cfg.world, progress=run.progress)
    run.write_json(f"{name}_report.json", report.to_dict())
    run.write_text(f"{name}_samples.jsonl", "".join(json.dumps(s) + "\n" for s in samples))
    return report


def _eval(run, args):
    cfg = run.cfg.eval
    suite_size = args.suite_size or cfg.suite_size
    steps = args.steps or cfg.steps
    report = _evaluate(run, load_checkpoint(args.checkpoint), suite_size, steps, cfg.use_cot and not args.no_cot)
    table = format_table(report)
    run.write_text("eval_table.txt", table + "\n")
    print(table)


def _load_prompt(path, world_cfg):
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        world = get_world(world_cfg)
        refs = []
        for ref in data["refs"]:
            if "spec" in ref:
                refs.append(world.render(SceneSpec.from_dict(ref["spec"])))
            else:
                image = np.array(ref["image"], dtype=np.float64)
                if image.shape != (world_cfg.D,):
                    raise ValueError(f"reference image has shape {image.shape}, expected ({world_cfg.D},)")
                refs.append(image)
        return Prompt(tuple(refs), data["instruction"])
    except OSError as e:
        raise ConfigError(f"Cannot read prompt file {path}: {e.strerror}.") from e
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"Malformed prompt file {path}: {e}") from e


def _infer(run, args):
    params = load_checkpoint(args.checkpoint)
    world = get_world(run.cfg.world)
    prompt = _load_prompt(args.prompt, run.cfg.world)
    rng = np.random.default_rng(run.seed)
    result = {"use_cot": not args.no_cot}
    trace = None
    if not args.no_cot:
        sample = sample_trace(prompt, params, 0.0, rng)
        trace = sample.token_ids
        result.update(trace_text=sample.text, trace_valid=sample.valid, caption=sample.trace.caption)
    image = generate(prompt, trace, params, args.steps or run.cfg.eval.steps, "ode", 0.0, rng).image
    decoded = world.decode(image)
    result.update(image=image.tolist(), decoded_spec=decoded.to_dict(), decoded_caption=world.caption(decoded))
    run.write_json("infer.json", result)
    print(result["decoded_caption"])


def _inspect_cot(run, args):
    try:
        with open(args.trace, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read trace file {args.trace}: {e.strerror}.") from e
    parsed = parse_trace(text.strip(), args.num_refs)
    if not isinstance(parsed, ReasoningTrace):
        run.write_json("trace_report.json", {"ok": False, "issues": [list(i) for i in parsed.issues]})
        raise InvalidTrace(f"{args.trace}: {parsed}", parsed)
    text = trace_to_json(parsed)
    run.write_text("trace.json", text + "\n")
    print(text)


def _ablate(run, args):
    cfg = run.cfg
    suite_size = args.suite_size or cfg.eval.suite_size
    rng = np.random.default_rng([run.seed, 3])
    records = build_records(cfg.data.n, cfg.data.kind_mix, cfg.world, cfg.data.corruption_rate, rng)
    records, _ = filter_dataset(records, cfg.filter)

    init = _init(cfg, run.seed)
    sft_params, _ = train_sft(records, init, cfg.sft, progress=run.progress)
    prompts = [Prompt.from_task(t) for t in sample_suite(cfg.world, 64, np.random.default_rng([run.seed, 1]))]
    rga_params, _ = train_align(sft_params, prompts, replace(cfg.align, rid_enabled=False), cfg.world, progress=run.progress)
    rid_params, _ = train_align(sft_params, prompts, replace(cfg.align, rid_enabled=True), cfg.world, progress=run.progress)

    rows = []
    for name, params in zip(ABLATION_ROWS, (init, sft_params, rga_params, rid_params)):
        report = _evaluate(run, params, suite_size, cfg.eval.steps, True, name=f"ablate_{name.lower().replace('+', '_')}")
        rows.append({"name": name, **{k: report.overall[k] for k in ("pf", "sc", "overall", "caption_sim")}})
    run.write_json("ablation.json", {"rows": rows})
    lines = [f"{'setting':<14}{'PF':>8}{'SC':>8}{'Overall':>9}{'CapSim':>9}"]
    lines += [
        f"{r['name']:<14}{r['pf']:>8.2f}{r['sc']:>8.2f}{r['overall']:>9.2f}{r['caption_sim']:>9.4f}" for r in rows
    ]
    table = "\n".join(lines)
    run.write_text("ablation.txt", table + "\n")
    print(table)


_COMMANDS = {
    "build-data": _build_data,
    "filter": _filter,
    "train-sft": _train_sft,
    "train-align": _train_align,
    "eval": _eval,
    "infer": _infer,
    "inspect-cot": _inspect_cot,
    "ablate": _ablate,
}


def dispatch(argv):
    """Run the command line.

    Args:
        argv (list[str]): arguments without the program name

    Returns:
        int: exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        run = Run(args.command, args, cfg)
        _COMMANDS[args.command](run, args)
        run.finish()
    except IcgeError as e:
        print(f"icge-align {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    """Console entry point."""
    sys.exit(dispatch(sys.argv[1:]))
