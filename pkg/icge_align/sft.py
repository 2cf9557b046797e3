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
Supervised fine-tuning
======================

**Module name:** :mod:`icge_align.sft`

.. currentmodule:: icge_align.sft

Joint training of the reasoning head and the flow generator. Each step
optimizes ``loss_weight_cot * cot_loss + flow_loss`` on a batch in which every
example independently drops its trace with probability ``cot_drop_prob``, so
the generator learns both the traced and the null-trace conditioning.

Classes
-------

.. autosummary::
   SftConfig

Functions
---------

.. autosummary::
   train_sft
   write_metrics

Code details
~~~~~~~~~~~~
"""
from dataclasses import dataclass, replace
import json
import logging

import numpy as np
from tqdm import tqdm

from .exceptions import ConfigError, InvalidTrace, NumericalFault
from .iccot import validate_trace
from .model import Example, Prompt, cot_loss, flow_loss, make_optimizer, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SftConfig:
    """Supervised fine-tuning settings.

    Args:
        learning_rate (float): step size
        steps (int): number of gradient steps
        batch_size (int): examples per step
        cot_drop_prob (float): per-example probability of training without the trace
        loss_weight_cot (float): weight of the reasoning loss
        seed (int): seed of batch order, trace dropping and flow noise
        optimizer (str): ``"sgd"`` or ``"adam"``
        log_every (int): steps between INFO log lines
    """

    learning_rate: float = 1e-2
    steps: int = 500
    batch_size: int = 8
    cot_drop_prob: float = 0.5
    loss_weight_cot: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    log_every: int = 50

    @classmethod
    def full_scale(cls):
        """Reference values of the full-scale setup; not meant for desk-scale runs."""
        return cls(learning_rate=5e-6)

    def validate(self):
        """Check field ranges.

        Raises:
            ConfigError: naming the offending field
        """
        if self.learning_rate <= 0:
            raise ConfigError(f"sft.learning_rate must be positive, got {self.learning_rate}.")
        if self.steps < 0:
            raise ConfigError(f"sft.steps must be non-negative, got {self.steps}.")
        if self.batch_size < 1:
            raise ConfigError(f"sft.batch_size must be positive, got {self.batch_size}.")
        if not 0.0 <= self.cot_drop_prob <= 1.0:
            raise ConfigError(f"sft.cot_drop_prob must lie in [0, 1], got {self.cot_drop_prob}.")
        if self.loss_weight_cot < 0:
            raise ConfigError(f"sft.loss_weight_cot must be non-negative, got {self.loss_weight_cot}.")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"sft.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}.")
        if self.log_every < 1:
            raise ConfigError(f"sft.log_every must be positive, got {self.log_every}.")

    def with_overrides(self, **kwargs):
        """Copy with the non-``None`` keyword arguments applied."""
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


def write_metrics(rows, path):
    """Write metric dictionaries as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def _batches(n, batch_size, rng):
    """Endless stream of index batches from per-epoch permutations."""
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


def train_sft(dataset, init, cfg, checkpoint_path=None, metrics_path=None, progress=False):
    """Run supervised fine-tuning.

    Args:
        dataset (Sequence[DatasetRecord]): training records
        init (Parameters): starting parameters; left unchanged
        cfg (SftConfig): settings
        checkpoint_path (str or None): where to save the final parameters
        metrics_path (str or None): where to write the metrics JSONL
        progress (bool): show a progress bar

    Returns:
        tuple[Parameters, list[dict]]: trained parameters and per-step metrics

    Raises:
        NumericalFault: after saving the last good parameters to ``checkpoint_path``
    """
    cfg.validate()
    if not dataset:
        raise ValueError("train_sft needs a non-empty dataset.")
    tok = init.tokenizer
    for i, record in enumerate(dataset):
        report = validate_trace(record.trace, len(record.refs))
        if not report.ok:
            raise InvalidTrace(f"Record {i} ({record.id}) has an invalid trace: {report}", report)

    prompts = [Prompt(tuple(r.ref_images), r.instruction) for r in dataset]
    trace_ids = [tuple(tok.encode_trace(r.trace)) for r in dataset]
    order_seq, drop_seq, flow_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    batches = _batches(len(dataset), cfg.batch_size, np.random.default_rng(order_seq))
    drop_rng = np.random.default_rng(drop_seq)
    flow_rng = np.random.default_rng(flow_seq)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)

    params = init.copy()
    metrics = []
    bar = tqdm(range(1, cfg.steps + 1), desc="sft", unit="step", disable=not progress)
    try:
        for step in bar:
            idx = next(batches)
            drop = drop_rng.random(len(idx)) < cfg.cot_drop_prob
            examples = [
                Example(prompts[i], None if d else trace_ids[i], dataset[i].target_image) for i, d in zip(idx, drop)
            ]
            c_loss, c_grads = cot_loss(examples, params)
            f_loss, f_grads = flow_loss(examples, params, flow_rng)
            grads = {n: cfg.loss_weight_cot * c_grads[n] + f_grads[n] for n in params.tensors}
            updated = optimizer.step(params.copy(), grads)
            if not updated.is_finite():
                raise NumericalFault(f"Parameters became non-finite at sft step {step}.")
            params = updated

            loss = cfg.loss_weight_cot * c_loss + f_loss
            metrics.append({"step": step, "loss": loss, "cot_loss": c_loss, "flow_loss": f_loss})
            bar.set_postfix(loss=f"{loss:.4f}")
            if step % cfg.log_every == 0 or step == cfg.steps:
                log.info("sft step %d/%d: loss %.5f (cot %.5f, flow %.5f)", step, cfg.steps, loss, c_loss, f_loss)
    except NumericalFault:
        log.error("Numerical fault during sft; saving the last good parameters.")
        if checkpoint_path is not None:
            save_checkpoint(params, checkpoint_path)
        if metrics_path is not None:
            write_metrics(metrics, metrics_path)
        raise
    finally:
        bar.close()

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return params, metrics
