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
Reasoning-generation alignment
==============================

**Module name:** :mod:`icge_align.align`

.. currentmodule:: icge_align.align

Group-relative policy optimization of the flow generator over stochastic
rollouts. Every member of a group writes a trace, generates an image with the
SDE sampler and is rewarded by the cosine between the image and its own
caption. With reasoning-induced diversity enabled each member samples its own
trace; otherwise one trace is shared by the whole group.

The reasoning head and token embedding are frozen here; only the conditioning
encoder and the velocity network receive updates.

Classes
-------

.. autosummary::
   AlignConfig
   RolloutGroup

Functions
---------

.. autosummary::
   rollout_group
   compute_advantages
   grpo_update
   train_align

Code details
~~~~~~~~~~~~
"""
from dataclasses import dataclass, replace
import logging

import autograd
import autograd.numpy as anp
import numpy as np
from tqdm import tqdm

from .embed import surrogate_reward
from .exceptions import ConfigError, NumericalFault
from .model import (
    encode_batch,
    float64_tensors,
    generate,
    generation_names,
    make_optimizer,
    sample_trace,
    save_checkpoint,
    trajectory_log_probs,
    transition_means,
)
from .sft import write_metrics

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    """Alignment settings.

    Args:
        group_size (int): members per rollout group, at least 2
        align_steps (int): number of groups, one update each
        learning_rate (float): step size; 0 disables updates
        clip_eps (float): ratio clipping half-width
        sigma (float): SDE noise scale
        rollout_steps (int): SDE steps per rollout
        rid_enabled (bool): sample one trace per member
        std_guard (float): added to the reward standard deviation
        seed (int): seed of prompt choice, trace sampling and noise
        temperature (float): trace sampling temperature
        shared_noise (bool): give every member the same noise seed
        kl_coeff (float): weight of a KL penalty towards the starting policy
        optimizer (str): ``"sgd"`` or ``"adam"``
        log_every (int): steps between INFO log lines
    """

    group_size: int = 8
    align_steps: int = 200
    learning_rate: float = 1e-3
    clip_eps: float = 0.2
    sigma: float = 0.3
    rollout_steps: int = 10
    rid_enabled: bool = True
    std_guard: float = 1e-8
    seed: int = 0
    temperature: float = 1.0
    shared_noise: bool = False
    kl_coeff: float = 0.0
    optimizer: str = "sgd"
    log_every: int = 20

    @classmethod
    def full_scale(cls):
        """Reference values of the full-scale setup; not meant for desk-scale runs."""
        return cls(group_size=32, align_steps=200, learning_rate=1e-6)

    def validate(self):
        """Check field ranges.

        Raises:
            ConfigError: naming the offending field
        """
        checks = [
            (self.group_size >= 2, "group_size must be at least 2"),
            (self.align_steps >= 0, "align_steps must be non-negative"),
            (self.learning_rate >= 0, "learning_rate must be non-negative"),
            (self.clip_eps > 0, "clip_eps must be positive"),
            (self.sigma >= 0, "sigma must be non-negative"),
            (self.rollout_steps >= 1, "rollout_steps must be positive"),
            (self.std_guard > 0, "std_guard must be positive"),
            (self.temperature >= 0, "temperature must be non-negative"),
            (self.kl_coeff >= 0, "kl_coeff must be non-negative"),
            (self.optimizer in ("sgd", "adam"), "optimizer must be 'sgd' or 'adam'"),
            (self.log_every >= 1, "log_every must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(f"align.{message}; got {self}.")

    def with_overrides(self, **kwargs):
        """Copy with the non-``None`` keyword arguments applied."""
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


@dataclass
class RolloutGroup:
    """The ``G`` rollouts of one prompt.

    Args:
        prompt (Prompt): the shared prompt
        samples (list[SampledTrace]): per-member trace samples
        states (array[float]): SDE trajectories, shape ``(G, K + 1, D)``
        behaviour_log_probs (array[float]): transition log-densities under the
            rollout parameters, shape ``(G, K)``
        images (array[float]): final states, shape ``(G, D)``
        rewards (array[float]): per-member rewards
        advantages (array[float]): group-normalized rewards
        sigma (float): SDE noise scale used
    """

    prompt: object
    samples: list
    states: np.ndarray
    behaviour_log_probs: np.ndarray
    images: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    sigma: float

    @property
    def size(self):
        # pylint: disable=missing-function-docstring
        return len(self.samples)

    @property
    def traces(self):
        """list[str]: the sampled trace texts"""
        return [s.text for s in self.samples]

    def encoded(self, params):
        """Conditioning batch of the members, one row per member."""
        return encode_batch([self.prompt] * self.size, [s.token_ids for s in self.samples], params)


def compute_advantages(rewards, eps):
    """Group-normalized advantages ``(r - mean) / (std + eps)``.

    The standard deviation is the population one. Equal rewards give exact zeros.

    Args:
        rewards (array[float]): rewards of one group
        eps (float): guard added to the standard deviation

    Returns:
        array[float]: advantages
    """
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("Rewards must be finite.")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + eps)


def rollout_group(prompt, params, cfg, world_cfg, rng):
    """Sample traces, SDE trajectories and rewards for one prompt.

    Members with unparseable traces keep their rollout and are scored against
    the empty-caption fallback.

    Args:
        prompt (Prompt): the prompt
        params (Parameters): rollout parameters
        cfg (AlignConfig): settings
        world_cfg (WorldConfig): world used by the reward
        rng (np.random.Generator): random stream

    Returns:
        RolloutGroup: the group, advantages included
    """
    G = cfg.group_size
    if cfg.rid_enabled:
        samples = [sample_trace(prompt, params, cfg.temperature, rng) for _ in range(G)]
    else:
        samples = [sample_trace(prompt, params, cfg.temperature, rng)] * G

    if cfg.shared_noise:
        seeds = [int(rng.integers(2**31))] * G
    else:
        seeds = [int(s) for s in rng.integers(2**31, size=G)]

    generations = [
        generate(prompt, s.token_ids, params, cfg.rollout_steps, "sde", cfg.sigma, np.random.default_rng(seed))
        for s, seed in zip(samples, seeds)
    ]
    images = np.stack([g.image for g in generations])
    rewards = np.array([surrogate_reward(x, s.trace.caption, world_cfg) for x, s in zip(images, samples)])
    invalid = sum(not s.valid for s in samples)
    if invalid:
        log.debug("%d of %d group members sampled unparseable traces.", invalid, G)

    states = np.stack([g.states for g in generations])
    group = RolloutGroup(
        prompt, samples, states, None, images, rewards, compute_advantages(rewards, cfg.std_guard), cfg.sigma
    )
    group.behaviour_log_probs = np.asarray(
        trajectory_log_probs(
            float64_tensors(params), group.encoded(params), states, cfg.sigma, params.config.prediction
        )
    )
    return group


def _kl_to_reference(tensors, reference, enc, states, sigma, prediction):
    K = states.shape[1] - 1
    scale2 = sigma * sigma / K
    diff = transition_means(tensors, enc, states, prediction) - transition_means(
        reference, enc, states, prediction
    )
    return anp.mean(anp.sum(diff * diff, axis=1)) / (2.0 * scale2)


def grpo_update(group, params, cfg, optimizer=None, reference=None):
    """One clipped policy-gradient ascent step on a rollout group.

    The per-transition ratio is ``exp(logp_new - logp_old)`` and the objective
    is the mean over members and steps of ``min(rho * A, clip(rho) * A)``.
    A group whose advantages are all zero leaves the parameters and the
    optimizer state untouched unless the KL penalty is active.

    Args:
        group (RolloutGroup): rollouts recorded under the pre-update parameters
        params (Parameters): current parameters; left unchanged
        cfg (AlignConfig): settings
        optimizer (SGD or Adam or None): optimizer carrying state across
            steps; plain SGD at ``cfg.learning_rate`` when ``None``
        reference (dict[str, array] or None): float64 tensors of the starting
            policy for the KL penalty

    Returns:
        tuple[Parameters, dict]: updated parameters and statistics

    Raises:
        NumericalFault: if a ratio is not finite
    """
    enc = group.encoded(params)
    states, old = group.states, group.behaviour_log_probs
    A = group.advantages[:, None]
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    use_kl = cfg.kl_coeff > 0 and reference is not None and group.sigma > 0
    prediction = params.config.prediction

    def objective(t):
        rho = anp.exp(trajectory_log_probs(t, enc, states, group.sigma, prediction) - old)
        value = anp.mean(anp.minimum(rho * A, anp.clip(rho, lo, hi) * A))
        if use_kl:
            value = value - cfg.kl_coeff * _kl_to_reference(t, reference, enc, states, group.sigma, prediction)
        return value

    tensors = float64_tensors(params)
    rho = np.exp(np.asarray(trajectory_log_probs(tensors, enc, states, group.sigma, prediction)) - old)
    if not np.all(np.isfinite(rho)):
        raise NumericalFault("Non-finite importance ratio in grpo_update.")
    stats = {
        "objective": float(np.mean(np.minimum(rho * A, np.clip(rho, lo, hi) * A))),
        "mean_ratio": float(np.mean(rho)),
        "clip_fraction": float(np.mean((rho < lo) | (rho > hi))),
        "mean_advantage": float(np.mean(group.advantages)),
    }
    if cfg.learning_rate == 0 or not (use_kl or np.any(group.advantages)):
        return params, stats

    grads = autograd.grad(lambda t: -objective(t))(tensors)
    names = generation_names(params)
    optimizer = optimizer or make_optimizer("sgd", cfg.learning_rate)
    updated = optimizer.step(params.copy(), {n: np.asarray(grads[n]) for n in names}, names)
    if not updated.is_finite():
        raise NumericalFault("Parameters became non-finite in grpo_update.")
    return updated, stats


def train_align(init, prompts, cfg, world_cfg, checkpoint_path=None, metrics_path=None, progress=False):
    """Run alignment.

    Each step picks a prompt uniformly, rolls out a group and applies one
    update.

    Args:
        init (Parameters): starting parameters, normally from supervised fine-tuning
        prompts (Sequence[Prompt]): prompt suite
        cfg (AlignConfig): settings
        world_cfg (WorldConfig): world used by the reward
        checkpoint_path (str or None): where to save the final parameters
        metrics_path (str or None): where to write the metrics JSONL
        progress (bool): show a progress bar

    Returns:
        tuple[Parameters, list[dict]]: final parameters and per-step metrics

    Raises:
        NumericalFault: after saving the last good parameters to ``checkpoint_path``
    """
    cfg.validate()
    if not prompts:
        raise ValueError("train_align needs at least one prompt.")
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    reference = float64_tensors(init) if cfg.kl_coeff > 0 else None
    params = init
    metrics = []
    bar = tqdm(range(1, cfg.align_steps + 1), desc="align", unit="step", disable=not progress)
    try:
        for step in bar:
            prompt = prompts[int(rng.integers(len(prompts)))]
            group = rollout_group(prompt, params, cfg, world_cfg, rng)
            params, stats = grpo_update(group, params, cfg, optimizer, reference)
            row = {
                "step": step,
                "mean_reward": float(np.mean(group.rewards)),
                "reward_std": float(np.std(group.rewards)),
                "clip_fraction": stats["clip_fraction"],
            }
            metrics.append(row)
            bar.set_postfix(reward=f"{row['mean_reward']:.3f}")
            if step % cfg.log_every == 0 or step == cfg.align_steps:
                log.info(
                    "align step %d/%d: mean reward %.4f, std %.4f",
                    step,
                    cfg.align_steps,
                    row["mean_reward"],
                    row["reward_std"],
                )
    except NumericalFault:
        log.error("Numerical fault during alignment; saving the last good parameters.")
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
