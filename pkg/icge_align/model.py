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
# pylint: disable=invalid-name,too-many-arguments
"""
Policy model
============

**Module name:** :mod:`icge_align.model`

.. currentmodule:: icge_align.model

The trainable policy. It has three parts sharing one parameter dictionary:

* a conditioning encoder pooling the reference images, the instruction and,
  optionally, the reasoning trace into a context vector;
* an autoregressive reasoning head predicting trace tokens from the prompt
  context, a window of previous tokens and a step embedding;
* a rectified-flow network over ``x_t``, a sinusoidal time embedding
  and the context, predicting either the velocity or the clean image.

All network code is written against :mod:`autograd.numpy`, so the same
functions evaluate the policy and provide exact reverse-mode gradients.

Classes
-------

.. autosummary::
   ModelConfig
   Tokenizer
   Prompt
   Example
   Parameters
   SampledTrace
   Generation
   SGD
   Adam

Functions
---------

.. autosummary::
   init_params
   encode_context
   cot_loss
   flow_loss
   sample_trace
   sequence_log_probs
   flow_scale
   velocity
   generate
   trajectory_log_probs
   save_checkpoint
   load_checkpoint

Code details
~~~~~~~~~~~~
"""
from dataclasses import asdict, dataclass, fields
import functools
import io
import json
import logging
import re
import struct

import autograd
import autograd.numpy as anp
from autograd.scipy.special import logsumexp
import numpy as np

from .exceptions import CheckpointError, ConfigError, InvalidTrace, NumericalFault, TaskError
from .iccot import ReasoningTrace, parse_trace, render_trace, tag_tokens
from .world import MAX_REFS, get_world

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)

CHECKPOINT_MAGIC = b"ICFG"
CHECKPOINT_VERSION = 1
PREDICTIONS = ("data", "velocity")
MIN_FLOW_TIME = 0.05

_TOKEN = re.compile(r"<[^<>]+>|[^\s<>]+")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the policy.

    Args:
        D (int): image vector dimension
        vocab_size (int): token vocabulary size, resolved from the world when 0
        embed_dim (int): token embedding width
        context_dim (int): context vector width
        head_hidden (int): reasoning head hidden width
        head_layers (int): reasoning head hidden layers
        velocity_hidden (int): velocity network hidden width
        velocity_layers (int): velocity network hidden layers
        t_embed_dim (int): sinusoidal time embedding width, even
        window (int): previous tokens seen by the reasoning head
        max_trace_len (int): longest trace, in tokens between BOS and EOS
        max_instruction_len (int): longest instruction, in tokens
        prediction (str): ``"data"`` when the flow network predicts the clean
            image and the velocity is derived from it, ``"velocity"`` when it
            predicts the velocity directly
    """

    D: int = 128
    vocab_size: int = 0
    embed_dim: int = 32
    context_dim: int = 64
    head_hidden: int = 64
    head_layers: int = 2
    velocity_hidden: int = 128
    velocity_layers: int = 2
    t_embed_dim: int = 16
    window: int = 3
    max_trace_len: int = 96
    max_instruction_len: int = 32
    prediction: str = "data"

    def validate(self):
        """Check that every size is a positive integer and the prediction is known.

        Raises:
            ConfigError: naming the first offending field
        """
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "prediction":
                if value not in PREDICTIONS:
                    raise ConfigError(f"model.prediction must be one of {PREDICTIONS}, got {value!r}.")
            elif f.name == "vocab_size":
                if value < 0:
                    raise ConfigError(f"model.vocab_size must be non-negative, got {value}.")
            elif not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{f.name} must be a positive integer, got {value!r}.")
        if self.t_embed_dim % 2:
            raise ConfigError(f"model.t_embed_dim must be even, got {self.t_embed_dim}.")


class Tokenizer:
    """Word-level tokenizer over a fixed vocabulary.

    Tags of the reasoning grammar are single tokens; every other token is a
    lowercased whitespace-separated word. Unknown words map to ``<unk>``.

    Args:
        vocabulary (Sequence[str]): tokens, specials first
    """

    def __init__(self, vocabulary):
        self.vocabulary = tuple(vocabulary)
        self.index = {tok: i for i, tok in enumerate(self.vocabulary)}
        missing = [tok for tok in SPECIAL_TOKENS + tuple(tag_tokens(MAX_REFS)) if tok not in self.index]
        if missing:
            raise ConfigError(f"Vocabulary is missing required tokens {missing}.")
        self.pad, self.bos, self.eos, self.unk = (self.index[t] for t in SPECIAL_TOKENS)

    @classmethod
    def from_world(cls, world_config):
        """Vocabulary derived deterministically from a world configuration."""
        words = get_world(world_config).vocabulary_words()
        return cls(SPECIAL_TOKENS + tuple(tag_tokens(MAX_REFS)) + tuple(words))

    def __len__(self):
        return len(self.vocabulary)

    def encode(self, text):
        """Token ids of ``text`` without BOS or EOS."""
        ids = []
        for tok in _TOKEN.findall(text):
            if not tok.startswith("<"):
                tok = tok.lower()
            ids.append(self.index.get(tok, self.unk))
        return ids

    def encode_trace(self, trace):
        """BOS, the canonical rendering of ``trace``, EOS."""
        return [self.bos] + self.encode(render_trace(trace)) + [self.eos]

    def decode(self, ids):
        """Text of ``ids``; words are separated by single spaces, tags are not."""
        out = []
        prev_word = False
        for i in ids:
            tok = self.vocabulary[i]
            is_word = not tok.startswith("<")
            if is_word and prev_word:
                out.append(" ")
            out.append(tok)
            prev_word = is_word
        return "".join(out)


@functools.lru_cache(maxsize=8)
def _tokenizer(vocabulary):
    return Tokenizer(vocabulary)


@dataclass(frozen=True)
class Prompt:
    """Reference images and instruction text."""

    refs: tuple
    instruction: str

    @classmethod
    def from_task(cls, task):
        # pylint: disable=missing-function-docstring
        return cls(tuple(task.ref_images), task.instruction)


@dataclass(frozen=True)
class Example:
    """One training example.

    Args:
        prompt (Prompt): the prompt
        trace_ids (tuple[int] or None): BOS-to-EOS token ids of the trace, or
            ``None`` for the null-trace path
        target (array[float] or None): target image ``x0``
    """

    prompt: Prompt
    trace_ids: tuple = None
    target: np.ndarray = None


def param_shapes(cfg):
    """Ordered ``(name, shape)`` pairs of every tensor for ``cfg``."""
    V, E, C = cfg.vocab_size, cfg.embed_dim, cfg.context_dim
    shapes = [("tok_emb", (V, E)), ("step_emb", (cfg.max_trace_len + 1, E))]
    width = C + cfg.window * E + E
    for i in range(cfg.head_layers):
        shapes += [(f"head_W{i}", (width, cfg.head_hidden)), (f"head_b{i}", (cfg.head_hidden,))]
        width = cfg.head_hidden
    shapes += [("head_out_W", (width, V)), ("head_out_b", (V,))]
    shapes += [
        ("ref_W", (cfg.D, C)),
        ("ref_b", (C,)),
        ("ref_slot", (MAX_REFS, C)),
        ("ins_W", (E, C)),
        ("ins_pos", (cfg.max_instruction_len, C)),
        ("trace_W", (E, C)),
        ("trace_pos", (cfg.max_trace_len + 2, C)),
        ("null_trace", (C,)),
        ("pool_W", (3 * C, C)),
        ("pool_b", (C,)),
    ]
    width = cfg.D + cfg.t_embed_dim + C
    for i in range(cfg.velocity_layers):
        shapes += [(f"vel_W{i}", (width, cfg.velocity_hidden)), (f"vel_b{i}", (cfg.velocity_hidden,))]
        width = cfg.velocity_hidden
    shapes += [("vel_out_W", (width, cfg.D)), ("vel_out_b", (cfg.D,))]
    return shapes


REASONING_PREFIXES = ("tok_emb", "step_emb", "head_")
FLOW_PREFIXES = ("vel_",)


def reasoning_names(params):
    """Tensor names of the reasoning side, including the token embedding."""
    return [n for n in params.tensors if n.startswith(REASONING_PREFIXES)]


def generation_names(params):
    """Tensor names of the conditioning encoder and the velocity network."""
    return [n for n in params.tensors if not n.startswith(REASONING_PREFIXES)]


class Parameters:
    """All trainable tensors of the policy together with its configuration.

    Args:
        config (ModelConfig): architecture
        tensors (dict[str, array]): tensors in :func:`param_shapes` order
        vocabulary (Sequence[str]): tokenizer vocabulary
    """

    def __init__(self, config, tensors, vocabulary):
        self.config = config
        self.tensors = dict(tensors)
        self.vocabulary = tuple(vocabulary)
        if len(self.vocabulary) != config.vocab_size:
            raise ConfigError(
                f"model.vocab_size is {config.vocab_size} but the vocabulary has {len(self.vocabulary)} tokens."
            )
        expected = param_shapes(config)
        if [(n, tuple(s)) for n, s in expected] != [(n, t.shape) for n, t in self.tensors.items()]:
            raise CheckpointError("Tensor names or shapes do not match the model configuration.")

    @property
    def tokenizer(self):
        """Tokenizer: the tokenizer of this vocabulary"""
        return _tokenizer(self.vocabulary)

    def copy(self):
        # pylint: disable=missing-function-docstring
        return Parameters(self.config, {n: t.copy() for n, t in self.tensors.items()}, self.vocabulary)

    def astype(self, dtype):
        """Copy with every tensor cast to ``dtype``."""
        return Parameters(self.config, {n: t.astype(dtype) for n, t in self.tensors.items()}, self.vocabulary)

    def is_finite(self):
        # pylint: disable=missing-function-docstring
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]


def init_params(cfg, vocabulary, rng, zero_output=True):
    """Random parameters.

    Weights are drawn with scale ``1/sqrt(fan_in)`` and biases start at zero;
    the reference projection sees unit-norm images and is drawn at scale 1.
    With ``zero_output`` the reasoning head and flow output layers are
    zero, so untrained logits are uniform and the untrained network output is 0.

    Args:
        cfg (ModelConfig): architecture; ``vocab_size`` must equal ``len(vocabulary)``
        vocabulary (Sequence[str]): tokenizer vocabulary
        rng (np.random.Generator): random stream
        zero_output (bool): zero the output layers

    Returns:
        Parameters: float32 parameters
    """
    cfg.validate()
    tensors = {}
    for name, shape in param_shapes(cfg):
        if zero_output and name.startswith(("head_out", "vel_out")):
            value = np.zeros(shape)
        elif name in ("tok_emb", "step_emb", "ref_slot", "ins_pos", "trace_pos", "null_trace"):
            value = 0.1 * rng.standard_normal(shape)
        elif name == "ref_W":
            value = rng.standard_normal(shape)
        elif len(shape) == 2:
            value = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            value = np.zeros(shape)
        tensors[name] = value.astype(np.float32)
    return Parameters(cfg, tensors, vocabulary)


# ---------------------------------------------------------------- encoding


@dataclass(frozen=True)
class EncodedBatch:
    """Padded integer and image arrays of a batch of prompts and traces."""

    refs: np.ndarray
    ref_mask: np.ndarray
    ins_ids: np.ndarray
    ins_mask: np.ndarray
    trace_ids: np.ndarray
    trace_mask: np.ndarray
    has_trace: np.ndarray

    @property
    def size(self):
        # pylint: disable=missing-function-docstring
        return self.refs.shape[0]


def _pad(rows, pad_id):
    width = max([len(r) for r in rows] + [1])
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def encode_batch(prompts, trace_ids, params):
    """Tokenize and pad a batch.

    Args:
        prompts (Sequence[Prompt]): prompts
        trace_ids (Sequence[Sequence[int] or None]): per prompt, trace token ids or ``None``
        params (Parameters): supplies the configuration and tokenizer

    Raises:
        TaskError: for more than four references or an over-long instruction
        InvalidTrace: for an over-long trace
    """
    cfg, tok = params.config, params.tokenizer
    B = len(prompts)
    refs = np.zeros((B, MAX_REFS, cfg.D))
    ref_mask = np.zeros((B, MAX_REFS))
    ins_rows, trace_rows = [], []
    for b, (prompt, ids) in enumerate(zip(prompts, trace_ids)):
        if len(prompt.refs) > MAX_REFS:
            raise TaskError(f"At most {MAX_REFS} reference images are supported, got {len(prompt.refs)}.")
        for j, ref in enumerate(prompt.refs):
            refs[b, j] = ref
            ref_mask[b, j] = 1.0
        ins = tok.encode(prompt.instruction)
        if len(ins) > cfg.max_instruction_len:
            raise TaskError(
                f"Instruction has {len(ins)} tokens, more than max_instruction_len={cfg.max_instruction_len}."
            )
        ins_rows.append(ins)
        ids = [] if ids is None else list(ids)
        if len(ids) > cfg.max_trace_len + 2:
            raise InvalidTrace(f"Trace has {len(ids)} tokens, more than max_trace_len={cfg.max_trace_len} plus BOS/EOS.")
        trace_rows.append(ids)
    ins_ids, ins_mask = _pad(ins_rows, tok.pad)
    tr_ids, tr_mask = _pad(trace_rows, tok.pad)
    has_trace = np.array([0.0 if ids is None else 1.0 for ids in trace_ids])
    return EncodedBatch(refs, ref_mask, ins_ids, ins_mask, tr_ids, tr_mask, has_trace)


def _masked_mean(tokens, mask):
    count = anp.maximum(anp.sum(mask, axis=1, keepdims=True), 1.0)
    return anp.sum(tokens * mask[:, :, None], axis=1) / count


def _context(t, enc):
    B, R, D = enc.refs.shape
    C = t["pool_b"].shape[0]
    ref_h = anp.dot(enc.refs.reshape((B * R, D)), t["ref_W"]).reshape((B, R, C))
    ref_h = anp.tanh(ref_h + t["ref_b"] + t["ref_slot"][None, :R, :])
    ref_feat = anp.sum(ref_h * enc.ref_mask[:, :, None], axis=1)

    def pooled(ids, mask, W, pos):
        L = ids.shape[1]
        emb = t["tok_emb"][ids]
        h = anp.dot(emb.reshape((ids.size, emb.shape[-1])), W).reshape((ids.shape[0], L, C))
        return _masked_mean(anp.tanh(h + pos[None, :L, :]), mask)

    ins_feat = pooled(enc.ins_ids, enc.ins_mask, t["ins_W"], t["ins_pos"])
    trace_feat = pooled(enc.trace_ids, enc.trace_mask, t["trace_W"], t["trace_pos"])
    has = enc.has_trace[:, None]
    trace_feat = has * trace_feat + (1.0 - has) * t["null_trace"][None, :]
    joined = anp.concatenate([ref_feat, ins_feat, trace_feat], axis=1)
    return anp.tanh(anp.dot(joined, t["pool_W"]) + t["pool_b"])


def encode_context(prompt, trace, params):
    """Context vector of a prompt, with or without a reasoning trace.

    Args:
        prompt (Prompt): references and instruction
        trace (ReasoningTrace or Sequence[int] or None): a trace, its token ids,
            or ``None`` for the learned null-trace conditioning
        params (Parameters): policy parameters

    Returns:
        array[float]: context vector of ``context_dim`` components
    """
    if isinstance(trace, ReasoningTrace):
        trace = params.tokenizer.encode_trace(trace)
    enc = encode_batch([prompt], [trace], params)
    return np.asarray(_context(float64_tensors(params), enc))[0]


# ---------------------------------------------------------- reasoning head


def _head_logits(t, ctx_rows, prev_ids, steps):
    N, window = prev_ids.shape
    E = t["tok_emb"].shape[1]
    prev = t["tok_emb"][prev_ids].reshape((N, window * E))
    h = anp.concatenate([ctx_rows, prev, t["step_emb"][steps]], axis=1)
    i = 0
    while f"head_W{i}" in t:
        h = anp.tanh(anp.dot(h, t[f"head_W{i}"]) + t[f"head_b{i}"])
        i += 1
    return anp.dot(h, t["head_out_W"]) + t["head_out_b"]


def _window(ids, j, window, pad):
    prev = ids[max(0, j - window) : j]
    return [pad] * (window - len(prev)) + list(prev)


def _teacher_rows(trace_rows, window, pad):
    ex, prev, steps, targets = [], [], [], []
    for b, ids in trace_rows:
        for j in range(1, len(ids)):
            ex.append(b)
            prev.append(_window(ids, j, window, pad))
            steps.append(j - 1)
            targets.append(ids[j])
    return (
        np.array(ex, dtype=np.int64),
        np.array(prev, dtype=np.int64).reshape((len(ex), window)),
        np.array(steps, dtype=np.int64),
        np.array(targets, dtype=np.int64),
    )


def _token_log_probs(t, enc, rows, temperature=1.0):
    ex, prev, steps, targets = rows
    ctx = _context(t, enc)
    logits = _head_logits(t, ctx[ex], prev, steps) / temperature
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    return logp[np.arange(len(targets)), targets]


def float64_tensors(params):
    """Float64 copies of the parameter tensors; gradients are taken in this precision."""
    return {n: t.astype(np.float64) for n, t in params.tensors.items()}


def _grads_to_numpy(grads, params):
    return {n: np.asarray(g, dtype=params.tensors[n].dtype) for n, g in grads.items()}


def cot_loss(examples, params):
    """Mean token negative log-likelihood of the traces under teacher forcing.

    The head is conditioned on the prompt context without the trace. Examples
    whose ``trace_ids`` is ``None`` are skipped.

    Args:
        examples (Sequence[Example]): batch
        params (Parameters): policy parameters

    Returns:
        tuple[float, dict[str, array]]: loss and its gradient per tensor

    Raises:
        NumericalFault: if the loss is not finite
    """
    prompts = [e.prompt for e in examples]
    enc = encode_batch(prompts, [None] * len(examples), params)
    rows = _teacher_rows(
        [(b, e.trace_ids) for b, e in enumerate(examples) if e.trace_ids is not None],
        params.config.window,
        params.tokenizer.pad,
    )
    if rows[0].size == 0:
        return 0.0, {n: np.zeros_like(v) for n, v in params.tensors.items()}

    def objective(t):
        return -anp.mean(_token_log_probs(t, enc, rows))

    loss, grads = autograd.value_and_grad(objective)(float64_tensors(params))
    if not np.isfinite(loss):
        raise NumericalFault(f"cot_loss is not finite ({loss}).")
    return float(loss), _grads_to_numpy(grads, params)


@dataclass(frozen=True)
class SampledTrace:
    """Output of :func:`sample_trace`.

    Args:
        token_ids (tuple[int]): BOS, sampled tokens, and EOS if one was sampled
        log_probs (array[float]): log-probability of each sampled token
        text (str): detokenized sample without BOS and EOS
        valid (bool): whether ``text`` parsed as a trace
        trace (ReasoningTrace): the parsed trace, or the empty-caption fallback
        report (ValidationReport or None): parse problems when not valid
    """

    token_ids: tuple
    log_probs: np.ndarray
    text: str
    valid: bool
    trace: ReasoningTrace
    report: object = None


def sample_trace(prompt, params, temperature, rng):
    """Sample a reasoning trace autoregressively.

    Sampling stops at EOS or after ``max_trace_len + 1`` tokens. Temperature 0
    is greedy decoding; log-probabilities are then under the untempered
    distribution. Never raises for unparseable output: the sample is flagged
    and an empty-caption trace is substituted.

    Args:
        prompt (Prompt): references and instruction
        params (Parameters): policy parameters
        temperature (float): sampling temperature, ``>= 0``
        rng (np.random.Generator): random stream

    Returns:
        SampledTrace: the sample
    """
    if temperature < 0:
        raise ValueError(f"temperature must be non-negative, got {temperature}.")
    cfg, tok = params.config, params.tokenizer
    t = params.astype(np.float64).tensors
    ctx = _context(t, encode_batch([prompt], [None], params))
    ids = [tok.bos]
    log_probs = []
    for step in range(cfg.max_trace_len + 1):
        prev = np.array([_window(ids, len(ids), cfg.window, tok.pad)], dtype=np.int64)
        logits = _head_logits(t, ctx, prev, np.array([step]))[0]
        if temperature == 0:
            nxt = int(np.argmax(logits))
            logp = logits - logsumexp(logits)
        else:
            logp = logits / temperature - logsumexp(logits / temperature)
            nxt = int(rng.choice(len(logits), p=np.exp(logp - logsumexp(logp))))
        ids.append(nxt)
        log_probs.append(float(logp[nxt]))
        if nxt == tok.eos:
            break

    body = ids[1:-1] if ids[-1] == tok.eos else ids[1:]
    text = tok.decode(body)
    parsed = parse_trace(text, len(prompt.refs))
    if isinstance(parsed, ReasoningTrace):
        return SampledTrace(tuple(ids), np.array(log_probs), text, True, parsed)
    log.debug("Sampled trace does not parse: %s", parsed)
    fallback = ReasoningTrace("", ("",) * len(prompt.refs))
    return SampledTrace(tuple(ids), np.array(log_probs), text, False, fallback, parsed)


def sequence_log_probs(prompt, token_ids, params, temperature=1.0):
    """Per-token log-probabilities of ``token_ids`` recomputed by teacher forcing.

    Pass ``temperature=1.0`` to recompute greedy samples.
    """
    temperature = 1.0 if temperature == 0 else temperature
    t = params.astype(np.float64).tensors
    enc = encode_batch([prompt], [None], params)
    rows = _teacher_rows([(0, list(token_ids))], params.config.window, params.tokenizer.pad)
    return np.asarray(_token_log_probs(t, enc, rows, temperature))


# ------------------------------------------------------------- flow branch


def time_embedding(t, dim):
    """Sinusoidal embedding of flow times ``t`` (shape ``(N,)``)."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :] * 2.0 * np.pi
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def flow_scale(D):
    """Factor mapping unit-norm images of dimension ``D`` to unit-variance flow coordinates."""
    return np.sqrt(D)


def _network(t, x, times, ctx):
    dim = t["vel_W0"].shape[0] - x.shape[1] - ctx.shape[1]
    h = anp.concatenate([x, time_embedding(times, dim), ctx], axis=1)
    i = 0
    while f"vel_W{i}" in t:
        h = anp.tanh(anp.dot(h, t[f"vel_W{i}"]) + t[f"vel_b{i}"])
        i += 1
    return anp.dot(h, t["vel_out_W"]) + t["vel_out_b"]


def velocity(t, x, times, ctx, prediction):
    """Velocity field at states ``x`` (shape ``(N, D)``) and flow times ``times``.

    With ``prediction="data"`` the network output is a clean-image estimate
    ``x0_hat`` and the velocity is ``(x - x0_hat) / max(t, MIN_FLOW_TIME)``.

    Args:
        t (dict[str, array]): parameter tensors, possibly autograd-traced
        x (array[float]): states in flow coordinates
        times (array[float]): flow times, shape ``(N,)``
        ctx (array[float]): context rows, shape ``(N, C)``
        prediction (str): ``"data"`` or ``"velocity"``
    """
    out = _network(t, x, times, ctx)
    if prediction == "velocity":
        return out
    return (x - out) / np.maximum(np.asarray(times, dtype=np.float64), MIN_FLOW_TIME)[:, None]


def interpolate(x0, x1, t):
    """Straight-line interpolant ``(1 - t) x0 + t x1``; ``t`` broadcasts over rows."""
    t = anp.reshape(t, (-1,) + (1,) * (anp.ndim(x0) - 1)) if anp.ndim(x0) > 1 else t
    return (1.0 - t) * x0 + t * x1


def flow_matching_loss(x0, x1, t, velocity_fn):
    """Mean squared error between ``x1 - x0`` and ``velocity_fn(x_t, t)``.

    Args:
        x0 (array[float]): data points, shape ``(B, D)``
        x1 (array[float]): noise points, shape ``(B, D)``
        t (array[float]): flow times, shape ``(B,)``
        velocity_fn (callable): maps ``(x_t, t)`` to a velocity of shape ``(B, D)``
    """
    x_t = interpolate(x0, x1, t)
    return anp.mean((x1 - x0 - velocity_fn(x_t, t)) ** 2)


def flow_loss(examples, params, rng):
    """Rectified-flow loss with ``t ~ U[0, 1]`` and ``x1 ~ N(0, I)`` per example.

    Targets are moved to flow coordinates by :func:`flow_scale` first.

    Args:
        examples (Sequence[Example]): batch; every ``target`` must be set
        params (Parameters): policy parameters
        rng (np.random.Generator): random stream for ``t`` and ``x1``

    Returns:
        tuple[float, dict[str, array]]: loss and its gradient per tensor

    Raises:
        NumericalFault: on non-finite targets or loss
    """
    x0 = np.stack([np.asarray(e.target, dtype=np.float64) for e in examples])
    if not np.all(np.isfinite(x0)):
        raise NumericalFault("flow_loss received a non-finite target image.")
    x0 = x0 * flow_scale(params.config.D)
    t = rng.random(len(examples))
    x1 = rng.standard_normal(x0.shape)
    enc = encode_batch([e.prompt for e in examples], [e.trace_ids for e in examples], params)
    prediction = params.config.prediction

    def objective(tensors):
        ctx = _context(tensors, enc)
        return flow_matching_loss(x0, x1, t, lambda x_t, times: velocity(tensors, x_t, times, ctx, prediction))

    loss, grads = autograd.value_and_grad(objective)(float64_tensors(params))
    if not np.isfinite(loss):
        raise NumericalFault(f"flow_loss is not finite ({loss}).")
    return float(loss), _grads_to_numpy(grads, params)


def gaussian_log_density(x, mean, scale):
    """Log-density of ``x`` under an isotropic Gaussian, summed over the last axis."""
    D = np.shape(x)[-1]
    z = (x - mean) / scale
    return -0.5 * anp.sum(z * z, axis=-1) - D * (anp.log(scale) + 0.5 * np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Generation:
    """Output of :func:`generate`.

    Args:
        image (array[float]): final un-normalized state at ``t = 0``, in image units
        states (array[float]): ``K + 1`` flow-coordinate states from ``t = 1`` down to ``t = 0``
        means (array[float]): ``K`` transition means
        log_densities (array[float] or None): per-step transition log-densities
            in sde mode, ``None`` in ode mode
    """

    image: np.ndarray
    states: np.ndarray
    means: np.ndarray
    log_densities: np.ndarray = None


def generate(prompt, trace, params, steps, mode="ode", sigma=0.0, rng=None):
    """Integrate the learned flow from Gaussian noise at ``t = 1`` to ``t = 0``.

    Each of the ``K`` uniform steps moves to ``x - dt * v``; in sde mode
    Gaussian noise of standard deviation ``sigma * sqrt(dt)`` is added and the
    log-density of the realized transition recorded. With ``sigma = 0`` the
    sde path reproduces the ode path step for step and records zeros.

    Args:
        prompt (Prompt): references and instruction
        trace (ReasoningTrace or Sequence[int] or None): conditioning trace
        params (Parameters): policy parameters
        steps (int): number of steps ``K >= 1``
        mode (str): ``"ode"`` or ``"sde"``
        sigma (float): sde noise scale, ignored in ode mode
        rng (np.random.Generator): random stream

    Returns:
        Generation: the trajectory

    Raises:
        NumericalFault: if the state diverges past norm ``1e6``
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}.")
    if mode not in ("ode", "sde"):
        raise ValueError(f"mode must be 'ode' or 'sde', got {mode!r}.")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}.")
    sigma = sigma if mode == "sde" else 0.0
    if isinstance(trace, ReasoningTrace):
        trace = params.tokenizer.encode_trace(trace)

    t = params.astype(np.float64).tensors
    cfg = params.config
    ctx = _context(t, encode_batch([prompt], [trace], params))
    dt = 1.0 / steps
    scale = sigma * np.sqrt(dt)
    x = rng.standard_normal(cfg.D)
    states, means, log_densities = [x], [], []
    for k in range(steps):
        v = velocity(t, x[None, :], np.array([1.0 - k * dt]), ctx, cfg.prediction)[0]
        mean = x - dt * v
        if scale > 0:
            x = mean + scale * rng.standard_normal(mean.shape)
            log_densities.append(float(gaussian_log_density(x, mean, scale)))
        else:
            x = mean
            log_densities.append(0.0)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e6:
            raise NumericalFault(f"Generation diverged at step {k + 1} of {steps}.")
        states.append(x)
        means.append(mean)
    return Generation(
        x / flow_scale(cfg.D),
        np.array(states),
        np.array(means),
        np.array(log_densities) if mode == "sde" else None,
    )


def trajectory_log_probs(tensors, enc, states, sigma, prediction):
    """Log-density of every stored transition under the current policy.

    Args:
        tensors (dict[str, array]): parameter tensors, possibly autograd-traced
        enc (EncodedBatch): conditioning of the ``B`` trajectories
        states (array[float]): shape ``(B, K + 1, D)``
        sigma (float): sde noise scale
        prediction (str): flow parameterization of the policy

    Returns:
        array[float]: shape ``(B, K)``
    """
    B, K1, D = states.shape
    K = K1 - 1
    if sigma == 0:
        return np.zeros((B, K))
    scale = sigma * np.sqrt(1.0 / K)
    mean = transition_means(tensors, enc, states, prediction)
    nxt = states[:, 1:, :].reshape((B * K, D))
    return anp.reshape(gaussian_log_density(nxt, mean, scale), (B, K))


def transition_means(tensors, enc, states, prediction):
    """Means ``x - dt * v`` of every stored transition, flattened to ``(B * K, D)``."""
    B, K1, D = states.shape
    K = K1 - 1
    dt = 1.0 / K
    ctx = _context(tensors, enc)
    x = states[:, :-1, :].reshape((B * K, D))
    times = np.tile(1.0 - np.arange(K) * dt, B)
    v = velocity(tensors, x, times, ctx[np.repeat(np.arange(B), K)], prediction)
    return x - dt * v


# -------------------------------------------------------------- optimizers


class SGD:
    """Plain gradient descent with a fixed step size."""

    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, params, grads, names=None):
        """Descend along ``grads`` for the tensors in ``names`` (default all)."""
        names = params.tensors if names is None else names
        for n in names:
            p = params.tensors[n]
            params.tensors[n] = (p - self.learning_rate * grads[n]).astype(p.dtype)
        return params


class Adam:
    """Adam with bias correction."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, names=None):
        """Descend along ``grads`` for the tensors in ``names`` (default all)."""
        names = list(params.tensors) if names is None else names
        self.t += 1
        for n in names:
            g = np.asarray(grads[n], dtype=np.float64)
            self.m[n] = self.beta1 * self.m.get(n, 0.0) + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v.get(n, 0.0) + (1 - self.beta2) * g * g
            m_hat = self.m[n] / (1 - self.beta1**self.t)
            v_hat = self.v[n] / (1 - self.beta2**self.t)
            p = params.tensors[n]
            params.tensors[n] = (p - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        return params


def make_optimizer(name, learning_rate):
    """``"sgd"`` or ``"adam"`` optimizer."""
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adam":
        return Adam(learning_rate)
    raise ConfigError(f"Unknown optimizer {name!r}; expected 'sgd' or 'adam'.")


# -------------------------------------------------------------- checkpoint


def checkpoint_bytes(params):
    """Serialize parameters to the checkpoint format."""
    header = {
        "config": asdict(params.config),
        "vocabulary": list(params.vocabulary),
        "tensors": [[n, list(t.shape)] for n, t in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    out.write(blob)
    for t in params.tensors.values():
        out.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return out.getvalue()


def checkpoint_from_bytes(data, source="<bytes>"):
    """Inverse of :func:`checkpoint_bytes`.

    Raises:
        CheckpointError: on a bad magic string, version, header or payload size
    """
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source} is not a checkpoint (bad magic {data[:4]!r}).")
    if len(data) < 12:
        raise CheckpointError(f"{source} is truncated.")
    version, length = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source} has format version {version}, expected {CHECKPOINT_VERSION}.")
    try:
        header = json.loads(data[12 : 12 + length].decode("utf-8"))
        config = ModelConfig(**header["config"])
        entries = [(n, tuple(s)) for n, s in header["tensors"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source} has an unreadable header: {e}") from e

    offset = 12 + length
    tensors = {}
    for name, shape in entries:
        size = int(np.prod(shape)) * 4
        if offset + size > len(data):
            raise CheckpointError(f"{source} is truncated inside tensor {name!r}.")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += size
    if offset != len(data):
        raise CheckpointError(f"{source} has {len(data) - offset} trailing bytes.")
    try:
        return Parameters(config, tensors, header["vocabulary"])
    except ConfigError as e:
        raise CheckpointError(f"{source}: {e}") from e


def save_checkpoint(params, path):
    """Write ``params`` to ``path``."""
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params))


def load_checkpoint(path):
    """Read parameters written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: if the file cannot be read or is not a valid checkpoint
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e.strerror}.") from e
    return checkpoint_from_bytes(data, source=str(path))
