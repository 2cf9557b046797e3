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
Unit tests for the policy: tokenizer, reasoning head, flow generator,
optimizers and checkpoints
"""
from dataclasses import replace
import struct

import numpy as np
import pytest
from scipy.stats import norm

from conftest import ALL_KINDS, SMALL_MODEL, VOCABULARY, WORLD, numeric_grad
from icge_align.exceptions import CheckpointError, ConfigError, InvalidTrace, NumericalFault, TaskError
from icge_align.iccot import ReasoningTrace, render_trace
from icge_align.model import (
    BOS,
    EOS,
    PAD,
    UNK,
    MIN_FLOW_TIME,
    Adam,
    Example,
    ModelConfig,
    Parameters,
    Prompt,
    SGD,
    Tokenizer,
    checkpoint_bytes,
    checkpoint_from_bytes,
    cot_loss,
    encode_batch,
    encode_context,
    flow_loss,
    flow_matching_loss,
    flow_scale,
    float64_tensors,
    gaussian_log_density,
    generate,
    generation_names,
    init_params,
    interpolate,
    load_checkpoint,
    make_optimizer,
    param_shapes,
    reasoning_names,
    sample_trace,
    save_checkpoint,
    sequence_log_probs,
    time_embedding,
    velocity,
)
from icge_align.world import sample_task


def examples_of(tasks, tokenizer, with_trace=True):
    """Training examples from tasks."""
    return [
        Example(
            Prompt.from_task(t),
            tuple(tokenizer.encode_trace(t.gt_trace)) if with_trace else None,
            t.gt_image,
        )
        for t in tasks
    ]


class TestTokenizer:
    """Tests for the word-level tokenizer"""

    def test_vocabulary(self):
        """Tests that the specials and tags come first"""
        tok = Tokenizer.from_world(WORLD)

        assert tok.vocabulary[:4] == (PAD, BOS, EOS, UNK)
        assert tok.vocabulary[4] == "<out_caption>"
        assert len(tok) == SMALL_MODEL.vocab_size
        assert (tok.pad, tok.bos, tok.eos, tok.unk) == (0, 1, 2, 3)

    def test_encode(self):
        """Tests lowercasing, tags and unknown words"""
        tok = Tokenizer.from_world(WORLD)
        ids = tok.encode("<out_caption>Beach scene zebra</out_caption>")

        assert ids[0] == tok.index["<out_caption>"]
        assert ids[1] == tok.index["beach"]
        assert ids[3] == tok.unk
        assert ids[-1] == tok.index["</out_caption>"]

    def test_trace_text_survives(self, suite):
        """Tests that every oracle trace is in-vocabulary and detokenizes exactly"""
        tok = Tokenizer.from_world(WORLD)
        for task in suite:
            ids = tok.encode_trace(task.gt_trace)
            assert ids[0] == tok.bos and ids[-1] == tok.eos
            assert tok.unk not in ids
            assert tok.decode(ids[1:-1]) == render_trace(task.gt_trace)

    def test_instructions_in_vocabulary(self, suite):
        """Tests that instructions tokenize without unknown words"""
        tok = Tokenizer.from_world(WORLD)
        for task in suite:
            assert tok.unk not in tok.encode(task.instruction)

    def test_missing_required_tokens(self):
        """Tests that a vocabulary without the grammar tags is rejected"""
        with pytest.raises(ConfigError, match="missing required tokens"):
            Tokenizer([PAD, BOS, EOS, UNK, "cat"])


class TestParameters:
    """Tests for parameter construction"""

    def test_shapes(self, params):
        """Tests that tensors follow param_shapes in order and are float32"""
        assert [(n, t.shape) for n, t in params.tensors.items()] == [
            (n, tuple(s)) for n, s in param_shapes(SMALL_MODEL)
        ]
        assert all(t.dtype == np.float32 for t in params.tensors.values())

    def test_zero_output(self, params):
        """Tests that the output layers start at zero"""
        for name in ("head_out_W", "head_out_b", "vel_out_W", "vel_out_b"):
            assert not np.any(params[name])

    def test_name_partition(self, params):
        """Tests that reasoning and generation tensors partition the parameters"""
        reasoning, generation = reasoning_names(params), generation_names(params)

        assert set(reasoning) | set(generation) == set(params.tensors)
        assert not set(reasoning) & set(generation)
        assert "tok_emb" in reasoning
        assert "ref_W" in generation and "vel_out_W" in generation

    def test_vocabulary_size_mismatch(self):
        """Tests that the configuration must match the vocabulary"""
        with pytest.raises(ConfigError, match="vocab_size"):
            init_params(replace(SMALL_MODEL, vocab_size=5), VOCABULARY, np.random.default_rng(0))

    def test_shape_mismatch(self, params):
        """Tests that tensors of the wrong shape are rejected"""
        tensors = dict(params.tensors)
        tensors["ref_b"] = np.zeros(3, dtype=np.float32)
        with pytest.raises(CheckpointError, match="shapes"):
            Parameters(SMALL_MODEL, tensors, VOCABULARY)

    @pytest.mark.parametrize(
        "kwargs", [{"embed_dim": 0}, {"window": -1}, {"t_embed_dim": 7}, {"vocab_size": -1}, {"prediction": "noise"}]
    )
    def test_invalid_config(self, kwargs):
        """Tests model configuration validation"""
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs).validate()


class TestEncoding:
    """Tests for batching and the context encoder"""

    def test_batch_shapes(self, params, suite):
        """Tests padding and masks"""
        tok = params.tokenizer
        prompts = [Prompt.from_task(t) for t in suite[:2]]
        enc = encode_batch(prompts, [tok.encode_trace(suite[0].gt_trace), None], params)

        assert enc.size == 2
        assert enc.refs.shape == (2, 4, 128)
        assert enc.ref_mask[0].tolist() == [1.0, 0.0, 0.0, 0.0]
        assert enc.has_trace.tolist() == [1.0, 0.0]
        assert enc.trace_mask[1].sum() == 0

    def test_too_many_references(self, params):
        """Tests that more than four references are rejected"""
        prompt = Prompt(tuple(np.zeros(128) for _ in range(5)), "Put them into this scene")
        with pytest.raises(TaskError, match="At most 4"):
            encode_batch([prompt], [None], params)

    def test_long_instruction(self, params):
        """Tests that over-long instructions are rejected"""
        prompt = Prompt((np.zeros(128),), "cat " * 40)
        with pytest.raises(TaskError, match="max_instruction_len"):
            encode_batch([prompt], [None], params)

    def test_long_trace(self, params):
        """Tests that over-long traces are rejected"""
        prompt = Prompt((np.zeros(128),), "Put them into this scene")
        with pytest.raises(InvalidTrace, match="max_trace_len"):
            encode_batch([prompt], [[1] * 100], params)

    def test_context_depends_on_trace(self, rich_params, suite):
        """Tests that conditioning on a trace changes the context"""
        prompt = Prompt.from_task(suite[0])
        with_trace = encode_context(prompt, suite[0].gt_trace, rich_params)
        without = encode_context(prompt, None, rich_params)

        assert with_trace.shape == (SMALL_MODEL.context_dim,)
        assert not np.allclose(with_trace, without)


class TestReasoningHead:
    """Tests for the reasoning loss and trace sampling"""

    def test_untrained_loss_is_log_vocabulary(self, params, suite):
        """Tests that uniform untrained logits give a loss of ln V"""
        loss, _ = cot_loss(examples_of(suite, params.tokenizer), params)
        assert loss == pytest.approx(np.log(SMALL_MODEL.vocab_size), rel=1e-9)

    def test_no_traces(self, params, suite):
        """Tests that a batch without traces has zero loss and gradient"""
        loss, grads = cot_loss(examples_of(suite, params.tokenizer, with_trace=False), params)
        assert loss == 0.0
        assert all(not np.any(g) for g in grads.values())

    @pytest.mark.parametrize(
        "name,index", [("head_out_b", (5,)), ("head_W0", (3, 2)), ("ins_W", (1, 4)), ("tok_emb", (20, 0))]
    )
    def test_gradient(self, rich_params, suite, name, index):
        """Tests the reasoning gradient against finite differences"""
        examples = examples_of(suite[:3], rich_params.tokenizer)
        _, grads = cot_loss(examples, rich_params)
        expected = numeric_grad(lambda p: cot_loss(examples, p)[0], rich_params, name, index)
        assert grads[name][index] == pytest.approx(expected, rel=1e-3, abs=1e-5)

    def test_full_batch_descent(self, rich_params, suite):
        """Tests that plain gradient descent on four examples lowers the reasoning loss at every step"""
        examples = examples_of(suite[:4], rich_params.tokenizer)
        params, optimizer = rich_params.copy(), SGD(0.05)
        losses = []
        for _ in range(50):
            loss, grads = cot_loss(examples, params)
            losses.append(loss)
            params = optimizer.step(params, grads)

        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_greedy_untrained(self, params, suite):
        """Tests greedy decoding of uniform logits: no EOS, invalid output and the fallback trace"""
        prompt = Prompt.from_task(suite[1])
        sample = sample_trace(prompt, params, 0.0, np.random.default_rng(0))

        assert len(sample.token_ids) == SMALL_MODEL.max_trace_len + 2
        assert sample.token_ids[0] == params.tokenizer.bos
        assert np.allclose(sample.log_probs, -np.log(SMALL_MODEL.vocab_size))
        assert not sample.valid
        assert sample.report is not None
        assert sample.trace == ReasoningTrace("", ("",) * len(prompt.refs))

    def test_sampled_log_probs_recompute(self, rich_params, suite):
        """Tests that teacher forcing reproduces the log-probabilities of a sample"""
        prompt = Prompt.from_task(suite[0])
        sample = sample_trace(prompt, rich_params, 1.0, np.random.default_rng(1))
        recomputed = sequence_log_probs(prompt, sample.token_ids, rich_params)

        assert recomputed.shape == sample.log_probs.shape
        assert np.allclose(recomputed, sample.log_probs, atol=1e-10)

    def test_sampling_is_seeded(self, rich_params, suite):
        """Tests that equal seeds sample equal traces"""
        prompt = Prompt.from_task(suite[2])
        a = sample_trace(prompt, rich_params, 1.0, np.random.default_rng(4))
        b = sample_trace(prompt, rich_params, 1.0, np.random.default_rng(4))
        assert a.token_ids == b.token_ids

    def test_negative_temperature(self, params, suite):
        """Tests that negative temperatures are rejected"""
        with pytest.raises(ValueError, match="temperature"):
            sample_trace(Prompt.from_task(suite[0]), params, -1.0, np.random.default_rng(0))

    @pytest.mark.slow
    def test_trained_samples_are_diverse(self, trained_params):
        """Tests that tempered sampling from a fine-tuned head gives at least two traces for nearly every prompt"""
        rng = np.random.default_rng(21)
        tasks = [sample_task(ALL_KINDS[i % len(ALL_KINDS)], WORLD, rng) for i in range(100)]
        diverse = 0
        for task in tasks:
            prompt = Prompt.from_task(task)
            texts = {sample_trace(prompt, trained_params, 1.0, rng).text for _ in range(32)}
            diverse += len(texts) >= 2
        assert diverse >= 95


class TestFlow:
    """Tests for the flow-matching generator"""

    def test_interpolate(self):
        """Tests the straight-line interpolant and its endpoints"""
        x0, x1 = np.zeros((2, 3)), np.ones((2, 3))
        assert np.allclose(interpolate(x0, x1, np.array([0.0, 1.0])), [[0, 0, 0], [1, 1, 1]])
        assert np.allclose(interpolate(x0, x1, np.array([0.25, 0.5])), [[0.25] * 3, [0.5] * 3])

    def test_exact_velocity_has_zero_loss(self):
        """Tests that the true straight-line velocity has zero flow-matching loss"""
        rng = np.random.default_rng(0)
        x0, x1 = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        loss = flow_matching_loss(x0, x1, rng.random(4), lambda x_t, t: x1 - x0)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_time_embedding(self):
        """Tests the sinusoidal embedding"""
        emb = time_embedding(np.array([0.0, 0.5]), 8)
        assert emb.shape == (2, 8)
        assert np.allclose(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])

    @pytest.mark.parametrize("name,index", [("vel_out_W", (3, 7)), ("vel_W0", (130, 1)), ("pool_W", (2, 5))])
    def test_gradient(self, rich_params, suite, name, index):
        """Tests the flow gradient against finite differences"""
        examples = examples_of(suite[:3], rich_params.tokenizer)
        _, grads = flow_loss(examples, rich_params, np.random.default_rng(3))
        expected = numeric_grad(
            lambda p: flow_loss(examples, p, np.random.default_rng(3))[0], rich_params, name, index
        )
        assert grads[name][index] == pytest.approx(expected, rel=1e-3, abs=1e-5)

    def test_non_finite_target(self, params, suite):
        """Tests that a non-finite target raises NumericalFault"""
        example = Example(Prompt.from_task(suite[0]), None, np.full(128, np.inf))
        with pytest.raises(NumericalFault):
            flow_loss([example], params, np.random.default_rng(0))

    def test_log_density(self):
        """Tests the Gaussian log-density against scipy"""
        rng = np.random.default_rng(0)
        x, mean = rng.standard_normal(6), rng.standard_normal(6)
        assert gaussian_log_density(x, mean, 0.3) == pytest.approx(norm.logpdf(x, mean, 0.3).sum())

    def test_zero_output_contracts_to_zero(self, params, suite):
        """Tests that a zero clean-image estimate shrinks the noise to exactly zero at the last step"""
        out = generate(Prompt.from_task(suite[0]), None, params, 4, rng=np.random.default_rng(0))

        assert out.states.shape == (5, 128)
        assert out.means.shape == (4, 128)
        for k, factor in enumerate([0.75, 0.5, 0.25, 0.0]):
            assert np.allclose(out.states[k + 1], factor * out.states[0])
        assert np.array_equal(out.image, np.zeros(128))
        assert out.log_densities is None

    def test_zero_velocity(self, params, suite):
        """Tests that an untrained velocity network leaves the initial noise unchanged"""
        params = Parameters(replace(params.config, prediction="velocity"), params.tensors, params.vocabulary)
        out = generate(Prompt.from_task(suite[0]), None, params, 4, rng=np.random.default_rng(0))

        assert np.allclose(out.states[-1], out.states[0])
        assert np.allclose(out.image, out.states[0] / np.sqrt(128))

    def test_image_units(self, rich_params, suite):
        """Tests that the returned image is the last state divided by the flow scale"""
        out = generate(Prompt.from_task(suite[1]), None, rich_params, 3, rng=np.random.default_rng(1))
        assert flow_scale(128) == pytest.approx(np.sqrt(128))
        assert np.array_equal(out.image, out.states[-1] / flow_scale(128))

    def test_data_prediction_velocity(self, rich_params, suite):
        """Tests the velocity derived from a clean-image estimate, with the time floor"""
        t = float64_tensors(rich_params)
        ctx = encode_context(Prompt.from_task(suite[0]), None, rich_params)[None, :].repeat(3, axis=0)
        x = np.random.default_rng(2).standard_normal((3, 128))
        times = np.array([0.8, 0.2, 0.01])
        raw = velocity(t, x, times, ctx, "velocity")
        derived = velocity(t, x, times, ctx, "data")

        assert np.allclose(derived, (x - raw) / np.array([[0.8], [0.2], [MIN_FLOW_TIME]]))

    def test_last_step_reaches_estimate(self, rich_params, suite):
        """Tests that the last ode step lands on the clean-image estimate when dt reaches the time floor"""
        prompt = Prompt.from_task(suite[2])
        out = generate(prompt, None, rich_params, 5, rng=np.random.default_rng(3))
        t = float64_tensors(rich_params)
        ctx = encode_context(prompt, None, rich_params)[None, :]
        estimate = velocity(t, out.states[-2][None, :], np.array([0.2]), ctx, "velocity")[0]
        assert np.allclose(out.states[-1], estimate)

    def test_sde_without_noise_is_ode(self, rich_params, suite):
        """Tests that the sde sampler with sigma 0 follows the ode path"""
        prompt = Prompt.from_task(suite[3])
        trace = suite[3].gt_trace
        ode = generate(prompt, trace, rich_params, 5, "ode", 0.0, np.random.default_rng(2))
        sde = generate(prompt, trace, rich_params, 5, "sde", 0.0, np.random.default_rng(2))

        assert np.allclose(ode.states, sde.states)
        assert np.array_equal(sde.log_densities, np.zeros(5))

    def test_sde_log_densities(self, rich_params, suite):
        """Tests that sde steps record the density of the realized transition"""
        out = generate(Prompt.from_task(suite[0]), None, rich_params, 4, "sde", 0.5, np.random.default_rng(3))
        scale = 0.5 * np.sqrt(0.25)
        expected = [norm.logpdf(out.states[k + 1], out.means[k], scale).sum() for k in range(4)]
        assert np.allclose(out.log_densities, expected)

    def test_divergence(self, params, suite):
        """Tests that a diverging trajectory raises NumericalFault"""
        params.tensors["vel_out_b"][:] = 1e8
        with pytest.raises(NumericalFault, match="diverged"):
            generate(Prompt.from_task(suite[0]), None, params, 2, rng=np.random.default_rng(0))

    @pytest.mark.parametrize(
        "kwargs,match", [({"steps": 0}, "steps"), ({"mode": "euler"}, "mode"), ({"sigma": -1.0}, "sigma")]
    )
    def test_invalid_arguments(self, params, suite, kwargs, match):
        """Tests argument validation of generate"""
        options = {"steps": 2, "mode": "sde", "sigma": 0.1, **kwargs}
        with pytest.raises(ValueError, match=match):
            generate(Prompt.from_task(suite[0]), None, params, rng=np.random.default_rng(0), **options)


def micro_config(rng):
    """A random architecture of width 8."""
    return ModelConfig(
        D=WORLD.D,
        vocab_size=len(VOCABULARY),
        embed_dim=int(rng.choice([4, 8])),
        context_dim=8,
        head_hidden=8,
        head_layers=int(rng.integers(1, 3)),
        velocity_hidden=8,
        velocity_layers=int(rng.integers(1, 3)),
        t_embed_dim=int(rng.choice([4, 8])),
        window=int(rng.integers(1, 4)),
        max_trace_len=64,
        prediction=str(rng.choice(["data", "velocity"])),
    )


class TestGradientSuite:
    """Finite-difference checks of both losses over random small architectures"""

    @pytest.mark.parametrize("seed", range(20))
    def test_random_architecture(self, suite, seed):
        """Tests the largest gradient entry of three random tensors for both losses"""
        rng = np.random.default_rng(seed)
        params = init_params(micro_config(rng), VOCABULARY, rng, zero_output=False)
        tasks = [suite[i] for i in rng.choice(len(suite), size=2, replace=False)]
        examples = examples_of(tasks, params.tokenizer)
        losses = {
            "cot": lambda p: cot_loss(examples, p),
            "flow": lambda p: flow_loss(examples, p, np.random.default_rng(seed)),
        }
        for fn in losses.values():
            _, grads = fn(params)
            names = [n for n in params.tensors if np.any(grads[n])]
            for name in rng.choice(names, size=3, replace=False):
                index = np.unravel_index(np.argmax(np.abs(grads[name])), grads[name].shape)
                expected = numeric_grad(lambda p: fn(p)[0], params, name, index)
                assert grads[name][index] == pytest.approx(expected, rel=1e-3, abs=1e-6), name


class TestOptimizers:
    """Tests for the optimizers"""

    def test_sgd_named_tensors(self, params):
        """Tests that SGD only moves the named tensors"""
        grads = {n: np.ones_like(t) for n, t in params.tensors.items()}
        before = params.copy()
        SGD(0.5).step(params, grads, names=["pool_b"])

        assert np.allclose(params["pool_b"], before["pool_b"] - 0.5)
        assert np.array_equal(params["ref_b"], before["ref_b"])
        assert params["pool_b"].dtype == np.float32

    def test_adam_first_step(self, params):
        """Tests that Adam's first step has the size of the learning rate"""
        grads = {n: np.full_like(t, 3.0) for n, t in params.tensors.items()}
        before = params.copy()
        Adam(0.01).step(params, grads)
        assert np.allclose(params["pool_b"], before["pool_b"] - 0.01, atol=1e-6)

    def test_make_optimizer(self):
        """Tests optimizer selection by name"""
        assert isinstance(make_optimizer("sgd", 0.1), SGD)
        assert isinstance(make_optimizer("adam", 0.1), Adam)
        with pytest.raises(ConfigError, match="Unknown optimizer"):
            make_optimizer("lbfgs", 0.1)


class TestCheckpoint:
    """Tests for the checkpoint format"""

    def test_bytes_are_stable(self, rich_params):
        """Tests that reading and rewriting a checkpoint reproduces its bytes"""
        data = checkpoint_bytes(rich_params)
        restored = checkpoint_from_bytes(data)

        assert data[:4] == b"ICFG"
        assert checkpoint_bytes(restored) == data
        assert restored.config == rich_params.config
        assert restored.vocabulary == rich_params.vocabulary

    def test_file(self, rich_params, tmp_path):
        """Tests saving and loading through a file"""
        path = tmp_path / "model.ckpt"
        save_checkpoint(rich_params, str(path))
        restored = load_checkpoint(str(path))
        for name, tensor in rich_params.tensors.items():
            assert np.array_equal(restored[name], tensor)

    def test_bad_magic(self, params):
        """Tests that other files are rejected"""
        with pytest.raises(CheckpointError, match="bad magic"):
            checkpoint_from_bytes(b"PK" + checkpoint_bytes(params)[2:])

    def test_bad_version(self, params):
        """Tests that other format versions are rejected"""
        data = checkpoint_bytes(params)
        data = data[:4] + struct.pack("<I", 2) + data[8:]
        with pytest.raises(CheckpointError, match="version 2"):
            checkpoint_from_bytes(data)

    def test_truncated(self, params):
        """Tests that truncated payloads are rejected"""
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_from_bytes(checkpoint_bytes(params)[:-4])

    def test_trailing_bytes(self, params):
        """Tests that trailing bytes are rejected"""
        with pytest.raises(CheckpointError, match="trailing"):
            checkpoint_from_bytes(checkpoint_bytes(params) + b"\x00")

    def test_missing_file(self, tmp_path):
        """Tests that an unreadable checkpoint raises CheckpointError"""
        with pytest.raises(CheckpointError, match="Cannot read checkpoint"):
            load_checkpoint(str(tmp_path / "absent.ckpt"))
