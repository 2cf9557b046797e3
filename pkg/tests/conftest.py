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
import numpy as np
import pytest

from icge_align.datafactory import build_records
from icge_align.model import ModelConfig, Tokenizer, init_params, save_checkpoint
from icge_align.sft import SftConfig, train_sft
from icge_align.world import TaskKind, WorldConfig, sample_task


np.random.seed(42)


# ==========================================================
# Some useful global variables

# default world: 106 dictionary features in 128 dimensions
WORLD = WorldConfig()

VOCABULARY = Tokenizer.from_world(WORLD).vocabulary

# a policy small enough for autograd on a laptop
SMALL_MODEL = ModelConfig(
    D=WORLD.D,
    vocab_size=len(VOCABULARY),
    embed_dim=8,
    context_dim=16,
    head_hidden=16,
    head_layers=1,
    velocity_hidden=32,
    velocity_layers=1,
    t_embed_dim=8,
    window=2,
    max_trace_len=64,
)

# the same architecture as a configuration file section
SMALL_MODEL_SECTION = {
    "embed_dim": 8,
    "context_dim": 16,
    "head_hidden": 16,
    "head_layers": 1,
    "velocity_hidden": 32,
    "velocity_layers": 1,
    "t_embed_dim": 8,
    "window": 2,
    "max_trace_len": 64,
}

ALL_KINDS = list(TaskKind)


def numeric_grad(fn, params, name, index, eps=1e-3):
    """Central finite difference of ``fn`` in one parameter entry."""
    plus, minus = params.copy(), params.copy()
    plus.tensors[name][index] += eps
    minus.tensors[name][index] -= eps
    delta = float(plus.tensors[name][index]) - float(minus.tensors[name][index])
    return (fn(plus) - fn(minus)) / delta


# ==========================================================
# pytest fixtures


@pytest.fixture
def tol():
    """Numerical tolerance for float64 comparisons."""
    return {"atol": 1e-8, "rtol": 1e-6}


@pytest.fixture
def world_cfg():
    """The default world configuration."""
    return WORLD


@pytest.fixture
def model_cfg():
    """The small model configuration."""
    return SMALL_MODEL


@pytest.fixture
def params():
    """Small untrained parameters with zero output layers."""
    return init_params(SMALL_MODEL, VOCABULARY, np.random.default_rng(7))


@pytest.fixture
def rich_params():
    """Small untrained parameters with every layer random."""
    return init_params(SMALL_MODEL, VOCABULARY, np.random.default_rng(11), zero_output=False)


@pytest.fixture
def suite():
    """One task of every kind."""
    rng = np.random.default_rng(42)
    return [sample_task(kind, WORLD, rng) for kind in ALL_KINDS]


@pytest.fixture(scope="session")
def records():
    """A small clean dataset."""
    return build_records(8, None, WORLD, 0.0, np.random.default_rng(5))


@pytest.fixture(scope="session")
def sft_checkpoint(records, tmp_path_factory):
    """Path of a checkpoint from a few steps of supervised fine-tuning."""
    path = tmp_path_factory.mktemp("ckpt") / "sft.ckpt"
    init = init_params(SMALL_MODEL, VOCABULARY, np.random.default_rng(3))
    params, _ = train_sft(records, init, SftConfig(steps=3, batch_size=4, optimizer="adam"))
    save_checkpoint(params, str(path))
    return str(path)


@pytest.fixture(scope="session")
def trained_params():
    """Small parameters after supervised fine-tuning with the default settings."""
    data = build_records(64, None, WORLD, 0.0, np.random.default_rng(17))
    init = init_params(SMALL_MODEL, VOCABULARY, np.random.default_rng(19))
    params, _ = train_sft(data, init, SftConfig())
    return params


@pytest.fixture(scope="session")
def corpus():
    """A thousand records with the default corruption rate."""
    return build_records(1000, None, WORLD, 0.2, np.random.default_rng(43))
