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
Oracle dual encoder
===================

**Module name:** :mod:`icge_align.embed`

.. currentmodule:: icge_align.embed

Deterministic image and caption encoders into a shared bag-of-features space,
the cosine reward between them, and a renderability proxy used as a quality
score when filtering data.

Feature vectors have one component per world dictionary feature plus a final
``UnparsedFlag`` component, set only for captions that do not parse.

Functions
---------

.. autosummary::
   embed_image
   embed_text
   cosine
   surrogate_reward
   quality_score

Code details
~~~~~~~~~~~~
"""
import warnings

import numpy as np

from .exceptions import DegenerateEmbeddingWarning
from .world import get_world


def feature_dim(cfg):
    """Length of the feature vectors for world ``cfg``."""
    return get_world(cfg).num_features + 1


def _indicator(world, keys):
    vec = np.zeros(world.num_features + 1)
    for key in keys:
        vec[world.feature_index[key]] = 1.0
    return vec


def spec_features(spec, cfg):
    """Indicator vector of a spec's features."""
    world = get_world(cfg)
    return _indicator(world, world.features(spec))


def embed_image(x, cfg):
    """Encode an image vector as the indicator of its decoded spec.

    Args:
        x (array[float]): image vector
        cfg (WorldConfig): world configuration

    Returns:
        array[float]: feature vector
    """
    world = get_world(cfg)
    return _indicator(world, world.features(world.decode(x)))


def embed_text(caption, cfg):
    """Encode a caption; never raises.

    Captions that do not parse under the caption grammar map to the
    ``UnparsedFlag``-only vector.
    """
    world = get_world(cfg)
    keys = world.parse_caption(caption) if isinstance(caption, str) else None
    if not keys:
        vec = np.zeros(world.num_features + 1)
        vec[-1] = 1.0
        return vec
    return _indicator(world, keys)


def cosine(u, v):
    """Cosine similarity, or 0 with a :class:`DegenerateEmbeddingWarning` for zero inputs."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("Cosine of a zero embedding; returning 0.", DegenerateEmbeddingWarning)
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def surrogate_reward(x, caption, cfg):
    """Cosine between the image and caption embeddings.

    Args:
        x (array[float]): generated image vector
        caption (str): caption extracted from the reasoning trace
        cfg (WorldConfig): world configuration

    Returns:
        float: reward in ``[-1, 1]``
    """
    return cosine(embed_image(x, cfg), embed_text(caption, cfg))


def quality_score(x, cfg):
    """Proximity of ``x`` to the set of clean renders, in ``[0, 1]``."""
    world = get_world(cfg)
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return 0.0
    nearest = world.render(world.decode(x))
    return float(np.clip(np.dot(x, nearest) / norm, 0.0, 1.0))
