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
Unit tests for the surrogate embeddings and rewards
"""
import numpy as np
import pytest

from conftest import WORLD
from icge_align.embed import (
    cosine,
    embed_image,
    embed_text,
    feature_dim,
    quality_score,
    spec_features,
    surrogate_reward,
)
from icge_align.exceptions import DegenerateEmbeddingWarning
from icge_align.world import ATTRIBUTE_SLOTS, EntityInstance, SceneSpec, caption_of, get_world, render_scene

SPEC = SceneSpec(
    1,
    [
        EntityInstance("character", 2, 0, {slot: 1 for slot in ATTRIBUTE_SLOTS}),
        EntityInstance("object", 0, 2, {slot: 2 for slot in ATTRIBUTE_SLOTS}),
    ],
)


class TestEmbeddings:
    """Tests for the image and text embeddings"""

    def test_dimension(self):
        """Tests that embeddings carry one flag component after the features"""
        assert feature_dim(WORLD) == 107
        assert embed_image(render_scene(SPEC, WORLD), WORLD).shape == (107,)

    def test_image_and_caption_agree(self):
        """Tests that a clean render and its caption embed identically"""
        x = render_scene(SPEC, WORLD)
        expected = spec_features(SPEC, WORLD)

        assert np.array_equal(embed_image(x, WORLD), expected)
        assert np.array_equal(embed_text(caption_of(SPEC, WORLD), WORLD), expected)
        assert expected.sum() == 11

    @pytest.mark.parametrize("caption", ["", "a photo of something", "moon scene", None, 42])
    def test_unparsed_caption(self, caption):
        """Tests that captions outside the grammar map to the flag alone"""
        vec = embed_text(caption, WORLD)
        assert vec[-1] == 1.0
        assert vec.sum() == 1.0


class TestCosine:
    """Tests for the cosine similarity"""

    def test_range(self):
        """Tests that the cosine is clipped to [-1, 1]"""
        u = np.array([1.0, 2.0, 3.0])
        assert cosine(u, u) == pytest.approx(1.0)
        assert cosine(u, -u) == pytest.approx(-1.0)
        assert -1.0 <= cosine(u, 1e-300 * u + u) <= 1.0

    def test_zero_vector(self):
        """Tests that a zero embedding warns and scores 0"""
        with pytest.warns(DegenerateEmbeddingWarning):
            assert cosine(np.zeros(3), np.ones(3)) == 0.0


class TestRewards:
    """Tests for the surrogate reward and the quality score"""

    def test_matching_caption(self):
        """Tests that an image and its own caption score 1"""
        assert surrogate_reward(render_scene(SPEC, WORLD), caption_of(SPEC, WORLD), WORLD) == pytest.approx(1.0)

    def test_partial_match(self):
        """Tests that the reward counts shared features"""
        other = SPEC.with_entity(EntityInstance("object", 1, 2, {slot: 2 for slot in ATTRIBUTE_SLOTS}))
        reward = surrogate_reward(render_scene(SPEC, WORLD), caption_of(other, WORLD), WORLD)
        assert reward == pytest.approx(10.0 / 11.0)

    def test_unparsed_caption_scores_zero(self):
        """Tests that an unparseable caption earns no reward"""
        assert surrogate_reward(render_scene(SPEC, WORLD), "", WORLD) == 0.0

    def test_quality_of_clean_render(self):
        """Tests that clean renders have quality 1"""
        assert quality_score(render_scene(SPEC, WORLD), WORLD) == pytest.approx(1.0)

    def test_quality_of_noisy_render(self):
        """Tests that noise lowers the quality score"""
        rng = np.random.default_rng(0)
        noise = rng.standard_normal(128)
        x = render_scene(SPEC, WORLD) + noise / np.linalg.norm(noise)
        assert 0.0 <= quality_score(x, WORLD) < 0.95

    def test_quality_of_zero(self):
        """Tests that the zero vector has quality 0"""
        assert quality_score(np.zeros(128), WORLD) == 0.0

    def test_quality_of_random_vectors(self):
        """Tests that random unit vectors almost never look like clean renders"""
        rng = np.random.default_rng(1)
        scores = []
        for _ in range(1000):
            x = rng.standard_normal(128)
            scores.append(quality_score(x / np.linalg.norm(x), WORLD))
        assert np.mean(np.array(scores) < 0.9) >= 0.99

    def test_quality_falls_with_corruption(self):
        """Tests that the median quality falls as the corruption scale grows from 0 to 1"""
        rng = np.random.default_rng(2)
        clean = render_scene(SPEC, WORLD)
        noise = rng.standard_normal((100, 128))
        noise /= np.linalg.norm(noise, axis=1, keepdims=True)
        medians = [
            np.median([quality_score(clean + scale * n, WORLD) for n in noise]) for scale in np.linspace(0.0, 1.0, 6)
        ]

        assert medians[0] == pytest.approx(1.0)
        assert all(b <= a for a, b in zip(medians, medians[1:]))
        assert medians[-1] < medians[1]

    def test_one_shared_feature(self):
        """Tests the cosine of a single feature against two features"""
        u, v = np.zeros(feature_dim(WORLD)), np.zeros(feature_dim(WORLD))
        u[0], v[0], v[1] = 1.0, 1.0, 1.0
        assert cosine(u, v) == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-6)

    def test_one_attribute_difference(self):
        """Tests that changing a single attribute keeps the feature cosine clearly below 1"""
        world = get_world(WORLD)
        rng = np.random.default_rng(3)
        sims = []
        while len(sims) < 100:
            spec = world.random_spec(rng)
            if not spec.entities:
                continue
            entity = spec.entities[rng.integers(len(spec.entities))]
            slot = ATTRIBUTE_SLOTS[rng.integers(len(ATTRIBUTE_SLOTS))]
            changed = spec.with_entity(entity.with_attribute(slot, (entity.attributes[slot] + 1) % 4))
            sims.append(cosine(spec_features(spec, WORLD), spec_features(changed, WORLD)))

        assert max(sims) < 0.99

    def test_disjoint_features_score_zero(self):
        """Tests that an image and a caption sharing no feature earn no reward"""
        a = SceneSpec(0, [EntityInstance("character", 0, 0, {slot: 0 for slot in ATTRIBUTE_SLOTS})])
        b = SceneSpec(1, [EntityInstance("object", 1, 1, {slot: 1 for slot in ATTRIBUTE_SLOTS})])
        assert np.dot(spec_features(a, WORLD), spec_features(b, WORLD)) == 0.0
        assert surrogate_reward(render_scene(a, WORLD), caption_of(b, WORLD), WORLD) == pytest.approx(0.0, abs=1e-6)

    def test_reward_ignores_image_scale(self):
        """Tests that rescaling the image leaves the reward unchanged"""
        x = render_scene(SPEC, WORLD)
        caption = caption_of(SPEC.with_entity(EntityInstance("object", 1, 2, {s: 2 for s in ATTRIBUTE_SLOTS})), WORLD)
        assert surrogate_reward(3.5 * x, caption, WORLD) == surrogate_reward(x, caption, WORLD)
