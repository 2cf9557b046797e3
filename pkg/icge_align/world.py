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
# pylint: disable=invalid-name
"""
Symbolic scene world
====================

**Module name:** :mod:`icge_align.world`

.. currentmodule:: icge_align.world

A small, exactly checkable stand-in for images. A :class:`SceneSpec` names a
scene and up to ``P`` entities in position slots; :func:`render_scene` maps it
to a unit vector by summing seeded prototype vectors, one per active feature,
and :func:`decode_scene` inverts the rendering.

Tasks of the eight in-context generation and editing kinds are sampled with
:func:`sample_task`. Their instructions come from a fixed template grammar and
are read back by :func:`interpret_instruction`, which is the single source of
the target spec and of the clauses the judge checks.

Classes
-------

.. autosummary::
   WorldConfig
   EntityInstance
   SceneSpec
   TaskKind
   Reference
   Interpretation
   TaskInstance
   World

Functions
---------

.. autosummary::
   render_scene
   decode_scene
   caption_of
   sample_task
   interpret_instruction
   oracle_trace
   is_index_free

Code details
~~~~~~~~~~~~
"""
from dataclasses import dataclass, field, replace
import enum
import functools
import itertools
import logging
import re

import numpy as np

from .exceptions import ConfigError, InvalidSpec, TaskError
from .iccot import ReasoningTrace

log = logging.getLogger(__name__)

CHARACTER = "character"
OBJECT = "object"
ATTRIBUTE_SLOTS = ("color", "texture", "style", "pose")
MAX_REFS = 4

_BASE_NAMES = {
    "character": ("cat", "dog", "fox", "robot", "knight", "wizard", "girl", "boy"),
    "object": ("cup", "hat", "lamp", "vase", "chair", "clock", "book", "guitar"),
    "scene": ("beach", "forest", "city", "kitchen"),
    "color": ("red", "blue", "green", "yellow", "black", "white"),
    "texture": ("smooth", "striped", "furry", "metallic"),
    "style": ("realistic", "cartoon", "watercolor", "sketch"),
    "pose": ("standing", "sitting", "running", "sleeping"),
}

_POSITION_WORDS = {1: ("center",), 2: ("left", "right"), 3: ("left", "center", "right")}


@dataclass(frozen=True)
class WorldConfig:
    """Configuration of the micro-world.

    Args:
        D (int): image vector dimension
        P (int): number of entity position slots
        n_characters, n_objects, n_scenes, n_colors, n_textures, n_styles, n_poses (int):
            vocabulary sizes
        world_seed (int): seed of the prototype dictionary
        ambiguity_rate (float): probability that an instruction uses index-free phrasing
        refine_top_k (int): candidates per group kept for decoder refinement
    """

    D: int = 128
    P: int = 3
    n_characters: int = 8
    n_objects: int = 8
    n_scenes: int = 4
    n_colors: int = 6
    n_textures: int = 4
    n_styles: int = 4
    n_poses: int = 4
    world_seed: int = 0
    ambiguity_rate: float = 0.3
    refine_top_k: int = 2

    def vocabulary_size(self, category):
        """Number of values in ``category`` (``"scene"``, ``"color"``, ...)."""
        return getattr(self, f"n_{category}s")

    def validate(self):
        """Check field ranges.

        Raises:
            ConfigError: naming the first offending field
        """
        if self.D < 16:
            raise ConfigError(f"world.D must be at least 16, got {self.D}.")
        if self.P < 1:
            raise ConfigError(f"world.P must be positive, got {self.P}.")
        for category in _BASE_NAMES:
            if self.vocabulary_size(category) < 2:
                raise ConfigError(
                    f"world.n_{category}s must be at least 2, got {self.vocabulary_size(category)}."
                )
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError(f"world.ambiguity_rate must lie in [0, 1], got {self.ambiguity_rate}.")
        if self.refine_top_k < 1:
            raise ConfigError(f"world.refine_top_k must be positive, got {self.refine_top_k}.")


@dataclass(frozen=True)
class EntityInstance:
    """One character or object placed in a position slot.

    Args:
        kind (str): ``"character"`` or ``"object"``
        identity (int): index into the kind's vocabulary
        position (int): slot index ``0..P-1``
        attributes (dict[str, int]): value index for every slot in :data:`ATTRIBUTE_SLOTS`
    """

    kind: str
    identity: int
    position: int
    attributes: dict = field(default_factory=dict)

    def with_attribute(self, slot, value):
        """Copy of this entity with one attribute changed."""
        return replace(self, attributes={**self.attributes, slot: value})

    def to_dict(self):
        # pylint: disable=missing-function-docstring
        return {
            "kind": self.kind,
            "identity": self.identity,
            "position": self.position,
            "attributes": {slot: self.attributes[slot] for slot in ATTRIBUTE_SLOTS if slot in self.attributes},
        }

    @classmethod
    def from_dict(cls, data):
        # pylint: disable=missing-function-docstring
        return cls(data["kind"], int(data["identity"]), int(data["position"]), dict(data["attributes"]))


@dataclass(frozen=True)
class SceneSpec:
    """Symbolic description of an image.

    Entities are kept sorted by position so that equal scenes compare equal.

    Args:
        scene_id (int): scene index
        entities (Sequence[EntityInstance]): placed entities
    """

    scene_id: int
    entities: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(sorted(self.entities, key=lambda e: e.position)))

    def entity_at(self, position):
        """The entity in slot ``position``, or ``None``."""
        for entity in self.entities:
            if entity.position == position:
                return entity
        return None

    def with_entity(self, entity):
        """Copy with ``entity`` placed in its slot, replacing any occupant."""
        others = [e for e in self.entities if e.position != entity.position]
        return SceneSpec(self.scene_id, others + [entity])

    def to_dict(self):
        # pylint: disable=missing-function-docstring
        return {"scene_id": self.scene_id, "entities": [e.to_dict() for e in self.entities]}

    @classmethod
    def from_dict(cls, data):
        # pylint: disable=missing-function-docstring
        return cls(int(data["scene_id"]), [EntityInstance.from_dict(e) for e in data["entities"]])


class TaskKind(str, enum.Enum):
    """The eight in-context generation and editing task kinds."""

    SUBJECT_DRIVEN = "SubjectDriven"
    SUBJECT_SUBJECT = "SubjectSubject"
    SUBJECT_SCENE = "SubjectScene"
    REF_SUBJECT_ADD = "RefSubjectAdd"
    REF_SUBJECT_REPLACE = "RefSubjectReplace"
    REF_ATTRIBUTE_LOCAL = "RefAttributeLocal"
    REF_ATTRIBUTE_GLOBAL = "RefAttributeGlobal"
    REF_SCENE_EDIT = "RefSceneEdit"

    @property
    def is_editing(self):
        """bool: whether the first reference is an image to edit"""
        return self not in _GENERATION_KINDS


_GENERATION_KINDS = {TaskKind.SUBJECT_DRIVEN, TaskKind.SUBJECT_SUBJECT, TaskKind.SUBJECT_SCENE}

# (explicit, index-free) instruction templates
_TEMPLATES = {
    TaskKind.SUBJECT_DRIVEN: (
        "Show the {subject} from image 1 in a {scene} scene",
        "Show this subject in a {scene} scene",
    ),
    TaskKind.SUBJECT_SUBJECT: (
        "Combine the subjects of {refs} in a {scene} scene",
        "Put them together in a {scene} scene",
    ),
    TaskKind.SUBJECT_SCENE: (
        "Place the subjects of {refs} into the scene of image {scene_ref}",
        "Put them into this scene",
    ),
    TaskKind.REF_SUBJECT_ADD: (
        "Add the {subject} from image 2 to image 1",
        "Add this subject to the picture",
    ),
    TaskKind.REF_SUBJECT_REPLACE: (
        "Replace the {target} in image 1 with the {subject} from image 2",
        "Swap in the new subject",
    ),
    TaskKind.REF_ATTRIBUTE_LOCAL: (
        "Give the {target} in image 1 the {slot} of the {subject} in image 2",
        "Give it the same {slot} as the other one",
    ),
    TaskKind.REF_ATTRIBUTE_GLOBAL: (
        "Apply the {slot} of image 2 to everything in image 1",
        "Make everything match the other {slot}",
    ),
    TaskKind.REF_SCENE_EDIT: (
        "Move the contents of image 1 into the scene of image 2",
        "Move them to the other scene",
    ),
}

SUBJECT_ROLE = "subject"
SCENE_ROLE = "scene"
ATTRIBUTE_ROLE = "attribute"
EDIT_ROLE = "edit"

_PHRASEBOOK = {
    SUBJECT_ROLE: "provides the subject to depict",
    SCENE_ROLE: "provides the scene to use",
    ATTRIBUTE_ROLE: "provides the {slot} to transfer",
    EDIT_ROLE: "is the image to edit",
}

_INDEXED = re.compile(r"\bimages? \d")


def _template_regex(template):
    parts = re.split(r"\{(\w+)\}", template)
    pattern = []
    for i, part in enumerate(parts):
        if i % 2 == 0:
            pattern.append(re.escape(part))
        elif part == "refs":
            pattern.append(r"(?P<refs>image \d+(?: and image \d+)*)")
        else:
            pattern.append(rf"(?P<{part}>[\w-]+)")
    return re.compile("".join(pattern))


_TEMPLATE_REGEXES = {
    kind: tuple(_template_regex(t) for t in pair) for kind, pair in _TEMPLATES.items()
}


def is_index_free(instruction):
    """Whether ``instruction`` refers to no reference image by index."""
    return _INDEXED.search(instruction) is None


def position_words(P):
    """Words naming the ``P`` position slots, left to right."""
    if P in _POSITION_WORDS:
        return _POSITION_WORDS[P]
    return tuple(f"slot{p + 1}" for p in range(P))


def layout(count, P):
    """Slots used by ``count`` subjects placed in reference order."""
    if count == 1:
        return [P // 2]
    return [int(p) for p in np.round(np.linspace(0, P - 1, count))]


@dataclass(frozen=True)
class Reference:
    """A reference image together with the hidden spec it was rendered from."""

    image: np.ndarray
    spec: SceneSpec


@dataclass(frozen=True)
class Interpretation:
    """What an instruction asks for, given the reference specs.

    Args:
        gt_spec (SceneSpec): the target scene
        roles (tuple[tuple]): per reference, ``(role,)`` or ``(ATTRIBUTE_ROLE, slot)``
        instruction_clauses (tuple): features the instruction requires of the target
        reference_clauses (tuple): reference-derived features the target must preserve
    """

    gt_spec: SceneSpec
    roles: tuple
    instruction_clauses: tuple
    reference_clauses: tuple


@dataclass(frozen=True)
class TaskInstance:
    """One in-context generation or editing problem."""

    task_kind: TaskKind
    refs: tuple
    instruction: str
    gt_spec: SceneSpec
    gt_image: np.ndarray
    gt_trace: ReasoningTrace

    @property
    def ref_images(self):
        """list[np.ndarray]: the reference image vectors"""
        return [ref.image for ref in self.refs]

    @property
    def ref_specs(self):
        """list[SceneSpec]: the hidden reference specs"""
        return [ref.spec for ref in self.refs]


class World:
    """Vocabulary, prototype dictionary and decoder for one :class:`WorldConfig`.

    Use :func:`get_world` rather than constructing this directly; worlds are
    cached per configuration.
    """

    def __init__(self, config):
        config.validate()
        self.config = config
        self.names = {
            category: tuple(
                _BASE_NAMES[category][i] if i < len(_BASE_NAMES[category]) else f"{category}{i + 1}"
                for i in range(config.vocabulary_size(category))
            )
            for category in _BASE_NAMES
        }
        self.positions = position_words(config.P)
        self.identities = [(CHARACTER, i) for i in range(config.n_characters)] + [
            (OBJECT, i) for i in range(config.n_objects)
        ]
        self._identity_index = {ident: g for g, ident in enumerate(self.identities)}
        self._word_lookup = {}
        for category, names in self.names.items():
            for i, name in enumerate(names):
                self._word_lookup[name] = (category, i)

        keys = [("scene", s) for s in range(config.n_scenes)]
        for p in range(config.P):
            keys += [("identity", p, kind, i) for kind, i in self.identities]
            for slot in ATTRIBUTE_SLOTS:
                keys += [("attr", p, slot, v) for v in range(config.vocabulary_size(slot))]
        self.feature_keys = keys
        self.feature_index = {key: i for i, key in enumerate(keys)}

        rng = np.random.default_rng(config.world_seed)
        protos = rng.standard_normal((len(keys), config.D))
        self.dictionary = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        self._pinv = np.linalg.pinv(self.dictionary.T)

        if len(keys) > config.D:
            log.warning(
                "World has %d dictionary features but only D=%d dimensions; "
                "decoding is best-effort rather than exact.",
                len(keys),
                config.D,
            )

        self._scene_rows = np.arange(config.n_scenes)
        self._identity_rows = [
            np.array([self.feature_index[("identity", p, k, i)] for k, i in self.identities])
            for p in range(config.P)
        ]
        self._attr_rows = [
            {
                slot: np.array(
                    [self.feature_index[("attr", p, slot, v)] for v in range(config.vocabulary_size(slot))]
                )
                for slot in ATTRIBUTE_SLOTS
            }
            for p in range(config.P)
        ]

    @property
    def num_features(self):
        """int: number of dictionary features"""
        return len(self.feature_keys)

    # ------------------------------------------------------------------ specs

    def validate_spec(self, spec):
        """Check a spec against the vocabularies.

        Raises:
            InvalidSpec: describing the first violation
        """
        cfg = self.config
        if not 0 <= spec.scene_id < cfg.n_scenes:
            raise InvalidSpec(f"scene_id {spec.scene_id} is outside 0..{cfg.n_scenes - 1}.")
        if len(spec.entities) > cfg.P:
            raise InvalidSpec(f"{len(spec.entities)} entities do not fit in {cfg.P} slots.")
        seen = set()
        for entity in spec.entities:
            if not 0 <= entity.position < cfg.P:
                raise InvalidSpec(f"Position {entity.position} is outside 0..{cfg.P - 1}.")
            if entity.position in seen:
                raise InvalidSpec(f"Position {entity.position} holds more than one entity.")
            seen.add(entity.position)
            if (entity.kind, entity.identity) not in self._identity_index:
                raise InvalidSpec(f"Unknown {entity.kind} identity {entity.identity}.")
            if set(entity.attributes) != set(ATTRIBUTE_SLOTS):
                raise InvalidSpec(
                    f"Entity attributes must assign exactly {ATTRIBUTE_SLOTS}, got {sorted(entity.attributes)}."
                )
            for slot, value in entity.attributes.items():
                if not 0 <= value < cfg.vocabulary_size(slot):
                    raise InvalidSpec(f"{slot} value {value} is outside the vocabulary.")

    def features(self, spec):
        """Feature keys active in ``spec``."""
        keys = [("scene", spec.scene_id)]
        for e in spec.entities:
            keys.append(("identity", e.position, e.kind, e.identity))
            keys += [("attr", e.position, slot, e.attributes[slot]) for slot in ATTRIBUTE_SLOTS]
        return keys

    def render(self, spec):
        """Normalized sum of the prototypes of ``spec``'s features."""
        self.validate_spec(spec)
        rows = [self.feature_index[key] for key in self.features(spec)]
        vec = self.dictionary[rows].sum(axis=0)
        return vec / np.linalg.norm(vec)

    def identity_name(self, kind, identity):
        # pylint: disable=missing-function-docstring
        return self.names[kind][identity]

    # --------------------------------------------------------------- decoding

    def _slot_vector(self, p, slot_state):
        if slot_state is None:
            return np.zeros(self.config.D)
        g, attrs = slot_state
        rows = [self._identity_rows[p][g]] + [self._attr_rows[p][s][v] for s, v in zip(ATTRIBUTE_SLOTS, attrs)]
        return self.dictionary[rows].sum(axis=0)

    @staticmethod
    def _best(candidates, base, target):
        sums = base[None, :] + candidates
        norms = np.linalg.norm(sums, axis=1)
        scores = np.where(norms > 0, sums @ target / np.where(norms > 0, norms, 1.0), -np.inf)
        return int(np.argmax(scores))

    def decode(self, x):
        """Best-scoring spec for an image vector.

        Greedy per-group matching on dictionary coefficients, followed by
        exhaustive refinement of each slot over its top candidates.
        """
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("Cannot decode a non-finite image vector.")
        norm = np.linalg.norm(x)
        if norm == 0.0:
            return SceneSpec(0)
        target = x / norm
        coef = self._pinv @ target
        k = self.config.refine_top_k

        scene_coef = coef[self._scene_rows]
        scene = int(np.argmax(scene_coef))
        threshold = 0.5 * max(scene_coef[scene], 1e-12)

        slots = []
        candidates = []
        for p in range(self.config.P):
            id_coef = coef[self._identity_rows[p]]
            attr_coef = [coef[self._attr_rows[p][slot]] for slot in ATTRIBUTE_SLOTS]
            g = int(np.argmax(id_coef))
            attrs = tuple(int(np.argmax(c)) for c in attr_coef)
            slots.append((g, attrs) if id_coef[g] > threshold else None)

            top_ids = np.argsort(-id_coef, kind="stable")[:k]
            top_attrs = [np.argsort(-c, kind="stable")[:k] for c in attr_coef]
            options = [None] + [
                (int(gi), tuple(int(a) for a in combo))
                for gi in top_ids
                for combo in itertools.product(*top_attrs)
            ]
            candidates.append((options, np.stack([self._slot_vector(p, o) for o in options])))

        top_scenes = np.argsort(-scene_coef, kind="stable")[:k]
        scene_vectors = self.dictionary[self._scene_rows[top_scenes]]

        for _ in range(2):
            slot_sum = sum(self._slot_vector(p, s) for p, s in enumerate(slots))
            scene = int(top_scenes[self._best(scene_vectors, slot_sum, target)])
            for p in range(self.config.P):
                rest = self.dictionary[self._scene_rows[scene]] + sum(
                    self._slot_vector(q, s) for q, s in enumerate(slots) if q != p
                )
                options, vectors = candidates[p]
                slots[p] = options[self._best(vectors, rest, target)]

        entities = []
        for p, state in enumerate(slots):
            if state is None:
                continue
            g, attrs = state
            kind, identity = self.identities[g]
            entities.append(EntityInstance(kind, identity, p, dict(zip(ATTRIBUTE_SLOTS, attrs))))
        return SceneSpec(scene, entities)

    # --------------------------------------------------------------- captions

    def caption(self, spec):
        """Canonical templated caption of ``spec``."""
        self.validate_spec(spec)
        parts = [f"{self.names['scene'][spec.scene_id]} scene"]
        for e in spec.entities:
            words = [self.positions[e.position]]
            words += [self.names[slot][e.attributes[slot]] for slot in ATTRIBUTE_SLOTS]
            words.append(self.identity_name(e.kind, e.identity))
            parts.append(" ".join(words))
        return " ; ".join(parts)

    def parse_caption(self, text):
        """Features named by a caption, or ``None`` if it does not parse.

        A caption is an optional leading ``"<scene> scene"`` segment followed by
        ``;``-separated slot segments: a position word and then any of the
        four attribute values and the identity, each at most once.
        """
        segments = [seg.split() for seg in text.split(";")]
        if not text.strip() or any(not words for words in segments):
            return None
        keys = []
        if len(segments[0]) == 2 and segments[0][1] == "scene":
            category, value = self._word_lookup.get(segments[0][0], (None, None))
            if category != "scene":
                return None
            keys.append(("scene", value))
            segments = segments[1:]

        used_positions = set()
        for words in segments:
            if words[0] not in self.positions:
                return None
            p = self.positions.index(words[0])
            if p in used_positions or len(words) < 2:
                return None
            used_positions.add(p)
            seen = set()
            for word in words[1:]:
                category, value = self._word_lookup.get(word, (None, None))
                if category is None or category == "scene" or category in seen:
                    return None
                seen.add(category)
                if category in (CHARACTER, OBJECT):
                    seen.update((CHARACTER, OBJECT))
                    keys.append(("identity", p, category, value))
                else:
                    keys.append(("attr", p, category, value))
        return keys

    def vocabulary_words(self):
        """Every word that captions, relations and instructions can contain."""
        words = {"scene", ";", "and"} | set(self.positions) | set(ATTRIBUTE_SLOTS)
        for names in self.names.values():
            words.update(names)
        for pair in _TEMPLATES.values():
            for template in pair:
                words.update(re.sub(r"\{\w+\}", " ", template).lower().split())
        for phrase in _PHRASEBOOK.values():
            words.update(re.sub(r"\{\w+\}", " ", phrase).split())
        words.update(str(i) for i in range(1, MAX_REFS + 1))
        words.add("image")
        return sorted(words)

    # ------------------------------------------------------------------ tasks

    def _random_entity(self, rng, position, exclude=()):
        choices = [g for g in range(len(self.identities)) if g not in exclude]
        kind, identity = self.identities[int(rng.choice(choices))]
        attrs = {slot: int(rng.integers(self.config.vocabulary_size(slot))) for slot in ATTRIBUTE_SLOTS}
        return EntityInstance(kind, identity, position, attrs)

    def _subject_spec(self, rng, exclude=()):
        scene = int(rng.integers(self.config.n_scenes))
        return SceneSpec(scene, [self._random_entity(rng, self.config.P // 2, exclude)])

    def _edit_spec(self, rng, min_entities, max_entities):
        count = int(rng.integers(min_entities, max_entities + 1))
        positions = sorted(int(p) for p in rng.choice(self.config.P, size=count, replace=False))
        entities, used = [], []
        for p in positions:
            e = self._random_entity(rng, p, exclude=used)
            used.append(self._identity_index[(e.kind, e.identity)])
            entities.append(e)
        return SceneSpec(int(rng.integers(self.config.n_scenes)), entities)

    def random_spec(self, rng):
        """A random valid spec with distinct identities and 0 to ``P`` entities."""
        return self._edit_spec(rng, 0, self.config.P)

    def _reference(self, spec):
        return Reference(self.render(spec), spec)

    def _gindex(self, entity):
        return self._identity_index[(entity.kind, entity.identity)]

    def sample_task(self, kind, rng):
        """Draw one task of ``kind``; see :func:`sample_task`."""
        kind = TaskKind(kind)
        cfg = self.config
        index_free = bool(rng.random() < cfg.ambiguity_rate)
        fields = {}

        if kind in (TaskKind.SUBJECT_SUBJECT, TaskKind.REF_SUBJECT_ADD) and cfg.P < 2:
            raise TaskError(f"{kind.value} needs at least 2 position slots, the world has P={cfg.P}.")

        if kind is TaskKind.SUBJECT_DRIVEN:
            subject = self._subject_spec(rng)
            scenes = [s for s in range(cfg.n_scenes) if s != subject.scene_id]
            fields = {"subject": self._entity_name(subject.entities[0]), "scene": self.names["scene"][int(rng.choice(scenes))]}
            specs = [subject]
        elif kind in (TaskKind.SUBJECT_SUBJECT, TaskKind.SUBJECT_SCENE):
            if kind is TaskKind.SUBJECT_SUBJECT:
                low, high = 2, min(3, cfg.P)
            else:
                low, high = 1, min(3, cfg.P)
            count = int(rng.integers(low, high + 1))
            specs, used = [], []
            for _ in range(count):
                spec = self._subject_spec(rng, exclude=used)
                used.append(self._gindex(spec.entities[0]))
                specs.append(spec)
            fields["refs"] = " and ".join(f"image {i}" for i in range(1, count + 1))
            if kind is TaskKind.SUBJECT_SUBJECT:
                fields["scene"] = self.names["scene"][int(rng.integers(cfg.n_scenes))]
            else:
                specs.append(SceneSpec(int(rng.integers(cfg.n_scenes))))
                fields["scene_ref"] = str(count + 1)
        elif kind is TaskKind.REF_SUBJECT_ADD:
            base = self._edit_spec(rng, 1, cfg.P - 1)
            subject = self._subject_spec(rng, exclude=[self._gindex(e) for e in base.entities])
            specs = [base, subject]
            fields["subject"] = self._entity_name(subject.entities[0])
        elif kind is TaskKind.REF_SUBJECT_REPLACE:
            base = self._edit_spec(rng, 1, min(2, cfg.P))
            target = base.entities[0] if index_free else base.entities[int(rng.integers(len(base.entities)))]
            subject = self._subject_spec(rng, exclude=[self._gindex(e) for e in base.entities])
            specs = [base, subject]
            fields = {"target": self._entity_name(target), "subject": self._entity_name(subject.entities[0])}
        elif kind in (TaskKind.REF_ATTRIBUTE_LOCAL, TaskKind.REF_ATTRIBUTE_GLOBAL):
            base = self._edit_spec(rng, 1, min(2, cfg.P))
            target = base.entities[0] if index_free or kind is TaskKind.REF_ATTRIBUTE_GLOBAL else (
                base.entities[int(rng.integers(len(base.entities)))]
            )
            slot = ATTRIBUTE_SLOTS[int(rng.integers(len(ATTRIBUTE_SLOTS)))]
            source = self._subject_spec(rng)
            values = [v for v in range(cfg.vocabulary_size(slot)) if v != target.attributes[slot]]
            source_entity = source.entities[0].with_attribute(slot, int(rng.choice(values)))
            source = SceneSpec(source.scene_id, [source_entity])
            specs = [base, source]
            fields = {"target": self._entity_name(target), "slot": slot, "subject": self._entity_name(source_entity)}
        else:
            base = self._edit_spec(rng, 1, min(2, cfg.P))
            scenes = [s for s in range(cfg.n_scenes) if s != base.scene_id]
            specs = [base, SceneSpec(int(rng.choice(scenes)))]

        template = _TEMPLATES[kind][1 if index_free else 0]
        names = set(re.findall(r"\{(\w+)\}", template))
        instruction = template.format(**{k: v for k, v in fields.items() if k in names})

        refs = tuple(self._reference(spec) for spec in specs)
        interpretation = self.interpret(kind, [r.spec for r in refs], instruction)
        gt_spec = interpretation.gt_spec
        trace = self._trace_from(interpretation, gt_spec)
        return TaskInstance(kind, refs, instruction, gt_spec, self.render(gt_spec), trace)

    def _entity_name(self, entity):
        return self.identity_name(entity.kind, entity.identity)

    def _find_entity(self, spec, name):
        for e in spec.entities:
            if self._entity_name(e) == name:
                return e
        raise TaskError(f"No {name!r} in the image to edit.")

    def _match(self, kind, instruction):
        for regex in _TEMPLATE_REGEXES[kind]:
            match = regex.fullmatch(instruction.strip())
            if match:
                return match.groupdict()
        raise TaskError(f"Instruction {instruction!r} does not fit the {kind.value} templates.")

    def _scene_value(self, word):
        category, value = self._word_lookup.get(word, (None, None))
        if category != "scene":
            raise TaskError(f"Unknown scene {word!r}.")
        return value

    def interpret(self, kind, ref_specs, instruction):
        """Read an instruction against the reference specs; see :func:`interpret_instruction`."""
        # pylint: disable=too-many-locals,too-many-branches,too-many-statements
        kind = TaskKind(kind)
        fields = self._match(kind, instruction)
        feats = self.features

        if kind in _GENERATION_KINDS:
            if kind is TaskKind.SUBJECT_SCENE:
                scene_refs = [i for i, s in enumerate(ref_specs) if not s.entities]
                if len(scene_refs) != 1:
                    raise TaskError("SubjectScene needs exactly one scene reference.")
                scene = ref_specs[scene_refs[0]].scene_id
            else:
                scene = self._scene_value(fields["scene"])
            subjects = [s.entities[0] for s in ref_specs if s.entities]
            if not subjects:
                raise TaskError(f"{kind.value} needs at least one subject reference.")
            if kind is TaskKind.SUBJECT_DRIVEN and len(ref_specs) != 1:
                raise TaskError("SubjectDriven takes exactly one reference.")
            placed = [replace(e, position=p) for e, p in zip(subjects, layout(len(subjects), self.config.P))]
            gt = SceneSpec(scene, placed)
            roles = tuple((SUBJECT_ROLE,) if s.entities else (SCENE_ROLE,) for s in ref_specs)
            instruction_clauses = [("scene", scene)] + [("identity", e.position, e.kind, e.identity) for e in placed]
            reference_clauses = [k for k in feats(gt) if k[0] != "scene"]
            if kind is TaskKind.SUBJECT_SCENE:
                reference_clauses.insert(0, ("scene", scene))
            return Interpretation(gt, roles, tuple(instruction_clauses), tuple(reference_clauses))

        if len(ref_specs) != 2:
            raise TaskError(f"{kind.value} takes exactly two references.")
        base, other = ref_specs
        if kind is TaskKind.REF_SCENE_EDIT:
            gt = SceneSpec(other.scene_id, base.entities)
            roles = ((EDIT_ROLE,), (SCENE_ROLE,))
            instruction_clauses = [("scene", other.scene_id)]
        else:
            if not other.entities or not base.entities:
                raise TaskError(f"{kind.value} needs entities in both references.")
            source = other.entities[0]
            if kind is TaskKind.REF_SUBJECT_ADD:
                free = [p for p in range(self.config.P) if base.entity_at(p) is None]
                if not free:
                    raise TaskError("The image to edit has no free slot.")
                added = replace(source, position=free[0])
                gt = base.with_entity(added)
                roles = ((EDIT_ROLE,), (SUBJECT_ROLE,))
                instruction_clauses = [("identity", added.position, added.kind, added.identity)]
            elif kind is TaskKind.REF_SUBJECT_REPLACE:
                target = self._find_entity(base, fields["target"]) if "target" in fields else base.entities[0]
                new = replace(target, kind=source.kind, identity=source.identity)
                gt = base.with_entity(new)
                roles = ((EDIT_ROLE,), (SUBJECT_ROLE,))
                instruction_clauses = [("identity", new.position, new.kind, new.identity)]
            else:
                slot = fields["slot"]
                if slot not in ATTRIBUTE_SLOTS:
                    raise TaskError(f"Unknown attribute slot {slot!r}.")
                value = source.attributes[slot]
                if kind is TaskKind.REF_ATTRIBUTE_LOCAL:
                    targets = [self._find_entity(base, fields["target"]) if "target" in fields else base.entities[0]]
                else:
                    targets = list(base.entities)
                gt = base
                for target in targets:
                    gt = gt.with_entity(target.with_attribute(slot, value))
                roles = ((EDIT_ROLE,), (ATTRIBUTE_ROLE, slot))
                instruction_clauses = [("attr", t.position, slot, value) for t in targets]
        return Interpretation(gt, roles, tuple(instruction_clauses), tuple(feats(gt)))

    def _trace_from(self, interpretation, gt_spec):
        relations = []
        for role in interpretation.roles:
            phrase = _PHRASEBOOK[role[0]]
            relations.append(phrase.format(slot=role[1]) if len(role) > 1 else phrase)
        return ReasoningTrace(self.caption(gt_spec), relations)

    def oracle_trace(self, ref_specs, instruction, kind):
        """Ground-truth trace from the references and instruction alone."""
        interpretation = self.interpret(kind, ref_specs, instruction)
        return self._trace_from(interpretation, interpretation.gt_spec)


@functools.lru_cache(maxsize=16)
def get_world(config):
    """The cached :class:`World` for ``config``."""
    return World(config)


def render_scene(spec, cfg):
    """Render a spec to a unit image vector.

    Args:
        spec (SceneSpec): the scene
        cfg (WorldConfig): world configuration

    Returns:
        np.ndarray: vector of ``cfg.D`` components with unit norm

    Raises:
        InvalidSpec: if the spec is outside the configured vocabularies
    """
    return get_world(cfg).render(spec)


def decode_scene(x, cfg):
    """Decode an image vector to the best-matching spec.

    For clean renders this is exact whenever the dictionary has full column
    rank, which holds for the default configuration.
    """
    return get_world(cfg).decode(x)


def caption_of(spec, cfg):
    """Canonical caption of ``spec``."""
    return get_world(cfg).caption(spec)


def sample_task(kind, cfg, rng):
    """Draw a task of the given kind.

    Args:
        kind (TaskKind or str): the task kind
        cfg (WorldConfig): world configuration
        rng (np.random.Generator): random stream

    Returns:
        TaskInstance: the task, with target spec, image and trace filled in

    Raises:
        TaskError: if the kind cannot be realized under ``cfg``
    """
    return get_world(cfg).sample_task(kind, rng)


def interpret_instruction(kind, ref_specs, instruction, cfg):
    """Target spec and judge clauses implied by an instruction.

    Raises:
        TaskError: if the instruction does not fit the kind's templates or the
            references do not support it
    """
    return get_world(cfg).interpret(kind, ref_specs, instruction)


def oracle_trace(task, cfg):
    """Ground-truth reasoning trace of ``task``.

    Only the reference specs and the instruction are consulted; the target
    image is never read.
    """
    return get_world(cfg).oracle_trace(task.ref_specs, task.instruction, task.task_kind)
