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
In-context chain of thought
===========================

**Module name:** :mod:`icge_align.iccot`

.. currentmodule:: icge_align.iccot

Parsing, validation and serialization of structured reasoning traces. A trace
is one output caption followed by one relation per reference image:

.. code-block:: text

    <out_caption>beach scene ; center red furry cartoon sitting cat</out_caption><relation_1>provides the subject to depict</relation_1>

Tag content is opaque text in which ``<`` and ``>`` are forbidden. Whitespace
between tags is ignored and tag content is trimmed.

Classes
-------

.. autosummary::
   ReasoningTrace
   Issue
   ValidationReport

Functions
---------

.. autosummary::
   parse_trace
   validate_trace
   render_trace
   trace_to_json
   trace_from_json
   extract_caption

Code details
~~~~~~~~~~~~
"""
from collections import namedtuple
from dataclasses import dataclass
import json
import re

from .exceptions import InvalidTrace

CAPTION_TAG = "out_caption"

# issue codes
MISSING_CAPTION = "MissingCaption"
RELATION_COUNT_MISMATCH = "RelationCountMismatch"
MALFORMED_TAG = "MalformedTag"
DUPLICATE_TAG = "DuplicateTag"
STRAY_TEXT = "StrayText"

_BRACKETED = re.compile(r"<[^<>]*>")
_TAG = re.compile(r"<(/?)(out_caption|relation_([1-9][0-9]*))>")


def relation_tag(index):
    """Tag name of the relation for the 1-based reference ``index``."""
    return f"relation_{index}"


def tag_tokens(max_refs):
    """All opening and closing tags of the grammar for up to ``max_refs`` references.

    Returns:
        list[str]: tags in canonical order
    """
    names = [CAPTION_TAG] + [relation_tag(i) for i in range(1, max_refs + 1)]
    return [tag for name in names for tag in (f"<{name}>", f"</{name}>")]


Issue = namedtuple("Issue", ["code", "message"])


@dataclass(frozen=True)
class ReasoningTrace:
    """A parsed reasoning trace.

    Args:
        caption (str): the predicted output caption
        relations (Sequence[str]): role of reference image ``i`` at index ``i - 1``
    """

    caption: str
    relations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(self.relations))

    @property
    def num_refs(self):
        """int: number of reference images this trace describes"""
        return len(self.relations)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validating a tagged string or a trace.

    Args:
        issues (tuple[Issue]): problems found, in discovery order
    """

    issues: tuple = ()

    @property
    def ok(self):
        """bool: whether no issue was found"""
        return not self.issues

    @property
    def codes(self):
        """list[str]: the issue codes, in order"""
        return [issue.code for issue in self.issues]

    def __str__(self):
        if self.ok:
            return "valid"
        return "; ".join(f"{issue.code}: {issue.message}" for issue in self.issues)


def _check_content(name, content, issues):
    if "<" in content or ">" in content:
        issues.append(Issue(MALFORMED_TAG, f"content of <{name}> contains a tag delimiter"))


def _count_issues(relations, num_refs):
    issues = []
    for index in range(1, num_refs + 1):
        content = relations.get(index)
        if content is None:
            issues.append(Issue(RELATION_COUNT_MISMATCH, f"<{relation_tag(index)}> is missing"))
        elif not content:
            issues.append(Issue(RELATION_COUNT_MISMATCH, f"<{relation_tag(index)}> is empty"))
    for index in sorted(relations):
        if index > num_refs:
            issues.append(
                Issue(
                    RELATION_COUNT_MISMATCH,
                    f"<{relation_tag(index)}> given for only {num_refs} reference image(s)",
                )
            )
    return issues


def parse_trace(text, num_refs):
    """Parse a tagged reasoning string.

    Args:
        text (str): the tagged string
        num_refs (int): number of reference images the trace must describe

    Returns:
        ReasoningTrace or ValidationReport: the trace on success, otherwise a
        report listing every problem found
    """
    if num_refs < 0:
        raise ValueError(f"num_refs must be non-negative, got {num_refs}.")

    issues = []
    caption = None
    relations = {}
    open_name = None
    open_end = 0
    pos = 0

    for match in _BRACKETED.finditer(text):
        between = text[pos : match.start()]
        if open_name is None and between.strip():
            issues.append(Issue(STRAY_TEXT, f"text outside tags: {between.strip()!r}"))
        if open_name is None and ("<" in between or ">" in between):
            issues.append(Issue(MALFORMED_TAG, "unbalanced tag delimiter outside tags"))
        pos = match.end()

        tag = _TAG.fullmatch(match.group(0))
        if tag is None:
            issues.append(Issue(MALFORMED_TAG, f"unknown tag {match.group(0)!r}"))
            continue

        closing, name = tag.group(1) == "/", tag.group(2)
        if not closing:
            if open_name is not None:
                issues.append(Issue(MALFORMED_TAG, f"<{name}> opened inside <{open_name}>"))
                continue
            open_name, open_end = name, match.end()
            continue

        if open_name != name:
            issues.append(Issue(MALFORMED_TAG, f"</{name}> does not close an open <{name}>"))
            continue

        content = text[open_end : match.start()]
        _check_content(name, content, issues)
        content = content.strip()
        open_name = None

        if name == CAPTION_TAG:
            if caption is not None:
                issues.append(Issue(DUPLICATE_TAG, f"<{name}> appears more than once"))
            else:
                caption = content
        else:
            index = int(tag.group(3))
            if index in relations:
                issues.append(Issue(DUPLICATE_TAG, f"<{name}> appears more than once"))
            else:
                relations[index] = content

    tail = text[pos:]
    if open_name is not None:
        issues.append(Issue(MALFORMED_TAG, f"<{open_name}> is never closed"))
    else:
        if tail.strip():
            if "<" in tail or ">" in tail:
                issues.append(Issue(MALFORMED_TAG, "unbalanced tag delimiter outside tags"))
            else:
                issues.append(Issue(STRAY_TEXT, f"text outside tags: {tail.strip()!r}"))

    if not caption:
        issues.append(Issue(MISSING_CAPTION, "the output caption is missing or empty"))
    issues.extend(_count_issues(relations, num_refs))

    if issues:
        return ValidationReport(tuple(issues))
    return ReasoningTrace(caption, [relations[i] for i in range(1, num_refs + 1)])


def validate_trace(trace, num_refs=None):
    """Check a trace against its invariants.

    Args:
        trace (ReasoningTrace): trace to check
        num_refs (int or None): expected number of relations; defaults to the
            number the trace carries

    Returns:
        ValidationReport: the outcome
    """
    num_refs = trace.num_refs if num_refs is None else num_refs
    issues = []
    if not trace.caption.strip():
        issues.append(Issue(MISSING_CAPTION, "the output caption is missing or empty"))
    _check_content(CAPTION_TAG, trace.caption, issues)
    for index, relation in enumerate(trace.relations, start=1):
        _check_content(relation_tag(index), relation, issues)
    relations = {i: r.strip() for i, r in enumerate(trace.relations, start=1)}
    issues.extend(_count_issues(relations, num_refs))
    return ValidationReport(tuple(issues))


def _require_valid(trace):
    report = validate_trace(trace)
    if not report.ok:
        raise InvalidTrace(f"Invalid reasoning trace: {report}", report)
    for content in (trace.caption, *trace.relations):
        if content != content.strip():
            raise InvalidTrace(f"Tag content {content!r} has leading or trailing whitespace.")


def render_trace(trace):
    """Render a trace in canonical tagged form.

    The caption comes first, then relations in ascending index order, with no
    separators.

    Raises:
        InvalidTrace: if the trace violates its invariants
    """
    _require_valid(trace)
    parts = [f"<{CAPTION_TAG}>{trace.caption}</{CAPTION_TAG}>"]
    for index, relation in enumerate(trace.relations, start=1):
        name = relation_tag(index)
        parts.append(f"<{name}>{relation}</{name}>")
    return "".join(parts)


def trace_to_json(trace):
    """Serialize a trace as a compact, deterministic JSON object.

    Raises:
        InvalidTrace: if the trace violates its invariants
    """
    _require_valid(trace)
    return json.dumps(
        {"out_caption": trace.caption, "relations": list(trace.relations)},
        ensure_ascii=False,
        separators=(",", ":"),
    )


def trace_from_json(text, num_refs=None):
    """Inverse of :func:`trace_to_json`.

    Raises:
        InvalidTrace: if the JSON does not describe a valid trace
    """
    try:
        obj = json.loads(text)
        trace = ReasoningTrace(obj["out_caption"], obj["relations"])
    except (ValueError, KeyError, TypeError) as e:
        raise InvalidTrace(f"Not a reasoning trace JSON object: {e}") from e
    report = validate_trace(trace, num_refs)
    if not report.ok:
        raise InvalidTrace(f"Invalid reasoning trace: {report}", report)
    return trace


def extract_caption(text):
    """Pull the caption out of a tagged string, ignoring every other problem.

    Returns:
        str: the trimmed caption, or an empty string if there is no well-formed
        caption tag pair
    """
    match = re.search(r"<out_caption>([^<>]*)</out_caption>", text)
    return match.group(1).strip() if match else ""
