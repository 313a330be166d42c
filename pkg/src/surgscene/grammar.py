"""Structured reasoning output format: render, parse, marker extraction.

One frame's output is a ``<think>...</think>`` segment followed by an
``<answer>`` segment of the fixed form::

    <answer> During <phase> phase, <N> surgical triplet(s) is/are identified:
    (1) instrument is <I> [SEG], target is <O> [SEG], action is <V>. (2) ...
    </answer>

"is" is used when N equals 1, "are" otherwise.  Every instrument and target
mention is immediately followed by a ``[SEG]`` marker, so a frame with N
triplets carries exactly 2N markers.  Only the answer segment is
grammar-checked; think content is free text (it must not contain the
``<answer>`` tag or a stray ``</think>``).

Marker ``token_position`` counts whitespace-delimited units of the full
rendered text; it exists for bookkeeping order only and is independent of
any LM tokenizer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .vocab import LabelSpace, Triplet

SEG_TOKEN = "[SEG]"
THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"

INSTRUMENT = "instrument"
TARGET = "target"


class GrammarError(ValueError):
    """Base class for all structured-output parse failures."""


class MissingTags(GrammarError):
    """No well-formed think/answer tag pair."""


class UnknownLabel(GrammarError):
    """A phase/instrument/verb/target name is not in the label space."""

    def __init__(self, kind: str, span: str):
        super().__init__(f"unknown {kind} name: {span!r}")
        self.kind = kind
        self.span = span


class CountMismatch(GrammarError):
    """Declared triplet count differs from the number of enumerated items."""


class DanglingSeg(GrammarError):
    """A [SEG] token appears without a preceding entity name slot."""


class TemplateMismatch(GrammarError):
    """The answer segment does not follow the fixed template."""


@dataclass(frozen=True)
class SegMarker:
    """One [SEG] occurrence bound to the entity mention preceding it."""

    entity_kind: str  # INSTRUMENT or TARGET
    triplet_index: int
    frame_index: int
    label_id: int
    token_position: int

    @property
    def entity_key(self) -> tuple[str, int]:
        """Grouping key: same (kind, label) means same entity."""
        return (self.entity_kind, self.label_id)


@dataclass(frozen=True)
class FrameSemantics:
    """Phase and triplet content of one frame."""

    frame_index: int
    phase: int
    triplets: tuple[Triplet, ...]

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)


@dataclass(frozen=True)
class StructuredOutput:
    """Parsed form of one frame's rendered text."""

    think_text: str
    semantics: FrameSemantics
    seg_markers: tuple[SegMarker, ...] = field(default_factory=tuple)


def render(semantics: FrameSemantics, think_text: str, space: LabelSpace) -> str:
    """Render semantics into the exact template text."""
    if not 0 <= semantics.phase < len(space.phases):
        raise IndexError(f"phase id {semantics.phase} out of range")
    for tag in (THINK_CLOSE, ANSWER_OPEN):
        if tag in think_text:
            raise ValueError(f"think text may not contain {tag!r}")
    n = semantics.n_triplets
    parts = [
        f"{THINK_OPEN}{think_text}{THINK_CLOSE}{ANSWER_OPEN} During "
        f"{space.phases[semantics.phase]} phase, {n} surgical triplet(s) "
        f"{'is' if n == 1 else 'are'} identified"
    ]
    if n == 0:
        parts.append(".")
    else:
        items = []
        for k, (i, v, o) in enumerate(semantics.triplets, start=1):
            items.append(
                f"({k}) instrument is {space.instruments[i]} {SEG_TOKEN}, "
                f"target is {space.targets[o]} {SEG_TOKEN}, "
                f"action is {space.verbs[v]}."
            )
        parts.append(": " + " ".join(items))
    parts.append(f" {ANSWER_CLOSE}")
    return "".join(parts)


_HEADER_RE = re.compile(
    r"^ During (?P<phase>\S+) phase, (?P<count>\d+) surgical triplet\(s\) "
    r"(?:is|are) identified(?P<tail>[:.])"
)
_ITEM_RE = re.compile(
    r"\((?P<num>\d+)\) instrument is (?P<inst>\S+) \[SEG\], "
    r"target is (?P<targ>\S+) \[SEG\], action is (?P<verb>\S+?)\.(?= )"
)


def _token_positions(text: str) -> list[int]:
    """Character offsets at which [SEG] markers start, mapped to whitespace
    token indices over the full text."""
    positions = {}
    for index, match in enumerate(re.finditer(r"\S+", text)):
        if match.group().startswith(SEG_TOKEN):
            positions[match.start()] = index
    return positions


def parse(text: str, space: LabelSpace, frame_index: int = 0) -> StructuredOutput:
    """Parse rendered text back into a StructuredOutput.

    Accepts arbitrary input; failures raise a typed :class:`GrammarError`
    subclass, never anything else.
    """
    answer_start = text.find(ANSWER_OPEN)
    answer_end = text.rfind(ANSWER_CLOSE)
    think_start = text.find(THINK_OPEN)
    if answer_start < 0 or answer_end < 0 or think_start < 0:
        raise MissingTags("expected <think>...</think><answer>...</answer>")
    think_close = text.rfind(THINK_CLOSE, 0, answer_start)
    think_from = think_start + len(THINK_OPEN)
    if think_close < think_from or answer_end < answer_start:
        raise MissingTags("think/answer tags out of order")
    think_text = text[think_from:think_close]
    answer = text[answer_start + len(ANSWER_OPEN) : answer_end]

    header = _HEADER_RE.match(answer)
    if header is None:
        raise TemplateMismatch(f"unrecognized answer header: {answer[:80]!r}")
    try:
        phase = space.phase_id(header.group("phase"))
    except KeyError:
        raise UnknownLabel("phase", header.group("phase")) from None
    declared = int(header.group("count"))

    body = answer[header.end() :]
    items: list[tuple[Triplet, int, int]] = []  # (components, inst_pos, targ_pos)
    if header.group("tail") == ".":
        if body != " ":
            raise TemplateMismatch(f"unexpected text after empty item list: {body!r}")
    else:
        cursor = 0
        if not body.startswith(" "):
            raise TemplateMismatch("expected space before first item")
        cursor = 1
        while cursor < len(body) - 1:
            match = _ITEM_RE.match(body, cursor)
            if match is None:
                if SEG_TOKEN in body[cursor:]:
                    raise DanglingSeg(
                        f"[SEG] outside an entity slot near: {body[cursor:cursor + 60]!r}"
                    )
                raise TemplateMismatch(f"malformed item near: {body[cursor:cursor + 60]!r}")
            if int(match.group("num")) != len(items) + 1:
                raise CountMismatch(
                    f"enumeration marker ({match.group('num')}) out of sequence"
                )
            try:
                inst = space.instrument_id(match.group("inst"))
            except KeyError:
                raise UnknownLabel("instrument", match.group("inst")) from None
            try:
                targ = space.target_id(match.group("targ"))
            except KeyError:
                raise UnknownLabel("target", match.group("targ")) from None
            try:
                verb = space.verb_id(match.group("verb"))
            except KeyError:
                raise UnknownLabel("verb", match.group("verb")) from None
            inst_at = answer_start + len(ANSWER_OPEN) + header.end() + match.start("inst")
            targ_at = answer_start + len(ANSWER_OPEN) + header.end() + match.start("targ")
            items.append(((inst, verb, targ), inst_at, targ_at))
            cursor = match.end()
            if cursor < len(body) - 1:
                if body[cursor] != " ":
                    raise TemplateMismatch("items must be single-space separated")
                cursor += 1
        if body[cursor:] != " ":
            raise TemplateMismatch("answer must end with a single space before tag")

    if len(items) != declared:
        raise CountMismatch(
            f"declared {declared} triplet(s) but found {len(items)} item(s)"
        )

    seg_positions = _token_positions(text)
    markers: list[SegMarker] = []
    for n, (components, inst_char, targ_char) in enumerate(items):
        for kind, label_id, name_char in (
            (INSTRUMENT, components[0], inst_char),
            (TARGET, components[2], targ_char),
        ):
            seg_char = text.find(SEG_TOKEN, name_char)
            token_position = seg_positions.get(seg_char)
            if token_position is None:  # pragma: no cover - structurally impossible
                raise DanglingSeg("marker bookkeeping failure")
            markers.append(
                SegMarker(
                    entity_kind=kind,
                    triplet_index=n,
                    frame_index=frame_index,
                    label_id=label_id,
                    token_position=token_position,
                )
            )

    semantics = FrameSemantics(
        frame_index=frame_index,
        phase=phase,
        triplets=tuple(components for components, _, _ in items),
    )
    return StructuredOutput(
        think_text=think_text, semantics=semantics, seg_markers=tuple(markers)
    )


def extract_seg_markers(outputs: list[StructuredOutput]) -> list[SegMarker]:
    """Concatenate markers over frames, preserving (frame, template) order."""
    markers: list[SegMarker] = []
    for output in outputs:
        markers.extend(output.seg_markers)
    return markers
