"""
Synthetic overhead scenes: scene graphs, rasterised images and templated
three-part captions (theme / objects / relations, plus absolute positions for
the four-expert split).

Everything here is a pure function of its inputs; `generate(seed, n)` derives a
private numpy generator per scene index so shards can be produced anywhere and
concatenated in index order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .colors import CLASS_GLYPHS, object_rgb, theme_background
from .errors import DataError, InputError

IMAGE_SIZE = 32
GRID = 4
CELL = IMAGE_SIZE // GRID

THEMES = ("residential", "industrial", "rural", "airport", "harbor")
CLASSES = ("building", "road", "tree", "plane", "tank", "boat", "field")
COLORS = ("red", "gray", "green", "white", "blue", "brown")
COUNT_WORDS = ("one", "two", "three", "four")
RELATIONS = ("left-of", "right-of", "above", "below", "adjacent-to")

SEP = "."
NO_RELATIONS = "no notable relations"

INSTRUCTIONS = (
    "describe this remote sensing image in detail",
    "write a detailed caption for this image",
    "what can you see in this picture",
)

THEME_CLASSES: Dict[str, Tuple[str, ...]] = {
    "residential": ("building", "road", "tree"),
    "industrial": ("tank", "building", "road"),
    "rural": ("field", "tree", "road"),
    "airport": ("plane", "road", "building"),
    "harbor": ("boat", "tank", "building"),
}

# Closed paraphrase lexicon; the first word of each group is canonical.
SYNONYMS: Tuple[Tuple[str, ...], ...] = (
    ("image", "picture", "photo"),
    ("shows", "depicts"),
    ("area", "region", "zone"),
    ("contains", "includes"),
    ("building", "structure"),
    ("road", "street"),
    ("boat", "ship"),
    ("plane", "jet"),
    ("field", "meadow"),
    ("gray", "grey"),
    ("adjacent", "next"),
)

SYNONYM_CANON: Dict[str, str] = {w: group[0] for group in SYNONYMS for w in group}
_CLASS_ALT = {group[0]: group[1] for group in SYNONYMS if group[0] in CLASSES}

# Caption aspects an expert can be assigned, by expert count.
EXPERT_ROLES: Dict[int, Tuple[str, ...]] = {
    1: ("caption",),
    2: ("theme", "details"),
    3: ("theme", "objects", "relations"),
    4: ("theme", "objects", "positions", "relations"),
}

_THEME_TEMPLATES = (
    "this image shows {art} {theme} area",
    "this picture depicts {art} {theme} region",
    "the photo shows {art} {theme} zone",
    "this image depicts {art} {theme} area",
    "the picture shows {art} {theme} region",
)
_OBJECT_LEADS = (
    "the image contains",
    "the picture includes",
    "the photo contains",
    "the image includes",
    "the picture contains",
)


@dataclass(frozen=True)
class _Variant:
    class_synonyms: bool
    grey: bool
    reverse_objects: bool
    flip_relations: bool
    next_to: bool


_VARIANTS = (
    _Variant(False, False, False, False, False),
    _Variant(True, False, True, False, False),
    _Variant(False, True, False, True, True),
    _Variant(True, True, True, True, False),
    _Variant(False, False, True, False, True),
)
NUM_VARIANTS = len(_VARIANTS)


@dataclass(frozen=True)
class SceneObject:
    cls: str
    color: str
    count: int
    cell: Optional[Tuple[int, int]] = None  # (row, col); unknown when parsed without positions

    @property
    def descriptor(self) -> Tuple[str, str]:
        return self.color, self.cls


@dataclass(frozen=True)
class Relation:
    subject: int
    object: int
    kind: str


@dataclass
class SceneGraph:
    theme: Optional[str] = None
    objects: List[SceneObject] = field(default_factory=list)
    relations: List[Relation] = field(default_factory=list)

    def canonical(self) -> Tuple:
        objs = tuple(sorted((o.cls, o.color, o.count) for o in self.objects))
        rels = tuple(sorted(_canonical_relation(self, r) for r in self.relations))
        return self.theme, objs, rels


@dataclass
class SceneImage:
    pixels: np.ndarray  # H x W x 3 float64 in [0, 1]

    def to_bytes(self) -> bytes:
        return np.round(self.pixels * 255.0).astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, size: int = IMAGE_SIZE) -> "SceneImage":
        arr = np.frombuffer(data, dtype=np.uint8)
        if arr.size != size * size * 3:
            raise DataError(f"image payload has {arr.size} bytes, expected {size * size * 3}")
        return cls(pixels=arr.reshape(size, size, 3).astype(np.float64) / 255.0)


@dataclass(frozen=True)
class CaptionBundle:
    theme_sentence: str
    object_sentence: str
    relation_sentence: str
    position_sentence: str = ""

    @property
    def full_caption(self) -> str:
        return f" {SEP} ".join((self.theme_sentence, self.object_sentence, self.relation_sentence))

    def aspect(self, role: str) -> str:
        if role == "caption":
            return self.full_caption
        if role == "theme":
            return self.theme_sentence
        if role == "objects":
            return self.object_sentence
        if role == "relations":
            return self.relation_sentence
        if role == "positions":
            return self.position_sentence
        if role == "details":
            return f" {SEP} ".join((self.object_sentence, self.relation_sentence))
        raise DataError(f"unknown caption aspect: {role!r}")


class Scene(NamedTuple):
    graph: SceneGraph
    image: SceneImage
    captions: CaptionBundle


class ParsedCaption(NamedTuple):
    graph: SceneGraph
    dropped: int


def derive_relation(a: Tuple[int, int], b: Tuple[int, int]) -> Optional[str]:
    """Spatial relation of cell a to cell b, or None when they are unrelated."""
    (ra, ca), (rb, cb) = a, b
    if (ra, ca) == (rb, cb):
        return None
    if ra == rb:
        return "left-of" if ca < cb else "right-of"
    if ca == cb:
        return "above" if ra < rb else "below"
    if max(abs(ra - rb), abs(ca - cb)) == 1:
        return "adjacent-to"
    return None


def _canonical_relation(g: SceneGraph, r: Relation) -> Tuple[str, Tuple[str, str], Tuple[str, str]]:
    a = g.objects[r.subject].descriptor
    b = g.objects[r.object].descriptor
    if r.kind == "right-of":
        return "left-of", b, a
    if r.kind == "below":
        return "above", b, a
    if r.kind == "adjacent-to":
        return "adjacent-to", min(a, b), max(a, b)
    return r.kind, a, b


def graphs_equivalent(a: SceneGraph, b: SceneGraph) -> bool:
    return a.canonical() == b.canonical()


def validate_graph(g: SceneGraph) -> None:
    if g.theme is not None and g.theme not in THEMES:
        raise DataError(f"unknown theme: {g.theme!r}")
    cells = [o.cell for o in g.objects if o.cell is not None]
    if len(set(cells)) != len(cells):
        raise DataError("objects must occupy disjoint cells")
    for o in g.objects:
        if o.cls not in CLASSES or o.color not in COLORS or not 1 <= o.count <= 4:
            raise DataError(f"invalid object: {o}")
        if o.cell is not None and not all(0 <= x < GRID for x in o.cell):
            raise DataError(f"object cell outside the {GRID}x{GRID} grid: {o.cell}")
    for r in g.relations:
        if not (0 <= r.subject < len(g.objects) and 0 <= r.object < len(g.objects)):
            raise DataError(f"relation references a missing object: {r}")
        if r.kind not in RELATIONS:
            raise DataError(f"unknown relation: {r.kind!r}")
        sa, sb = g.objects[r.subject].cell, g.objects[r.object].cell
        if sa is not None and sb is not None and derive_relation(sa, sb) != r.kind:
            raise DataError(f"relation {r} is inconsistent with cells {sa} and {sb}")


# --------------------------------------------------------------------------- rendering

_QUADRANTS = ((0, 0), (0, 4), (4, 0), (4, 4))


def render(g: SceneGraph) -> SceneImage:
    if g.theme is None:
        raise InputError("render needs a themed scene graph")
    pixels = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    pixels[:, :] = theme_background(g.theme)
    for o in g.objects:
        if o.cell is None:
            raise InputError(f"render needs a cell for every object: {o}")
        rgb = object_rgb(o.color)
        glyph = CLASS_GLYPHS[o.cls]
        y0, x0 = o.cell[0] * CELL, o.cell[1] * CELL
        for dy, dx in _QUADRANTS[: o.count]:
            block = pixels[y0 + dy : y0 + dy + 4, x0 + dx : x0 + dx + 4]
            block[glyph] = rgb
    return SceneImage(pixels=pixels)


# --------------------------------------------------------------------------- captions


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _class_word(cls: str, plural: bool, v: _Variant) -> str:
    word = _CLASS_ALT.get(cls, cls) if v.class_synonyms else cls
    return word + "s" if plural else word


def _color_word(color: str, v: _Variant) -> str:
    return "grey" if (v.grey and color == "gray") else color


def _describe(o: SceneObject, v: _Variant) -> str:
    return f"the {_color_word(o.color, v)} {_class_word(o.cls, False, v)}"


_PHRASES = {"left-of": "left of", "right-of": "right of", "above": "above", "below": "below", "adjacent-to": "adjacent to"}
_FLIPPED = {"left-of": "right-of", "right-of": "left-of", "above": "below", "below": "above", "adjacent-to": "adjacent-to"}


def caption_of(g: SceneGraph, variant: int = 0) -> CaptionBundle:
    """
    Templated sentences for a scene graph. Variant 0 is the canonical training
    target; variants 1-4 are the paraphrased references.
    """
    if not 0 <= variant < NUM_VARIANTS:
        raise InputError(f"caption variant must be in 0..{NUM_VARIANTS - 1}, got {variant}")
    v = _VARIANTS[variant]
    theme = g.theme or ""
    theme_sentence = _THEME_TEMPLATES[variant].format(art=_article(theme or "a"), theme=theme)

    objs = list(g.objects)
    if v.reverse_objects:
        objs.reverse()
    items = [
        f"{COUNT_WORDS[o.count - 1]} {_color_word(o.color, v)} {_class_word(o.cls, o.count > 1, v)}" for o in objs
    ]
    object_sentence = f"{_OBJECT_LEADS[variant]} " + " and ".join(items) if items else f"{_OBJECT_LEADS[variant]}"

    clauses = []
    for r in g.relations:
        a, b, kind = g.objects[r.subject], g.objects[r.object], r.kind
        if v.flip_relations:
            a, b, kind = b, a, _FLIPPED[kind]
        phrase = _PHRASES[kind]
        if kind == "adjacent-to" and v.next_to:
            phrase = "next to"
        clauses.append(f"{_describe(a, v)} is {phrase} {_describe(b, v)}")
    relation_sentence = " and ".join(clauses) if clauses else NO_RELATIONS

    positions = [
        f"{_describe(o, v)} is in row {COUNT_WORDS[o.cell[0]]} column {COUNT_WORDS[o.cell[1]]}"
        for o in g.objects
        if o.cell is not None
    ]
    return CaptionBundle(
        theme_sentence=theme_sentence,
        object_sentence=object_sentence,
        relation_sentence=relation_sentence,
        position_sentence=" and ".join(positions),
    )


def reference_captions(g: SceneGraph) -> List[str]:
    return [caption_of(g, variant=k).full_caption for k in range(NUM_VARIANTS)]


# --------------------------------------------------------------------------- parsing

_CLASS_SET = set(CLASSES)
_COLOR_SET = set(COLORS)
_THEME_SET = set(THEMES)
_COUNTS = {w: i + 1 for i, w in enumerate(COUNT_WORDS)}


def _normalise(word: str) -> str:
    word = SYNONYM_CANON.get(word, word)
    if word.endswith("s") and word[:-1] in SYNONYM_CANON:
        word = SYNONYM_CANON[word[:-1]]
    elif word.endswith("s") and word[:-1] in _CLASS_SET:
        word = word[:-1]
    return word


def _descriptor(tokens: Sequence[str]) -> Optional[Tuple[str, str]]:
    idx = [i for i, t in enumerate(tokens) if t in _CLASS_SET]
    if len(idx) != 1 or idx[0] == 0 or tokens[idx[0] - 1] not in _COLOR_SET:
        return None
    return tokens[idx[0] - 1], tokens[idx[0]]


def _find_relation(tokens: Sequence[str]) -> Optional[Tuple[str, int, int]]:
    for i, t in enumerate(tokens):
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if t in ("left", "right") and nxt == "of":
            return f"{t}-of", i, i + 2
        if t == "adjacent" and nxt == "to":
            return "adjacent-to", i, i + 2
        if t in ("above", "below"):
            return t, i, i + 1
    return None


def _parse_clause(tokens: List[str]):
    if " ".join(tokens) == NO_RELATIONS:
        return ("none",)
    has_class = any(t in _CLASS_SET for t in tokens)
    themes = [t for t in tokens if t in _THEME_SET]
    if not has_class:
        return ("theme", themes[0]) if len(themes) == 1 else None
    if "row" in tokens and "column" in tokens:
        r, c = tokens.index("row"), tokens.index("column")
        desc = _descriptor(tokens[: min(r, c)])
        row = _COUNTS.get(tokens[r + 1]) if r + 1 < len(tokens) else None
        col = _COUNTS.get(tokens[c + 1]) if c + 1 < len(tokens) else None
        if desc is None or row is None or col is None:
            return None
        return ("position", desc, (row - 1, col - 1))
    rel = _find_relation(tokens)
    if rel is not None:
        kind, start, end = rel
        left, right = _descriptor(tokens[:start]), _descriptor(tokens[end:])
        if left is None or right is None:
            return None
        return ("relation", left, kind, right)
    for i in range(len(tokens) - 2):
        if tokens[i] in _COUNTS and tokens[i + 1] in _COLOR_SET and tokens[i + 2] in _CLASS_SET:
            if sum(t in _CLASS_SET for t in tokens) != 1:
                return None
            return ("object", tokens[i + 2], tokens[i + 1], _COUNTS[tokens[i]])
    return None


def _clauses(text: str) -> Iterable[List[str]]:
    words = text.lower().split()
    sentence: List[str] = []
    for w in words + [SEP]:
        if w == SEP:
            clause: List[str] = []
            for t in sentence + ["and"]:
                if t == "and":
                    if clause:
                        yield clause
                    clause = []
                else:
                    clause.append(_normalise(t))
            sentence = []
        else:
            sentence.append(w)


def parse_caption(text: str) -> ParsedCaption:
    """
    Lenient extraction of a scene graph from caption text. Clauses that do not
    match the grammar are skipped and counted in `dropped`.
    """
    theme: Optional[str] = None
    objects: List[SceneObject] = []
    pending_relations = []
    pending_positions = []
    dropped = 0
    for clause in _clauses(text):
        parsed = _parse_clause(clause)
        if parsed is None:
            dropped += 1
        elif parsed[0] == "theme":
            theme = parsed[1] if theme is None else theme
        elif parsed[0] == "object":
            _, cls, color, count = parsed
            objects.append(SceneObject(cls=cls, color=color, count=count))
        elif parsed[0] == "relation":
            pending_relations.append(parsed[1:])
        elif parsed[0] == "position":
            pending_positions.append(parsed[1:])

    index = {}
    for i, o in enumerate(objects):
        index.setdefault(o.descriptor, i)
    for desc, cell in pending_positions:
        if desc not in index:
            dropped += 1
            continue
        i = index[desc]
        o = objects[i]
        objects[i] = SceneObject(cls=o.cls, color=o.color, count=o.count, cell=cell)
    relations = []
    for left, kind, right in pending_relations:
        if left not in index or right not in index:
            dropped += 1
            continue
        relations.append(Relation(subject=index[left], object=index[right], kind=kind))
    return ParsedCaption(SceneGraph(theme=theme, objects=objects, relations=relations), dropped)


# --------------------------------------------------------------------------- generation


def make_scene(seed: int, index: int) -> Scene:
    rng = np.random.default_rng([seed, index])
    # Themes are dealt from a shuffled deck of five per block to keep them balanced.
    deck = np.random.default_rng([seed, index // len(THEMES), 7919]).permutation(len(THEMES))
    theme = THEMES[int(deck[index % len(THEMES)])]

    k = int(rng.integers(2, 5))
    cells = [divmod(int(c), GRID) for c in rng.choice(GRID * GRID, size=k, replace=False)]
    pool = THEME_CLASSES[theme]
    seen: Set[Tuple[str, str]] = set()
    objects: List[SceneObject] = []
    for cell in cells:
        while True:
            cls = pool[int(rng.integers(len(pool)))]
            color = COLORS[int(rng.integers(len(COLORS)))]
            if (color, cls) not in seen:
                break
        seen.add((color, cls))
        objects.append(SceneObject(cls=cls, color=color, count=int(rng.integers(1, 5)), cell=cell))

    candidates = []
    for i in range(k):
        for j in range(i + 1, k):
            kind = derive_relation(objects[i].cell, objects[j].cell)
            if kind is not None:
                candidates.append(Relation(subject=i, object=j, kind=kind))
    m = min(2, len(candidates))
    picked = sorted(int(x) for x in rng.choice(len(candidates), size=m, replace=False)) if m else []
    graph = SceneGraph(theme=theme, objects=objects, relations=[candidates[p] for p in picked])
    return Scene(graph=graph, image=render(graph), captions=caption_of(graph))


def generate(seed: int, n: int) -> List[Scene]:
    if n < 1:
        raise InputError(f"scene count must be >= 1, got {n}")
    return [make_scene(seed, i) for i in range(n)]


def grammar_words() -> List[str]:
    """Every word the caption grammar and instruction set can emit."""
    words: Set[str] = set()
    for template in _THEME_TEMPLATES:
        for theme in THEMES:
            words.update(template.format(art=_article(theme), theme=theme).split())
    for lead in _OBJECT_LEADS:
        words.update(lead.split())
    for group in SYNONYMS:
        words.update(group)
    for cls in CLASSES:
        words.update((cls, cls + "s"))
    for alt in _CLASS_ALT.values():
        words.update((alt, alt + "s"))
    words.update(COLORS)
    words.update(COUNT_WORDS)
    words.update(" ".join(_PHRASES.values()).split())
    words.update(("the", "is", "and", "next", "in", "row", "column"))
    words.update(NO_RELATIONS.split())
    for instr in INSTRUCTIONS:
        words.update(instr.split())
    words.discard(SEP)
    return sorted(words)
