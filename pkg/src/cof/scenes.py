"""Synthetic visual world: structured prompts, grid scenes, deterministic
rasterization, detection, and semantic/aesthetic scoring.

The domain is deliberately exact. Scenes are objects on an 8x8 cell grid,
each object a solid-color block whose footprint encodes its shape
(circle 1x1, cross 1x2, triangle 2x1, square 2x2 cells). A cell is 16x16
pixels, i.e. two 8x8 codec patches per axis, so every rendered cell is
patch-aligned and survives the latent codec losslessly when noiseless.
Colors come from a fixed 14-entry palette (8 object colors, 6 backgrounds)
whose entries differ by at least 48 intensity units in some channel, so
per-cell mean-color classification is exact on clean renders.

"Aesthetics" is a scalar in [0, 1]: rasterization adds symmetric two-point
noise of amplitude A = round((1 - level) * 64) per block, and detection
inverts that with the median absolute residual. Everything here is a pure
function of its inputs; there is no hidden state anywhere.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DetectionAmbiguous,
    EditInapplicable,
    PlacementExhausted,
    ShapeIncompatible,
)

# --------------------------------------------------------------------------
# Geometry and palette constants
# --------------------------------------------------------------------------

GRID_ROWS = 8
GRID_COLS = 8
CELL_PX = 16  # 2x2 codec patches of 8px
NOISE_UNIT = 64  # amplitude at aesthetic_level = 0
DEFAULT_NOISE_BLOCK = 16  # noise sign shared per 16x16 block (one cell)
AMBIGUITY_MARGIN = 8

# anchor sites used by generators; 1-cell gap between any two sites even
# for 2x2 footprints, so footprints never touch
SITE_COORDS = (0, 3, 6)

SHAPES = ("circle", "square", "triangle", "cross")
SHAPE_FOOTPRINT = {
    "circle": (1, 1),
    "square": (2, 2),
    "triangle": (2, 1),
    "cross": (1, 2),
}
FOOTPRINT_SHAPE = {v: k for k, v in SHAPE_FOOTPRINT.items()}

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple")
COLOR_RGB = {
    "red": (160, 64, 64),
    "green": (64, 160, 64),
    "blue": (64, 64, 160),
    "yellow": (160, 160, 64),
    "magenta": (160, 64, 160),
    "cyan": (64, 160, 160),
    "orange": (160, 112, 64),
    "purple": (112, 64, 160),
}

BACKGROUNDS = ("plain", "forest", "desert", "ocean", "night", "snow")
BACKGROUND_RGB = {
    "plain": (112, 112, 112),
    "forest": (64, 112, 64),
    "desert": (112, 112, 64),
    "ocean": (64, 112, 112),
    "night": (64, 64, 64),
    "snow": (160, 160, 160),
}

RELATIONS = ("left-of", "right-of", "above", "below")
COUNTS = (1, 2, 3, 4)
COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}
WORD_COUNTS = {v: k for k, v in COUNT_WORDS.items()}

BACKGROUND_PHRASE = {
    "plain": "on a plain background",
    "forest": "in a forest",
    "desert": "in a desert",
    "ocean": "in the ocean",
    "night": "at night",
    "snow": "in the snow",
}
PHRASE_BACKGROUND = {v: k for k, v in BACKGROUND_PHRASE.items()}

RELATION_PHRASE = {
    "left-of": "to the left of",
    "right-of": "to the right of",
    "above": "above",
    "below": "below",
}
PHRASE_RELATION = {v: k for k, v in RELATION_PHRASE.items()}

_UINT64 = (1 << 64) - 1


def palette_entries() -> list[tuple[str, bool, tuple[int, int, int]]]:
    """All palette entries as (name, is_background, rgb), object colors first."""
    out = [(c, False, COLOR_RGB[c]) for c in COLORS]
    out += [(b, True, BACKGROUND_RGB[b]) for b in BACKGROUNDS]
    return out


_PALETTE = palette_entries()
_PALETTE_RGB = np.array([rgb for _, _, rgb in _PALETTE], dtype=np.float64)


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


class Category(Enum):
    ATTRIBUTE_BINDING = "attribute-binding"
    OBJECT_COMBINATION = "object-combination"
    QUANTITY_CONTROL = "quantity-control"
    SPATIAL_ARRANGEMENT = "spatial-arrangement"
    CONTEXT_MANIPULATION = "context-manipulation"

    @property
    def slug(self) -> str:
        return self.value


class ConstraintKind(Enum):
    OBJECT_PRESENT = "ObjectPresent"
    COLOR = "Color"
    SHAPE = "Shape"
    COUNT = "Count"
    RELATIVE_POSITION = "RelativePosition"
    BACKGROUND = "Background"


# primary constraint kind per category
PRIMARY_KIND = {
    Category.ATTRIBUTE_BINDING: ConstraintKind.COLOR,
    Category.OBJECT_COMBINATION: ConstraintKind.OBJECT_PRESENT,
    Category.QUANTITY_CONTROL: ConstraintKind.COUNT,
    Category.SPATIAL_ARRANGEMENT: ConstraintKind.RELATIVE_POSITION,
    Category.CONTEXT_MANIPULATION: ConstraintKind.BACKGROUND,
}

MAX_CONSTRAINTS = 4

_KIND_VALUES = {
    ConstraintKind.OBJECT_PRESENT: SHAPES,
    ConstraintKind.COLOR: COLORS,
    ConstraintKind.SHAPE: SHAPES,
    ConstraintKind.COUNT: COUNTS,
    ConstraintKind.RELATIVE_POSITION: RELATIONS,
    ConstraintKind.BACKGROUND: BACKGROUNDS,
}


@dataclass(frozen=True)
class Constraint:
    """One enumerated requirement on a scene.

    ``subject`` is an object-slot index. A RelativePosition constraint
    relates its subject slot to slot ``subject + 1``.
    """

    kind: ConstraintKind
    subject: int
    value: object

    def __post_init__(self):
        if self.value not in _KIND_VALUES[self.kind]:
            raise ValueError(f"{self.value!r} is not a valid {self.kind.value} value")
        if not 0 <= self.subject < 4:
            raise ValueError(f"slot index {self.subject} out of range")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "subject": self.subject, "value": self.value}

    @staticmethod
    def from_dict(d: dict) -> "Constraint":
        return Constraint(ConstraintKind(d["kind"]), d["subject"], d["value"])


@dataclass(frozen=True)
class PromptSpec:
    """Structured, category-labeled prompt with ground-truth constraints."""

    id: str
    category: Category
    constraints: tuple[Constraint, ...]
    rendered_text: str
    seed: int

    def __post_init__(self):
        if not self.constraints:
            raise ValueError("constraints must be non-empty")
        if len(self.constraints) > MAX_CONSTRAINTS:
            raise ValueError(f"at most {MAX_CONSTRAINTS} constraints per prompt")
        kinds = {c.kind for c in self.constraints}
        if PRIMARY_KIND[self.category] not in kinds:
            raise ValueError(
                f"{self.category.slug} prompt must carry a "
                f"{PRIMARY_KIND[self.category].value} constraint"
            )

    def slot_shape(self, slot: int) -> Optional[str]:
        """Shape required for a slot by an ObjectPresent/Shape constraint, if any."""
        for c in self.constraints:
            if c.subject == slot and c.kind in (
                ConstraintKind.OBJECT_PRESENT,
                ConstraintKind.SHAPE,
            ):
                return c.value
        return None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "category": self.category.slug,
            "constraints": [c.to_dict() for c in self.constraints],
            "rendered_text": self.rendered_text,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "PromptSpec":
        return PromptSpec(
            id=d["id"],
            category=Category(d["category"]),
            constraints=tuple(Constraint.from_dict(c) for c in d["constraints"]),
            rendered_text=d["rendered_text"],
            seed=d["seed"],
        )


class StageLabel(Enum):
    F1 = "F1"  # semantically misaligned
    F2 = "F2"  # semantically correct, visually unrefined
    F3 = "F3"  # high fidelity


DEFAULT_TAU_A = 0.8


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    anchor: tuple[int, int]  # (row, col) of top-left footprint cell

    def __post_init__(self):
        if self.shape not in SHAPE_FOOTPRINT:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLOR_RGB:
            raise ValueError(f"unknown object color {self.color!r}")

    @property
    def footprint(self) -> tuple[int, int]:
        return SHAPE_FOOTPRINT[self.shape]

    def cells(self) -> list[tuple[int, int]]:
        rows, cols = self.footprint
        r0, c0 = self.anchor
        return [(r0 + r, c0 + c) for r in range(rows) for c in range(cols)]

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "anchor": list(self.anchor)}

    @staticmethod
    def from_dict(d: dict) -> "SceneObject":
        return SceneObject(d["shape"], d["color"], tuple(d["anchor"]))


@dataclass
class Scene:
    """Grid scene: placed objects, a background, and an aesthetic level."""

    objects: list[SceneObject] = field(default_factory=list)
    background: str = "plain"
    aesthetic_level: float = 1.0
    grid: tuple[int, int] = (GRID_ROWS, GRID_COLS)

    def validate(self) -> None:
        """Raise ValueError on any violated scene invariant.

        Besides bounds and disjointness, footprints must keep a 1-cell gap
        (8-neighborhood): touching same-color objects would merge under
        contiguous-component detection.
        """
        rows, cols = self.grid
        if self.background not in BACKGROUND_RGB:
            raise ValueError(f"unknown background {self.background!r}")
        if not 0.0 <= self.aesthetic_level <= 1.0:
            raise ValueError("aesthetic_level outside [0, 1]")
        taken: dict[tuple[int, int], int] = {}
        for i, obj in enumerate(self.objects):
            for (r, c) in obj.cells():
                if not (0 <= r < rows and 0 <= c < cols):
                    raise ValueError(f"object {i} outside the grid")
                if (r, c) in taken:
                    raise ValueError(f"objects {taken[(r, c)]} and {i} overlap")
                taken[(r, c)] = i
        for (r, c), i in taken.items():
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    j = taken.get((r + dr, c + dc))
                    if j is not None and j != i:
                        raise ValueError(f"objects {i} and {j} touch (need 1-cell gap)")

    def copy(self) -> "Scene":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "background": self.background,
            "aesthetic_level": self.aesthetic_level,
            "grid": list(self.grid),
        }

    @staticmethod
    def from_dict(d: dict) -> "Scene":
        return Scene(
            objects=[SceneObject.from_dict(o) for o in d["objects"]],
            background=d["background"],
            aesthetic_level=d["aesthetic_level"],
            grid=tuple(d["grid"]),
        )


@dataclass
class Raster:
    """H x W x 3 uint8 pixel frame; dimensions are multiples of the codec patch (8)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError("pixels must be an HxWx3 uint8 array")
        if px.shape[0] % 8 or px.shape[1] % 8:
            raise ShapeIncompatible("raster dimensions must be multiples of 8")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def save_png(self, path) -> None:
        Image.fromarray(self.pixels, mode="RGB").save(path, format="PNG")

    @staticmethod
    def load_png(path) -> "Raster":
        return Raster(np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8))


# --------------------------------------------------------------------------
# Prompt generation and text rendering
# --------------------------------------------------------------------------


def _phrase(shape: str, color: Optional[str]) -> str:
    return f"a {color} {shape}" if color else f"a {shape}"


def _plural(shape: str) -> str:
    return shape + ("es" if shape == "cross" else "s")


def render_text(category: Category, constraints: Sequence[Constraint]) -> str:
    """Deterministic templated text; pure function of (category, constraints)."""
    by_slot: dict[int, dict[str, object]] = {}
    count = None
    relation = None
    background = None
    for c in constraints:
        slot = by_slot.setdefault(c.subject, {})
        if c.kind in (ConstraintKind.OBJECT_PRESENT, ConstraintKind.SHAPE):
            slot["shape"] = c.value
        elif c.kind is ConstraintKind.COLOR:
            slot["color"] = c.value
        elif c.kind is ConstraintKind.COUNT:
            count = c.value
        elif c.kind is ConstraintKind.RELATIVE_POSITION:
            relation = (c.subject, c.value)
        elif c.kind is ConstraintKind.BACKGROUND:
            background = c.value

    slots = sorted(by_slot)
    parts: list[str]
    if count is not None:
        info = by_slot[slots[0]]
        color = info.get("color")
        noun = _plural(info["shape"]) if count != 1 else info["shape"]
        head = f"{COUNT_WORDS[count]} {color} {noun}" if color else f"{COUNT_WORDS[count]} {noun}"
        parts = [head]
    elif relation is not None:
        a, rel = relation
        b = a + 1
        pa = _phrase(by_slot[a]["shape"], by_slot[a].get("color"))
        pb = _phrase(by_slot[b]["shape"], by_slot[b].get("color"))
        parts = [f"{pa} {RELATION_PHRASE[rel]} {pb}"]
    else:
        phrases = [_phrase(by_slot[s]["shape"], by_slot[s].get("color")) for s in slots]
        if len(phrases) == 1:
            parts = phrases
        elif len(phrases) == 2:
            parts = [f"{phrases[0]} and {phrases[1]}"]
        else:
            parts = [", ".join(phrases[:-1]) + f" and {phrases[-1]}"]
    if background is not None:
        parts.append(BACKGROUND_PHRASE[background])
    return " ".join(parts)


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _distinct_shapes(rng: np.random.Generator, n: int) -> list[str]:
    idx = rng.permutation(len(SHAPES))[:n]
    return [SHAPES[i] for i in idx]


def generate_prompt(category: Category, seed: int) -> PromptSpec:
    """Deterministic prompt for (category, seed); constraints follow the
    category's grammar and always include its primary constraint kind."""
    rng = np.random.default_rng(np.random.SeedSequence((seed & _UINT64, 0xC0F)))
    cons: list[Constraint] = []

    if category is Category.ATTRIBUTE_BINDING:
        two = rng.random() < 0.5
        shapes = _distinct_shapes(rng, 2 if two else 1)
        for i, s in enumerate(shapes):
            cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, i, s))
            cons.append(Constraint(ConstraintKind.COLOR, i, _pick(rng, COLORS)))
    elif category is Category.OBJECT_COMBINATION:
        n = 3 if rng.random() < 0.35 else 2
        shapes = _distinct_shapes(rng, n)
        for i, s in enumerate(shapes):
            cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, i, s))
        if rng.random() < 0.5 and n < MAX_CONSTRAINTS:
            slot = int(rng.integers(n))
            cons.append(Constraint(ConstraintKind.COLOR, slot, _pick(rng, COLORS)))
    elif category is Category.QUANTITY_CONTROL:
        shape = _pick(rng, SHAPES)
        cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, 0, shape))
        if rng.random() < 0.6:
            cons.append(Constraint(ConstraintKind.COLOR, 0, _pick(rng, COLORS)))
        cons.append(Constraint(ConstraintKind.COUNT, 0, _pick(rng, COUNTS)))
        if rng.random() < 0.4 and len(cons) < MAX_CONSTRAINTS:
            cons.append(Constraint(ConstraintKind.BACKGROUND, 0, _pick(rng, BACKGROUNDS)))
    elif category is Category.SPATIAL_ARRANGEMENT:
        sa, sb = _distinct_shapes(rng, 2)
        cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, 0, sa))
        if rng.random() < 0.5:
            cons.append(Constraint(ConstraintKind.COLOR, int(rng.integers(2)), _pick(rng, COLORS)))
        cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, 1, sb))
        cons.append(Constraint(ConstraintKind.RELATIVE_POSITION, 0, _pick(rng, RELATIONS)))
        if rng.random() < 0.4 and len(cons) < MAX_CONSTRAINTS:
            cons.append(Constraint(ConstraintKind.BACKGROUND, 0, _pick(rng, BACKGROUNDS)))
    elif category is Category.CONTEXT_MANIPULATION:
        two = rng.random() < 0.5
        shapes = _distinct_shapes(rng, 2 if two else 1)
        cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, 0, shapes[0]))
        if rng.random() < 0.6:
            cons.append(Constraint(ConstraintKind.COLOR, 0, _pick(rng, COLORS)))
        if two and len(cons) < MAX_CONSTRAINTS:
            cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, 1, shapes[1]))
        cons.append(Constraint(ConstraintKind.BACKGROUND, 0, _pick(rng, BACKGROUNDS)))
    else:  # pragma: no cover
        raise ValueError(category)

    # canonical constraint order: per-slot presence then color, then count,
    # relation, background (the text parser relies on it)
    order = {
        ConstraintKind.OBJECT_PRESENT: 0,
        ConstraintKind.SHAPE: 0,
        ConstraintKind.COLOR: 1,
        ConstraintKind.COUNT: 2,
        ConstraintKind.RELATIVE_POSITION: 3,
        ConstraintKind.BACKGROUND: 4,
    }
    cons.sort(key=lambda c: (order[c.kind] >= 2, c.subject, order[c.kind]))
    cons_t = tuple(cons)
    return PromptSpec(
        id=f"{category.slug}-{seed & _UINT64:016x}",
        category=category,
        constraints=cons_t,
        rendered_text=render_text(category, cons_t),
        seed=seed,
    )


_OBJ_RE = re.compile(
    rf"^a (?:(?P<color>{'|'.join(COLORS)}) )?(?P<shape>{'|'.join(SHAPES)})$"
)


def parse_prompt_text(text: str) -> tuple[Constraint, ...]:
    """Invert ``render_text``: recover the constraint tuple from prompt text.

    Only texts produced by this module's templates are supported; used by the
    bundled mock agent endpoint, which sees nothing but the wire protocol.
    """
    text = " ".join(text.strip().lower().split())
    background = None
    for phrase, bg in PHRASE_BACKGROUND.items():
        if text.endswith(" " + phrase):
            background = bg
            text = text[: -len(phrase) - 1]
            break

    cons: list[Constraint] = []
    count_m = re.match(
        rf"^(?P<word>one|two|three|four) (?:(?P<color>{'|'.join(COLORS)}) )?(?P<noun>\w+)$",
        text,
    )
    rel_m = None
    for phrase, rel in PHRASE_RELATION.items():
        parts = text.split(f" {phrase} ")
        if len(parts) == 2:
            rel_m = (parts[0], rel, parts[1])
            break

    if count_m:
        noun = count_m.group("noun")
        shape = {_plural(s): s for s in SHAPES} | {s: s for s in SHAPES}
        if noun not in shape:
            raise ValueError(f"cannot parse {text!r}")
        cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, 0, shape[noun]))
        if count_m.group("color"):
            cons.append(Constraint(ConstraintKind.COLOR, 0, count_m.group("color")))
        cons.append(Constraint(ConstraintKind.COUNT, 0, WORD_COUNTS[count_m.group("word")]))
    elif rel_m:
        for slot, part in enumerate(rel_m[::2]):
            m = _OBJ_RE.match(part)
            if not m:
                raise ValueError(f"cannot parse {part!r}")
            cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, slot, m.group("shape")))
            if m.group("color"):
                cons.insert(
                    len(cons), Constraint(ConstraintKind.COLOR, slot, m.group("color"))
                )
        cons.append(Constraint(ConstraintKind.RELATIVE_POSITION, 0, rel_m[1]))
    else:
        parts = [p for chunk in text.split(", ") for p in chunk.split(" and ")]
        for slot, part in enumerate(parts):
            m = _OBJ_RE.match(part)
            if not m:
                raise ValueError(f"cannot parse {part!r}")
            cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, slot, m.group("shape")))
            if m.group("color"):
                cons.append(Constraint(ConstraintKind.COLOR, slot, m.group("color")))
    if background:
        cons.append(Constraint(ConstraintKind.BACKGROUND, 0, background))
    return tuple(cons)


# --------------------------------------------------------------------------
# Rasterization and detection
# --------------------------------------------------------------------------


def noise_amplitude(aesthetic_level: float) -> int:
    return int(round((1.0 - aesthetic_level) * NOISE_UNIT))


def rasterize(
    scene: Scene, noise_seed: int, noise_block: int = DEFAULT_NOISE_BLOCK
) -> Raster:
    """Render a scene: solid cell footprints over the background color, plus
    symmetric +/-A two-point noise with signs shared per noise_block square
    and drawn per channel from noise_seed. A = round((1 - level) * 64)."""
    scene.validate()
    rows, cols = scene.grid
    h, w = rows * CELL_PX, cols * CELL_PX
    img = np.empty((h, w, 3), dtype=np.int16)
    img[:, :] = BACKGROUND_RGB[scene.background]
    for obj in scene.objects:
        rgb = COLOR_RGB[obj.color]
        for (r, c) in obj.cells():
            img[r * CELL_PX:(r + 1) * CELL_PX, c * CELL_PX:(c + 1) * CELL_PX] = rgb
    amp = noise_amplitude(scene.aesthetic_level)
    if amp:
        if h % noise_block or w % noise_block:
            raise ShapeIncompatible("noise_block must divide the raster dimensions")
        rng = np.random.default_rng(noise_seed & _UINT64)
        signs = rng.integers(0, 2, size=(h // noise_block, w // noise_block, 3)) * 2 - 1
        signs = np.repeat(np.repeat(signs, noise_block, axis=0), noise_block, axis=1)
        img = img + (amp * signs).astype(np.int16)
    return Raster(np.clip(img, 0, 255).astype(np.uint8))


def _classify_cells(mean_rgb: np.ndarray) -> np.ndarray:
    """Nearest-palette index per cell by max-channel distance; raises
    DetectionAmbiguous when two entries are both within 8 units."""
    # mean_rgb: (rows, cols, 3) float
    diff = np.abs(mean_rgb[:, :, None, :] - _PALETTE_RGB[None, None, :, :]).max(axis=3)
    order = np.argsort(diff, axis=2)
    best = np.take_along_axis(diff, order[:, :, :2], axis=2)
    ambiguous = (best[:, :, 0] <= AMBIGUITY_MARGIN) & (best[:, :, 1] <= AMBIGUITY_MARGIN)
    if ambiguous.any():
        r, c = np.argwhere(ambiguous)[0]
        raise DetectionAmbiguous(f"cell ({r}, {c}) is within 8 units of two palette entries")
    return order[:, :, 0]


def detect(raster: Raster) -> Scene:
    """Recover a Scene from pixels.

    Per-cell mean color is classified against the palette; contiguous
    (4-connected) same-color non-background cells are merged and mapped back
    to a shape via the footprint extents. Components that do not form a
    canonical footprint exactly are ignored. The aesthetic level is
    estimated as 1 - clamp(m/64, 0, 1) from the median absolute residual m
    between each pixel and its cell's dominant palette color.
    """
    h, w = raster.height, raster.width
    if h % CELL_PX or w % CELL_PX:
        raise ShapeIncompatible("raster dimensions do not match the cell grid")
    rows, cols = h // CELL_PX, w // CELL_PX
    px = raster.pixels.astype(np.float64)
    cells = px.reshape(rows, CELL_PX, cols, CELL_PX, 3).mean(axis=(1, 3))
    idx = _classify_cells(cells)

    objects: list[SceneObject] = []
    seen = np.zeros((rows, cols), dtype=bool)
    is_bg = np.array([bg for _, bg, _ in _PALETTE])
    for r0 in range(rows):
        for c0 in range(cols):
            if seen[r0, c0] or is_bg[idx[r0, c0]]:
                continue
            comp = []
            stack = [(r0, c0)]
            seen[r0, c0] = True
            while stack:
                r, c = stack.pop()
                comp.append((r, c))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if (
                        0 <= rr < rows
                        and 0 <= cc < cols
                        and not seen[rr, cc]
                        and idx[rr, cc] == idx[r0, c0]
                    ):
                        seen[rr, cc] = True
                        stack.append((rr, cc))
            rs = [r for r, _ in comp]
            cs = [c for _, c in comp]
            extent = (max(rs) - min(rs) + 1, max(cs) - min(cs) + 1)
            if extent in FOOTPRINT_SHAPE and len(comp) == extent[0] * extent[1]:
                objects.append(
                    SceneObject(
                        shape=FOOTPRINT_SHAPE[extent],
                        color=_PALETTE[idx[r0, c0]][0],
                        anchor=(min(rs), min(cs)),
                    )
                )

    bg_idx = idx[is_bg[idx]]
    if bg_idx.size:
        counts = np.bincount(bg_idx, minlength=len(_PALETTE))
        background = _PALETTE[int(np.argmax(counts))][0]
    else:
        background = "plain"

    dominant = _PALETTE_RGB[idx]  # (rows, cols, 3)
    dominant_px = np.repeat(np.repeat(dominant, CELL_PX, axis=0), CELL_PX, axis=1)
    m = float(np.median(np.abs(px - dominant_px)))
    aesthetic = 1.0 - min(max(m / NOISE_UNIT, 0.0), 1.0)

    objects.sort(key=lambda o: o.anchor)
    return Scene(objects=objects, background=background, aesthetic_level=aesthetic,
                 grid=(rows, cols))


# --------------------------------------------------------------------------
# Scoring and staging
# --------------------------------------------------------------------------

_MAX_CANDIDATES = 8


def _constraint_ok(
    c: Constraint,
    binding: dict[int, Optional[SceneObject]],
    scene: Scene,
    spec_shapes: dict[int, Optional[str]],
) -> bool:
    if c.kind is ConstraintKind.BACKGROUND:
        return scene.background == c.value
    if c.kind is ConstraintKind.COUNT:
        shape = spec_shapes.get(c.subject)
        if shape is None:
            bound = binding.get(c.subject)
            if bound is None:
                return False
            shape = bound.shape
        return sum(1 for o in scene.objects if o.shape == shape) == c.value
    obj = binding.get(c.subject)
    if c.kind is ConstraintKind.OBJECT_PRESENT or c.kind is ConstraintKind.SHAPE:
        return obj is not None and obj.shape == c.value
    if c.kind is ConstraintKind.COLOR:
        return obj is not None and obj.color == c.value
    if c.kind is ConstraintKind.RELATIVE_POSITION:
        other = binding.get(c.subject + 1)
        if obj is None or other is None:
            return False
        (ra, ca), (rb, cb) = obj.anchor, other.anchor
        return {
            "left-of": ca < cb,
            "right-of": ca > cb,
            "above": ra < rb,
            "below": ra > rb,
        }[c.value]
    raise AssertionError(c.kind)


def best_assignment(
    scene: Scene, spec: PromptSpec
) -> tuple[float, tuple[bool, ...], dict[int, int]]:
    """Best injective slot-to-object assignment: (score, per-constraint marks,
    slot -> object index for the bound slots)."""
    slots: set[int] = set()
    for c in spec.constraints:
        slots.add(c.subject)
        if c.kind is ConstraintKind.RELATIVE_POSITION:
            slots.add(c.subject + 1)
    slot_list = sorted(slots)
    spec_shapes = {s: spec.slot_shape(s) for s in slot_list}

    # candidate objects per slot, shape matches first, capped for junk scenes
    indexed = list(enumerate(scene.objects))
    cands: list[list[Optional[tuple[int, SceneObject]]]] = []
    for s in slot_list:
        want = spec_shapes[s]
        ranked = sorted(indexed, key=lambda io: (io[1].shape != want, io[1].anchor))
        cands.append(ranked[:_MAX_CANDIDATES] + [None])

    best_sat = -1
    best_breakdown: tuple[bool, ...] = ()
    best_binding: dict[int, int] = {}
    n = len(spec.constraints)

    def rec(i: int, binding: dict[int, Optional[SceneObject]], idxmap: dict[int, int],
            used: set[int]):
        nonlocal best_sat, best_breakdown, best_binding
        if i == len(slot_list):
            marks = tuple(
                _constraint_ok(c, binding, scene, spec_shapes) for c in spec.constraints
            )
            sat = sum(marks)
            if sat > best_sat:
                best_sat, best_breakdown, best_binding = sat, marks, dict(idxmap)
            return
        for cand in cands[i]:
            slot = slot_list[i]
            if cand is None:
                binding[slot] = None
                idxmap.pop(slot, None)
                rec(i + 1, binding, idxmap, used)
            else:
                j, obj = cand
                if j in used:
                    continue
                binding[slot] = obj
                idxmap[slot] = j
                used.add(j)
                rec(i + 1, binding, idxmap, used)
                used.discard(j)
                idxmap.pop(slot, None)
            if best_sat == n:
                return

    rec(0, {}, {}, set())
    return best_sat / n, best_breakdown, best_binding


def semantic_score(scene: Scene, spec: PromptSpec) -> tuple[float, tuple[bool, ...]]:
    """Fraction of satisfied constraints under the best injective slot-to-object
    assignment, with the per-constraint breakdown of that assignment."""
    score, marks, _ = best_assignment(scene, spec)
    return score, marks


def classify_stage(scene: Scene, spec: PromptSpec, tau_a: float = DEFAULT_TAU_A) -> StageLabel:
    """Three-way stage rubric: semantic errors dominate regardless of aesthetics."""
    score, _ = semantic_score(scene, spec)
    if score < 1.0:
        return StageLabel.F1
    if scene.aesthetic_level < tau_a:
        return StageLabel.F2
    return StageLabel.F3


# --------------------------------------------------------------------------
# Edits
# --------------------------------------------------------------------------


class EditOp(Enum):
    SET_COLOR = "SetColor"
    SET_SHAPE = "SetShape"
    ADD_OBJECT = "AddObject"
    REMOVE_OBJECT = "RemoveObject"
    MOVE_OBJECT = "MoveObject"
    SET_COUNT = "SetCount"
    SET_BACKGROUND = "SetBackground"
    ENHANCE = "Enhance"
    DEGRADE = "Degrade"
    SEMANTIC_PERTURB = "SemanticPerturb"


def instruction_text(op: EditOp, args: dict) -> str:
    if op is EditOp.SET_COLOR:
        return f"change object {args['object_index']} to {args['color']}"
    if op is EditOp.SET_SHAPE:
        return f"change object {args['object_index']} into a {args['shape']}"
    if op is EditOp.ADD_OBJECT:
        r, c = args["anchor"]
        return f"add a {args['color']} {args['shape']} at row {r} column {c}"
    if op is EditOp.REMOVE_OBJECT:
        return f"remove object {args['object_index']}"
    if op is EditOp.MOVE_OBJECT:
        r, c = args["anchor"]
        return f"move object {args['object_index']} to row {r} column {c}"
    if op is EditOp.SET_COUNT:
        return f"adjust the number of {_plural(args['shape'])} to {args['count']}"
    if op is EditOp.SET_BACKGROUND:
        return f"change the background to {args['background']}"
    if op is EditOp.ENHANCE:
        return f"improve visual quality by {args['delta']:.2f}"
    if op is EditOp.DEGRADE:
        return f"reduce visual quality by {args['delta']:.2f}"
    if op is EditOp.SEMANTIC_PERTURB:
        return "introduce a flaw: " + instruction_text(EditOp(args["op"]), args["args"])
    raise AssertionError(op)


@dataclass(frozen=True)
class EditInstruction:
    """One minimal edit; rendered_text stays under 40 words."""

    op: EditOp
    args: dict
    rendered_text: str = ""

    def __post_init__(self):
        if not self.rendered_text:
            object.__setattr__(self, "rendered_text", instruction_text(self.op, self.args))
        if not self.rendered_text or len(self.rendered_text.split()) > 40:
            raise ValueError("rendered_text must be non-empty and under 40 words")

    def to_dict(self) -> dict:
        return {"op": self.op.value, "args": _jsonable(self.args), "rendered_text": self.rendered_text}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


_INSTR_RES = [
    (EditOp.SET_SHAPE, re.compile(r"change object (\d+) into a (\w+)")),
    (EditOp.SET_COLOR, re.compile(r"change object (\d+) to (\w+)")),
    (EditOp.ADD_OBJECT, re.compile(r"add a (\w+) (\w+) at row (\d+) column (\d+)")),
    (EditOp.REMOVE_OBJECT, re.compile(r"remove object (\d+)")),
    (EditOp.MOVE_OBJECT, re.compile(r"move object (\d+) to row (\d+) column (\d+)")),
    (EditOp.SET_COUNT, re.compile(r"adjust the number of (\w+) to (\d+)")),
    (EditOp.SET_BACKGROUND, re.compile(r"change the background to (\w+)")),
    (EditOp.ENHANCE, re.compile(r"improve visual quality by ([\d.]+)")),
    (EditOp.DEGRADE, re.compile(r"reduce visual quality by ([\d.]+)")),
]


def parse_instruction_text(text: str) -> EditInstruction:
    """Invert ``instruction_text`` (used by the mock editing endpoint)."""
    text = text.strip().lower()
    perturb = text.startswith("introduce a flaw: ")
    if perturb:
        text = text[len("introduce a flaw: "):]
    for op, rx in _INSTR_RES:
        m = rx.fullmatch(text)
        if not m:
            continue
        g = m.groups()
        if op is EditOp.SET_COLOR:
            args = {"object_index": int(g[0]), "color": g[1]}
        elif op is EditOp.SET_SHAPE:
            args = {"object_index": int(g[0]), "shape": g[1]}
        elif op is EditOp.ADD_OBJECT:
            args = {"color": g[0], "shape": g[1], "anchor": (int(g[2]), int(g[3]))}
        elif op is EditOp.REMOVE_OBJECT:
            args = {"object_index": int(g[0])}
        elif op is EditOp.MOVE_OBJECT:
            args = {"object_index": int(g[0]), "anchor": (int(g[1]), int(g[2]))}
        elif op is EditOp.SET_COUNT:
            singular = {_plural(s): s for s in SHAPES}
            args = {"shape": singular[g[0]], "count": int(g[1])}
        elif op is EditOp.SET_BACKGROUND:
            args = {"background": g[0]}
        else:
            args = {"delta": float(g[0])}
        if perturb:
            return EditInstruction(
                EditOp.SEMANTIC_PERTURB, {"op": op.value, "args": args}
            )
        return EditInstruction(op, args)
    raise ValueError(f"cannot parse instruction {text!r}")


def free_sites(scene: Scene, footprint: tuple[int, int]) -> list[tuple[int, int]]:
    """Anchor sites where a footprint can go without breaking scene invariants."""
    sites = [(r, c) for r in SITE_COORDS for c in SITE_COORDS]
    out = []
    for anchor in sites:
        trial = scene.copy()
        trial.objects.append(SceneObject(FOOTPRINT_SHAPE[footprint], "red", anchor))
        try:
            trial.validate()
        except ValueError:
            continue
        out.append(anchor)
    return out


def apply_edit(scene: Scene, instruction: EditInstruction) -> Scene:
    """Apply one edit; everything outside the instruction's target is carried
    over unchanged. Raises EditInapplicable on missing targets or collisions."""
    op, args = instruction.op, instruction.args
    if op is EditOp.SEMANTIC_PERTURB:
        inner = EditInstruction(EditOp(args["op"]), args["args"])
        return apply_edit(scene, inner)

    out = scene.copy()

    def obj_at(i: int) -> SceneObject:
        if not 0 <= i < len(out.objects):
            raise EditInapplicable(f"no object at index {i}")
        return out.objects[i]

    if op is EditOp.SET_COLOR:
        i = args["object_index"]
        out.objects[i] = replace(obj_at(i), color=args["color"])
    elif op is EditOp.SET_SHAPE:
        i = args["object_index"]
        out.objects[i] = replace(obj_at(i), shape=args["shape"])
    elif op is EditOp.ADD_OBJECT:
        out.objects.append(SceneObject(args["shape"], args["color"], tuple(args["anchor"])))
    elif op is EditOp.REMOVE_OBJECT:
        i = args["object_index"]
        obj_at(i)
        del out.objects[i]
    elif op is EditOp.MOVE_OBJECT:
        i = args["object_index"]
        out.objects[i] = replace(obj_at(i), anchor=tuple(args["anchor"]))
    elif op is EditOp.SET_COUNT:
        shape, n = args["shape"], args["count"]
        group = [j for j, o in enumerate(out.objects) if o.shape == shape]
        if n < 0:
            raise EditInapplicable("negative count")
        while len(group) > n:
            del out.objects[group.pop()]
        if len(group) < n:
            color = args.get("color") or (
                out.objects[group[0]].color if group else COLORS[0]
            )
            for _ in range(n - len(group)):
                sites = free_sites(out, SHAPE_FOOTPRINT[shape])
                if not sites:
                    raise EditInapplicable("no room for an extra object")
                out.objects.append(SceneObject(shape, color, sites[0]))
                group.append(len(out.objects) - 1)
    elif op is EditOp.SET_BACKGROUND:
        out.background = args["background"]
    elif op is EditOp.ENHANCE:
        out.aesthetic_level = min(1.0, out.aesthetic_level + args["delta"])
    elif op is EditOp.DEGRADE:
        out.aesthetic_level = max(0.0, out.aesthetic_level - args["delta"])
    else:  # pragma: no cover
        raise AssertionError(op)

    try:
        out.validate()
    except ValueError as e:
        raise EditInapplicable(str(e)) from e
    return out


# --------------------------------------------------------------------------
# Placement (used by the anchor generators)
# --------------------------------------------------------------------------

MAX_LAYOUTS = 6


def enumerate_placements(
    footprints: Sequence[tuple[int, int]],
    relation_reqs: Sequence[tuple[int, int, str, bool]] = (),
    grid: tuple[int, int] = (GRID_ROWS, GRID_COLS),
) -> list[tuple[tuple[int, int], ...]]:
    """All site assignments (canonical order) for the given footprints that
    satisfy every (slot_a, slot_b, relation, truth) requirement."""
    del grid  # sites already fit the default grid; kept for signature clarity
    sites = [(r, c) for r in SITE_COORDS for c in SITE_COORDS]

    def rel_ok(a, b, rel, truth):
        (ra, ca), (rb, cb) = a, b
        val = {"left-of": ca < cb, "right-of": ca > cb, "above": ra < rb, "below": ra > rb}[rel]
        return val == truth

    out: list[tuple[tuple[int, int], ...]] = []

    def rec(i: int, chosen: list[tuple[int, int]]):
        if i == len(footprints):
            out.append(tuple(chosen))
            return
        for s in sites:
            if s in chosen:
                continue
            ok = True
            for (a, b, rel, truth) in relation_reqs:
                if b == i and a < i:
                    ok = rel_ok(chosen[a], s, rel, truth)
                elif a == i and b < i:
                    ok = rel_ok(s, chosen[b], rel, truth)
                if not ok:
                    break
            if ok:
                chosen.append(s)
                rec(i + 1, chosen)
                chosen.pop()

    rec(0, [])
    return out


def pick_placement(
    footprints: Sequence[tuple[int, int]],
    rng: np.random.Generator,
    relation_reqs: Sequence[tuple[int, int, str, bool]] = (),
) -> tuple[tuple[int, int], ...]:
    """Pick among at most MAX_LAYOUTS evenly spaced valid assignments."""
    valid = enumerate_placements(footprints, relation_reqs)
    if not valid:
        raise PlacementExhausted("no valid placement for the requested objects")
    stride = max(1, len(valid) // MAX_LAYOUTS)
    options = valid[::stride][:MAX_LAYOUTS]
    return options[int(rng.integers(len(options)))]


# --------------------------------------------------------------------------
# JSON helpers
# --------------------------------------------------------------------------


def dump_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, separators=(",", ":"))


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
