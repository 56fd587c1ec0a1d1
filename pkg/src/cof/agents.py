"""Agent roles of the curation loop: quality assessor, planner, editor,
verifier, and tiered anchor generators.

The deterministic implementations here are exact: they read the Scene
structures directly and delegate to the scene-domain oracles, so the
closed loop (plan -> edit -> verify) is sound by construction for any
frame within reach of single-constraint repairs. The remote HTTP variants
in cof.remote expose the same surface over the wire protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import EditInapplicable, NothingToPlan, PlacementExhausted
from .scenes import (
    BACKGROUNDS,
    PRIMARY_KIND,
    COLORS,
    DEFAULT_TAU_A,
    SHAPES,
    SHAPE_FOOTPRINT,
    Category,
    Constraint,
    ConstraintKind,
    EditInstruction,
    EditOp,
    PromptSpec,
    Raster,
    Scene,
    SceneObject,
    StageLabel,
    apply_edit,
    best_assignment,
    classify_stage,
    detect,
    free_sites,
    pick_placement,
    semantic_score,
)

_UINT64 = (1 << 64) - 1

FORWARD = "forward"
BACKWARD = "backward"

AESTHETIC_MARGIN = 0.1  # forward enhancement lands at tau_a + margin
BACKWARD_AESTHETIC_DROP = 0.2  # backward degradation lands at tau_a - drop


class TierLabel(Enum):
    WEAK = "weak"
    MEDIUM = "medium"
    STRONG = "strong"


@dataclass(frozen=True)
class TierParams:
    satisfy_prob: float
    aesthetic_lo: float
    aesthetic_hi: float


# invented calibration: weak anchors are mostly semantically broken, strong
# anchors almost always land in the high-fidelity band
TIER_PARAMS = {
    TierLabel.WEAK: TierParams(0.4, 0.1, 0.6),
    TierLabel.MEDIUM: TierParams(0.85, 0.4, 0.85),
    TierLabel.STRONG: TierParams(0.98, 0.85, 1.0),
}


@dataclass(frozen=True)
class VerifyResult:
    b: int
    reason: str

    def __post_init__(self):
        if self.b not in (0, 1):
            raise ValueError("b must be 0 or 1")


# --------------------------------------------------------------------------
# Assessor
# --------------------------------------------------------------------------


def assess(frame, spec: PromptSpec, tau_a: float = DEFAULT_TAU_A) -> tuple[StageLabel, str]:
    """Stage label plus a short analysis; rasters are detected first."""
    scene = detect(frame) if isinstance(frame, Raster) else frame
    score, marks, _ = best_assignment(scene, spec)
    stage = classify_stage(scene, spec, tau_a)
    if stage is StageLabel.F1:
        broken = [
            f"{c.kind.value}({c.subject}={c.value})"
            for c, ok in zip(spec.constraints, marks)
            if not ok
        ]
        analysis = "semantic violations: " + ", ".join(broken)
    elif stage is StageLabel.F2:
        analysis = (
            f"semantics satisfied; aesthetic level {scene.aesthetic_level:.3f} "
            f"below threshold {tau_a}"
        )
    else:
        analysis = "semantics satisfied and aesthetic level in the high-fidelity band"
    return stage, analysis


# --------------------------------------------------------------------------
# Planner
# --------------------------------------------------------------------------


def _alt_value(rng: Optional[np.random.Generator], options, exclude):
    pool = [o for o in options if o not in exclude]
    if not pool:
        raise NothingToPlan("no alternative value available")
    if rng is None:
        return pool[0]
    return pool[int(rng.integers(len(pool)))]


def _slot_color(spec: PromptSpec, slot: int) -> Optional[str]:
    for c in spec.constraints:
        if c.kind is ConstraintKind.COLOR and c.subject == slot:
            return c.value
    return None


def _repair_instruction(scene: Scene, spec: PromptSpec, c: Constraint,
                        binding: dict[int, int]) -> EditInstruction:
    kind = c.kind
    if kind is ConstraintKind.OBJECT_PRESENT:
        color = _slot_color(spec, c.subject) or COLORS[0]
        sites = free_sites(scene, SHAPE_FOOTPRINT[c.value])
        if not sites:
            raise EditInapplicable("no free site for the missing object")
        # prefer sites that keep the spec's relation constraints satisfiable
        def rel_fit(site):
            for c2 in spec.constraints:
                if c2.kind is not ConstraintKind.RELATIVE_POSITION:
                    continue
                if c2.subject == c.subject:
                    partner, new_is_left_arg = c2.subject + 1, True
                elif c2.subject + 1 == c.subject:
                    partner, new_is_left_arg = c2.subject, False
                else:
                    continue
                if partner not in binding:
                    continue
                other = scene.objects[binding[partner]].anchor
                (ra, ca), (rb, cb) = (site, other) if new_is_left_arg else (other, site)
                ok = {"left-of": ca < cb, "right-of": ca > cb,
                      "above": ra < rb, "below": ra > rb}[c2.value]
                if not ok:
                    return False
            return True

        good = [s for s in sites if rel_fit(s)]
        return EditInstruction(
            EditOp.ADD_OBJECT,
            {"shape": c.value, "color": color, "anchor": (good or sites)[0]},
        )
    if kind in (ConstraintKind.COLOR, ConstraintKind.SHAPE):
        idx = binding.get(c.subject)
        if idx is None:
            raise EditInapplicable(f"slot {c.subject} is unbound")
        op = EditOp.SET_COLOR if kind is ConstraintKind.COLOR else EditOp.SET_SHAPE
        key = "color" if kind is ConstraintKind.COLOR else "shape"
        return EditInstruction(op, {"object_index": idx, key: c.value})
    if kind is ConstraintKind.COUNT:
        shape = spec.slot_shape(c.subject)
        if shape is None:
            idx = binding.get(c.subject)
            if idx is None:
                raise EditInapplicable(f"slot {c.subject} is unbound")
            shape = scene.objects[idx].shape
        color = _slot_color(spec, c.subject)
        args = {"shape": shape, "count": c.value}
        if color:
            args["color"] = color
        return EditInstruction(EditOp.SET_COUNT, args)
    if kind is ConstraintKind.RELATIVE_POSITION:
        return _relation_move(scene, spec, c, binding, want=True)
    if kind is ConstraintKind.BACKGROUND:
        return EditInstruction(EditOp.SET_BACKGROUND, {"background": c.value})
    raise AssertionError(kind)


def _relation_move(scene: Scene, spec: PromptSpec, c: Constraint,
                   binding: dict[int, int], want: bool) -> EditInstruction:
    """Move the subject object to the first site that makes the relation
    equal `want` relative to the partner object."""
    a, b = c.subject, c.subject + 1
    ia, ib = binding.get(a), binding.get(b)
    if ia is None or ib is None:
        raise EditInapplicable("relation slots are unbound")

    def ok(anchor, other):
        (ra, ca), (rb, cb) = anchor, other
        val = {"left-of": ca < cb, "right-of": ca > cb,
               "above": ra < rb, "below": ra > rb}[c.value]
        return val == want

    for move_idx, ref_idx, flip in ((ia, ib, False), (ib, ia, True)):
        obj = scene.objects[move_idx]
        rest = scene.copy()
        del rest.objects[move_idx]
        ref = scene.objects[ref_idx].anchor
        for site in free_sites(rest, obj.footprint):
            good = ok(site, ref) if not flip else ok(ref, site)
            if good:
                return EditInstruction(
                    EditOp.MOVE_OBJECT, {"object_index": move_idx, "anchor": site}
                )
    raise EditInapplicable("no placement realizes the relation")


def plan(
    current: Scene,
    spec: PromptSpec,
    target: StageLabel,
    direction: str,
    category: Category,
    prev: Optional[Scene] = None,
    rng: Optional[np.random.Generator] = None,
    tau_a: float = DEFAULT_TAU_A,
) -> EditInstruction:
    """One minimal edit toward the target stage.

    Forward semantic: repair the first violated constraint in spec order.
    Forward aesthetic: enhance to tau_a + 0.1. Backward semantic: break one
    constraint of the category's primary kind (seed-chosen). Backward
    aesthetic: degrade to tau_a - 0.2.
    """
    del prev  # deterministic planning needs only the current frame
    score, marks, binding = best_assignment(current, spec)

    if direction == FORWARD:
        if target is StageLabel.F2 or score < 1.0:
            for c, ok in zip(spec.constraints, marks):
                if not ok:
                    return _repair_instruction(current, spec, c, binding)
            raise NothingToPlan("no violated constraint for a forward-semantic plan")
        delta = (tau_a + AESTHETIC_MARGIN) - current.aesthetic_level
        if delta <= 0:
            raise NothingToPlan("aesthetic level already at the target band")
        return EditInstruction(EditOp.ENHANCE, {"delta": round(delta, 6)})

    if direction == BACKWARD:
        if target is StageLabel.F2:
            delta = current.aesthetic_level - (tau_a - BACKWARD_AESTHETIC_DROP)
            if delta <= 0:
                raise NothingToPlan("aesthetic level already below the target band")
            return EditInstruction(EditOp.DEGRADE, {"delta": round(delta, 6)})
        # backward semantic: category-conditioned single-constraint break
        primary = [c for c in spec.constraints if c.kind is PRIMARY_KIND[category]]
        if not primary:
            raise NothingToPlan("no primary-kind constraint to perturb")
        c = primary[0] if rng is None else primary[int(rng.integers(len(primary)))]
        return _perturb_instruction(current, spec, c, binding, rng)

    raise ValueError(f"unknown direction {direction!r}")


def _perturb_instruction(scene: Scene, spec: PromptSpec, c: Constraint,
                         binding: dict[int, int],
                         rng: Optional[np.random.Generator]) -> EditInstruction:
    kind = c.kind
    if kind is ConstraintKind.COLOR:
        idx = binding.get(c.subject)
        if idx is None:
            raise EditInapplicable(f"slot {c.subject} is unbound")
        new = _alt_value(rng, COLORS, {c.value})
        return EditInstruction(EditOp.SET_COLOR, {"object_index": idx, "color": new})
    if kind is ConstraintKind.OBJECT_PRESENT:
        colored = {k.subject for k in spec.constraints if k.kind is ConstraintKind.COLOR}
        ops = [k for k in spec.constraints if k.kind is ConstraintKind.OBJECT_PRESENT]
        plain = [k for k in ops if k.subject not in colored]
        pick_from = plain or ops
        chosen = pick_from[0] if rng is None else pick_from[int(rng.integers(len(pick_from)))]
        idx = binding.get(chosen.subject)
        if idx is None:
            raise EditInapplicable(f"slot {chosen.subject} is unbound")
        if plain:
            return EditInstruction(EditOp.REMOVE_OBJECT, {"object_index": idx})
        spec_shapes = {k.value for k in ops}
        alt = _alt_value(rng, SHAPES, spec_shapes)
        return EditInstruction(EditOp.SET_SHAPE, {"object_index": idx, "shape": alt})
    if kind is ConstraintKind.COUNT:
        options = [n for n in (c.value - 1, c.value + 1) if 1 <= n <= 4]
        n = options[0] if rng is None else options[int(rng.integers(len(options)))]
        shape = spec.slot_shape(c.subject)
        return EditInstruction(EditOp.SET_COUNT, {"shape": shape, "count": n})
    if kind is ConstraintKind.RELATIVE_POSITION:
        return _relation_move(scene, spec, c, binding, want=False)
    if kind is ConstraintKind.BACKGROUND:
        new = _alt_value(rng, BACKGROUNDS, {c.value})
        return EditInstruction(EditOp.SET_BACKGROUND, {"background": new})
    raise AssertionError(kind)


# --------------------------------------------------------------------------
# Editor
# --------------------------------------------------------------------------


def edit(current: Scene, instruction: EditInstruction) -> Scene:
    return apply_edit(current, instruction)


# --------------------------------------------------------------------------
# Verifier
# --------------------------------------------------------------------------


def _object_diff(prev: Scene, edited: Scene):
    """Multiset diff: (removed, added) object lists."""
    removed = list(prev.objects)
    added = []
    for obj in edited.objects:
        if obj in removed:
            removed.remove(obj)
        else:
            added.append(obj)
    return removed, added


def _identity_ok(prev: Scene, edited: Scene, instruction: Optional[EditInstruction]):
    """Unrelated content must be untouched: at most one object (or one
    same-shape count group) may differ, and background/aesthetic changes
    must be exclusive with object changes."""
    removed, added = _object_diff(prev, edited)
    bg_changed = prev.background != edited.background
    aes_changed = abs(prev.aesthetic_level - edited.aesthetic_level) > 1e-9

    if instruction is not None:
        op = instruction.op
        if op is EditOp.SEMANTIC_PERTURB:
            inner = EditInstruction(EditOp(instruction.args["op"]), instruction.args["args"])
            return _identity_ok(prev, edited, inner)
        if op in (EditOp.ENHANCE, EditOp.DEGRADE):
            return not removed and not added and not bg_changed
        if op is EditOp.SET_BACKGROUND:
            return not removed and not added and not aes_changed
        if op is EditOp.ADD_OBJECT:
            return len(added) == 1 and not removed and not bg_changed and not aes_changed
        if op is EditOp.REMOVE_OBJECT:
            return len(removed) == 1 and not added and not bg_changed and not aes_changed
        if op is EditOp.SET_COUNT:
            shape = instruction.args["shape"]
            group_ok = all(o.shape == shape for o in removed + added)
            return group_ok and not bg_changed and not aes_changed
        # SET_COLOR / SET_SHAPE / MOVE_OBJECT: one object swapped in place
        return (
            len(removed) == 1 and len(added) == 1 and not bg_changed and not aes_changed
        )

    # frame-diff only (remote verifier has no instruction slot)
    if bg_changed and (removed or added):
        return False
    if removed or added:
        shapes = {o.shape for o in removed + added}
        if len(removed) <= 1 and len(added) <= 1:
            return True
        return len(shapes) == 1
    return True


def verify(
    edited: Scene,
    spec: PromptSpec,
    target: StageLabel,
    direction: str,
    prev: Scene,
    instruction: Optional[EditInstruction] = None,
    tau_a: float = DEFAULT_TAU_A,
) -> VerifyResult:
    """Binary success: the transition must move in its direction, land on the
    target stage, and preserve all content outside the instruction target."""
    if edited == prev:
        return VerifyResult(0, "imperceptible edit")
    if not _identity_ok(prev, edited, instruction):
        return VerifyResult(0, "unrelated content changed")

    sem_prev, _ = semantic_score(prev, spec)
    sem_new, _ = semantic_score(edited, spec)
    aes_prev, aes_new = prev.aesthetic_level, edited.aesthetic_level
    stage = classify_stage(edited, spec, tau_a)

    if direction == FORWARD:
        improved = sem_new > sem_prev or (
            sem_new == sem_prev == 1.0 and target is StageLabel.F3 and aes_new > aes_prev
        )
        if not improved:
            return VerifyResult(0, "no improvement toward the target")
        if stage is not target:
            return VerifyResult(0, f"stage not reached (got {stage.value})")
        return VerifyResult(1, "forward goal executed")

    if direction == BACKWARD:
        if stage is not target:
            return VerifyResult(0, f"stage not reached (got {stage.value})")
        if target is StageLabel.F1:
            if not (sem_new < sem_prev and abs(aes_new - aes_prev) <= 1e-9):
                return VerifyResult(0, "degradation not confined to the semantic axis")
        else:
            if not (aes_new < aes_prev and sem_new == sem_prev):
                return VerifyResult(0, "degradation not confined to the aesthetic axis")
        return VerifyResult(1, "backward goal executed")

    raise ValueError(f"unknown direction {direction!r}")


# --------------------------------------------------------------------------
# Anchor generators
# --------------------------------------------------------------------------


def generate_anchor(spec: PromptSpec, tier: TierLabel, seed: int) -> Scene:
    """Tier-calibrated anchor: each constraint satisfied independently with the
    tier's probability, aesthetic level uniform in the tier's band.

    Count implies presence, so a drawn count-satisfied flag forces the
    presence flag; the marginals of all logically independent kinds match the
    tier probability exactly.
    """
    params = TIER_PARAMS[tier]
    tier_idx = list(TierLabel).index(tier)
    rng = np.random.default_rng(
        np.random.SeedSequence((spec.seed & _UINT64, tier_idx, seed & _UINT64))
    )

    flags = {i: bool(rng.random() < params.satisfy_prob)
             for i, _ in enumerate(spec.constraints)}
    cons = spec.constraints
    # count satisfied forces presence of the counted slot
    for i, c in enumerate(cons):
        if c.kind is ConstraintKind.COUNT and flags[i]:
            for j, d in enumerate(cons):
                if d.kind is ConstraintKind.OBJECT_PRESENT and d.subject == c.subject:
                    flags[j] = True

    op_cons = [(i, c) for i, c in enumerate(cons) if c.kind is ConstraintKind.OBJECT_PRESENT]
    spec_shapes = {c.value for _, c in op_cons}

    slot_shape: dict[int, str] = {}
    for i, c in op_cons:
        if flags[i]:
            slot_shape[c.subject] = c.value
        else:
            slot_shape[c.subject] = _alt_value(rng, SHAPES, spec_shapes)

    slot_color: dict[int, str] = {}
    for i, c in enumerate(cons):
        if c.kind is ConstraintKind.COLOR:
            if flags[i]:
                slot_color[c.subject] = c.value
            else:
                slot_color[c.subject] = _alt_value(rng, COLORS, {c.value})
    for slot in slot_shape:
        if slot not in slot_color:
            slot_color[slot] = COLORS[int(rng.integers(len(COLORS)))]

    # counted group size
    group_extra = 0
    counted_slot = None
    for i, c in enumerate(cons):
        if c.kind is ConstraintKind.COUNT:
            counted_slot = c.subject
            present = any(
                flags[j] for j, d in op_cons if d.subject == c.subject
            )
            if not present:
                group_extra = 0  # counted shape absent entirely
            elif flags[i]:
                group_extra = c.value - 1
            else:
                options = [n for n in (c.value - 1, c.value + 1) if 1 <= n <= 4]
                n = options[int(rng.integers(len(options)))]
                group_extra = n - 1

    background = "plain"
    for i, c in enumerate(cons):
        if c.kind is ConstraintKind.BACKGROUND:
            background = c.value if flags[i] else _alt_value(rng, BACKGROUNDS, {c.value})
            break
    else:
        background = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]

    slots = sorted(slot_shape)
    shapes = [slot_shape[s] for s in slots]
    colors = [slot_color[s] for s in slots]
    for _ in range(group_extra):
        shapes.append(slot_shape[counted_slot])
        colors.append(slot_color[counted_slot])

    relation_reqs = []
    for i, c in enumerate(cons):
        if c.kind is ConstraintKind.RELATIVE_POSITION:
            a = slots.index(c.subject)
            b = slots.index(c.subject + 1)
            relation_reqs.append((a, b, c.value, flags[i]))

    anchors = pick_placement([SHAPE_FOOTPRINT[s] for s in shapes], rng, relation_reqs)
    aesthetic = float(rng.uniform(params.aesthetic_lo, params.aesthetic_hi))
    scene = Scene(
        objects=[SceneObject(s, col, a) for s, col, a in zip(shapes, colors, anchors)],
        background=background,
        aesthetic_level=aesthetic,
    )
    scene.validate()
    return scene
