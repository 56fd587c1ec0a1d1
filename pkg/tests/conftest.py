import numpy as np
import pytest

from cof import scenes


@pytest.fixture
def simple_scene():
    return scenes.Scene(
        objects=[
            scenes.SceneObject("circle", "red", (0, 0)),
            scenes.SceneObject("square", "blue", (3, 3)),
        ],
        background="plain",
        aesthetic_level=1.0,
    )


def random_valid_scene(rng: np.random.Generator, max_objects: int = 4) -> scenes.Scene:
    """Random scene respecting all invariants (site-based placement)."""
    n = int(rng.integers(0, max_objects + 1))
    shapes = [scenes.SHAPES[i] for i in rng.integers(0, len(scenes.SHAPES), n)]
    anchors = scenes.pick_placement([scenes.SHAPE_FOOTPRINT[s] for s in shapes], rng) if n else ()
    objects = [
        scenes.SceneObject(s, scenes.COLORS[int(rng.integers(len(scenes.COLORS)))], a)
        for s, a in zip(shapes, anchors)
    ]
    return scenes.Scene(
        objects=objects,
        background=scenes.BACKGROUNDS[int(rng.integers(len(scenes.BACKGROUNDS)))],
        aesthetic_level=float(rng.uniform(0, 1)),
    )
