import torch

from gridref.world import (
    CATEGORIES,
    COLORS,
    SIZES,
    Scene,
    SceneObject,
    cell_bbox,
)

torch.set_num_threads(1)


def make_scene(
    spec,
    scene_id="scene-test",
    grid=(4, 4),
    cell_px=32,
    positional_words=True,
    hard=False,
):
    """Hand-built scene from (category, color, size, (row, col)) tuples."""
    objects = tuple(
        SceneObject(
            object_id=i,
            category=cat,
            color=color,
            size=size,
            cell=cell,
            bbox=cell_bbox(cell, size, cell_px),
        )
        for i, (cat, color, size, cell) in enumerate(spec)
    )
    return Scene(
        scene_id=scene_id,
        width=grid[1] * cell_px,
        height=grid[0] * cell_px,
        grid_rows=grid[0],
        grid_cols=grid[1],
        objects=objects,
        rng_seed=0,
        hard=hard,
        positional_words=positional_words,
        categories=CATEGORIES,
        colors=COLORS,
        sizes=SIZES,
    )
