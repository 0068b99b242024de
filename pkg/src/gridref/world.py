"""Procedural grid world: scenes, ground-truth referring expressions, datasets.

Scenes are grids of attributed objects (category, color, size, cell). Every
scene is a pure function of (config, seed). Ground-truth expressions are the
minimal attribute combinations that uniquely resolve a target under the
token-matching oracle, rendered in the fixed order size, color, category,
positional word.

Positional words are computed relative to the median object cell: an object
left of the median column is "left", above the median row is "top", and so
on; "middle" applies only when the object sits exactly on both medians.
"""

from __future__ import annotations

import itertools
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from random import Random
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

from .errors import ConfigurationError
from .metrics import BBox, Expression
from .storage import read_jsonl, write_jsonl

DATASET_SCHEMA_VERSION = 1

CATEGORIES = ("ball", "box", "cup", "book", "robot")
COLORS = ("red", "blue", "green", "yellow", "purple")
SIZES = ("small", "medium", "large")
POSITION_WORDS = ("left", "right", "top", "bottom", "middle")

SIZE_FRACTIONS = {"small": 0.45, "medium": 0.65, "large": 0.85}

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class WorldConfig:
    grid_rows: int = 4
    grid_cols: int = 4
    cell_px: int = 32
    min_objects: int = 3
    max_objects: int = 6
    n_regions: int = 12
    categories: tuple[str, ...] = CATEGORIES
    colors: tuple[str, ...] = COLORS
    sizes: tuple[str, ...] = SIZES
    positional_words: bool = True
    # ambiguity pressure: minimum number of same-category distractors that
    # must exist for at least one category ("hard" scenes when >= 1)
    same_category_distractors: int = 0

    @property
    def hard(self) -> bool:
        return self.same_category_distractors >= 1

    def validate(self) -> None:
        n_cells = self.grid_rows * self.grid_cols
        if self.min_objects < 1 or self.min_objects > self.max_objects:
            raise ConfigurationError("object count range is empty")
        if self.max_objects > n_cells:
            raise ConfigurationError(f"{self.max_objects} objects cannot fit {n_cells} cells")
        if self.max_objects > self.n_regions:
            raise ConfigurationError("max_objects exceeds the region slot count")
        if self.same_category_distractors + 1 > self.max_objects:
            raise ConfigurationError("not enough objects to satisfy the distractor requirement")
        if not self.positional_words:
            # without positional words every object needs a unique attribute triple
            if self.max_objects > len(self.categories) * len(self.colors) * len(self.sizes):
                raise ConfigurationError("attribute space too small for unique triples")

    def to_json(self) -> dict:
        return {
            "schema_version": DATASET_SCHEMA_VERSION,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "cell_px": self.cell_px,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "n_regions": self.n_regions,
            "categories": list(self.categories),
            "colors": list(self.colors),
            "sizes": list(self.sizes),
            "positional_words": self.positional_words,
            "same_category_distractors": self.same_category_distractors,
        }

    @classmethod
    def from_json(cls, data: dict) -> "WorldConfig":
        return cls(
            grid_rows=data["grid_rows"],
            grid_cols=data["grid_cols"],
            cell_px=data["cell_px"],
            min_objects=data["min_objects"],
            max_objects=data["max_objects"],
            n_regions=data["n_regions"],
            categories=tuple(data["categories"]),
            colors=tuple(data["colors"]),
            sizes=tuple(data["sizes"]),
            positional_words=data["positional_words"],
            same_category_distractors=data["same_category_distractors"],
        )


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    category: str
    color: str
    size: str
    cell: tuple[int, int]  # (row, col)
    bbox: BBox

    def to_json(self) -> dict:
        return {
            "object_id": self.object_id,
            "category": self.category,
            "color": self.color,
            "size": self.size,
            "cell": list(self.cell),
            "bbox": self.bbox.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SceneObject":
        return cls(
            object_id=data["object_id"],
            category=data["category"],
            color=data["color"],
            size=data["size"],
            cell=tuple(data["cell"]),
            bbox=BBox.from_json(data["bbox"]),
        )


@dataclass(frozen=True)
class Scene:
    """A synthetic image: attributed objects on a grid, self-describing
    (carries its attribute lexicon and the positional-word flag)."""

    scene_id: str
    width: int
    height: int
    grid_rows: int
    grid_cols: int
    objects: tuple[SceneObject, ...]
    rng_seed: int
    hard: bool
    positional_words: bool
    categories: tuple[str, ...]
    colors: tuple[str, ...]
    sizes: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "schema_version": DATASET_SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "width": self.width,
            "height": self.height,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "objects": [o.to_json() for o in self.objects],
            "rng_seed": self.rng_seed,
            "hard": self.hard,
            "positional_words": self.positional_words,
            "categories": list(self.categories),
            "colors": list(self.colors),
            "sizes": list(self.sizes),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Scene":
        return cls(
            scene_id=data["scene_id"],
            width=data["width"],
            height=data["height"],
            grid_rows=data["grid_rows"],
            grid_cols=data["grid_cols"],
            objects=tuple(SceneObject.from_json(o) for o in data["objects"]),
            rng_seed=data["rng_seed"],
            hard=data["hard"],
            positional_words=data["positional_words"],
            categories=tuple(data["categories"]),
            colors=tuple(data["colors"]),
            sizes=tuple(data["sizes"]),
        )


@dataclass(frozen=True)
class RefSample:
    scene_id: str
    target_index: int
    expressions: tuple[Expression, ...]
    split: str

    def to_json(self) -> dict:
        return {
            "schema_version": DATASET_SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "target_index": self.target_index,
            "expressions": [list(e) for e in self.expressions],
            "split": self.split,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RefSample":
        return cls(
            scene_id=data["scene_id"],
            target_index=data["target_index"],
            expressions=tuple(tuple(e) for e in data["expressions"]),
            split=data["split"],
        )


def cell_bbox(cell: tuple[int, int], size: str, cell_px: int) -> BBox:
    """Bbox fully inside the cell, side scaled by the size word."""
    row, col = cell
    frac = SIZE_FRACTIONS[size]
    half = frac * cell_px / 2.0
    cx = (col + 0.5) * cell_px
    cy = (row + 0.5) * cell_px
    return BBox(cx - half, cy - half, cx + half, cy + half)


def positional_words_for(scene: Scene, obj: SceneObject) -> tuple[str, ...]:
    med_row = statistics.median(o.cell[0] for o in scene.objects)
    med_col = statistics.median(o.cell[1] for o in scene.objects)
    row, col = obj.cell
    words = []
    if col < med_col:
        words.append("left")
    if col > med_col:
        words.append("right")
    if row < med_row:
        words.append("top")
    if row > med_row:
        words.append("bottom")
    if col == med_col and row == med_row:
        words.append("middle")
    return tuple(words)


def oracle_scores(scene: Scene, tokens: Sequence[str]) -> tuple[list[int], int]:
    """Token-matching scores per object: +1 per applying attribute/positional
    token, -1 per contradicted one, unknown tokens ignored. Returns the score
    list and the number of recognized tokens."""
    pos_cache = {o.object_id: set(positional_words_for(scene, o)) for o in scene.objects}
    scores = [0] * len(scene.objects)
    known = 0
    for tok in tokens:
        if tok in scene.categories:
            known += 1
            for i, o in enumerate(scene.objects):
                scores[i] += 1 if o.category == tok else -1
        elif tok in scene.colors:
            known += 1
            for i, o in enumerate(scene.objects):
                scores[i] += 1 if o.color == tok else -1
        elif tok in scene.sizes:
            known += 1
            for i, o in enumerate(scene.objects):
                scores[i] += 1 if o.size == tok else -1
        elif tok in POSITION_WORDS:
            known += 1
            for i, o in enumerate(scene.objects):
                scores[i] += 1 if tok in pos_cache[o.object_id] else -1
    return scores, known


def resolves_uniquely(scene: Scene, tokens: Sequence[str], target_index: int) -> bool:
    """Strict argmax: the target outscores every other object."""
    scores, _ = oracle_scores(scene, tokens)
    target_score = scores[target_index]
    return all(s < target_score for i, s in enumerate(scores) if i != target_index)


def _render_tokens(target: SceneObject, use_size: bool, use_color: bool, pos: str | None) -> Expression:
    tokens = []
    if use_size:
        tokens.append(target.size)
    if use_color:
        tokens.append(target.color)
    tokens.append(target.category)
    if pos is not None:
        tokens.append(pos)
    return tuple(tokens)


def canonical_expressions(scene: Scene, target_index: int) -> list[Expression]:
    """All minimal attribute combinations (category always present) that
    uniquely resolve the target under the oracle scoring."""
    if not 0 <= target_index < len(scene.objects):
        raise ValueError(f"target index {target_index} out of range")
    target = scene.objects[target_index]
    pos_options: list[str | None] = [None]
    if scene.positional_words:
        pos_options += list(positional_words_for(scene, target))

    unique: dict[tuple[bool, bool, str | None], Expression] = {}
    for use_size, use_color, pos in itertools.product((False, True), (False, True), pos_options):
        tokens = _render_tokens(target, use_size, use_color, pos)
        if resolves_uniquely(scene, tokens, target_index):
            unique[(use_size, use_color, pos)] = tokens

    minimal = []
    for (use_size, use_color, pos), tokens in unique.items():
        reductions = []
        if use_size:
            reductions.append((False, use_color, pos))
        if use_color:
            reductions.append((use_size, False, pos))
        if pos is not None:
            reductions.append((use_size, use_color, None))
        if not any(r in unique for r in reductions):
            minimal.append(tokens)
    return sorted(minimal, key=lambda e: (len(e), e))


def sample_negative_region(scene: Scene, target_index: int, seed: int) -> int | None:
    """A distractor sharing the target's category, or None if there is none."""
    if not 0 <= target_index < len(scene.objects):
        raise ValueError(f"target index {target_index} out of range")
    target = scene.objects[target_index]
    candidates = [o.object_id for o in scene.objects if o.object_id != target_index and o.category == target.category]
    if not candidates:
        return None
    return Random(seed).choice(candidates)


def generate_scene(config: WorldConfig, seed: int) -> Scene:
    """Deterministic scene satisfying the config's constraints: distinct
    cells, distractor pressure, and a nonempty canonical expression for every
    object (rejection-resampled on the seeded stream when needed)."""
    config.validate()
    rng = Random(seed)
    n_objects = rng.randint(config.min_objects, config.max_objects)
    all_cells = [(r, c) for r in range(config.grid_rows) for c in range(config.grid_cols)]

    for _ in range(1000):
        cells = rng.sample(all_cells, n_objects)
        categories = [rng.choice(config.categories) for _ in range(n_objects)]
        if config.same_category_distractors >= 1 and n_objects >= config.same_category_distractors + 1:
            shared = rng.choice(config.categories)
            for i in range(config.same_category_distractors + 1):
                categories[i] = shared
            rng.shuffle(categories)

        used_triples: set[tuple[str, str, str]] = set()
        attrs: list[tuple[str, str]] = []
        feasible = True
        for cat in categories:
            pool = [
                (color, size)
                for color in config.colors
                for size in config.sizes
                if config.positional_words or (cat, color, size) not in used_triples
            ]
            if not pool:
                feasible = False
                break
            color, size = rng.choice(pool)
            used_triples.add((cat, color, size))
            attrs.append((color, size))
        if not feasible:
            continue

        objects = tuple(
            SceneObject(
                object_id=i,
                category=categories[i],
                color=attrs[i][0],
                size=attrs[i][1],
                cell=cells[i],
                bbox=cell_bbox(cells[i], attrs[i][1], config.cell_px),
            )
            for i in range(n_objects)
        )
        scene = Scene(
            scene_id=f"scene-{seed:010d}",
            width=config.grid_cols * config.cell_px,
            height=config.grid_rows * config.cell_px,
            grid_rows=config.grid_rows,
            grid_cols=config.grid_cols,
            objects=objects,
            rng_seed=seed,
            hard=config.hard,
            positional_words=config.positional_words,
            categories=config.categories,
            colors=config.colors,
            sizes=config.sizes,
        )
        if all(canonical_expressions(scene, i) for i in range(n_objects)):
            return scene
    raise ConfigurationError(f"could not satisfy scene constraints for seed {seed}")


# --- dataset ---------------------------------------------------------------


@dataclass
class WorldDataset:
    config: WorldConfig
    scenes: dict[str, Scene]
    samples: list[RefSample]

    def split_samples(self, split: str) -> list[RefSample]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.samples if s.split == split]

    def reference_sets(self, split: str) -> list[list[Expression]]:
        return [list(s.expressions) for s in self.split_samples(split)]

    def scene_for(self, sample: RefSample) -> Scene:
        return self.scenes[sample.scene_id]


def build_dataset(
    config: WorldConfig,
    num_scenes: int,
    seed: int,
    targets_per_scene: int | None = None,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> WorldDataset:
    """Scenes plus one RefSample per chosen target, split by scene."""
    config.validate()
    if num_scenes < 1:
        raise ConfigurationError("need at least one scene")
    master = Random(seed)
    scene_seeds = master.sample(range(2**31), num_scenes)
    scenes = [generate_scene(config, s) for s in scene_seeds]

    order = list(range(num_scenes))
    master.shuffle(order)
    n_train = round(num_scenes * split_fractions[0])
    n_val = round(num_scenes * split_fractions[1])
    split_of = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split_of[idx] = "train"
        elif rank < n_train + n_val:
            split_of[idx] = "val"
        else:
            split_of[idx] = "test"

    samples_list: list[RefSample] = []
    for idx, scene in enumerate(scenes):
        n = len(scene.objects)
        if targets_per_scene is None or targets_per_scene >= n:
            targets = list(range(n))
        else:
            targets = sorted(master.sample(range(n), targets_per_scene))
        for t in targets:
            expressions = canonical_expressions(scene, t)
            if not expressions:
                raise ConfigurationError(f"unresolvable target {t} in {scene.scene_id}")
            for expr in expressions:
                if not resolves_uniquely(scene, expr, t):
                    raise ConfigurationError(f"expression {expr} does not resolve target {t}")
            samples_list.append(
                RefSample(
                    scene_id=scene.scene_id,
                    target_index=t,
                    expressions=tuple(expressions),
                    split=split_of[idx],
                )
            )
    return WorldDataset(config=config, scenes={s.scene_id: s for s in scenes}, samples=samples_list)


def save_dataset(dataset: WorldDataset, out_dir: Path | str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world_path = out_dir / "world.json"
    scenes_path = out_dir / "scenes.jsonl"
    samples_path = out_dir / "samples.jsonl"
    world_path.write_text(json.dumps(dataset.config.to_json(), indent=2, sort_keys=True))
    write_jsonl(scenes_path, (dataset.scenes[k].to_json() for k in sorted(dataset.scenes)))
    write_jsonl(samples_path, (s.to_json() for s in dataset.samples))
    return {"world": world_path, "scenes": scenes_path, "samples": samples_path}


def load_dataset(data_dir: Path | str) -> WorldDataset:
    data_dir = Path(data_dir)
    config_data = json.loads((data_dir / "world.json").read_text())
    if config_data.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported dataset schema in {data_dir}")
    config = WorldConfig.from_json(config_data)
    scenes = {}
    for record in read_jsonl(data_dir / "scenes.jsonl"):
        scene = Scene.from_json(record)
        scenes[scene.scene_id] = scene
    samples = [RefSample.from_json(r) for r in read_jsonl(data_dir / "samples.jsonl")]
    return WorldDataset(config=config, scenes=scenes, samples=samples)


# --- rendering ---------------------------------------------------------------


@dataclass(frozen=True)
class Overlay:
    bbox: BBox
    label: str = ""
    kind: str = "prediction"  # css class suffix


_SVG_STYLE = """
  .object { cursor: pointer; stroke: #222; stroke-width: 1.5; }
  .object:hover { opacity: 0.8; }
  .grid line { stroke: #ddd; stroke-width: 1; }
  .overlay { fill: none; stroke-width: 2.5; }
  .overlay.target { stroke: #1a7f37; }
  .overlay.prediction { stroke: #cf222e; stroke-dasharray: 5 3; }
  .overlay-label { font: 10px sans-serif; }
"""


def _object_element(obj: SceneObject) -> str:
    b = obj.bbox
    w = b.x_max - b.x_min
    h = b.y_max - b.y_min
    common = f'fill={quoteattr(obj.color)} data-category={quoteattr(obj.category)}'
    if obj.category == "ball":
        shape = (
            f'<circle cx="{(b.x_min + b.x_max) / 2:g}" cy="{(b.y_min + b.y_max) / 2:g}" '
            f'r="{w / 2:g}" {common}/>'
        )
    elif obj.category == "cup":
        shape = (
            f'<ellipse cx="{(b.x_min + b.x_max) / 2:g}" cy="{(b.y_min + b.y_max) / 2:g}" '
            f'rx="{w / 2:g}" ry="{h / 2:g}" {common}/>'
        )
    else:
        rx = {"box": 0.0, "book": 2.0}.get(obj.category, 6.0)
        shape = (
            f'<rect x="{b.x_min:g}" y="{b.y_min:g}" width="{w:g}" height="{h:g}" '
            f'rx="{rx:g}" {common}/>'
        )
    return f'<g class="object" data-object-id="{obj.object_id}">{shape}</g>'


def render_scene(scene: Scene, overlays: Sequence[Overlay] = ()) -> str:
    """Scalable vector drawing; each object is a clickable element carrying
    its object_id, overlays are outline rects."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{scene.width}" height="{scene.height}" '
        f'viewBox="0 0 {scene.width} {scene.height}" data-scene-id={quoteattr(scene.scene_id)}>',
        f"<style>{_SVG_STYLE}</style>",
        f'<rect class="background" width="{scene.width}" height="{scene.height}" fill="#fafafa"/>',
    ]
    grid = ['<g class="grid">']
    pitch_x = scene.width // scene.grid_cols
    pitch_y = scene.height // scene.grid_rows
    for x in range(pitch_x, scene.width, pitch_x):
        grid.append(f'<line x1="{x}" y1="0" x2="{x}" y2="{scene.height}"/>')
    for y in range(pitch_y, scene.height, pitch_y):
        grid.append(f'<line x1="0" y1="{y}" x2="{scene.width}" y2="{y}"/>')
    grid.append("</g>")
    parts.extend(grid)
    for obj in scene.objects:
        parts.append(_object_element(obj))
    for ov in overlays:
        b = ov.bbox
        parts.append(
            f'<rect class="overlay {escape(ov.kind)}" x="{b.x_min:g}" y="{b.y_min:g}" '
            f'width="{b.x_max - b.x_min:g}" height="{b.y_max - b.y_min:g}"/>'
        )
        if ov.label:
            parts.append(
                f'<text class="overlay-label" x="{b.x_min:g}" y="{max(b.y_min - 3, 8):g}">{escape(ov.label)}</text>'
            )
    parts.append("</svg>")
    return "".join(parts)
