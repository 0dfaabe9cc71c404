"""Synthetic scenes with known ground truth.

Stands in for a detector front end: every scene carries boxes, class labels,
per-object feature vectors (class prototype plus Gaussian noise), a noisy
detector-style label distribution, an image-level feature grid, and directed
predicate relations. Relations are planted by two mechanisms so that both
geometry-driven and class-driven signal exist in the data:

* geometric: the predicate follows from the relative layout of the two boxes
  through an explicit rule table (above / below / left_of / right_of);
* semantic: the predicate follows from the class pair through a fixed table.

Which ordered pairs can relate at all is decided by the semantic table (zero
entries never relate), so relatedness itself is statistically tied to the
class content of the scene.

Datasets are JSON lines, one scene per line, schema version 1. Floats round
trip bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, SceneValidationError

__all__ = [
    "Box",
    "SceneObject",
    "Relation",
    "Scene",
    "GenConfig",
    "REGIONS",
    "ordered_pairs",
    "geometric_layout",
    "layout_region",
    "semantic_table",
    "class_prototypes",
    "grid_prototypes",
    "generate_scene",
    "generate_dataset",
    "union_box",
    "union_feature",
    "validate_scene",
    "write_dataset",
    "read_dataset",
]

REGIONS = ("above", "below", "left_of", "right_of")

# sub-stream tags so prototypes, tables and scenes draw from independent rngs
_TAG_FEATURE_PROTO = 101
_TAG_GRID_PROTO = 102
_TAG_SEMANTIC = 103
_TAG_SCENE = 104


@dataclass
class Box:
    """Axis-aligned box given by center coordinates and extents."""

    x: float
    y: float
    w: float
    h: float


@dataclass
class SceneObject:
    box: Box
    class_id: int
    feature: np.ndarray
    label_dist: np.ndarray


@dataclass
class Relation:
    """Directed subject -> object edge; predicate 0 is reserved background."""

    subj: int
    obj: int
    predicate: int


def ordered_pairs(n: int) -> np.ndarray:
    """All ordered index pairs (i, j), i != j, row-major in i then j."""
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    return np.array(pairs, dtype=np.intp).reshape(len(pairs), 2)


@dataclass
class Scene:
    scene_id: str
    objects: list[SceneObject]
    relations: list[Relation]
    grid: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def class_ids(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.intp)

    # The matrices below are pure functions of the scene and are memoized
    # because the model rebuilds its graph on every forward pass.

    def feature_matrix(self) -> np.ndarray:
        if "features" not in self._cache:
            self._cache["features"] = np.stack([o.feature for o in self.objects])
        return self._cache["features"]

    def label_matrix(self) -> np.ndarray:
        if "labels" not in self._cache:
            self._cache["labels"] = np.stack([o.label_dist for o in self.objects])
        return self._cache["labels"]

    def pair_index(self) -> np.ndarray:
        if "pairs" not in self._cache:
            self._cache["pairs"] = ordered_pairs(self.n_objects)
        return self._cache["pairs"]

    def pair_union_features(self) -> np.ndarray:
        if "union" not in self._cache:
            self._cache["union"] = np.stack(
                [union_feature(self, i, j) for i, j in self.pair_index()]
            )
        return self._cache["union"]

    def pair_layouts(self) -> np.ndarray:
        if "layouts" not in self._cache:
            self._cache["layouts"] = np.stack(
                [
                    geometric_layout(self.objects[i].box, self.objects[j].box)
                    for i, j in self.pair_index()
                ]
            )
        return self._cache["layouts"]


@dataclass
class GenConfig:
    """Generator settings. ``validate()`` before use.

    ``semantic_rule_table`` maps (subject class, object class) to a predicate;
    0 marks pairs that never relate. When left as None a table is derived from
    ``rng_seed``: classes relate only to their ring neighbours (c, c +- 1 mod
    C) with a pseudo-random predicate per direction. ``geometric_rule_table``
    maps predicate ids to layout regions and must be injective.
    """

    c_obj: int = 10
    c_rel: int = 6
    n_range: tuple[int, int] = (3, 12)
    d_roi: int = 32
    d_img: int = 16
    grid_hw: tuple[int, int] = (8, 8)
    feature_noise_sigma: float = 1.0
    label_noise: float = 0.3
    geometric_rule_table: dict[int, str] = field(
        default_factory=lambda: {1: "above", 2: "below", 3: "left_of", 4: "right_of"}
    )
    semantic_rule_table: list[list[int]] | None = None
    geometric_fraction: float = 0.6
    relation_density: float = 0.55
    geo_threshold: float = 0.5
    rng_seed: int = 0

    def validate(self) -> "GenConfig":
        if self.c_obj < 2:
            raise ConfigError("c_obj must be >= 2")
        if self.c_rel < 2:
            raise ConfigError("c_rel must be >= 2 (background plus one predicate)")
        lo, hi = self.n_range
        if not (2 <= lo <= hi):
            raise ConfigError("n_range must satisfy 2 <= lo <= hi")
        for name in ("d_roi", "d_img"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.grid_hw[0] < 1 or self.grid_hw[1] < 1:
            raise ConfigError("grid_hw entries must be positive")
        if self.feature_noise_sigma < 0:
            raise ConfigError("feature_noise_sigma must be >= 0")
        for name in ("label_noise", "geometric_fraction", "relation_density"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.geo_threshold <= 0:
            raise ConfigError("geo_threshold must be positive")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be >= 0")
        seen = set()
        for pred, region in self.geometric_rule_table.items():
            if not (1 <= pred < self.c_rel):
                raise ConfigError(f"geometric_rule_table: predicate {pred} out of range")
            if region not in REGIONS:
                raise ConfigError(f"geometric_rule_table: unknown region '{region}'")
            if region in seen:
                raise ConfigError(f"geometric_rule_table: region '{region}' mapped twice")
            seen.add(region)
        if self.semantic_rule_table is not None:
            t = np.asarray(self.semantic_rule_table)
            if t.shape != (self.c_obj, self.c_obj):
                raise ConfigError("semantic_rule_table must be c_obj x c_obj")
            if t.min() < 0 or t.max() >= self.c_rel:
                raise ConfigError("semantic_rule_table: predicate out of range")
        return self

    @classmethod
    def full_scale(cls) -> "GenConfig":
        """Dimensions of the original large-scale pipeline; not the default."""
        return cls(c_obj=150, c_rel=51, d_roi=4096, d_img=512, n_range=(2, 64))

    def to_json(self) -> dict:
        return {
            "c_obj": self.c_obj,
            "c_rel": self.c_rel,
            "n_range": list(self.n_range),
            "d_roi": self.d_roi,
            "d_img": self.d_img,
            "grid_hw": list(self.grid_hw),
            "feature_noise_sigma": self.feature_noise_sigma,
            "label_noise": self.label_noise,
            "geometric_rule_table": {str(k): v for k, v in self.geometric_rule_table.items()},
            "semantic_rule_table": semantic_table(self).tolist(),
            "geometric_fraction": self.geometric_fraction,
            "relation_density": self.relation_density,
            "geo_threshold": self.geo_threshold,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GenConfig":
        known = {
            "c_obj", "c_rel", "n_range", "d_roi", "d_img", "grid_hw",
            "feature_noise_sigma", "label_noise", "geometric_rule_table",
            "semantic_rule_table", "geometric_fraction", "relation_density",
            "geo_threshold", "rng_seed",
        }
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown generator config field '{key}'")
        kwargs = dict(data)
        if "n_range" in kwargs:
            kwargs["n_range"] = tuple(kwargs["n_range"])
        if "grid_hw" in kwargs:
            kwargs["grid_hw"] = tuple(kwargs["grid_hw"])
        if "geometric_rule_table" in kwargs:
            kwargs["geometric_rule_table"] = {
                int(k): v for k, v in kwargs["geometric_rule_table"].items()
            }
        return cls(**kwargs).validate()


# ---------------------------------------------------------------------------
# layout rules


def geometric_layout(s: Box, o: Box) -> np.ndarray:
    """Relative layout of object vs subject box.

    Returns ((x_o - x_s) / w_s, (y_o - y_s) / h_s, log(w_o / w_s),
    log(h_o / h_s)). Invariant under joint translation and joint positive
    scaling of both boxes.
    """
    for b in (s, o):
        if b.w <= 0 or b.h <= 0:
            raise ValueError(f"geometric_layout: non-positive extent in {b}")
    return np.array(
        [
            (o.x - s.x) / s.w,
            (o.y - s.y) / s.h,
            math.log(o.w / s.w),
            math.log(o.h / s.h),
        ]
    )


def layout_region(layout: np.ndarray, threshold: float) -> str | None:
    """Classify a relative layout into one dominant-axis region, or None.

    y grows downward, so "above" means the object center sits above the
    subject center. Regions are disjoint by the dominant-axis rule.
    """
    dx, dy = layout[0], layout[1]
    if abs(dy) >= abs(dx):
        if dy <= -threshold:
            return "above"
        if dy >= threshold:
            return "below"
    else:
        if dx <= -threshold:
            return "left_of"
        if dx >= threshold:
            return "right_of"
    return None


def semantic_table(cfg: GenConfig) -> np.ndarray:
    """Class-pair to predicate table; 0 means the pair never relates.

    The derived default lets a class relate to itself and to its two ring
    neighbours (c, c +- 1 mod C) with a pseudo-random predicate per ordered
    pair, so relatedness is concentrated on semantically close classes.
    """
    if cfg.semantic_rule_table is not None:
        return np.asarray(cfg.semantic_rule_table, dtype=np.intp)
    rng = np.random.default_rng((cfg.rng_seed, _TAG_SEMANTIC))
    c = cfg.c_obj
    table = np.zeros((c, c), dtype=np.intp)
    for cls in range(c):
        for nb in ((cls + 1) % c, (cls - 1) % c, cls):
            table[cls, nb] = int(rng.integers(1, cfg.c_rel))
    return table


def class_prototypes(cfg: GenConfig) -> np.ndarray:
    """Per-class feature prototypes.

    Ring-adjacent classes get correlated prototypes (each is its own draw
    blended with both neighbours), mirroring how related categories tend to
    look alike; combined with the ring-structured semantic table this makes
    relatedness visible in feature space.
    """
    rng = np.random.default_rng((cfg.rng_seed, _TAG_FEATURE_PROTO))
    g = rng.normal(0.0, 1.0, (cfg.c_obj, cfg.d_roi))
    return g + 0.5 * np.roll(g, 1, axis=0) + 0.5 * np.roll(g, -1, axis=0)


def grid_prototypes(cfg: GenConfig) -> np.ndarray:
    rng = np.random.default_rng((cfg.rng_seed, _TAG_GRID_PROTO))
    return rng.normal(0.0, 1.0, (cfg.c_obj, cfg.d_img))


# ---------------------------------------------------------------------------
# generation


def generate_scene(cfg: GenConfig, seed: int) -> Scene:
    """Deterministic scene for (cfg, seed).

    Features are class prototypes plus Gaussian noise; label distributions
    are one-hot blended with Dirichlet confusion noise; the grid is each
    object's grid prototype splatted at its box center plus noise. Relations
    follow the rule tables described in the module docstring.
    """
    cfg.validate()
    rng = np.random.default_rng((cfg.rng_seed, _TAG_SCENE, seed))
    lo, hi = cfg.n_range
    n = int(rng.integers(lo, hi + 1))
    classes = rng.integers(0, cfg.c_obj, n)

    xs = rng.uniform(0.1, 0.9, n)
    ys = rng.uniform(0.1, 0.9, n)
    ws = rng.uniform(0.06, 0.3, n)
    hs = rng.uniform(0.06, 0.3, n)
    boxes = [Box(float(xs[i]), float(ys[i]), float(ws[i]), float(hs[i])) for i in range(n)]

    protos = class_prototypes(cfg)
    features = protos[classes].copy()
    if cfg.feature_noise_sigma > 0:
        features += rng.normal(0.0, cfg.feature_noise_sigma, (n, cfg.d_roi))

    label_dist = np.zeros((n, cfg.c_obj))
    label_dist[np.arange(n), classes] = 1.0
    if cfg.label_noise > 0:
        confusion = rng.dirichlet(np.ones(cfg.c_obj), size=n)
        label_dist = (1.0 - cfg.label_noise) * label_dist + cfg.label_noise * confusion
        label_dist /= label_dist.sum(axis=1, keepdims=True)

    # Splats scale with cell count over object count so the pooled grid
    # vector stays O(1) regardless of scene size; grid noise is kept an
    # order of magnitude below feature noise.
    h, w = cfg.grid_hw
    grid = np.zeros((cfg.d_img, h, w))
    gprotos = grid_prototypes(cfg)
    amplitude = (h * w) / n
    for i in range(n):
        iy = min(int(ys[i] * h), h - 1)
        ix = min(int(xs[i] * w), w - 1)
        grid[:, iy, ix] += amplitude * gprotos[classes[i]]
    if cfg.feature_noise_sigma > 0:
        grid += rng.normal(0.0, 0.1 * cfg.feature_noise_sigma, grid.shape)

    table = semantic_table(cfg)
    inverse_geo = {region: pred for pred, region in cfg.geometric_rule_table.items()}
    relations: list[Relation] = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            sem_pred = int(table[classes[i], classes[j]])
            if sem_pred == 0:
                continue
            if rng.random() >= cfg.relation_density:
                continue
            pred = sem_pred
            if rng.random() < cfg.geometric_fraction:
                region = layout_region(
                    geometric_layout(boxes[i], boxes[j]), cfg.geo_threshold
                )
                if region in inverse_geo:
                    pred = inverse_geo[region]
            relations.append(Relation(i, j, pred))

    objects = [
        SceneObject(boxes[i], int(classes[i]), features[i], label_dist[i])
        for i in range(n)
    ]
    return Scene(f"scene-{seed}", objects, relations, grid)


def generate_dataset(cfg: GenConfig, n_scenes: int, base_seed: int) -> list[Scene]:
    """Scenes for seeds base_seed .. base_seed + n_scenes - 1."""
    if n_scenes < 0:
        raise ConfigError("n_scenes must be >= 0")
    return [generate_scene(cfg, base_seed + i) for i in range(n_scenes)]


def union_box(a: Box, b: Box) -> Box:
    x1 = min(a.x - a.w / 2, b.x - b.w / 2)
    y1 = min(a.y - a.h / 2, b.y - b.h / 2)
    x2 = max(a.x + a.w / 2, b.x + b.w / 2)
    y2 = max(a.y + a.h / 2, b.y + b.h / 2)
    return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def union_box_encoding(a: Box, b: Box, d: int) -> np.ndarray:
    """Deterministic d-dim encoding of the union box: its (x, y, w, h) tiled."""
    u = union_box(a, b)
    return 0.5 * np.resize(np.array([u.x, u.y, u.w, u.h]), d)


def union_feature(scene: Scene, i: int, j: int) -> np.ndarray:
    """Stand-in for a pooled feature of the union of two object regions.

    Mean of the two object features plus the union-box encoding. Noise-free
    given the scene, and symmetric in (i, j).
    """
    if i == j:
        raise ValueError("union_feature: i and j must differ")
    oi, oj = scene.objects[i], scene.objects[j]
    content = 0.5 * (oi.feature + oj.feature)
    return content + union_box_encoding(oi.box, oj.box, oi.feature.shape[0])


# ---------------------------------------------------------------------------
# validation and dataset files


def validate_scene(
    scene: Scene,
    c_obj: int | None = None,
    c_rel: int | None = None,
    n_max: int | None = None,
) -> None:
    """Raise SceneValidationError on any structural violation."""
    n = scene.n_objects
    if n < 2:
        raise SceneValidationError(f"{scene.scene_id}: needs at least 2 objects, got {n}")
    if n_max is not None and n > n_max:
        raise SceneValidationError(f"{scene.scene_id}: {n} objects exceeds max {n_max}")
    d_roi = scene.objects[0].feature.shape[0]
    width = c_obj if c_obj is not None else scene.objects[0].label_dist.shape[0]
    for k, o in enumerate(scene.objects):
        if o.box.w <= 0 or o.box.h <= 0:
            raise SceneValidationError(f"{scene.scene_id}: object {k} has non-positive extent")
        if o.feature.shape != (d_roi,):
            raise SceneValidationError(f"{scene.scene_id}: object {k} feature width differs")
        if o.label_dist.shape != (width,):
            raise SceneValidationError(f"{scene.scene_id}: object {k} label_dist width differs")
        if not (0 <= o.class_id < width):
            raise SceneValidationError(f"{scene.scene_id}: object {k} class_id out of range")
        if abs(o.label_dist.sum() - 1.0) > 1e-9 or o.label_dist.min() < 0:
            raise SceneValidationError(f"{scene.scene_id}: object {k} label_dist is not a distribution")
        if not (np.isfinite(o.feature).all() and np.isfinite(o.label_dist).all()):
            raise SceneValidationError(f"{scene.scene_id}: object {k} has non-finite values")
    seen_pairs = set()
    for r in scene.relations:
        if not (0 <= r.subj < n and 0 <= r.obj < n):
            raise SceneValidationError(f"{scene.scene_id}: relation index out of range")
        if r.subj == r.obj:
            raise SceneValidationError(f"{scene.scene_id}: relation with subj == obj")
        if r.predicate < 1 or (c_rel is not None and r.predicate >= c_rel):
            raise SceneValidationError(f"{scene.scene_id}: predicate {r.predicate} out of range")
        if (r.subj, r.obj) in seen_pairs:
            raise SceneValidationError(
                f"{scene.scene_id}: duplicate relation for pair ({r.subj}, {r.obj})"
            )
        seen_pairs.add((r.subj, r.obj))
    if scene.grid.ndim != 3:
        raise SceneValidationError(f"{scene.scene_id}: grid must be 3-D")
    if not np.isfinite(scene.grid).all():
        raise SceneValidationError(f"{scene.scene_id}: grid has non-finite values")


def scene_to_json(scene: Scene) -> dict:
    return {
        "v": 1,
        "scene_id": scene.scene_id,
        "objects": [
            {
                "box": {"x": o.box.x, "y": o.box.y, "w": o.box.w, "h": o.box.h},
                "class_id": int(o.class_id),
                "feature": o.feature.tolist(),
                "label_dist": o.label_dist.tolist(),
            }
            for o in scene.objects
        ],
        "relations": [
            {"subj": int(r.subj), "obj": int(r.obj), "predicate": int(r.predicate)}
            for r in scene.relations
        ],
        "grid": scene.grid.tolist(),
    }


def scene_from_json(data: dict) -> Scene:
    if data.get("v") != 1:
        raise ValueError(f"unsupported schema version {data.get('v')!r}")
    objects = []
    for od in data["objects"]:
        b = od["box"]
        objects.append(
            SceneObject(
                Box(float(b["x"]), float(b["y"]), float(b["w"]), float(b["h"])),
                int(od["class_id"]),
                np.asarray(od["feature"], dtype=np.float64),
                np.asarray(od["label_dist"], dtype=np.float64),
            )
        )
    relations = [
        Relation(int(r["subj"]), int(r["obj"]), int(r["predicate"]))
        for r in data["relations"]
    ]
    grid = np.asarray(data["grid"], dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError("grid must be a 3-D array")
    scene = Scene(str(data["scene_id"]), objects, relations, grid)
    validate_scene(scene)
    return scene


def write_dataset(scenes: list[Scene], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_json(scene)))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
    return scenes
