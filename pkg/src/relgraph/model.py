"""The scene-graph prediction network.

Inference runs in three stages over the objects of one scene:

1. object stage: each object row is the concatenation of its feature vector,
   an embedded label distribution, and a shared image context vector; a stack
   of relational embedding blocks (self-attention over object instances with
   a residual update) refines the rows and a final projection produces object
   class logits;
2. edge stage: the hard class decision (one-hot argmax, gradient stopped) is
   re-embedded, concatenated with the object-stage hidden rows, and refined
   by a second stack of relational embedding blocks into edge features whose
   left half acts as subject representation and right half as object
   representation;
3. relation head: for every ordered pair the subject half, object half and a
   projected union-region feature are fused by element-wise product, the
   relative box layout is embedded and concatenated, and a final projection
   yields predicate logits over all classes including background.

An auxiliary image-level head pools the feature grid and predicts which
object classes are present anywhere in the scene; its intermediate vector is
the context fed to stage 1.

All heavy math goes through :mod:`relgraph.tensor`, so one tape records the
whole scene loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tc
from .errors import ConfigError, MismatchError
from .scenes import Scene, geometric_layout, ordered_pairs, union_feature
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ModelOutput",
    "param_shapes",
    "relational_embedding",
    "global_context_encode",
    "build_object_inputs",
    "object_stage",
    "edge_stage",
    "relation_head",
    "pair_indices",
    "relation_targets",
    "presence_targets",
    "forward",
    "object_class_loss",
    "relation_class_loss",
    "presence_loss",
    "total_loss",
    "scene_losses",
    "geometric_layout",
]

ROW_OPS = ("softmax", "sigmoid")
SIMILARITIES = ("dot", "euclidean")
EDGE_INPUT_MODES = ("both", "class_only", "hidden_only")


@dataclass
class ModelConfig:
    """Network dimensions and switches. ``validate()`` before use.

    ``attention_blocks`` counts relational embedding blocks per stage; 0 is
    the degenerate fully-connected model kept for ablations. Disabling
    ``use_context`` or ``use_geometry`` zeroes the corresponding feature
    block without changing any shape, so ablation cells stay comparable.
    """

    c_obj: int = 10
    c_rel: int = 6
    d_roi: int = 32
    d_img: int = 16
    d_label_embed: int = 6
    d_context: int = 12
    d_obj_hidden: int = 16
    d_edge: int = 16
    d_geo: int = 8
    reduction_ratio: int = 2
    attention_blocks: int = 2
    row_op: str = "softmax"
    similarity: str = "dot"
    use_context: bool = True
    use_geometry: bool = True
    edge_input_mode: str = "both"
    lambda_rel: float = 1.0
    lambda_ctx: float = 1.0

    def validate(self) -> "ModelConfig":
        if self.c_obj < 2:
            raise ConfigError("c_obj must be >= 2")
        if self.c_rel < 2:
            raise ConfigError("c_rel must be >= 2")
        for name in ("d_roi", "d_img", "d_label_embed", "d_context",
                     "d_obj_hidden", "d_edge", "d_geo"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be >= 1")
        if not (0 <= self.attention_blocks <= 4):
            raise ConfigError("attention_blocks must lie in [0, 4]")
        if self.row_op not in ROW_OPS:
            raise ConfigError(f"row_op must be one of {ROW_OPS}")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"similarity must be one of {SIMILARITIES}")
        if self.edge_input_mode not in EDGE_INPUT_MODES:
            raise ConfigError(f"edge_input_mode must be one of {EDGE_INPUT_MODES}")
        if self.lambda_rel < 0 or self.lambda_ctx < 0:
            raise ConfigError("loss weights must be >= 0")
        return self

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Dimensions of the original large-scale system; not the default."""
        return cls(
            c_obj=150, c_rel=51, d_roi=4096, d_img=512, d_label_embed=200,
            d_context=512, d_obj_hidden=256, d_edge=4096, d_geo=128,
        )

    def object_input_width(self) -> int:
        return self.d_roi + self.d_label_embed + self.d_context

    def edge_input_width(self) -> int:
        if self.edge_input_mode == "class_only":
            return self.d_label_embed
        if self.edge_input_mode == "hidden_only":
            return self.d_obj_hidden
        return self.d_label_embed + self.d_obj_hidden

    def to_json(self) -> dict:
        return {
            "c_obj": self.c_obj, "c_rel": self.c_rel,
            "d_roi": self.d_roi, "d_img": self.d_img,
            "d_label_embed": self.d_label_embed, "d_context": self.d_context,
            "d_obj_hidden": self.d_obj_hidden, "d_edge": self.d_edge,
            "d_geo": self.d_geo, "reduction_ratio": self.reduction_ratio,
            "attention_blocks": self.attention_blocks, "row_op": self.row_op,
            "similarity": self.similarity, "use_context": self.use_context,
            "use_geometry": self.use_geometry,
            "edge_input_mode": self.edge_input_mode,
            "lambda_rel": self.lambda_rel, "lambda_ctx": self.lambda_ctx,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        known = set(cls().to_json())
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown model config field '{key}'")
        return cls(**data).validate()


def _block_shapes(shapes: dict, prefix: str, width: int, r: int) -> None:
    proj = math.ceil(width / r)
    for part in ("query", "key", "value"):
        shapes[f"{prefix}.{part}.w"] = (width, proj)
        shapes[f"{prefix}.{part}.b"] = (1, proj)
    shapes[f"{prefix}.mix.w"] = (proj, width)
    shapes[f"{prefix}.mix.b"] = (1, width)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named parameter and its shape, in a fixed order.

    The embedding matrices (label_embed, class_embed, geo_embed) carry no
    bias, so a one-hot input selects a row exactly; every other projection is
    affine.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["label_embed.w"] = (cfg.c_obj, cfg.d_label_embed)
    shapes["ctx_proj.w"] = (cfg.d_img, cfg.d_context)
    shapes["ctx_proj.b"] = (1, cfg.d_context)
    shapes["ctx_head.w"] = (cfg.d_context, cfg.c_obj)
    shapes["ctx_head.b"] = (1, cfg.c_obj)

    d0 = cfg.object_input_width()
    for k in range(1, cfg.attention_blocks + 1):
        _block_shapes(shapes, f"obj_attn{k}", d0 if k == 1 else cfg.d_obj_hidden,
                      cfg.reduction_ratio)
    shapes["obj_proj.w"] = (d0, cfg.d_obj_hidden)
    shapes["obj_proj.b"] = (1, cfg.d_obj_hidden)
    shapes["obj_out.w"] = (cfg.d_obj_hidden, cfg.c_obj)
    shapes["obj_out.b"] = (1, cfg.c_obj)

    shapes["class_embed.w"] = (cfg.c_obj, cfg.d_label_embed)
    e0 = cfg.edge_input_width()
    for k in range(1, cfg.attention_blocks + 1):
        _block_shapes(shapes, f"edge_attn{k}", e0 if k == 1 else cfg.d_obj_hidden,
                      cfg.reduction_ratio)
    shapes["edge_proj.w"] = (e0, cfg.d_obj_hidden)
    shapes["edge_proj.b"] = (1, cfg.d_obj_hidden)
    shapes["edge_out.w"] = (cfg.d_obj_hidden, 2 * cfg.d_edge)
    shapes["edge_out.b"] = (1, 2 * cfg.d_edge)

    shapes["union_proj.w"] = (cfg.d_roi, cfg.d_edge)
    shapes["union_proj.b"] = (1, cfg.d_edge)
    shapes["geo_embed.w"] = (4, cfg.d_geo)
    shapes["rel_out.w"] = (cfg.d_edge + cfg.d_geo, cfg.c_rel)
    shapes["rel_out.b"] = (1, cfg.c_rel)
    return shapes


class ModelParams:
    """Named parameter tensors plus the configuration they were shaped for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(
                    f"parameter '{name}' has shape {tensors[name].shape}, expected {shape}"
                )
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def get(self, name: str) -> Tensor | None:
        return self._tensors.get(name)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def as_mapping(self) -> Mapping[str, Tensor]:
        return self._tensors

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


def _affine(x: Tensor, params: ModelParams, name: str, activation: bool = False) -> Tensor:
    return tc.affine(x, params[f"{name}.w"], params.get(f"{name}.b"), activation)


# ---------------------------------------------------------------------------
# stages


def relational_embedding(
    x: Tensor,
    params: ModelParams,
    prefix: str,
    row_op: str = "softmax",
    similarity: str = "dot",
) -> tuple[Tensor, Tensor]:
    """One self-attention block over object rows with a residual update.

    Query/key/value projections reduce the width by the configured ratio.
    Returns the row-normalized affinity matrix and the updated rows
    (same width as the input).
    """
    q = _affine(x, params, f"{prefix}.query")
    k = _affine(x, params, f"{prefix}.key")
    v = _affine(x, params, f"{prefix}.value")
    if similarity == "dot":
        s = tc.matmul(q, tc.transpose(k))
    elif similarity == "euclidean":
        s = tc.neg_pairwise_sqdist(q, k)
    else:
        raise ConfigError(f"similarity must be one of {SIMILARITIES}")
    if row_op == "softmax":
        r = tc.row_softmax(s)
    elif row_op == "sigmoid":
        r = tc.row_sigmoid(s)
    else:
        raise ConfigError(f"row_op must be one of {ROW_OPS}")
    update = _affine(tc.matmul(r, v), params, f"{prefix}.mix", activation=True)
    return r, tc.add(x, update)


def global_context_encode(grid: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Pool the feature grid and predict per-class presence.

    Returns the context row (1 x d_context, the linear image of the pooled
    grid vector) and the presence probabilities (1 x c_obj, sigmoid).
    """
    pooled = tc.spatial_mean(grid)
    context = _affine(pooled, params, "ctx_proj")
    presence = tc.row_sigmoid(_affine(context, params, "ctx_head"))
    return context, presence


def build_object_inputs(
    scene: Scene, context: Tensor, params: ModelParams
) -> Tensor:
    """Stack per-object rows: (feature, embedded label_dist, shared context)."""
    n = scene.n_objects
    feats = Tensor(scene.feature_matrix())
    labels = Tensor(scene.label_matrix())
    label_emb = tc.matmul(labels, params["label_embed.w"])
    ctx_rows = tc.repeat_rows(context, n)
    return tc.concat_cols([feats, label_emb, ctx_rows])


def object_stage(
    x: Tensor, params: ModelParams, cfg: ModelConfig
) -> tuple[list[Tensor], Tensor, Tensor]:
    """Attention blocks and projections down to object class logits.

    The first block runs at the full input width and is followed by the
    projection to the hidden width; any further blocks run at the hidden
    width. Returns (affinity matrices, hidden rows, logits).
    """
    attention: list[Tensor] = []
    for k in range(1, cfg.attention_blocks + 1):
        r, x = relational_embedding(x, params, f"obj_attn{k}", cfg.row_op, cfg.similarity)
        attention.append(r)
        if k == 1:
            x = _affine(x, params, "obj_proj", activation=True)
    if cfg.attention_blocks == 0:
        x = _affine(x, params, "obj_proj", activation=True)
    hidden = x
    logits = _affine(x, params, "obj_out")
    return attention, hidden, logits


def edge_stage(
    obj_logits: Tensor, obj_hidden: Tensor, params: ModelParams, cfg: ModelConfig
) -> tuple[Tensor, list[Tensor], Tensor]:
    """Build pairwise-ready edge features from the object stage.

    The hard class decision is a one-hot argmax (ties to the lowest class,
    no gradient through this branch), embedded and combined with the hidden
    rows according to ``edge_input_mode``. Returns (edge inputs, affinity
    matrices, edge features of width 2 * d_edge whose left half is the
    subject representation and right half the object representation).
    """
    onehot = tc.one_hot_argmax_rows(obj_logits)
    parts: list[Tensor] = []
    if cfg.edge_input_mode in ("both", "class_only"):
        parts.append(tc.matmul(onehot, params["class_embed.w"]))
    if cfg.edge_input_mode in ("both", "hidden_only"):
        parts.append(obj_hidden)
    x = tc.concat_cols(parts) if len(parts) > 1 else parts[0]
    edge_inputs = x
    attention: list[Tensor] = []
    for k in range(1, cfg.attention_blocks + 1):
        r, x = relational_embedding(x, params, f"edge_attn{k}", cfg.row_op, cfg.similarity)
        attention.append(r)
        if k == 1:
            x = _affine(x, params, "edge_proj", activation=True)
    if cfg.attention_blocks == 0:
        x = _affine(x, params, "edge_proj", activation=True)
    features = _affine(x, params, "edge_out", activation=True)
    return edge_inputs, attention, features


def pair_indices(n: int) -> np.ndarray:
    """All ordered pairs (i, j), i != j, row-major in i then j."""
    return ordered_pairs(n)


def relation_head(
    edge_features: Tensor, scene: Scene, params: ModelParams, cfg: ModelConfig
) -> tuple[np.ndarray, Tensor, Tensor, Tensor]:
    """Predicate logits for every ordered pair.

    Fuses subject-half(i), object-half(j) and the projected union feature by
    element-wise product, concatenates the embedded relative layout (zeros
    when geometry is disabled) and projects to c_rel logits. Returns
    (pair index array, fused product, raw layout rows, logits).
    """
    pid = scene.pair_index()
    subj_half = tc.slice_cols(edge_features, 0, cfg.d_edge)
    obj_half = tc.slice_cols(edge_features, cfg.d_edge, 2 * cfg.d_edge)
    s_rows = tc.gather_rows(subj_half, pid[:, 0])
    o_rows = tc.gather_rows(obj_half, pid[:, 1])
    union = Tensor(scene.pair_union_features())
    u_rows = _affine(union, params, "union_proj", activation=True)
    product = tc.mul(tc.mul(s_rows, o_rows), u_rows)
    layout = Tensor(scene.pair_layouts())
    if cfg.use_geometry:
        geo_emb = tc.matmul(layout, params["geo_embed.w"])
    else:
        geo_emb = Tensor(np.zeros((pid.shape[0], cfg.d_geo)))
    fused = tc.concat_cols([product, geo_emb])
    logits = _affine(fused, params, "rel_out")
    return pid, product, layout, logits


@dataclass
class ModelOutput:
    object_inputs: Tensor
    object_attention: list[Tensor]
    object_hidden: Tensor
    object_logits: Tensor
    context: Tensor
    presence: Tensor | None
    edge_inputs: Tensor
    edge_attention: list[Tensor]
    edge_features: Tensor
    pair_index: np.ndarray
    pair_product: Tensor
    pair_layout: Tensor
    pair_logits: Tensor


def check_scene_compat(scene: Scene, cfg: ModelConfig) -> None:
    """Raise MismatchError when scene dimensions disagree with the config."""
    d_roi = scene.objects[0].feature.shape[0]
    if d_roi != cfg.d_roi:
        raise MismatchError(f"scene d_roi {d_roi} vs model d_roi {cfg.d_roi}")
    width = scene.objects[0].label_dist.shape[0]
    if width != cfg.c_obj:
        raise MismatchError(f"scene c_obj {width} vs model c_obj {cfg.c_obj}")
    if scene.grid.shape[0] != cfg.d_img:
        raise MismatchError(
            f"scene grid channels {scene.grid.shape[0]} vs model d_img {cfg.d_img}"
        )
    for r in scene.relations:
        if r.predicate >= cfg.c_rel:
            raise MismatchError(
                f"scene predicate {r.predicate} out of range for c_rel {cfg.c_rel}"
            )


def forward(scene: Scene, params: ModelParams, cfg: ModelConfig) -> ModelOutput:
    """Full three-stage pass over one scene. Pure in (scene, params, cfg)."""
    check_scene_compat(scene, cfg)
    grid = Tensor(scene.grid)
    if cfg.use_context:
        context, presence = global_context_encode(grid, params)
    else:
        context, presence = Tensor(np.zeros((1, cfg.d_context))), None
    x0 = build_object_inputs(scene, context, params)
    obj_attn, hidden, logits = object_stage(x0, params, cfg)
    edge_inputs, edge_attn, edge_feats = edge_stage(logits, hidden, params, cfg)
    pid, product, layout, pair_logits = relation_head(edge_feats, scene, params, cfg)
    return ModelOutput(
        object_inputs=x0,
        object_attention=obj_attn,
        object_hidden=hidden,
        object_logits=logits,
        context=context,
        presence=presence,
        edge_inputs=edge_inputs,
        edge_attention=edge_attn,
        edge_features=edge_feats,
        pair_index=pid,
        pair_product=product,
        pair_layout=layout,
        pair_logits=pair_logits,
    )


# ---------------------------------------------------------------------------
# losses


def object_class_loss(obj_logits: Tensor, class_ids: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over objects."""
    return tc.softmax_xent_mean(obj_logits, class_ids)


def relation_class_loss(pair_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over all ordered pairs, background included."""
    return tc.softmax_xent_mean(pair_logits, targets)


def presence_loss(presence: Tensor, targets: np.ndarray) -> Tensor:
    """Summed binary cross-entropy of the multi-label presence head."""
    return tc.bce_sum(presence, targets)


def total_loss(
    l_obj: Tensor,
    l_rel: Tensor,
    l_ctx: Tensor,
    lambda_rel: float = 1.0,
    lambda_ctx: float = 1.0,
) -> Tensor:
    return tc.add(l_obj, tc.add(tc.scale(l_rel, lambda_rel), tc.scale(l_ctx, lambda_ctx)))


def relation_targets(scene: Scene, cfg: ModelConfig | None = None) -> np.ndarray:
    """Predicate label per ordered pair; unannotated pairs are background 0."""
    n = scene.n_objects
    targets = np.zeros(n * (n - 1), dtype=np.intp)
    for r in scene.relations:
        idx = r.subj * (n - 1) + (r.obj if r.obj < r.subj else r.obj - 1)
        targets[idx] = r.predicate
    if cfg is not None and targets.size and targets.max() >= cfg.c_rel:
        raise MismatchError(f"predicate {targets.max()} out of range for c_rel {cfg.c_rel}")
    return targets


def presence_targets(scene: Scene, c_obj: int) -> np.ndarray:
    """1 x c_obj indicator of the classes present in the scene."""
    out = np.zeros((1, c_obj))
    for o in scene.objects:
        out[0, o.class_id] = 1.0
    return out


def scene_losses(
    scene: Scene, params: ModelParams, cfg: ModelConfig
) -> tuple[Tensor, dict[str, Tensor], ModelOutput]:
    """Total training loss of one scene plus its named terms.

    With the context head disabled its term is a constant zero, so the total
    reduces to the object and relation terms.
    """
    out = forward(scene, params, cfg)
    l_obj = object_class_loss(out.object_logits, scene.class_ids())
    l_rel = relation_class_loss(out.pair_logits, relation_targets(scene, cfg))
    if out.presence is not None:
        l_ctx = presence_loss(out.presence, presence_targets(scene, cfg.c_obj))
    else:
        l_ctx = Tensor(np.zeros((1, 1)))
    total = total_loss(l_obj, l_rel, l_ctx, cfg.lambda_rel, cfg.lambda_ctx)
    parts = {"object": l_obj, "relation": l_rel, "presence": l_ctx}
    return total, parts, out
