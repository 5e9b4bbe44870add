"""Vision transformer trunk with pluggable ensembling strategies.

One Model class covers all variants: a plain ViT, a sparse-MoE ViT, the
partitioned batch-ensemble family (tiled inputs routed inside per-member
expert blocks), multi-head routing, batch-ensemble dense layers, MIMO, and
MC-dropout / deep-ensemble prediction wrappers on top.

Tiling discipline: with the default tiling="deferred", the input batch runs
untiled through every block before the first MoE/BE block, and is replicated
M times right before that block's MLP (the attention of that block still sees
the untiled batch).  tiling="naive" replicates the images up front instead.
In eval mode the two produce bitwise identical predictions because every op
is row-independent; deferred just does less work.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, EvaluationError
from .layers import (BatchEnsembleDense, BeMLP, ExpertMLP, MoELayer,
                     dropout_mask, layer_forward, split_members, tile)
from .rng import Rng
from .routing import CapacityConfig, Partition, make_router
from .tensor import (Tensor, concat, dense, layernorm, matmul, reshape,
                     softmax, take_rows, tmean, transpose)

VARIANTS = ("vit", "vmoe", "pbe", "only_tiling", "only_partitioning",
            "multihead", "be", "mimo")

# name: (image, patch, hidden, mlp_dim, layers, heads, last_n)
_PRESETS = {
    "S/32": (384, 32, 512, 2048, 8, 8, 2),
    "B/32": (384, 32, 768, 3072, 12, 12, 2),
    "B/16": (384, 16, 768, 3072, 12, 12, 2),
    "L/32": (384, 32, 1024, 4096, 24, 16, 2),
    "L/16": (384, 16, 1024, 4096, 24, 16, 2),
    "H/14": (378, 14, 1280, 5144, 32, 20, 5),
    "tiny": (8, 4, 32, 64, 4, 2, 2),
}

PRESET_NAMES = tuple(_PRESETS)


@dataclass
class ModelSpec:
    """Static architecture + ensembling configuration."""

    image_size: int = 8
    patch_size: int = 4
    hidden: int = 32
    mlp_dim: int = 64
    layers: int = 4
    heads: int = 2
    classes: int = 4
    channels: int = 3
    e: int = 4
    k: int = 1
    m: int = 1
    last_n: int = 2
    variant: str = "vit"
    dropout_rate: float = 0.1
    noise_scale: float | None = None
    noise_multiplier: float = 1.0
    eval_noise_enabled: bool | None = None
    capacity_ratio: float | None = None
    contiguous_moe: bool = False
    mimo_input_repetition_prob: float = 0.5
    batch_repetitions: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be a multiple of patch_size")
        if self.hidden % self.heads != 0:
            raise ConfigError("hidden must be a multiple of heads")
        if self.m < 1 or self.k < 1 or self.e < 1:
            raise ConfigError("e, k, m must be positive")
        if self.uses_moe:
            top = self.layers if self.contiguous_moe else (self.layers + 1) // 2
            if not 1 <= self.last_n <= top:
                raise ConfigError("last_n does not fit in the trunk")
            if self.variant in ("pbe", "only_partitioning"):
                if self.e % self.m != 0:
                    raise ConfigError("e must be divisible by m")
                if self.k > self.e // self.m:
                    raise ConfigError("k exceeds experts per member block")
            else:
                if self.k > self.e:
                    raise ConfigError("k exceeds expert count")
        if self.variant == "be" and not 1 <= self.last_n <= self.layers:
            raise ConfigError("last_n does not fit in the trunk")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.capacity_ratio is not None and self.capacity_ratio <= 0:
            raise ConfigError("capacity_ratio must be positive")
        if self.batch_repetitions < 1:
            raise ConfigError("batch_repetitions must be >= 1")

    @property
    def uses_moe(self) -> bool:
        return self.variant in ("vmoe", "pbe", "only_tiling",
                                "only_partitioning", "multihead")

    @property
    def ensemble_size(self) -> int:
        # only_partitioning mixes all M expert blocks into one prediction,
        # so it is not an ensemble despite having M router blocks
        if self.variant in ("pbe", "only_tiling", "be", "mimo"):
            return self.m
        if self.variant == "multihead":
            return self.k
        return 1

    @property
    def tile_factor(self) -> int:
        """How many copies of the batch the tiled blocks see."""
        if self.variant in ("pbe", "only_tiling", "be"):
            return self.m
        return 1

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2 + 1

    @property
    def patch_dim(self) -> int:
        base = self.patch_size * self.patch_size * self.channels
        return base * self.m if self.variant == "mimo" else base

    def resolved_noise_scale(self) -> float:
        return (1.0 / self.e) if self.noise_scale is None else self.noise_scale

    def resolved_eval_noise(self) -> bool:
        if self.eval_noise_enabled is None:
            return self.variant == "only_tiling"
        return self.eval_noise_enabled

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "hidden": self.hidden, "mlp_dim": self.mlp_dim,
            "layers": self.layers, "heads": self.heads,
            "classes": self.classes, "channels": self.channels,
            "e": self.e, "k": self.k, "m": self.m, "last_n": self.last_n,
            "variant": self.variant, "dropout_rate": self.dropout_rate,
            "noise_scale": self.noise_scale,
            "noise_multiplier": self.noise_multiplier,
            "eval_noise_enabled": self.eval_noise_enabled,
            "capacity_ratio": self.capacity_ratio,
            "contiguous_moe": self.contiguous_moe,
            "mimo_input_repetition_prob": self.mimo_input_repetition_prob,
            "batch_repetitions": self.batch_repetitions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown model fields: {sorted(bad)}")
        return cls(**d)


def preset(name: str, **overrides) -> ModelSpec:
    """Named size presets; overrides patch on top (variant, e, k, m, ...)."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(_PRESETS)}")
    image, patch, hidden, mlp_dim, layers, heads, last_n = _PRESETS[name]
    base = dict(image_size=image, patch_size=patch, hidden=hidden,
                mlp_dim=mlp_dim, layers=layers, heads=heads, last_n=last_n,
                classes=4 if name == "tiny" else 1000,
                e=4 if name == "tiny" else 32,
                k=1 if name == "tiny" else 2)
    base.update(overrides)
    return ModelSpec(**base)


def moe_block_positions(layers: int, last_n: int, contiguous: bool = False):
    """0-indexed block indices that carry an MoE (or BE) MLP.

    Default placement alternates from the top: the last block, then every
    second one going down, last_n of them total.  contiguous instead takes
    the last_n final blocks.
    """
    if contiguous:
        pos = range(layers - last_n, layers)
    else:
        pos = (layers - 1 - 2 * i for i in range(last_n))
    return sorted(pos)


class Block:
    """Pre-norm transformer block: attention then an MLP of some flavor."""

    def __init__(self, index, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
                 ln2_g, ln2_b, mlp):
        self.index = index
        self.ln1_g, self.ln1_b = ln1_g, ln1_b
        self.wq, self.bq = wq, bq
        self.wk, self.bk = wk, bk
        self.wv, self.bv = wv, bv
        self.wo, self.bo = wo, bo
        self.ln2_g, self.ln2_b = ln2_g, ln2_b
        self.mlp = mlp


class Model:
    def __init__(self, spec: ModelSpec, embed_w, embed_b, cls_token, pos,
                 blocks, final_g, final_b, head_w, head_b):
        self.spec = spec
        self.embed_w, self.embed_b = embed_w, embed_b
        self.cls_token, self.pos = cls_token, pos
        self.blocks = blocks
        self.final_g, self.final_b = final_g, final_b
        self.head_w, self.head_b = head_w, head_b

    def named_params(self):
        """Yield (dotted name, Tensor) in a stable order."""
        yield "embed.w", self.embed_w
        yield "embed.b", self.embed_b
        yield "cls", self.cls_token
        yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}"
            yield f"{p}.ln1.g", blk.ln1_g
            yield f"{p}.ln1.b", blk.ln1_b
            for nm, t in (("wq", blk.wq), ("bq", blk.bq), ("wk", blk.wk),
                          ("bk", blk.bk), ("wv", blk.wv), ("bv", blk.bv),
                          ("wo", blk.wo), ("bo", blk.bo)):
                yield f"{p}.attn.{nm}", t
            yield f"{p}.ln2.g", blk.ln2_g
            yield f"{p}.ln2.b", blk.ln2_b
            yield from _mlp_params(f"{p}.mlp", blk.mlp)
        yield "final_ln.g", self.final_g
        yield "final_ln.b", self.final_b
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def parameters(self):
        return [t for _, t in self.named_params()]


def _mlp_params(prefix, mlp):
    if isinstance(mlp, ExpertMLP):
        yield f"{prefix}.w1", mlp.w1
        yield f"{prefix}.b1", mlp.b1
        yield f"{prefix}.w2", mlp.w2
        yield f"{prefix}.b2", mlp.b2
    elif isinstance(mlp, MoELayer):
        for e, ex in enumerate(mlp.experts):
            yield f"{prefix}.experts.{e}.w1", ex.w1
            yield f"{prefix}.experts.{e}.b1", ex.b1
            yield f"{prefix}.experts.{e}.w2", ex.w2
            yield f"{prefix}.experts.{e}.b2", ex.b2
        for j, w in enumerate(mlp.router.weights):
            yield f"{prefix}.router.{j}.w", w
    elif isinstance(mlp, BeMLP):
        yield f"{prefix}.be1.u", mlp.be1.u
        for j, r in enumerate(mlp.be1.r):
            yield f"{prefix}.be1.r.{j}", r
        for j, s in enumerate(mlp.be1.s):
            yield f"{prefix}.be1.s.{j}", s
        yield f"{prefix}.b1", mlp.b1
        yield f"{prefix}.be2.u", mlp.be2.u
        for j, r in enumerate(mlp.be2.r):
            yield f"{prefix}.be2.r.{j}", r
        for j, s in enumerate(mlp.be2.s):
            yield f"{prefix}.be2.s.{j}", s
        yield f"{prefix}.b2", mlp.b2
    else:
        raise TypeError(f"unknown mlp type {type(mlp)!r}")


def _trunc_normal(gen, shape, std=0.02):
    """Normal(0, std) with |z| > 2 resampled until inside."""
    x = gen.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = gen.standard_normal(int(bad.sum()))
    return x * std


def build_model(spec: ModelSpec, rng: Rng) -> Model:
    """Initialize every parameter from a stream keyed by its dotted name."""

    def tn(name, shape, std=0.02):
        return Tensor(_trunc_normal(rng.stream("init", name), shape, std),
                      requires_grad=True)

    def zeros(name, shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        return Tensor(np.ones(shape), requires_grad=True)

    d, f = spec.hidden, spec.mlp_dim
    embed_w = tn("embed.w", (spec.patch_dim, d))
    embed_b = zeros("embed.b", (d,))
    cls_token = tn("cls", (d,))
    pos = tn("pos", (spec.n_tokens, d))

    moe_at = set()
    if spec.uses_moe or spec.variant == "be":
        moe_at = set(moe_block_positions(spec.layers, spec.last_n,
                                         spec.contiguous_moe))

    def plain_mlp(p):
        return ExpertMLP(tn(f"{p}.w1", (d, f)), zeros(f"{p}.b1", (f,)),
                         tn(f"{p}.w2", (f, d)), zeros(f"{p}.b2", (d,)))

    def moe_mlp(p, mode):
        experts = [ExpertMLP(tn(f"{p}.experts.{e}.w1", (d, f)),
                             zeros(f"{p}.experts.{e}.b1", (f,)),
                             tn(f"{p}.experts.{e}.w2", (f, d)),
                             zeros(f"{p}.experts.{e}.b2", (d,)))
                   for e in range(spec.e)]
        if mode in ("pbe", "only_partitioning"):
            blocks = spec.m
            per = spec.e // spec.m
        else:
            blocks, per = 1, spec.e
        weights = [Tensor(rng.stream("init", f"{p}.router.{j}.w")
                          .standard_normal((per, d)) * 0.02,
                          requires_grad=True) for j in range(blocks)]
        router = make_router(weights,
                             noise_scale=spec.resolved_noise_scale(),
                             noise_multiplier=spec.noise_multiplier,
                             eval_noise_enabled=spec.resolved_eval_noise())
        part = (Partition(spec.m, spec.e)
                if mode in ("pbe", "only_partitioning") else None)
        return MoELayer(experts, router, spec.k, mode=mode,
                        partition=part,
                        capacity=CapacityConfig(spec.capacity_ratio),
                        dropout_rate=spec.dropout_rate)

    def be_dense(p, n_in, n_out):
        u = tn(f"{p}.u", (n_in, n_out))
        r = [Tensor(1.0 + 0.5 * rng.stream("init", f"{p}.r.{j}")
                    .standard_normal((n_in,)), requires_grad=True)
             for j in range(spec.m)]
        s = [Tensor(1.0 + 0.5 * rng.stream("init", f"{p}.s.{j}")
                    .standard_normal((n_out,)), requires_grad=True)
             for j in range(spec.m)]
        return BatchEnsembleDense(u, r, s)

    def be_mlp(p):
        return BeMLP(be_dense(f"{p}.be1", d, f), zeros(f"{p}.b1", (f,)),
                     be_dense(f"{p}.be2", f, d), zeros(f"{p}.b2", (d,)))

    blocks = []
    multihead_at = max(moe_at) if (spec.variant == "multihead" and moe_at) else None
    for i in range(spec.layers):
        p = f"blocks.{i}"
        if i in moe_at and spec.variant == "be":
            mlp = be_mlp(f"{p}.mlp")
        elif i in moe_at and spec.uses_moe:
            if spec.variant == "multihead":
                mode = "multihead" if i == multihead_at else "moe"
            elif spec.variant == "vmoe":
                mode = "moe"
            else:
                mode = spec.variant
            mlp = moe_mlp(f"{p}.mlp", mode)
        else:
            mlp = plain_mlp(f"{p}.mlp")
        blocks.append(Block(
            i,
            ones(f"{p}.ln1.g", (d,)), zeros(f"{p}.ln1.b", (d,)),
            tn(f"{p}.attn.wq", (d, d)), zeros(f"{p}.attn.bq", (d,)),
            tn(f"{p}.attn.wk", (d, d)), zeros(f"{p}.attn.bk", (d,)),
            tn(f"{p}.attn.wv", (d, d)), zeros(f"{p}.attn.bv", (d,)),
            tn(f"{p}.attn.wo", (d, d)), zeros(f"{p}.attn.bo", (d,)),
            ones(f"{p}.ln2.g", (d,)), zeros(f"{p}.ln2.b", (d,)),
            mlp))

    head_out = spec.classes * (spec.m if spec.variant == "mimo" else 1)
    return Model(spec, embed_w, embed_b, cls_token, pos, blocks,
                 ones("final_ln.g", (d,)), zeros("final_ln.b", (d,)),
                 tn("head.w", (d, head_out)), zeros("head.b", (head_out,)))


@dataclass
class PredictionBundle:
    """Per-member and pooled predictions from one forward pass.

    member_probs: (M, B, classes); ensemble_probs: (B, classes) mean over
    members.  decisions lists the RoutingDecision of each MoE layer in depth
    order.  member_features, when requested, holds the pre-head class-token
    features (M, B, hidden) as a plain array.
    """

    member_probs: Tensor
    ensemble_probs: Tensor
    decisions: list = field(default_factory=list)
    member_features: np.ndarray | None = None


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W/p^2, p*p*C), row-major patch order."""
    b, h, w, c = images.shape
    nh, nw = h // patch, w // patch
    x = images.reshape(b, nh, patch, nw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, nh * nw, patch * patch * c)


def _attention(x: Tensor, blk: Block, heads: int) -> Tensor:
    bc, t, d = x.data.shape
    dh = d // heads
    q = dense(x, blk.wq, blk.bq)
    k = dense(x, blk.wk, blk.bk)
    v = dense(x, blk.wv, blk.bv)
    q = transpose(reshape(q, (bc, t, heads, dh)), (0, 2, 1, 3))
    k = transpose(reshape(k, (bc, t, heads, dh)), (0, 2, 1, 3))
    v = transpose(reshape(v, (bc, t, heads, dh)), (0, 2, 1, 3))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bc, t, d))
    return dense(ctx, blk.wo, blk.bo)


def forward(model: Model, images, rng: Rng, *, train: bool = False,
            step: int = 0, mc_sample: int | None = None,
            tiling: str = "deferred", want_features: bool = False
            ) -> PredictionBundle:
    """Run the full network; see PredictionBundle for what comes back.

    train=True turns on routing noise and dropout and keeps the tape alive
    for backward.  mc_sample draws an eval-time dropout mask addressed by the
    sample index.  step feeds the per-step noise/dropout key.
    """
    if tiling not in ("deferred", "naive"):
        raise ConfigError(f"unknown tiling {tiling!r}")
    spec = model.spec
    x_img = np.asarray(images, dtype=np.float64)
    if x_img.ndim != 4:
        raise ConfigError("images must be (B, H, W, C)")
    if spec.variant == "mimo":
        if x_img.shape[-1] == spec.channels:
            x_img = np.tile(x_img, (1, 1, 1, spec.m))
        elif x_img.shape[-1] != spec.channels * spec.m:
            raise ConfigError("mimo input needs C or M*C channels")
    elif x_img.shape[-1] != spec.channels:
        raise ConfigError("channel count mismatch")

    n_members = spec.ensemble_size
    tile_m = spec.tile_factor
    tile_block = None
    if tile_m > 1:
        tiled_at = moe_block_positions(spec.layers, spec.last_n,
                                       spec.contiguous_moe)
        tile_block = tiled_at[0]
    if tiling == "naive" and tile_m > 1:
        x_img = np.concatenate([x_img] * tile_m, axis=0)
        pending_tile = False
    else:
        pending_tile = tile_m > 1

    b_in = x_img.shape[0]
    patches = patchify(x_img, spec.patch_size)
    x = dense(Tensor(patches), model.embed_w, model.embed_b)
    t = spec.n_tokens
    d = spec.hidden
    cls_row = reshape(model.cls_token, (1, 1, d))
    x = concat([Tensor(np.zeros((b_in, 1, d))) + cls_row, x], axis=1)
    x = x + reshape(model.pos, (1, t, d))

    dropout_on = train or (mc_sample is not None)
    sample = -1 if mc_sample is None else int(mc_sample)
    decisions = []

    for blk in model.blocks:
        i = blk.index
        x = x + _attention(layernorm(x, blk.ln1_g, blk.ln1_b), blk, spec.heads)
        if pending_tile and i == tile_block:
            x = tile(x, tile_m)
            pending_tile = False
        bc = x.data.shape[0]
        h = layernorm(x, blk.ln2_g, blk.ln2_b)
        h_flat = reshape(h, (bc * t, d))
        noise_key = ("route", i, step)
        drop_key = ("drop", i, step, sample)
        if isinstance(blk.mlp, ExpertMLP):
            mask = None
            if dropout_on and spec.dropout_rate > 0.0:
                mask = dropout_mask(rng, spec.dropout_rate,
                                    (bc * t, blk.mlp.hidden_dim),
                                    *drop_key, -1, 0)
            out = blk.mlp.forward(h_flat, mask)
            x = x + reshape(out, (bc, t, d))
        elif isinstance(blk.mlp, BeMLP):
            mask = None
            if dropout_on and spec.dropout_rate > 0.0:
                mask = dropout_mask(rng, spec.dropout_rate,
                                    (bc * t, blk.mlp.hidden_dim),
                                    *drop_key, -1, 0)
            out = blk.mlp.forward(h_flat, mask)
            x = x + reshape(out, (bc, t, d))
        else:
            out, decision = layer_forward(h_flat, blk.mlp, rng, train=train,
                                          dropout_on=dropout_on,
                                          noise_key=noise_key,
                                          dropout_key=drop_key)
            decisions.append(decision)
            if blk.mlp.mode == "multihead":
                # slot outputs become ensemble members: broadcast the residual
                # over K slots, then fold slots into the batch (member-major)
                slots = reshape(out, (bc, t, spec.k, d))
                stacked = reshape(x, (bc, t, 1, d)) + slots
                stacked = transpose(stacked, (2, 0, 1, 3))
                x = reshape(stacked, (spec.k * bc, t, d))
            else:
                x = x + reshape(out, (bc, t, d))

    bc = x.data.shape[0]
    flat = reshape(x, (bc * t, d))
    cls_tokens = take_rows(flat, np.arange(bc) * t)
    feats = layernorm(cls_tokens, model.final_g, model.final_b)
    logits = dense(feats, model.head_w, model.head_b)

    if spec.variant == "mimo":
        b = bc
        member_logits = transpose(reshape(logits, (b, spec.m, spec.classes)),
                                  (1, 0, 2))
        member_probs = softmax(member_logits, axis=-1)
    else:
        b = bc // n_members
        probs = softmax(logits, axis=-1)
        member_probs = reshape(probs, (n_members, b, spec.classes))
    ensemble_probs = tmean(member_probs, axis=0)
    if not np.isfinite(member_probs.data).all():
        raise EvaluationError("non-finite probabilities in forward pass")

    features = None
    if want_features:
        fdata = feats.data
        if spec.variant == "mimo":
            features = np.broadcast_to(fdata, (spec.m,) + fdata.shape).copy()
        else:
            features = fdata.reshape(n_members, b, d).copy()
    return PredictionBundle(member_probs, ensemble_probs, decisions, features)


def mc_dropout_predict(model: Model, images, n_samples: int, rng: Rng,
                       *, step: int = 0) -> PredictionBundle:
    """Eval-time ensemble from n_samples independent dropout masks."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if model.spec.dropout_rate == 0.0:
        warnings.warn("dropout_rate is 0; MC-dropout members are identical")
    stacks = []
    for s in range(n_samples):
        bundle = forward(model, images, rng, train=False, step=step,
                         mc_sample=s)
        ens = bundle.ensemble_probs.data
        stacks.append(ens[None, :, :])
    member = Tensor(np.concatenate(stacks, axis=0))
    return PredictionBundle(member, Tensor(member.data.mean(axis=0)))


def deep_ensemble_predict(models, images, rng: Rng | None = None
                          ) -> PredictionBundle:
    """Pool independently trained models; each contributes one member."""
    if not models:
        raise ConfigError("need at least one model")
    rng = rng or Rng(0)
    stacks = []
    for mdl in models:
        bundle = forward(mdl, images, rng, train=False)
        stacks.append(bundle.ensemble_probs.data[None, :, :])
    member = Tensor(np.concatenate(stacks, axis=0))
    return PredictionBundle(member, Tensor(member.data.mean(axis=0)))
