"""Expert MLPs and the layer mechanisms built on them.

Four mechanisms share one dispatch core:

* moe_forward        -- noisy top-K mixture, one router over all E experts
* pbe_forward        -- tiled rows, each member routed inside its partition
* only_partitioning_forward -- untiled rows routed in every block (K*M experts)
* multihead_forward  -- top-K contributions stacked into K slots instead of summed

plus the rank-1 batch-ensemble dense layer and its sparse-MoE equivalence
view, and the tiling helpers.

Dispatch is organized per (slot, expert): every slot j is materialized as its
own N x Q tensor, experts gather their tokens, and the slot tensors are summed
(moe) or stacked (multihead).  Summing slot-by-slot makes "sum of multihead
slots == moe output" hold bitwise, not just approximately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .routing import (CapacityConfig, Partition, RouterParams, RoutingDecision,
                      capacity_filter, gate_k, only_partitioning_gate,
                      partitioned_gate)
from .tensor import (Tensor, concat, dense, gelu, matmul, put_rows, reshape,
                     take_rows)

# ----------------------------------------------------------------------
# experts


@dataclass
class ExpertMLP:
    """Two-layer GELU MLP: D -> F -> Q."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def forward(self, x: Tensor, dropout_mask: np.ndarray | None = None) -> Tensor:
        hidden = gelu(dense(x, self.w1, self.b1))
        if dropout_mask is not None:
            hidden = hidden * Tensor(dropout_mask)
        return dense(hidden, self.w2, self.b2)

    @property
    def hidden_dim(self) -> int:
        return self.w1.data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.data.shape[1]


def dropout_mask(rng: Rng, rate: float, shape, *tags) -> np.ndarray:
    """Inverted-dropout mask: keep with prob 1-rate, scale kept by 1/(1-rate)."""
    u = rng.stream(*tags).random(shape)
    return (u >= rate).astype(np.float64) / (1.0 - rate)


@dataclass
class MoELayer:
    """A mixture-of-experts MLP slot in a transformer block."""

    experts: list
    router: RouterParams
    k: int
    mode: str = "moe"
    partition: Partition | None = None
    capacity: CapacityConfig = field(default_factory=CapacityConfig)
    dropout_rate: float = 0.1

    def __post_init__(self):
        modes = {"moe", "pbe", "multihead", "only_tiling", "only_partitioning"}
        if self.mode not in modes:
            raise ConfigError(f"unknown MoE mode {self.mode!r}")
        if self.mode in ("pbe", "only_partitioning"):
            if self.partition is None:
                raise ConfigError(f"mode {self.mode} requires a partition")
            if len(self.router.weights) != self.partition.m:
                raise ConfigError("router block count must equal partition M")
        else:
            if len(self.router.weights) != 1:
                raise ConfigError(f"mode {self.mode} requires a single router")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if len(self.experts) != self.router.total_experts:
            raise ConfigError("expert count must match router rows")

    @property
    def e(self) -> int:
        return len(self.experts)


# ----------------------------------------------------------------------
# dispatch


def _slot_outputs(h: Tensor, layer: MoELayer, decision: RoutingDecision,
                  rng: Rng, dropout_on: bool, dropout_key: tuple) -> list:
    """One N x Q tensor per slot: slot j holds weight_j * expert_j(token)."""
    n = h.data.shape[0]
    n_slots = decision.indices.shape[1]
    q = layer.experts[0].out_dim
    w_flat = reshape(decision.weights, (n * n_slots, 1))

    slots = []
    for j in range(n_slots):
        ids_j = decision.indices[:, j]
        keep_j = ~decision.dropped_mask[:, j]
        slot = None
        for e in np.unique(ids_j[keep_j]):
            tokens = np.nonzero((ids_j == e) & keep_j)[0]
            x_e = take_rows(h, tokens)
            mask = None
            if dropout_on and layer.dropout_rate > 0.0:
                mask = dropout_mask(rng, layer.dropout_rate,
                                    (tokens.size, layer.experts[e].hidden_dim),
                                    *dropout_key, int(e), j)
            y_e = layer.experts[int(e)].forward(x_e, mask)
            w_e = take_rows(w_flat, tokens * n_slots + j)
            contrib = put_rows(y_e * w_e, tokens, n)
            slot = contrib if slot is None else slot + contrib
        if slot is None:
            slot = Tensor(np.zeros((n, q)))
        slots.append(slot)
    return slots


def _sum_slots(slots: list) -> Tensor:
    out = slots[0]
    for s in slots[1:]:
        out = out + s
    return out


def moe_forward(h: Tensor, layer: MoELayer, rng: Rng, *, train: bool = False,
                dropout_on: bool | None = None,
                noise_key: tuple = ("route", 0, 0),
                dropout_key: tuple = ("drop", 0, 0)):
    """Eq.-1 mixture: output = sum over selected experts of weight * expert(h).

    Returns (output, RoutingDecision); the decision feeds the balance losses.
    """
    if layer.mode not in ("moe", "only_tiling"):
        raise ConfigError(f"moe_forward got mode {layer.mode!r}")
    decision = gate_k(h, layer.router, layer.k, rng, train=train, noise_key=noise_key)
    decision = capacity_filter(decision, layer.capacity, layer.e)
    if dropout_on is None:
        dropout_on = train
    slots = _slot_outputs(h, layer, decision, rng, dropout_on, dropout_key)
    return _sum_slots(slots), decision


def pbe_forward(h_tiled: Tensor, layer: MoELayer, rng: Rng, *, train: bool = False,
                dropout_on: bool | None = None,
                noise_key: tuple = ("route", 0, 0),
                dropout_key: tuple = ("drop", 0, 0)):
    """Partitioned mixture over tiled rows: member m mixes only experts in E_m."""
    if layer.mode != "pbe":
        raise ConfigError(f"pbe_forward got mode {layer.mode!r}")
    decision = partitioned_gate(h_tiled, layer.router, layer.partition, layer.k,
                                rng, train=train, noise_key=noise_key)
    decision = capacity_filter(decision, layer.capacity, layer.e)
    if dropout_on is None:
        dropout_on = train
    slots = _slot_outputs(h_tiled, layer, decision, rng, dropout_on, dropout_key)
    return _sum_slots(slots), decision


def only_partitioning_forward(h: Tensor, layer: MoELayer, rng: Rng, *,
                              train: bool = False, dropout_on: bool | None = None,
                              noise_key: tuple = ("route", 0, 0),
                              dropout_key: tuple = ("drop", 0, 0)):
    """Route each untiled token in every block; K*M contributions summed."""
    if layer.mode != "only_partitioning":
        raise ConfigError(f"only_partitioning_forward got mode {layer.mode!r}")
    decision = only_partitioning_gate(h, layer.router, layer.partition, layer.k,
                                      rng, train=train, noise_key=noise_key)
    decision = capacity_filter(decision, layer.capacity, layer.e)
    if dropout_on is None:
        dropout_on = train
    slots = _slot_outputs(h, layer, decision, rng, dropout_on, dropout_key)
    return _sum_slots(slots), decision


def multihead_forward(h: Tensor, layer: MoELayer, rng: Rng, *, train: bool = False,
                      dropout_on: bool | None = None,
                      noise_key: tuple = ("route", 0, 0),
                      dropout_key: tuple = ("drop", 0, 0)):
    """Eq.-2 layer: the K selected contributions stacked into N x K x Q slots.

    Slot order is descending gate weight with expert-index tiebreak; summing
    the slots reproduces moe_forward bitwise.
    """
    if layer.mode != "multihead":
        raise ConfigError(f"multihead_forward got mode {layer.mode!r}")
    decision = gate_k(h, layer.router, layer.k, rng, train=train, noise_key=noise_key)
    decision = capacity_filter(decision, layer.capacity, layer.e)
    if dropout_on is None:
        dropout_on = train
    slots = _slot_outputs(h, layer, decision, rng, dropout_on, dropout_key)
    n = h.data.shape[0]
    q = layer.experts[0].out_dim
    stacked = concat([reshape(s, (n, 1, q)) for s in slots], axis=1)
    return stacked, decision


def layer_forward(h: Tensor, layer: MoELayer, rng: Rng, **kw):
    """Dispatch to the forward matching layer.mode."""
    fn = {
        "moe": moe_forward,
        "only_tiling": moe_forward,
        "pbe": pbe_forward,
        "only_partitioning": only_partitioning_forward,
        "multihead": multihead_forward,
    }[layer.mode]
    return fn(h, layer, rng, **kw)


# ----------------------------------------------------------------------
# tiling


def tile(x, m: int):
    """Stack m copies along axis 0, member-major: [X; X; ...; X]."""
    if m < 1:
        raise ConfigError("tile factor must be >= 1")
    if m == 1:
        return x
    if isinstance(x, Tensor):
        return concat([x] * m, axis=0)
    return np.concatenate([np.asarray(x)] * m, axis=0)


def untile(y, m: int):
    """Inverse of tile for replicated inputs: member 0's block."""
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    if data.shape[0] % m != 0:
        raise ConfigError(f"row count {data.shape[0]} not divisible by M={m}")
    b = data.shape[0] // m
    if isinstance(y, Tensor):
        return take_rows(y, np.arange(b))
    return data[:b].copy()


def split_members(y, m: int):
    """Regroup member-major rows into a leading member axis: (M*B, ...) -> (M, B, ...)."""
    shape = y.data.shape if isinstance(y, Tensor) else np.asarray(y).shape
    if shape[0] % m != 0:
        raise ConfigError(f"row count {shape[0]} not divisible by M={m}")
    new_shape = (m, shape[0] // m) + tuple(shape[1:])
    if isinstance(y, Tensor):
        return reshape(y, new_shape)
    return np.asarray(y).reshape(new_shape)


# ----------------------------------------------------------------------
# batch-ensemble dense


@dataclass
class BatchEnsembleDense:
    """Shared slow weight U with per-member rank-1 fast weights r_m, s_m.

    Member m's effective weight is U * (r_m s_m^T) but the forward never
    materializes it: member rows compute ((h * r_m) U) * s_m.
    """

    u: Tensor
    r: list  # list[Tensor] of shape (D,)
    s: list  # list[Tensor] of shape (L,)

    def __post_init__(self):
        if len(self.r) != len(self.s) or not self.r:
            raise ConfigError("need matching, nonempty r and s lists")
        d, l = self.u.data.shape
        for rm, sm in zip(self.r, self.s):
            if rm.data.shape != (d,) or sm.data.shape != (l,):
                raise ConfigError("fast weight shapes must match U")

    @property
    def m(self) -> int:
        return len(self.r)


def be_dense_forward(h_tiled: Tensor, be: BatchEnsembleDense) -> Tensor:
    """Member-m rows -> ((h * r_m) U) * s_m, on the member-major tiled layout."""
    n = h_tiled.data.shape[0]
    if n % be.m != 0:
        raise ConfigError(f"tiled row count {n} not divisible by M={be.m}")
    b = n // be.m
    outs = []
    for mm in range(be.m):
        h_m = take_rows(h_tiled, np.arange(mm * b, (mm + 1) * b))
        outs.append(matmul(h_m * be.r[mm], be.u) * be.s[mm])
    return concat(outs, axis=0)


class BeMoeView:
    """Appendix-F reading of a batch-ensemble layer as a sparse MoE.

    E = M experts; expert e's weight is the materialized U * (r_e s_e^T);
    the gate for tiled row i is binary: 1 on the row's own member, 0
    elsewhere.  Forward computes the full mixture sum_e g_e * expert_e(h),
    which the binary gates collapse to the member's expert.
    """

    def __init__(self, be: BatchEnsembleDense):
        self.m = be.m
        self.expert_weights = [
            be.u.data * np.outer(be.r[mm].data, be.s[mm].data) for mm in range(be.m)
        ]

    def gates(self, n_rows: int) -> np.ndarray:
        if n_rows % self.m != 0:
            raise ConfigError(f"row count {n_rows} not divisible by M={self.m}")
        b = n_rows // self.m
        g = np.zeros((n_rows, self.m))
        for mm in range(self.m):
            g[mm * b:(mm + 1) * b, mm] = 1.0
        return g

    def forward(self, h_tiled) -> np.ndarray:
        h = h_tiled.data if isinstance(h_tiled, Tensor) else np.asarray(h_tiled)
        g = self.gates(h.shape[0])
        out = np.zeros((h.shape[0], self.expert_weights[0].shape[1]))
        for e in range(self.m):
            out = out + g[:, e:e + 1] * (h @ self.expert_weights[e])
        return out


def be_as_moe_view(be: BatchEnsembleDense) -> BeMoeView:
    """Build the equivalence view; its forward matches be_dense_forward to ~1e-15."""
    return BeMoeView(be)


@dataclass
class BeMLP:
    """Transformer MLP with both dense layers batch-ensembled; biases shared."""

    be1: BatchEnsembleDense
    b1: Tensor
    be2: BatchEnsembleDense
    b2: Tensor

    def forward(self, x_tiled: Tensor, dropout_mask_: np.ndarray | None = None) -> Tensor:
        hidden = gelu(be_dense_forward(x_tiled, self.be1) + self.b1)
        if dropout_mask_ is not None:
            hidden = hidden * Tensor(dropout_mask_)
        return be_dense_forward(hidden, self.be2) + self.b2

    @property
    def m(self) -> int:
        return self.be1.m

    @property
    def hidden_dim(self) -> int:
        return self.be1.u.data.shape[1]
