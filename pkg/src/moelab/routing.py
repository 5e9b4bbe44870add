"""Noisy top-K gating, partitioned per-member gating, and capacity filtering.

The gate takes softmax over (optionally noisy) router logits and keeps the K
largest entries per token.  Surviving weights are the raw softmax values,
never renormalized.  Ties break toward the lower expert index so that a
brute-force sort oracle reproduces the decision exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor import Tensor, concat, matmul, softmax, take_cols, take_rows, transpose


@dataclass
class Partition:
    """Contiguous split of E experts into M equally sized member blocks."""

    m: int
    e: int

    def __post_init__(self):
        if self.m < 1 or self.e < 1:
            raise ConfigError("partition sizes must be positive")
        if self.e % self.m != 0:
            raise ConfigError(f"E={self.e} not divisible by M={self.m}")

    @property
    def block_size(self) -> int:
        return self.e // self.m

    def member_of(self, expert: int) -> int:
        if not 0 <= expert < self.e:
            raise ConfigError(f"expert id {expert} out of range")
        return expert // self.block_size

    def block(self, member: int) -> range:
        b = self.block_size
        return range(member * b, (member + 1) * b)


@dataclass
class RouterParams:
    """One router weight matrix per member; a single router is a length-1 list.

    noise_scale defaults to 1/E when constructed through `make_router`.
    noise_multiplier is the only-tiling ablation knob (sigma x {1,2,4}).
    eval_noise_enabled re-enables the noise draw outside training.
    """

    weights: list  # list[Tensor], each (E_m, D)
    noise_scale: float
    noise_multiplier: float = 1.0
    eval_noise_enabled: bool = False

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("router needs at least one weight matrix")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        widths = {w.data.shape[1] for w in self.weights}
        if len(widths) != 1:
            raise ConfigError("router blocks disagree on input width")

    @property
    def total_experts(self) -> int:
        return sum(w.data.shape[0] for w in self.weights)

    def effective_sigma(self, train: bool) -> float:
        if train or self.eval_noise_enabled:
            return self.noise_scale * self.noise_multiplier
        return 0.0


def make_router(weights, noise_scale: float | None = None, **kw) -> RouterParams:
    """Build RouterParams with the paper default sigma = 1/E."""
    weights = list(weights)
    e = sum(w.data.shape[0] for w in weights)
    if noise_scale is None:
        noise_scale = 1.0 / e
    return RouterParams(weights=weights, noise_scale=noise_scale, **kw)


@dataclass
class CapacityConfig:
    """Per-expert token budget; ratio None means unbounded (desk-scale default)."""

    ratio: float | None = None

    def __post_init__(self):
        if self.ratio is not None and self.ratio <= 0:
            raise ConfigError("capacity ratio must be positive or None")

    @property
    def bounded(self) -> bool:
        return self.ratio is not None


@dataclass
class RoutingDecision:
    """Per-token expert selection.

    indices holds global expert ids, slots ordered by descending gate weight
    (expert-index tiebreak).  weights stays on the tape so gate gradients
    reach the router.  member_logits keeps one (clean, noisy) logits pair per
    router block for the auxiliary balance losses; clean stays on the tape,
    noisy is a plain array.
    """

    indices: np.ndarray
    weights: Tensor
    dropped_mask: np.ndarray
    member_logits: list = field(default_factory=list)
    sigma: float = 0.0
    k: int = 1

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]


def _topk_desc(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, descending, ties to lower index."""
    # stable sort of -p keeps equal entries in original (ascending-index) order
    return np.argsort(-p, axis=1, kind="stable")[:, :k]


def gate_k(h: Tensor, router: RouterParams, k: int, rng: Rng, *,
           train: bool = False, noise_key: tuple = ("route", 0, 0)) -> RoutingDecision:
    """Noisy top-K gate over a single router.

    logits = h W^T (+ sigma * multiplier * eps when noise is enabled), softmax
    over all E experts, keep the K largest weights per token.
    """
    if len(router.weights) != 1:
        raise ConfigError("gate_k requires a single (non-partitioned) router")
    w = router.weights[0]
    e = w.data.shape[0]
    if not 1 <= k <= e:
        raise ConfigError(f"K={k} out of range for E={e}")
    n = h.data.shape[0]

    clean = matmul(h, transpose(w, (1, 0)))
    sigma = router.effective_sigma(train)
    if sigma > 0.0:
        eps = rng.normal((n, e), *noise_key)
        noisy = clean + Tensor(sigma * eps)
    else:
        noisy = clean
    probs = softmax(noisy, axis=-1)
    indices = _topk_desc(probs.data, k)
    weights = take_cols(probs, indices)
    return RoutingDecision(
        indices=indices,
        weights=weights,
        dropped_mask=np.zeros_like(indices, dtype=bool),
        member_logits=[(clean, noisy.data)],
        sigma=sigma,
        k=k,
    )


def partitioned_gate(h_tiled: Tensor, router: RouterParams, partition: Partition,
                     k: int, rng: Rng, *, train: bool = False,
                     noise_key: tuple = ("route", 0, 0)) -> RoutingDecision:
    """Per-member gating over tiled rows (Eq. 3 mechanism).

    Row layout is member-major: rows [m*B, (m+1)*B) belong to member m and
    are routed with W_m over that member's E/M experts only.  With M=1 the
    decision is bitwise identical to gate_k on the same rng stream.
    """
    m = partition.m
    if len(router.weights) != m:
        raise ConfigError("router block count must equal partition M")
    eb = partition.block_size
    n = h_tiled.data.shape[0]
    if n % m != 0:
        raise ConfigError(f"tiled row count {n} not divisible by M={m}")
    if not 1 <= k <= eb:
        raise ConfigError(f"K={k} out of range for block size {eb}")
    b = n // m

    sigma = router.effective_sigma(train)
    eps = rng.normal((n, eb), *noise_key) if sigma > 0.0 else None

    index_blocks = []
    weight_blocks = []
    member_logits = []
    for mm in range(m):
        rows = np.arange(mm * b, (mm + 1) * b)
        h_m = take_rows(h_tiled, rows)
        clean = matmul(h_m, transpose(router.weights[mm], (1, 0)))
        if eps is not None:
            noisy = clean + Tensor(sigma * eps[rows])
        else:
            noisy = clean
        probs = softmax(noisy, axis=-1)
        local = _topk_desc(probs.data, k)
        index_blocks.append(local + mm * eb)
        weight_blocks.append(take_cols(probs, local))
        member_logits.append((clean, noisy.data))

    return RoutingDecision(
        indices=np.concatenate(index_blocks, axis=0),
        weights=concat(weight_blocks, axis=0),
        dropped_mask=np.zeros((n, k), dtype=bool),
        member_logits=member_logits,
        sigma=sigma,
        k=k,
    )


def only_partitioning_gate(h: Tensor, router: RouterParams, partition: Partition,
                           k: int, rng: Rng, *, train: bool = False,
                           noise_key: tuple = ("route", 0, 0)) -> RoutingDecision:
    """Route every (untiled) token inside every partition block.

    Each token ends up with K*M selected experts, K per block, blocks in
    member order.  With M=1 this reduces to gate_k bitwise.
    """
    m = partition.m
    if len(router.weights) != m:
        raise ConfigError("router block count must equal partition M")
    eb = partition.block_size
    if not 1 <= k <= eb:
        raise ConfigError(f"K={k} out of range for block size {eb}")
    n = h.data.shape[0]

    sigma = router.effective_sigma(train)
    eps = rng.normal((n, partition.e), *noise_key) if sigma > 0.0 else None

    index_blocks = []
    weight_blocks = []
    member_logits = []
    for mm in range(m):
        clean = matmul(h, transpose(router.weights[mm], (1, 0)))
        if eps is not None:
            noisy = clean + Tensor(sigma * eps[:, mm * eb:(mm + 1) * eb])
        else:
            noisy = clean
        probs = softmax(noisy, axis=-1)
        local = _topk_desc(probs.data, k)
        index_blocks.append(local + mm * eb)
        weight_blocks.append(take_cols(probs, local))
        member_logits.append((clean, noisy.data))

    return RoutingDecision(
        indices=np.concatenate(index_blocks, axis=1),
        weights=concat(weight_blocks, axis=1),
        dropped_mask=np.zeros((n, k * m), dtype=bool),
        member_logits=member_logits,
        sigma=sigma,
        k=k,
    )


def capacity_filter(decision: RoutingDecision, cap: CapacityConfig,
                    e_total: int) -> RoutingDecision:
    """Drop assignments beyond ceil(C*N*K/E) per expert, in row-major fill order.

    Dropped slots keep their weight value but are masked; dispatch treats
    them as zero contribution.  Unbounded capacity returns the input as-is.
    """
    if not cap.bounded:
        return decision
    n, slots = decision.indices.shape
    capacity = math.ceil(cap.ratio * n * decision.k / e_total)
    flat_ids = decision.indices.reshape(-1)
    dropped = decision.dropped_mask.reshape(-1).copy()
    for e in range(e_total):
        live = (flat_ids == e) & ~dropped
        overflow = live & (np.cumsum(live) > capacity)
        dropped |= overflow
    return RoutingDecision(
        indices=decision.indices,
        weights=decision.weights,
        dropped_mask=dropped.reshape(n, slots),
        member_logits=decision.member_logits,
        sigma=decision.sigma,
        k=decision.k,
    )
