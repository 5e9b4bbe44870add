"""SGD-with-momentum training loop and the evaluation driver.

Determinism contract: given (config, seed, single thread) every run draws
identical batches, noise, and dropout masks because all randomness is
addressed by (seed, purpose tags) rather than by call order.  Training twice
with the same config yields bitwise-identical parameters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DivergenceError
from .losses import AuxLossState, LossConfig, member_avg_cross_entropy, \
    total_loss
from .metrics import EvalReport, MetricAccumulator, fewshot_probe, \
    ood_metrics, ood_scores
from .model import Model, deep_ensemble_predict, forward, mc_dropout_predict
from .rng import Rng

SCHEDULES = ("constant", "cosine", "warmup_cosine")


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    base_lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 10.0
    lr_schedule: str = "constant"
    warmup_frac: float = 0.1
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0  # 0: no mid-training evals

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch_size": self.batch_size,
                "base_lr": self.base_lr, "momentum": self.momentum,
                "clip_norm": self.clip_norm,
                "lr_schedule": self.lr_schedule,
                "warmup_frac": self.warmup_frac, "seed": self.seed,
                "loss": {"aux_weight": self.loss.aux_weight,
                         "loss_mode": self.loss.loss_mode},
                "eval_every": self.eval_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown train fields: {sorted(bad)}")
        return cls(**d)


def lr_at(config: TrainConfig, step: int) -> float:
    """Scheduled learning rate for 0-indexed step.

    constant and warmup_cosine begin with a linear warmup over the first
    warmup_frac of steps; cosine decays from the start.
    """
    warm = 0
    if config.lr_schedule in ("constant", "warmup_cosine"):
        warm = int(config.warmup_frac * config.steps)
    if step < warm:
        return config.base_lr * (step + 1) / warm
    if config.lr_schedule == "constant":
        return config.base_lr
    span = max(config.steps - warm, 1)
    progress = (step - warm) / span
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(named_params, grads: dict, state: dict, config: TrainConfig,
             lr: float | None = None) -> dict:
    """Global-norm clip, then v <- beta v + g and p <- p - lr v, in place."""
    if lr is None:
        lr = config.base_lr
    sq = 0.0
    for name, _ in named_params:
        g = grads[name]
        sq += float(np.sum(g * g))
    gnorm = math.sqrt(sq)
    scale = 1.0 if gnorm <= config.clip_norm else config.clip_norm / gnorm
    for name, p in named_params:
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = config.momentum * v + grads[name] * scale
        state[name] = v
        p.data = p.data - lr * v
    return state


def _mimo_batch(images, labels, spec, rng: Rng, step: int):
    """Stack M pairings channel-wise; with probability
    mimo_input_repetition_prob a row keeps the same image in every slot."""
    m = spec.m
    b = len(labels)
    slots_x = [images]
    slots_y = [labels]
    rep = rng.stream("mimo_rep", step).random(b) < \
        spec.mimo_input_repetition_prob
    for j in range(1, m):
        perm = rng.stream("mimo", step, j).permutation(b)
        perm = np.where(rep, np.arange(b), perm)
        slots_x.append(images[perm])
        slots_y.append(labels[perm])
    x = np.concatenate(slots_x, axis=-1)
    y = np.stack(slots_y, axis=0)
    return x, y


def train(model: Model, dataset: Dataset, config: TrainConfig,
          rng: Rng | None = None):
    """Run the loop; returns (model, history) with one dict per step."""
    spec = model.spec
    if dataset.spec.classes != spec.classes:
        raise ConfigError("dataset and model class counts differ")
    n = len(dataset.train_y)
    if config.batch_size > n:
        raise ConfigError("batch_size exceeds training set size")
    rng = rng or Rng(config.seed)
    named = list(model.named_params())
    state: dict = {}
    history = []
    for s in range(config.steps):
        idx = rng.stream("batch", s).choice(n, size=config.batch_size,
                                            replace=False)
        images = dataset.train_x[idx]
        labels = dataset.train_y[idx]
        if spec.variant == "mimo":
            if spec.batch_repetitions > 1:
                images = np.concatenate([images] * spec.batch_repetitions, 0)
                labels = np.concatenate([labels] * spec.batch_repetitions, 0)
            images, labels = _mimo_batch(images, labels, spec, rng, s)
        out = forward(model, images, rng, train=True, step=s)
        data = member_avg_cross_entropy(out.member_probs, labels,
                                        mode=config.loss.loss_mode)
        aux_states = [AuxLossState.from_decision(d) for d in out.decisions]
        loss = total_loss(data, aux_states, config.loss.aux_weight)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise DivergenceError(s, loss_val)
        loss.backward()
        grads = {}
        for name, p in named:
            grads[name] = p.grad if p.grad is not None \
                else np.zeros_like(p.data)
        lr = lr_at(config, s)
        sgd_step(named, grads, state, config, lr)
        for _, p in named:
            p.grad = None
        row = {"step": s, "loss": loss_val,
               "aux": loss_val - data.item(), "lr": lr,
               "nll": None, "error": None, "ece": None, "kl": None}
        last = s == config.steps - 1
        if (config.eval_every and (s + 1) % config.eval_every == 0) or last:
            acc = MetricAccumulator()
            val = forward(model, dataset.val_x, rng, train=False, step=s)
            acc.add_batch(val.member_probs, dataset.val_y)
            r = acc.result()
            row.update(nll=r["nll"], error=r["error_pct"], ece=r["ece"],
                       kl=r["kl_diversity"])
        history.append(row)
    return model, history


HISTORY_COLUMNS = ("step", "loss", "aux", "nll", "error", "ece", "kl")


def history_to_csv(history: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow(["" if row.get(c) is None
                        else (row[c] if c == "step" else f"{row[c]:.10g}")
                        for c in HISTORY_COLUMNS])


def _batched(x, size):
    for i in range(0, len(x), size):
        yield x[i:i + size]


def evaluate(model: Model | None, dataset: Dataset, rng: Rng, *,
             models: list | None = None, mc_samples: int = 0,
             batch_size: int = 128, fewshot_shots=(),
             flops_giga: float | None = None) -> EvalReport:
    """Test-split metrics plus OOD/shift detection and optional probes.

    Pass models=[...] to evaluate a deep ensemble; mc_samples > 0 ensembles
    that many eval-time dropout draws of the single model.
    """
    if (model is None) == (models is None):
        raise ConfigError("pass exactly one of model or models")

    def predict(images):
        if models is not None:
            return deep_ensemble_predict(models, images, rng)
        if mc_samples > 0:
            return mc_dropout_predict(model, images, mc_samples, rng)
        return forward(model, images, rng, train=False)

    acc = MetricAccumulator()
    test_ens = []
    for xb, yb in zip(_batched(dataset.test_x, batch_size),
                      _batched(dataset.test_y, batch_size)):
        bundle = predict(xb)
        acc.add_batch(bundle.member_probs, yb)
        test_ens.append(bundle.ensemble_probs.data)
    r = acc.result()
    in_scores = ood_scores(np.concatenate(test_ens, axis=0))

    ood = {}
    for name, split in (("ood", dataset.ood_x), ("shift", dataset.shift_x)):
        if split is None:
            continue
        outs = []
        for xb in _batched(split, batch_size):
            outs.append(ood_scores(predict(xb).ensemble_probs.data))
        ood[f"test/{name}"] = ood_metrics(in_scores, np.concatenate(outs))

    fewshot = {}
    if fewshot_shots:
        feats = []
        for xb in _batched(dataset.test_x, batch_size):
            if models is not None:
                per = [forward(mm, xb, rng, want_features=True)
                       .member_features for mm in models]
                feats.append(np.concatenate(per, axis=0))
            else:
                feats.append(forward(model, xb, rng, want_features=True)
                             .member_features)
        features = np.concatenate(feats, axis=1)
        for shots in fewshot_shots:
            fewshot[int(shots)] = fewshot_probe(features, dataset.test_y,
                                                int(shots))
    return EvalReport(nll=r["nll"], error_pct=r["error_pct"], ece=r["ece"],
                      kl_diversity=r["kl_diversity"],
                      cosine_similarity=r["cosine_similarity"],
                      normalized_disagreement=r["normalized_disagreement"],
                      flops_train_giga=flops_giga, ood=ood, fewshot=fewshot)
