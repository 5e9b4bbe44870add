"""Probe criterion-6 protocol: deep-ensemble grid K in {1,2}, M in {1,2}."""
import math
import time

from moelab.cli import EVAL_SEED_OFFSET, MEMBER_SEED_STRIDE
from moelab.dataset import DatasetSpec, make_synthetic_dataset
from moelab.model import preset, build_model
from moelab.rng import Rng
from moelab.trainer import TrainConfig, train, evaluate


def run_grid(name, steps, noise_std, n_train=256, mlp_dim=128, lr=0.05):
    t0 = time.time()
    mean_nll = {}
    for k in (1, 2):
        for m in (1, 2):
            vals = []
            for s in range(5):
                ds = make_synthetic_dataset(DatasetSpec(
                    classes=4, image_size=8, channels=3, n_train=n_train,
                    n_val=128, n_test=512, noise_std=noise_std,
                    shift_severity=2, seed=100 + s))
                spec = preset("tiny", variant="vmoe", mlp_dim=mlp_dim,
                              e=4, k=k, m=1)
                models = []
                for j in range(m):
                    seed = s + MEMBER_SEED_STRIDE * j
                    model = build_model(spec, Rng(seed))
                    cfg = TrainConfig(steps=steps, batch_size=32,
                                      base_lr=lr, seed=seed)
                    model, _ = train(model, ds, cfg)
                    models.append(model)
                rep = evaluate(None, ds, Rng(s + EVAL_SEED_OFFSET),
                               models=models)
                vals.append(rep.nll)
            mean_nll[(k, m)] = math.fsum(vals) / len(vals)
    ok = all(mean_nll[(k, 2)] <= mean_nll[(k, 1)] for k in (1, 2))
    print(f"[{name}] {time.time()-t0:.0f}s "
          + " ".join(f"K{k}M{m}={mean_nll[(k, m)]:.4f}"
                     for k in (1, 2) for m in (1, 2))
          + f" | ok={ok}", flush=True)


if __name__ == "__main__":
    run_grid("de s150 n2.5", steps=150, noise_std=2.5)
    print("done", flush=True)
