"""Probe criterion-5 protocol candidates: NLL ordering + KL ratio."""
import math
import sys
import time

from moelab.dataset import DatasetSpec, make_synthetic_dataset
from moelab.model import preset, build_model
from moelab.rng import Rng
from moelab.trainer import TrainConfig, train, evaluate

VARIANTS = ("pbe", "only_tiling", "only_partitioning")
SEEDS = range(5)


def run_config(name, steps, e, noise_std, lr=0.05, n_train=256, mlp_dim=128):
    t0 = time.time()
    nll = {v: [] for v in VARIANTS}
    kl = {v: [] for v in VARIANTS}
    for s in SEEDS:
        ds = make_synthetic_dataset(DatasetSpec(
            classes=4, image_size=8, channels=3, n_train=n_train,
            n_val=128, n_test=512, noise_std=noise_std, shift_severity=2,
            seed=100 + s))
        for v in VARIANTS:
            spec = preset("tiny", variant=v, mlp_dim=mlp_dim, e=e, k=1, m=2)
            model = build_model(spec, Rng(s))
            cfg = TrainConfig(steps=steps, batch_size=32, base_lr=lr, seed=s)
            model, _ = train(model, ds, cfg)
            rep = evaluate(model, ds, Rng(1000 + s))
            nll[v].append(rep.nll)
            if rep.kl_diversity is not None:
                kl[v].append(rep.kl_diversity)
    mnll = {v: math.fsum(nll[v]) / len(nll[v]) for v in VARIANTS}
    mkl = {v: math.fsum(kl[v]) / len(kl[v]) if kl[v] else float("nan")
           for v in VARIANTS}
    ratio = mkl["pbe"] / mkl["only_tiling"]
    ok_nll = mnll["pbe"] < mnll["only_tiling"] and \
        mnll["pbe"] < mnll["only_partitioning"]
    ok_kl = ratio > 10.0
    print(f"[{name}] {time.time()-t0:.0f}s "
          f"nll pbe={mnll['pbe']:.4f} ot={mnll['only_tiling']:.4f} "
          f"op={mnll['only_partitioning']:.4f} | "
          f"kl pbe={mkl['pbe']:.3e} ot={mkl['only_tiling']:.3e} "
          f"ratio={ratio:.1f} | nll_ok={ok_nll} kl_ok={ok_kl}", flush=True)
    return ok_nll and ok_kl


if __name__ == "__main__":
    run_config("J      e4 s150 n2.5", steps=150, e=4, noise_std=2.5)
    run_config("J300   e4 s300 n2.5", steps=300, e=4, noise_std=2.5)
    run_config("Je8    e8 s150 n2.5", steps=150, e=8, noise_std=2.5)
    run_config("J300e8 e8 s300 n2.5", steps=300, e=8, noise_std=2.5)
    run_config("Jc     e4 s150 n1.5", steps=150, e=4, noise_std=1.5)
    run_config("J300c  e4 s300 n1.5", steps=300, e=4, noise_std=1.5)
    print("done", flush=True)
