"""Round 2: larger expert counts shrink the default routing noise (1/E)."""
import math
import time

from moelab.dataset import DatasetSpec, make_synthetic_dataset
from moelab.losses import LossConfig
from moelab.model import preset, build_model
from moelab.rng import Rng
from moelab.trainer import TrainConfig, train, evaluate

VARIANTS = ("pbe", "only_tiling", "only_partitioning")


def run_config(name, steps, e, aux=0.1, noise_std=2.5, seeds=5):
    t0 = time.time()
    nll = {v: [] for v in VARIANTS}
    kl = {v: [] for v in VARIANTS}
    for s in range(seeds):
        ds = make_synthetic_dataset(DatasetSpec(
            classes=4, image_size=8, channels=3, n_train=256,
            n_val=128, n_test=512, noise_std=noise_std, shift_severity=2,
            seed=100 + s))
        for v in VARIANTS:
            spec = preset("tiny", variant=v, mlp_dim=128, e=e, k=1, m=2)
            model = build_model(spec, Rng(s))
            cfg = TrainConfig(steps=steps, batch_size=32, base_lr=0.05,
                              seed=s, loss=LossConfig(aux_weight=aux))
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
    print(f"[{name}] {time.time()-t0:.0f}s "
          f"nll pbe={mnll['pbe']:.4f} ot={mnll['only_tiling']:.4f} "
          f"op={mnll['only_partitioning']:.4f} | "
          f"kl pbe={mkl['pbe']:.3e} ot={mkl['only_tiling']:.3e} "
          f"ratio={ratio:.1f} | nll_ok={ok_nll} kl_ok={ratio > 10.0}",
          flush=True)


if __name__ == "__main__":
    run_config("A e16 s150 aux.1 ", steps=150, e=16)
    run_config("B e16 s300 aux.1 ", steps=300, e=16)
    run_config("C e8  s300 aux.01", steps=300, e=8, aux=0.01)
    run_config("D e16 s300 aux.01", steps=300, e=16, aux=0.01)
    run_config("E e32 s150 aux.1 ", steps=150, e=32)
    print("done", flush=True)
