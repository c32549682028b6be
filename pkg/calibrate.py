"""Scratch calibration for the acceptance-scale experiment (not shipped)."""
import os
os.environ["OMP_NUM_THREADS"] = "1"
os.environ["OPENBLAS_NUM_THREADS"] = "1"
import time
import numpy as np
from ahem import data, trainer, evaluation, model

t_all = time.time()
root = "/tmp/calib"
train_spec = data.SyntheticSpec(domains=3, identities_per_domain=50,
                                images_per_identity=10, seed=20260809)
heldout_spec = data.SyntheticSpec(domains=1, identities_per_domain=30,
                                  images_per_identity=5, seed=917)
data.generate_synthetic(train_spec, root + "/train")
data.generate_synthetic(heldout_spec, root + "/test")
heldout = data.load_dataset(root + "/test")[0]
store = data.ImageStore()
protocol = evaluation.EvalProtocol(probe_id_count=20, gallery_id_count=30,
                                   trials=10, seed=33)

def rank1(ckpt):
    net = model.load_checkpoint(ckpt)
    avg, _ = evaluation.run_trials(net, heldout, protocol, store)
    return avg.at(1)

results = {}
for mode, policy in [("baseline", "moderate"), ("aug_mining_select", "moderate"),
                     ("aug_mining_select", "strong")]:
    key = f"{mode}/{policy}"
    results[key] = []
    for seed in (101, 102, 103, 104, 105):
        cfg = trainer.TrainConfig(seed=seed, epochs=10, mode=mode, policy=policy)
        t0 = time.time()
        records, ckpt, _ = trainer.train(cfg, root + "/train", f"{root}/run_{mode}_{policy}_{seed}")
        r1 = rank1(ckpt)
        pre = trainer.flip_only_rate(
            records, (0, cfg.effective_decay_epoch * 94)) if mode != "baseline" else float("nan")
        results[key].append((seed, r1, pre, time.time() - t0))
        print(f"{key} seed={seed} rank1={r1:.3f} pre-decay flip rate={pre:.3f} "
              f"({time.time()-t0:.0f}s)", flush=True)

print()
for key, rows in results.items():
    print(key, "rank1:", [f"{r:.3f}" for _, r, _, _ in rows])
base = dict((s, r) for s, r, _, _ in results["baseline/moderate"])
sel = dict((s, r) for s, r, _, _ in results["aug_mining_select/moderate"])
wins = sum(1 for s in base if sel[s] >= base[s])
print(f"select >= baseline in {wins}/5 seeds")
strong_rates = [p for _, _, p, _ in results["aug_mining_select/strong"]]
print("strong pre-decay flip rates:", [f"{p:.3f}" for p in strong_rates],
      "majority >0.25:", sum(1 for p in strong_rates if p > 0.25))
print(f"total {time.time()-t_all:.0f}s")
