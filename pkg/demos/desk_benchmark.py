"""
End to end on phantom data
==========================

Trains the VAE on NoChange phantom pairs, trains the change detector on
SuperMix samples (once with the focal Tversky loss, once with BCE), then
scores both on held-out Change pairs with lesion-wise LTPR, LFPR and PPV.

A random-mask baseline with the same blob count and sizes as the focal
Tversky predictions gives the chance level for LTPR.

Takes roughly ten minutes on one CPU core.

    python demos/desk_benchmark.py
"""

import logging

import torch

from longichange.benchmark import DeskSettings, run

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
torch.set_num_threads(1)

settings = DeskSettings()
print(f"{settings.n_train} training pairs, {settings.n_test} test pairs, "
      f"shape {settings.shape}, {settings.detector_steps} detector steps per loss")

result = run(settings)

print(f"\nVAE final L1 reconstruction: {result['vae_history'][-1]['recon_l1']:.4f}")
print(f"{'loss':<14}{'LTPR':>8}{'LFPR':>8}{'PPV':>8}{'train s':>10}")
for kind, r in result["runs"].items():
    m = r["summary"]
    print(f"{kind:<14}{m['ltpr']['mean']:>8.3f}{m['lfpr']['mean']:>8.3f}"
          f"{m['ppv']['mean']:>8.3f}{r['train_time_s']:>10.0f}")
print(f"random-mask baseline LTPR: {result['runs']['focal_tversky']['random_baseline_ltpr']:.3f}")

# per-pair detail for the focal Tversky run
for pm in result["runs"]["focal_tversky"]["per_pair"]:
    print(f"  {pm.subject_id}: {pm.ltp}/{pm.ltp + pm.lfn} changes found, {pm.lfp} false blobs")

print(f"\ntotal {result['wall_time_s'] / 60:.1f} min")
