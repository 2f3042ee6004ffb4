"""One semi-supervised step taken apart: perturbation, teacher transform, validity mask, loss.

    python demos/consistency_by_hand.py
"""
import numpy as np
import torch

from carotid_ssl.losses import consistency_mse, rampup_weight, uncertainty_threshold
from carotid_ssl.nets import ModelConfig
from carotid_ssl.trainer import Trainer, TrainConfig
from carotid_ssl.transforms import PerturbationPolicy

rng = np.random.default_rng(0)
trainer = Trainer(
    ModelConfig.fine(base_channels=4, depth=3),
    TrainConfig.segmentation(ssl_mode="owc+uncertainty", T_mc=4),
    policy=PerturbationPolicy(),
)
x = torch.from_numpy(rng.uniform(size=(4, 5, 64, 64)).astype(np.float32))
labels = rng.integers(0, 3, size=(2, 64, 64))
y = torch.from_numpy(np.moveaxis(np.eye(3, dtype=np.float32)[labels], -1, 1).copy())

res = trainer.train_step(x[:2], y, x[2:], np.random.default_rng(1), return_tensors=True)
t = res.tensors
for i, p in enumerate(res.perturbations):
    g = p.gamma
    print(f"sample {i}: flip={g.flip_h} rot={g.rotation_deg:+.1f} scale={g.scale:.2f} crop=({g.crop_offset[0]:+.1f}, {g.crop_offset[1]:+.1f})")
print("valid pixel fraction per sample:", t["valid"][:, 0].mean(dim=(-2, -1)).numpy().round(3))
print("plain masked MSE:", float(consistency_mse(t["p_student"], t["p_teacher"], t["valid"])))
# an untrained 3-class net is near-uniform (entropy ~ ln 3 > tau), so the gate rejects every pixel at t = 0
print("logged (uncertainty-gated) consistency:", res.metrics["con_loss"])
print("lambda(t), tau(t) over epochs 0, 10, 20, 40:")
for e in (0, 10, 20, 40):
    print(f"  t={e:>2}  lambda={rampup_weight(e, 40, 20):7.4f}  tau={uncertainty_threshold(e, 40, 20):.4f}")
