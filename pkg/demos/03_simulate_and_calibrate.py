"""Screen-photo simulation and severity calibration.

Each defect of the simulator is switched on alone to show its cost in PSNR,
then the noise level of the default mix is bisected until the corpus mean
prior PSNR sits at 14.5 dB.

Run: python3 demos/03_simulate_and_calibrate.py
"""

from dataclasses import replace

import numpy as np

from photoproxy.classifier import synth_lesion_dataset
from photoproxy.degrade import DegradationConfig, calibrate_severity, corpus_mean_psnr, degrade
from photoproxy.metrics import mean_ssim

corpus = synth_lesion_dataset(25, 25, image_size=64, seed=100).images
base = DegradationConfig.screen_photo(seed=0)
plain = DegradationConfig()

single = {
    "keystone 0.08": replace(plain, keystone_strength=0.08),
    f"tone (gamma {base.gamma}, gain {base.gain}, +{base.offset})": replace(
        plain, gamma=base.gamma, gain=base.gain, offset=base.offset),
    "ambient ramp 0.06": replace(plain, ambient_gradient_amp=0.06),
    "glare 1 x 0.15": replace(plain, glare_count=1, glare_intensity=0.15, glare_radius=5.0),
    "moire 0.02": replace(plain, moire_amp=0.02),
    "noise 0.05": replace(plain, noise_sigma=0.05),
}
for name, cfg in single.items():
    print(f"{name:36s} mean prior PSNR {corpus_mean_psnr(corpus, cfg):7.2f} dB")

cfg = calibrate_severity(corpus, 14.5, base)
print(f"\ncalibrated noise_sigma = {cfg.noise_sigma:.4f}")
print(f"corpus mean prior PSNR = {corpus_mean_psnr(corpus, cfg):.3f} dB")

pairs = [degrade(img, replace(cfg, seed=i)).rectified() for i, img in enumerate(corpus)]
print(f"corpus mean prior SSIM = {np.mean([mean_ssim(p.clean, p.photo) for p in pairs]):.3f}")
