"""Cross-validated AUROC of a lesion classifier on clean, photographed and
restored test images, at toy scale (2 splits x 2 repeats).

The restorer here is the zero model, i.e. no restoration, so "restored"
equals "photo"; plug in a trained checkpoint (demo 04 or the CLI) to see the
recovery.

Run: python3 demos/05_auroc_experiment.py
"""

from photoproxy import classifier as clf
from photoproxy import dncnn
from photoproxy.degrade import DegradationConfig
from photoproxy.evaluation import CvPlan, run_end_to_end

dataset = clf.synth_lesion_dataset(120, 50, image_size=64, seed=1)
print(f"{len(dataset)} images, benign share {dataset.class_ratio:.3f}")

report = run_end_to_end(
    dataset, CvPlan(2, 2, 0), DegradationConfig.screen_photo(seed=7, noise_sigma=0.06),
    dncnn.DnCnnModel.zeros(depth=2, width=1), dncnn.TrainConfig(epochs=6, batch_size=32, learning_rate=3e-3),
    clf.AugmentConfig(max_rotation=0.0, brightness_jitter=0.0),
    progress=lambda r: print(f"split {r.split} repeat {r.repeat}: clean {r.auroc_dicom:.3f} "
                             f"photo {r.auroc_photo:.3f} restored {r.auroc_restored:.3f}"),
)
print(report.summary)
