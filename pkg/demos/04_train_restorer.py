"""Train a small DnCNN on simulated photo/clean pairs and report the
before/after quality table on held-out pairs.

About two minutes on one CPU core; raise EPOCHS / WIDTH for better numbers.

Run: python3 demos/04_train_restorer.py
"""

from dataclasses import replace

from photoproxy import dncnn
from photoproxy.classifier import synth_lesion_dataset
from photoproxy.degrade import DegradationConfig, calibrate_severity, generate_paired_corpus
from photoproxy.evaluation import quality_table

EPOCHS, DEPTH, WIDTH = 16, 6, 16

train_set = synth_lesion_dataset(48, 48, image_size=64, seed=100)
test_set = synth_lesion_dataset(16, 16, image_size=64, seed=200)
cfg = calibrate_severity(train_set.images[:50], 14.5, DegradationConfig.screen_photo(seed=1000))

train_pairs = [p.rectified() for p in generate_paired_corpus(train_set.images, cfg, len(train_set),
                                                             names=train_set.sources)]
test_pairs = [p.rectified() for p in generate_paired_corpus(test_set.images, replace(cfg, seed=5000),
                                                            len(test_set), names=test_set.sources)]

model, history = dncnn.train(train_pairs, dncnn.TrainConfig(epochs=EPOCHS), DEPTH, WIDTH,
                             progress=lambda e, loss: print(f"epoch {e + 1}: loss {loss:.5f}"))

print(f"\n{'split':6s} {'metric':6s} {'prior':>16s} {'after':>16s}")
for row in quality_table(train_pairs, model, "train") + quality_table(test_pairs, model, "test"):
    print(f"{row.split:6s} {row.metric:6s} {row.avg_prior:8.4f} +- {row.std_prior:5.3f} "
          f"{row.avg_after:8.4f} +- {row.std_after:5.3f}")
