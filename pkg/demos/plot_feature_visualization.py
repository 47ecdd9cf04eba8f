"""
What do the last convolutional filters respond to?
==================================================

Gradient ascent on the input finds an image that maximally excites each
filter of a trained model. Pixel values are left unconstrained and only
rescaled for display, so colors are indicative rather than exact.
"""

from pathlib import Path

from domainshift.data import SplitSpec, SynthConfig, split_by_slide, synth_benchmark
from domainshift.featviz import FeatVizConfig, maximize_filters, save_results
from domainshift.models import ModelSpec, TrainConfig, build_model, train

out = Path("demo_output")
ds = synth_benchmark(SynthConfig(n_patches=400, img_size=48, n_slides=10), out / "synth48_small")
train_ds, val_ds, _ = split_by_slide(ds, SplitSpec((0.8, 0.2, 0.0), seed=0))
model, _ = train(build_model(ModelSpec("simple_cnn", input_size=48)), train_ds, val_ds,
                 TrainConfig(epochs=4, optimizer="adam", learning_rate=1e-3))

results = maximize_filters(model, "last_conv", range(32), FeatVizConfig(steps=128, step_size=0.1))
for r in results[:8]:
    print(f"filter {r.filter_idx:3d}  activation {r.trace[0]:.3f} -> {r.trace[-1]:.3f}{'  (dead)' if r.dead else ''}")

paths = save_results(results, out / "featviz")
print("contact sheet:", paths["sheet"])
