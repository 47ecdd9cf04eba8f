"""
A small experiment grid and its correlation report
==================================================

Uses ``grid.toml`` next to this file. Needs the 48 px benchmark written by
``plot_representation_shift.py`` (or ``domainshift synth``).
"""

from pathlib import Path

from domainshift.data import SynthConfig, synth_benchmark
from domainshift.experiment import ExperimentConfig, correlation_report, run_experiment_grid

here = Path(__file__).parent
cfg = ExperimentConfig.from_file(here / "grid.toml")
if not cfg.train_manifest.is_file():
    synth_benchmark(SynthConfig(n_patches=600, img_size=48, n_slides=12), cfg.train_manifest.parent)

bundle = run_experiment_grid(cfg, resume=True)
for c in bundle.cells:
    print(f"{c.transform:10s} {c.domain:6s}  accuracy {c.accuracy_mean:.3f}  R {c.repshift_mean:.4f}")

report = correlation_report(bundle, cfg.out_dir)
print("pearson r", round(report["pearson_r"], 3), "->", report["plot"])
