"""Command-line interface: ``domainshift <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. With ``--json`` the
result (or ``{"error": code, "message": ...}``) is printed to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainShiftError

log = logging.getLogger("domainshift")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    g = parser.add_argument_group("global options")
    g.add_argument("--config", type=Path, default=default, help="TOML config file")
    g.add_argument("--seed", type=int, default=default, help="random seed")
    g.add_argument("--out", type=Path, default=default, help="output path")
    g.add_argument("--deterministic", action="store_true", default=default,
                   help="deterministic single-threaded torch kernels")
    g.add_argument("--json", action="store_true", default=default, help="JSON result on stdout")


def _read_toml(path) -> dict:
    if path is None:
        return {}
    from .experiment import tomllib

    try:
        return tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def _require(args, name):
    value = getattr(args, name, None)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return value


def _seed(args, default=0):
    return default if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    from .data import SynthConfig, synth_benchmark

    d = _read_toml(args.config)
    d = d.get("synth", d)
    for key, value in (("n_patches", args.n_patches), ("img_size", args.img_size), ("n_slides", args.slides),
                       ("hue_shift_deg", args.hue), ("contrast_scale", args.contrast), ("domain_id", args.domain_id)):
        if value is not None:
            d[key] = value
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SynthConfig.from_dict(d)
    out = _require(args, "out")
    ds = synth_benchmark(cfg, out)
    return dict(manifest=str(Path(out) / "manifest.csv"), n_patches=len(ds), domain_id=cfg.resolved_domain_id)


def cmd_transform(args):
    from .data import cast_dataset, load_manifest, map_dataset, read_image
    from .transforms import GeoAugConfig, HsvJitterConfig, StainProfile, estimate_stain_profile, stain_normalize

    ds = load_manifest(args.manifest)
    out = _require(args, "out")
    d = _read_toml(args.config)
    if args.kind == "cast":
        res = cast_dataset(ds, args.hue, args.contrast, out, args.domain_id)
    elif args.kind == "stain_norm":
        if args.reference is None and args.profile is None:
            raise UsageError("stain_norm needs --reference or --profile")
        target = StainProfile.load(args.profile) if args.profile else estimate_stain_profile(read_image(args.reference))
        res = map_dataset(ds, lambda im: stain_normalize(im, target), out, args.domain_id or "stain_norm")
    else:
        from .transforms import geometric_augment, hsv_color_augment

        rng = np.random.default_rng(_seed(args))
        if args.kind == "hsv":
            cfg = HsvJitterConfig(**d.get("hsv", {}))
            fn = lambda im: hsv_color_augment(im, cfg, rng)  # noqa: E731
        else:
            cfg = GeoAugConfig(**d.get("geo", {}))
            fn = lambda im: geometric_augment(im, cfg, rng)  # noqa: E731
        res = map_dataset(ds, fn, out, args.domain_id)
    return dict(manifest=str(Path(out) / "manifest.csv"), n_patches=len(res))


def _train_settings(args):
    from .experiment import ExperimentConfig

    d = _read_toml(args.config)
    keep = {k: d[k] for k in ("model", "train", "augment", "split") if k in d}
    cfg = ExperimentConfig.from_dict({**keep, "train_manifest": str(args.manifest), "test_domains": {"t": "held_out"}})
    return d, cfg


def cmd_train(args):
    from dataclasses import replace

    from .data import load_manifest, read_image, split_by_slide
    from .models import ModelSpec, build_model, save_checkpoint, train, write_history

    _, cfg = _train_settings(args)
    out = Path(_require(args, "out"))
    seed = _seed(args)
    ds = load_manifest(args.manifest)
    tr, va, te = split_by_slide(ds, replace(cfg.split, seed=cfg.split.seed))
    pipeline = (cfg.hsv, cfg.geo) if args.augment == "color" else (cfg.geo,) if args.augment == "geo" else ()
    tcfg = replace(cfg.train, seed=seed, augmentation=pipeline)
    for key in ("epochs", "learning_rate", "optimizer", "batch_size"):
        if getattr(args, key) is not None:
            tcfg = replace(tcfg, **{key: getattr(args, key)})
    opts = dict(cfg.model_options)
    opts.setdefault("input_size", read_image(tr.image_path(tr.records[0])).shape[0] if len(tr) else 96)
    spec = ModelSpec(arch=args.arch, init_seed=seed, **opts)
    model, history = train(build_model(spec), tr, va, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint")
    write_history(history, out / "history.csv")
    splits = {name: sorted(set(part.slide_ids)) for part, name in ((tr, "train"), (va, "val"), (te, "test"))}
    (out / "splits.json").write_text(json.dumps(dict(manifest=str(args.manifest), **splits), indent=2))
    return dict(checkpoint=str(out / "checkpoint"), history=str(out / "history.csv"),
                splits=str(out / "splits.json"), **model.training_meta)


def _dataset(args):
    """The manifest, optionally restricted to one split written by ``train``."""
    from .data import load_manifest

    ds = load_manifest(args.manifest)
    if args.split is None:
        return ds
    if args.splits is None:
        raise UsageError("--split needs --splits")
    slides = set(json.loads(Path(args.splits).read_text())[args.split])
    return ds.subset([r for r in ds.records if r.slide_id in slides], f"{ds.name}_{args.split}")


def cmd_eval(args):
    from .models import evaluate_accuracy, load_checkpoint

    model = load_checkpoint(args.checkpoint)
    rep = evaluate_accuracy(model, _dataset(args))
    return dict(accuracy=rep.overall, per_domain=rep.per_domain, n=rep.n)


def cmd_activations(args):
    from .models import load_checkpoint
    from .repshift import extract_mean_activations, save_activations

    model = load_checkpoint(args.checkpoint)
    act = extract_mean_activations(model, _dataset(args), args.layer)
    out = _require(args, "out")
    save_activations(act, out)
    return dict(path=str(out), n=act.n, n_filters=act.n_filters, layer_id=act.layer_id,
                model_fingerprint=act.model_fingerprint)


def cmd_repshift(args):
    from .repshift import load_activations, representation_shift

    res = representation_shift(load_activations(args.ref), load_activations(args.target),
                               allow_mismatch=args.allow_mismatch, standardize=args.standardize)
    d = res.to_dict()
    if args.out is not None:
        Path(args.out).write_text(res.to_json(indent=2))
    return d


def cmd_featviz(args):
    from .featviz import FeatVizConfig, maximize_filters, save_results
    from .models import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    d = _read_toml(args.config)
    d = d.get("featviz", d)
    for key in ("steps", "step_size"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = FeatVizConfig(**d)
    except TypeError as e:
        raise ConfigError(f"bad featviz config: {e}") from None
    if args.filters == "all":
        filters = list(range(_layer_width(model, args.layer)))
    else:
        filters = [int(f) for f in args.filters.split(",")]
    results = maximize_filters(model, args.layer, filters, cfg)
    out = _require(args, "out")
    paths = save_results(results, out)
    return dict(out=str(out), sheet=str(paths["sheet"]), trace=str(paths["trace"]),
                filters=[dict(filter=r.filter_idx, initial=float(r.trace[0]), final=float(r.trace[-1]), dead=r.dead)
                         for r in results])


def _layer_width(model, layer) -> int:
    import torch

    from .errors import FeatVizError

    try:
        module = model.module(layer)
    except KeyError:
        raise FeatVizError(f"unknown layer {layer!r}", code="unknown_layer") from None
    shape = {}
    handle = module.register_forward_hook(lambda _m, _i, o: shape.setdefault("c", o.shape[1]))
    try:
        with torch.no_grad():
            model.net.eval()(torch.zeros(1, 3, model.spec.input_size, model.spec.input_size))
    finally:
        handle.remove()
    return int(shape["c"])


def cmd_grid(args):
    from dataclasses import replace

    from .experiment import CONFIG_SCHEMA, ExperimentConfig, run_experiment_grid

    if args.print_schema:
        if not args.json:
            for key, desc in CONFIG_SCHEMA.items():
                print(f"{key}: {desc}")
        return dict(schema=CONFIG_SCHEMA)
    cfg = ExperimentConfig.from_file(_require(args, "config"))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.deterministic:
        cfg = replace(cfg, workers=1)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    bundle = run_experiment_grid(cfg, resume=args.resume)
    return dict(bundle=str(Path(cfg.out_dir) / "bundle.json"), cells=len(bundle.cells), failures=bundle.failures)


def cmd_report(args):
    from .experiment import ExperimentConfig, ReportBundle, correlation_report

    bundle_path = args.bundle
    if bundle_path is None:
        if args.config is not None and args.out is None:
            bundle_path = Path(ExperimentConfig.from_file(args.config).out_dir) / "bundle.json"
        else:
            bundle_path = Path(_require(args, "out")) / "bundle.json"
    bundle = ReportBundle.load(bundle_path)
    out_dir = args.out if args.out is not None else Path(bundle_path).parent
    rep = correlation_report(bundle, out_dir, seed=args.seed)
    rep.pop("points")
    rep["cells"] = [c.to_dict() for c in bundle.cells]
    return rep


# ---------------------------------------------------------------------------


def _split_flags(p):
    p.add_argument("--splits", type=Path, help="splits.json written by train")
    p.add_argument("--split", choices=("train", "val", "test"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="domainshift", description="Representation-shift diagnostics for patch classifiers.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a synthetic benchmark (PNG patches + manifest)")
    p.add_argument("--n-patches", type=int)
    p.add_argument("--img-size", type=int)
    p.add_argument("--slides", type=int)
    p.add_argument("--hue", type=float, help="hue cast in degrees")
    p.add_argument("--contrast", type=float, help="contrast scale")
    p.add_argument("--domain-id")

    p = add("transform", cmd_transform, "apply a transform to every patch of a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--kind", choices=("stain_norm", "cast", "hsv", "geo"), required=True)
    p.add_argument("--reference", type=Path, help="reference patch for stain_norm")
    p.add_argument("--profile", type=Path, help="saved stain profile JSON for stain_norm")
    p.add_argument("--hue", type=float, default=0.0)
    p.add_argument("--contrast", type=float, default=1.0)
    p.add_argument("--domain-id")

    p = add("train", cmd_train, "train a classifier on a slide-level split of a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--arch", choices=("simple_cnn", "mini_googlenet"), default="simple_cnn")
    p.add_argument("--augment", choices=("none", "geo", "color"), default="geo")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--batch-size", type=int)

    p = add("eval", cmd_eval, "patch-level accuracy of a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    _split_flags(p)

    p = add("activations", cmd_activations, "dump per-filter mean activations")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--layer", default="last_conv")
    _split_flags(p)

    p = add("repshift", cmd_repshift, "representation shift between two activation dumps")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--allow-mismatch", action="store_true")
    p.add_argument("--standardize", action="store_true")

    p = add("featviz", cmd_featviz, "activation maximization for filters of a layer")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--layer", default="last_conv")
    p.add_argument("--filters", default="all", help="comma-separated indices or 'all'")
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)

    p = add("grid", cmd_grid, "run an experiment grid from a TOML config")
    p.add_argument("--print-schema", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", action="store_true", help="reuse finished jobs with a matching config")

    p = add("report", cmd_report, "correlation report (SVG + CSV) from a grid bundle")
    p.add_argument("--bundle", type=Path, help="default: <out>/bundle.json")
    return parser


def _strict(obj):
    """NaN/inf become null so stdout is strict JSON."""
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _strict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict(v) for v in obj]
    return obj


def _set_deterministic():
    import torch

    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    for name in ("deterministic", "json"):
        setattr(args, name, bool(getattr(args, name, False)))
    logging.basicConfig(level=logging.INFO if not args.json else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.deterministic:
        _set_deterministic()
    try:
        result = args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"domainshift: error: {e}\n")
        return 1
    except Exception as e:
        code = e.code if isinstance(e, DomainShiftError) else type(e).__name__
        if args.json:
            print(json.dumps(dict(error=code, message=str(e))))
        else:
            sys.stderr.write(f"domainshift: {code}: {e}\n")
        return 2
    if args.json:
        print(json.dumps(_strict(result), indent=2, default=str, allow_nan=False))
    elif not (args.command == "grid" and getattr(args, "print_schema", False)):
        for key, value in result.items():
            print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
