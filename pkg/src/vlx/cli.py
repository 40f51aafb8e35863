"""``vlx`` command-line interface: gen, train, stack, fuse, explain, compare."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import attribution as attr
from .data import (
    FormatError, ConfigError, SynthConfig, build_prompt_sets, generate_dataset, label_prompt_sets,
    load_corpus, load_image, load_prompt_sets, save_corpus, save_prompt_sets, write_png,
)
from .fusion import (
    StackCache, StaleStackError, StackFormatError, default_cache_dir, explain_conventional, fuse,
    per_dimension_maps, read_stack, write_stack,
)
from .metrics import localization_mass, mean_pairwise_correlation
from .model import (
    CheckpointError, DualEncoderModel, InputError, ModelConfig, TrainingError, encode_text, load_model,
    save_model, train_contrastive,
)
from .render import default_spec, grid, render_heatmap, save_overlay
from .tensor import DegenerateEmbeddingError, DimensionError

log = logging.getLogger("vlx")


class CLIError(Exception):
    def __init__(self, code: str, message: str, status: int = 2):
        super().__init__(message)
        self.code, self.status = code, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("E_USAGE", message)


# ------------------------------------------------------------------ helpers


def _parse_baseline(text: str | None, model: DualEncoderModel):
    """``zero`` | ``white`` | ``mean`` | ``constant:V`` | ``noise:MEAN:STD[:SEED]``."""
    if text is None:
        return None
    parts = text.split(":")
    try:
        if parts[0] == "zero":
            return attr.Constant(0.0)
        if parts[0] == "white":
            return attr.Constant(1.0)
        if parts[0] == "mean":
            return attr.DatasetMean(model.config.pixel_mean)
        if parts[0] == "constant" and len(parts) == 2:
            return attr.Constant(float(parts[1]))
        if parts[0] == "noise" and len(parts) in (3, 4):
            seed = int(parts[3]) if len(parts) == 4 else 0
            return attr.Noise(float(parts[1]), float(parts[2]), seed)
    except ValueError as exc:
        raise CLIError("E_PARAM", f"bad baseline {text!r}: {exc}") from None
    raise CLIError("E_PARAM", f"bad baseline {text!r}")


def _method_from_args(name: str, args, model: DualEncoderModel) -> attr.MethodSpec:
    if name not in attr.METHODS:
        raise CLIError("E_METHOD", "unknown method")
    baseline = _parse_baseline(args.baseline, model)
    if name == "gradshap" and baseline is not None and not isinstance(baseline, attr.Noise):
        raise CLIError("E_PARAM", "gradshap needs a noise:MEAN:STD baseline")
    return attr.method_spec(
        name, model, window=args.window, stride=args.stride, fill=args.fill, steps=args.steps,
        baseline=baseline, samples=args.samples, seed=args.seed, std=args.std,
    )


def _add_method_flags(p: argparse.ArgumentParser, multi: bool = False) -> None:
    if multi:
        p.add_argument("--methods", default="saliency,occlusion,ig,gradshap")
    else:
        p.add_argument("--method", required=True)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--stride", type=int, default=None, help="default: window")
    p.add_argument("--fill", type=float, default=None, help="occlusion fill; default: corpus mean pixel")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--baseline", default=None,
                   help="zero | white | mean | constant:V | noise:MEAN:STD[:SEED]")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--std", type=float, default=0.1, help="gradshap baseline noise std")


def _check_methods(names) -> None:
    if any(n not in attr.METHODS for n in names):
        raise CLIError("E_METHOD", "unknown method")


def _load_model(path) -> DualEncoderModel:
    try:
        return load_model(path)
    except FileNotFoundError:
        raise CLIError("E_IO", f"no such model file: {path}") from None


def _load_image(path, model: DualEncoderModel):
    try:
        return load_image(path, model.config.image_side)
    except FileNotFoundError:
        raise CLIError("E_IO", f"no such image: {path}") from None


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True))


def _cache(args) -> StackCache | None:
    if getattr(args, "no_cache", False):
        return None
    return StackCache(args.cache_dir or default_cache_dir())


# ----------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    cfg = SynthConfig(image_side=args.side, classes=classes)
    samples, vocab = generate_dataset(args.n, cfg, seed=args.seed)
    save_corpus(samples, vocab, args.out, cfg, args.seed)
    save_prompt_sets(build_prompt_sets(classes, args.k_prompts, seed=args.seed), Path(args.out) / "prompts.json")
    save_prompt_sets(label_prompt_sets(classes), Path(args.out) / "labels.json")
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args) -> None:
    samples, vocab, manifest = load_corpus(args.corpus)
    cfg = ModelConfig(
        image_side=manifest["image_side"], patch_size=args.patch, vision_hidden=args.vision_hidden,
        text_hidden=args.text_hidden, embed_dim=args.embed_dim, vocab=vocab,
        init_temperature=args.init_temperature, seed=args.seed,
        pixel_mean=float(np.mean([s.image.pixels.mean() for s in samples])),
    )
    model = DualEncoderModel(cfg)
    t0 = time.perf_counter()
    result = train_contrastive(model, samples, args.epochs, args.batch, args.lr, args.seed,
                               optimizer=args.optimizer, weight_decay=args.weight_decay,
                               progress=lambda e, loss: print(f"epoch {e} loss {loss:.6f}", flush=True))
    save_model(model, args.out)
    log_path = args.loss_log or f"{args.out}.loss.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(result.losses):
            w.writerow([e, repr(loss)])
    print(f"trained in {time.perf_counter() - t0:.1f}s; tau={model.temperature:.4f}; wrote {args.out}")


def cmd_stack(args) -> None:
    _check_methods([args.method])
    model = _load_model(args.model)
    img = _load_image(args.image, model)
    spec = _method_from_args(args.method, args, model)
    t0 = time.perf_counter()
    stack = per_dimension_maps(model, img, spec)
    write_stack(stack, args.out)
    print(f"stack: built ({stack.m} maps, {time.perf_counter() - t0:.3f}s)")


def _emit_fused(fused, args, base) -> None:
    _write_json(args.out, fused.to_json())
    if args.png:
        save_overlay(args.png, fused.values, base, default_spec(fused.method.name))


def cmd_fuse(args) -> None:
    model = _load_model(args.model)
    try:
        stack = read_stack(args.stack)
    except FileNotFoundError:
        raise CLIError("E_IO", f"no such stack file: {args.stack}") from None
    t0 = time.perf_counter()
    fused = fuse(stack, encode_text(model, args.prompt), model.temperature,
                 fingerprint=model.fingerprint(), prompt=args.prompt)
    base = _load_image(args.image, model).pixels if args.image else None
    _emit_fused(fused, args, base)
    print(f"stack: cached ({args.stack}); fused in {time.perf_counter() - t0:.4f}s")


def cmd_explain(args) -> None:
    _check_methods([args.method])
    model = _load_model(args.model)
    img = _load_image(args.image, model)
    spec = _method_from_args(args.method, args, model)
    cache = _cache(args)
    t0 = time.perf_counter()
    if cache is None:
        stack, hit = per_dimension_maps(model, img, spec), False
    else:
        stack, hit = cache.get_or_build(model, img, spec)
    fused = fuse(stack, encode_text(model, args.prompt), model.temperature,
                 fingerprint=model.fingerprint(), prompt=args.prompt)
    _emit_fused(fused, args, img.pixels)
    print(f"stack: {'cached' if hit else 'built'}; {time.perf_counter() - t0:.4f}s")


def compare_report(model: DualEncoderModel, img, prompt_sets, methods: list[attr.MethodSpec],
                   mask: np.ndarray | None = None, cache: StackCache | None = None) -> tuple[dict, dict]:
    """Conventional vs fused maps for every class, per method.

    Returns (metrics, maps) where ``maps[method][kind]`` lists one map per class
    for kinds ``conventional``, ``fused_prompts`` and ``fused_label``.
    """
    labels = label_prompt_sets([ps.label for ps in prompt_sets])
    tau = model.temperature
    metrics, maps = {}, {}
    for spec in methods:
        if cache is not None:
            stack, _ = cache.get_or_build(model, img, spec)
        else:
            stack = per_dimension_maps(model, img, spec)
        conv, fused_p, fused_l = [], [], []
        for k, ps in enumerate(prompt_sets):
            conv.append(explain_conventional(model, img, prompt_sets, k, spec).values)
            t_mean = np.mean([encode_text(model, p) for p in ps.prompts], axis=0)
            fused_p.append(fuse(stack, t_mean, tau).values)
            fused_l.append(fuse(stack, encode_text(model, labels[k].prompts[0]), tau).values)
        entry = {
            "conventional_mean_corr": mean_pairwise_correlation(conv),
            "fused_prompts_mean_corr": mean_pairwise_correlation(fused_p),
            "fused_label_mean_corr": mean_pairwise_correlation(fused_l),
        }
        entry["corr_margin"] = entry["conventional_mean_corr"] - entry["fused_prompts_mean_corr"]
        if mask is not None:
            entry["localization_mass"] = {
                kind: [localization_mass(m, mask) for m in group]
                for kind, group in (("conventional", conv), ("fused_prompts", fused_p), ("fused_label", fused_l))
            }
        metrics[spec.name] = entry
        maps[spec.name] = {"conventional": conv, "fused_prompts": fused_p, "fused_label": fused_l}
    return metrics, maps


def cmd_compare(args) -> None:
    names = [n.strip() for n in args.methods.split(",") if n.strip()]
    _check_methods(names)
    model = _load_model(args.model)
    img = _load_image(args.image, model)
    try:
        prompt_sets = load_prompt_sets(args.prompts_file)
    except FileNotFoundError:
        raise CLIError("E_IO", f"no such prompts file: {args.prompts_file}") from None
    specs = [_method_from_args(n, args, model) for n in names]
    mask = None
    if args.mask:
        mask = _load_image(args.mask, model).pixels > 0.5
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, maps = compare_report(model, img, prompt_sets, specs, mask, _cache(args))
    for name, groups in maps.items():
        rs = default_spec(name)
        rows = [[render_heatmap(groups[kind][k], img.pixels, rs)
                 for kind in ("conventional", "fused_prompts", "fused_label")]
                for k in range(len(prompt_sets))]
        tile = grid(rows)
        tile = np.repeat(np.repeat(tile, 3, axis=0), 3, axis=1)
        write_png(out / f"grid_{name}.png", tile)
    report = {
        "image_id": img.id,
        "classes": [ps.label for ps in prompt_sets],
        "columns": ["conventional", "fused_prompts", "fused_label"],
        "methods": metrics,
    }
    _write_json(out / "metrics.json", report)
    for name, m in metrics.items():
        print(f"{name}: conventional corr {m['conventional_mean_corr']:.4f} "
              f"fused corr {m['fused_prompts_mean_corr']:.4f}")


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vlx", description="Embedding-space explanations for a dual-encoder VLM")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate the synthetic corpus")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--side", type=int, default=64)
    g.add_argument("--classes", default="circle,square,triangle,cross")
    g.add_argument("--k-prompts", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="contrastive training")
    t.add_argument("--corpus", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.003)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    t.add_argument("--weight-decay", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--patch", type=int, default=8)
    t.add_argument("--vision-hidden", type=int, default=128)
    t.add_argument("--text-hidden", type=int, default=64)
    t.add_argument("--embed-dim", type=int, default=32)
    t.add_argument("--init-temperature", type=float, default=5.0)
    t.add_argument("--loss-log", default=None, help="default: <out>.loss.csv")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("stack", help="per-embedding-dimension map stack")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    _add_method_flags(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stack)

    f = sub.add_parser("fuse", help="fuse a stored stack with a prompt")
    f.add_argument("--stack", required=True)
    f.add_argument("--model", required=True)
    f.add_argument("--prompt", required=True)
    f.add_argument("--image", default=None, help="base image for --png")
    f.add_argument("--out", required=True)
    f.add_argument("--png", default=None)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("explain", help="stack (cached) + fuse in one step")
    e.add_argument("--model", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--prompt", required=True)
    _add_method_flags(e)
    e.add_argument("--out", default="map.json")
    e.add_argument("--png", default=None)
    e.add_argument("--cache-dir", default=None, help="default: $VLX_CACHE_DIR or ~/.cache/vlx")
    e.add_argument("--no-cache", action="store_true")
    e.set_defaults(func=cmd_explain)

    c = sub.add_parser("compare", help="conventional vs fused maps per class")
    c.add_argument("--model", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--prompts-file", required=True)
    c.add_argument("--mask", default=None, help="object mask image for localization mass")
    _add_method_flags(c, multi=True)
    c.add_argument("--out", required=True)
    c.add_argument("--cache-dir", default=None)
    c.add_argument("--no-cache", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


_ERRORS = (
    (attr.UnknownMethodError, "E_METHOD"),
    (attr.ParameterError, "E_PARAM"),
    (StaleStackError, "E_STALE"),
    ((FormatError, StackFormatError, CheckpointError), "E_FORMAT"),
    (ConfigError, "E_CONFIG"),
    ((InputError, DegenerateEmbeddingError), "E_INPUT"),
    (DimensionError, "E_DIM"),
    (TrainingError, "E_TRAIN"),
    (OSError, "E_IO"),
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.func(args)
    except CLIError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.status
    except Exception as exc:  # mapped to the one-line error protocol
        for types, code in _ERRORS:
            if isinstance(exc, types):
                print(f"{code}: {' '.join(str(exc).split())}", file=sys.stderr)
                return 2
        print(f"E_INTERNAL: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
