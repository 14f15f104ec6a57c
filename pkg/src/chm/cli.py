"""Command line interface.

Exit codes: 0 success, 1 I/O or format error, 2 config or contract error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import io as chmio
from .config import ConfigError, RunConfig
from .convengine import conv, scale_argmax_histogram
from .flow import pck
from .kernels import SharedKernel, build_index_map, export_weight_maps, param_count
from .traincheck import DivergenceError, init_params, predict, train, unpack

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class ContractError(ValueError):
    """Inputs are well-formed but inconsistent with the configuration."""


def _load_config(path):
    return RunConfig.load(path) if path else RunConfig.from_dict({})


def _check_sample(cfg, sample, path):
    if len(sample.src_levels) != cfg.levels:
        raise ContractError(f"{path}: manifest has {len(sample.src_levels)} feature levels, config expects {cfg.levels}")


def _channels(sample):
    return [lvl.channels for lvl in sample.src_levels]


def _params_for(cfg, sample, ckpt):
    if ckpt:
        params, _ = chmio.load_checkpoint(ckpt)
        return params
    return init_params(cfg, _channels(sample))


def cmd_match(args):
    cfg = _load_config(args.config)
    sample = chmio.load_manifest(args.manifest)
    _check_sample(cfg, sample, args.manifest)
    params = _params_for(cfg, sample, args.ckpt)
    pred, flow, out = predict(cfg, params, sample)
    if args.out:
        chmio.write_tensor(args.out, flow)
    if args.scores:
        chmio.write_tensor(args.scores, out.corr)
    json.dump({"pred_kps": np.round(pred, 6).tolist()}, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def _share_histogram(scheme, dims):
    _, share = build_index_map(scheme, dims)
    values, counts = np.unique(share, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def cmd_params(args):
    cfg = _load_config(args.config)
    layers = [(f"level{l}.6d", cfg.dims_6d) for l in range(cfg.levels)] + [("4d", cfg.dims_4d)]
    rows = []
    for name, dims in layers:
        rows.append({
            "layer": name,
            "scheme": cfg.scheme,
            "dims": list(dims.half),
            "params": param_count(cfg.scheme, dims),
            "share_histogram": _share_histogram(cfg.scheme, dims),
        })
    total = sum(r["params"] for r in rows)
    if args.json:
        json.dump({"layers": rows, "total": total}, sys.stdout, indent=1)
        sys.stdout.write("\n")
        return EXIT_OK
    print(f"{'layer':<10} {'scheme':<8} {'dims':<10} {'params':>7}  share-count histogram")
    for r in rows:
        hist = " ".join(f"{k}x{v}" for k, v in r["share_histogram"].items())
        dims = "x".join(map(str, r["dims"]))
        print(f"{r['layer']:<10} {r['scheme']:<8} {dims:<10} {r['params']:>7}  {hist}")
    print(f"{'total':<10} {'':<8} {'':<10} {total:>7}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args.config)
    if not args.manifests:
        raise ContractError("no manifests given")
    rows = []
    for path in args.manifests:
        sample = chmio.load_manifest(path)
        _check_sample(cfg, sample, path)
        params = _params_for(cfg, sample, args.ckpt)
        pred, _, _ = predict(cfg, params, sample)
        rows.append({"pair": path, "pck": pck(pred, sample.pair.trg_kps, args.alpha, args.mode, sample.pair)})
    mean = float(np.mean([r["pck"] for r in rows]))
    if args.json:
        json.dump({"alpha": args.alpha, "mode": args.mode, "pairs": rows, "mean": mean}, sys.stdout, indent=1)
        sys.stdout.write("\n")
        return EXIT_OK
    width = max(len(r["pair"]) for r in rows)
    print(f"{'pair':<{width}}  PCK@{args.alpha} ({args.mode})")
    for r in rows:
        print(f"{r['pair']:<{width}}  {r['pck']:.4f}")
    print(f"{'mean':<{width}}  {mean:.4f}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    if not args.manifests:
        raise ContractError("no manifests given")
    samples = []
    for path in args.manifests:
        sample = chmio.load_manifest(path)
        _check_sample(cfg, sample, path)
        samples.append(sample)
    channels = _channels(samples[0])
    if any(_channels(s) != channels for s in samples):
        raise ContractError("all training pairs need the same per-level channel counts")
    params = _params_for(cfg, samples[0], args.init)
    params, trace = train(cfg, params, samples, args.steps)
    chmio.save_checkpoint(args.ckpt, params, cfg, args.steps)
    for step, loss in enumerate(trace):
        print(f"{step}\t{loss:.6f}")
    return EXIT_OK


def _parse_sizes(text):
    sizes = []
    for item in text.split(","):
        dims = tuple(int(v) for v in item.lower().split("x"))
        if len(dims) != 3:
            raise ConfigError(f"bench sizes are h x w x s triples, got {item!r}")
        sizes.append(dims)
    return sizes


def cmd_bench(args):
    cfg = _load_config(args.config)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for dims in _parse_sizes(args.sizes):
        shape = (args.extent, args.extent, max(dims[2], 1)) * 2
        c = rng.random(shape)
        row = {"kernel": "x".join(map(str, dims)), "input": list(shape)}
        for engine, scheme in (("dense", "psi"), ("cp", "cp_psi")):
            k = SharedKernel.init(scheme, dims, seed=rng)
            stats = {}
            t0 = time.perf_counter()
            conv(c, k, engine, stats)
            row[f"{engine}_taps"] = stats["taps"]
            row[f"{engine}_ms"] = round(1e3 * (time.perf_counter() - t0), 3)
        rows.append(row)
    if args.json:
        json.dump(rows, sys.stdout, indent=1)
        sys.stdout.write("\n")
        return EXIT_OK
    print(f"{'kernel':<8} {'dense MAC/out':>13} {'cp MAC/out':>10} {'ratio':>7} {'dense ms':>9} {'cp ms':>8}")
    for r in rows:
        ratio = r["dense_taps"] / r["cp_taps"]
        print(f"{r['kernel']:<8} {r['dense_taps']:>13} {r['cp_taps']:>10} {ratio:>7.2f} "
              f"{r['dense_ms']:>9.2f} {r['cp_ms']:>8.2f}")
    return EXIT_OK


def cmd_export(args):
    cfg = _load_config(args.config)
    sample = chmio.load_manifest(args.manifest)
    _check_sample(cfg, sample, args.manifest)
    params = _params_for(cfg, sample, args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    if args.what == "kernels":
        stack, _ = unpack(cfg, params)
        labels = []
        layers = [(f"level{l}_6d", k) for l, k in enumerate(stack.kernels_6d)] + [("4d", stack.kernel_4d)]
        for name, k in layers:
            for i, (label, weight_map) in enumerate(export_weight_maps(k)):
                fname = f"{name}_map{i}.cht"
                chmio.write_tensor(os.path.join(args.out, fname), weight_map)
                labels.append({"layer": name, "file": fname, "scheme": k.scheme.value, **label})
        with open(os.path.join(args.out, "kernels.json"), "w") as f:
            json.dump(labels, f, indent=1)
        print(f"wrote {len(labels)} kernel maps to {args.out}")
    else:
        _, _, out = predict(cfg, params, sample)
        hist = {}
        for l, am in enumerate(out.scale_argmax):
            counts = scale_argmax_histogram(am, cfg.S)
            hist[f"level{l}"] = {f"{m},{n}": int(counts[m, n]) for m in range(cfg.S) for n in range(cfg.S)}
        with open(os.path.join(args.out, "scale_argmax.json"), "w") as f:
            json.dump(hist, f, indent=1)
        print(f"wrote scale-argmax histogram to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="chm", description="Convolutional Hough matching tools")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("match", help="run the matching pipeline on one pair")
    m.add_argument("--config")
    m.add_argument("--manifest", required=True)
    m.add_argument("--ckpt", help="checkpoint directory (default: fresh init from seed)")
    m.add_argument("--out", help="flow tensor file")
    m.add_argument("--scores", help="final correlation tensor file")
    m.set_defaults(func=cmd_match)

    pa = sub.add_parser("params", help="parameter accounting for the configured stack")
    pa.add_argument("--config")
    pa.add_argument("--json", action="store_true")
    pa.set_defaults(func=cmd_params)

    e = sub.add_parser("eval", help="PCK over a list of pairs")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--alpha", type=float, default=0.1)
    e.add_argument("--mode", choices=["img", "bbox", "bbox-kp"], default="img")
    e.add_argument("--json", action="store_true")
    e.add_argument("manifests", nargs="*")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train", help="train CHM parameters on annotated pairs")
    t.add_argument("--config")
    t.add_argument("--steps", type=int, default=100)
    t.add_argument("--ckpt", required=True, help="output checkpoint directory")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("manifests", nargs="*")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="dense vs center-pivot multiply-add counts and timings")
    b.add_argument("--config")
    b.add_argument("--sizes", default="3x3x1,3x3x3,5x5x1,5x5x3")
    b.add_argument("--extent", type=int, default=6, help="spatial extent of the benchmark tensor")
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export", help="export kernel weight maps or scale-argmax statistics")
    x.add_argument("--config")
    x.add_argument("--manifest", required=True)
    x.add_argument("--ckpt")
    x.add_argument("--what", choices=["kernels", "scale-argmax"], default="kernels")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (chmio.FormatError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError) as e:
        print(f"error: numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
