"""Command-line front end: synth, train, denoise, eval, and ablate.

Every run prints its fully resolved configuration as ``key = value`` lines,
so any result can be reproduced from the printed block plus the seed.
Exit codes: 0 success, 1 usage error, 2 runtime error.  Runtime failures
emit a single ``error: <code>: <message>`` line on standard error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, NlbayesError


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(1)


def _print_config(section: str, values: dict) -> None:
    print(f"# resolved {section} config")
    for key in sorted(values):
        value = values[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        print(f"{key} = {value}")


def _parse_scalar(text: str, target_type):
    if target_type is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return target_type(text)


def _load_config_file(path, field_types: dict) -> dict:
    """Parse a ``key = value`` file; '#' starts a comment; unknown keys reject."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in field_types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _parse_scalar(text.strip(), field_types[key])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _apply_threads(threads):
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def _add_common(parser):
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads")
    parser.add_argument("--verbose", action="store_true", help="log progress")


def _build_parser() -> _Parser:
    parser = _Parser(prog="nlbayes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="corrupt a clean image with Poisson-Gaussian noise")
    p.add_argument("--clean", required=True, help="clean input image (.pgm or .nlbf)")
    p.add_argument("--beta", type=float, required=True, help="signal-dependent gain")
    p.add_argument("--sigma", type=float, required=True, help="signal-independent std")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="corrupted output image")
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fit the prior (and noise) networks on noisy images")
    p.add_argument("--data", required=True, help="directory of noisy training images")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    for name, argtype in _TRAIN_FLAG_TYPES.items():
        flag = "--" + name.replace("_", "-")
        if argtype is bool:
            p.add_argument(flag, default=None, type=str,
                           help=f"override {name} (true/false)")
        else:
            p.add_argument(flag, default=None, type=argtype, help=f"override {name}")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("denoise", help="denoise one image")
    p.add_argument("--in", dest="input", required=True, help="noisy input image")
    p.add_argument("--ckpt", default=None, help="trained checkpoint")
    p.add_argument("--sigma", type=float, default=None, help="known noise std")
    p.add_argument("--beta", type=float, default=None, help="known noise gain")
    p.add_argument("--engine", choices=["mle-classical", "learned"],
                   default="mle-classical")
    p.add_argument("--out", required=True, help="denoised output image")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--variant", choices=["NLBNN-P", "NLBNN-S"], default="NLBNN-P")
    p.add_argument("--patch-side", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--window-radius", type=int, default=None)
    p.add_argument("--mode", default=None,
                   choices=["nonlocal-exact", "nonlocal-embedding", "local-adjacent"])
    _add_common(p)
    p.set_defaults(func=_cmd_denoise, parser=p)

    p = sub.add_parser("eval", help="score (noisy, reference) pairs into a CSV")
    p.add_argument("--pairs", required=True, help="manifest: noisy_path,reference_path per line")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--engine", choices=["identity", "mle-classical", "learned"],
                   default="identity")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--variant", choices=["NLBNN-P", "NLBNN-S"], default="NLBNN-P")
    p.add_argument("--patch-side", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--dataset", default=None,
                   help="benchmark name (bpae, mouse-brain, zebrafish) to print reference scores")
    _add_common(p)
    p.set_defaults(func=_cmd_eval, parser=p)

    p = sub.add_parser("ablate", help="sweep k / patch side / search mode into a CSV")
    p.add_argument("--data", required=True, help="directory of noisy training images")
    p.add_argument("--grid", default=None,
                   help="grid spec, e.g. 'k=4,8;side=5;mode=nonlocal,local'")
    p.add_argument("--out", required=True, help="ablation CSV path")
    p.add_argument("--pairs", default=None,
                   help="pairs manifest (default: <data>/pairs.txt)")
    p.add_argument("--cache", default=None,
                   help="checkpoint cache directory (default: <out dir>/ckpt-cache)")
    p.add_argument("--engine", choices=["mle-classical", "learned"],
                   default="mle-classical")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--config", default=None, help="training config for learned cells")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_ablate, parser=p)

    return parser


# Mirrors TrainConfig's fields so the parser can be built without importing
# the numpy-heavy modules (lets --threads take effect before BLAS starts).
_TRAIN_FLAG_TYPES = {
    "crop": int, "patch_side": int, "k": int, "epochs": int, "batch": int,
    "lr": float, "lr_halve_every": int, "mode": str, "noise": str,
    "sigma": float, "beta": float, "seed": int, "crops_per_image": int,
    "refs_per_step": int, "window_radius": int, "temperature": float,
    "depth": int, "features": int, "use_norm": bool, "leaky_slope": float,
    "noise_features": int, "embed_features": int,
}


def _resolve_train_config(args):
    from .pipeline import TrainConfig

    values = asdict(TrainConfig())
    if args.config:
        values.update(_load_config_file(args.config, _TRAIN_FLAG_TYPES))
    for name, argtype in _TRAIN_FLAG_TYPES.items():
        given = getattr(args, name, None)
        if given is None:
            continue
        values[name] = _parse_scalar(given, bool) if argtype is bool else given
    return TrainConfig(**values)


def _cmd_synth(args) -> int:
    from .imaging import load_image, poisson_gaussian_corrupt, save_image

    _print_config("synth", {"clean": args.clean, "beta": args.beta,
                            "sigma": args.sigma, "seed": args.seed, "out": args.out})
    img = load_image(args.clean)
    out = poisson_gaussian_corrupt(img, args.beta, args.sigma, args.seed)
    save_image(out, args.out)
    with open(str(args.out) + ".meta", "w") as fh:
        fh.write(f"beta={args.beta}\nsigma={args.sigma}\nseed={args.seed}\n")
    print(f"wrote {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .networks import save_checkpoint
    from .pipeline import train

    cfg = _resolve_train_config(args)
    _print_config("train", {**asdict(cfg), "data": args.data, "out": args.out})
    ckpt = train(args.data, cfg)
    save_checkpoint(ckpt, args.out)
    print(f"wrote {args.out}")
    return 0


def _build_denoiser(args, default_engine=None):
    """Shared checkpoint/noise resolution for denoise and eval."""
    from .bayes import NoiseParams
    from .networks import load_checkpoint
    from .pipeline import DenoiseConfig, denoise

    engine = args.engine if default_engine is None else default_engine
    checkpoint = load_checkpoint(args.ckpt) if args.ckpt else None
    noise = None
    if args.sigma is not None or args.beta is not None:
        noise = NoiseParams(args.sigma or 0.0, args.beta or 0.0)
    side = getattr(args, "patch_side", None)
    if side is None:
        side = checkpoint.config["patch_side"] if checkpoint else 5
    dcfg_kwargs = {
        "stride": args.stride,
        "engine": engine,
        "variant": args.variant,
        "patch_side": side,
    }
    if getattr(args, "k", None) is not None:
        dcfg_kwargs["k"] = args.k
    if getattr(args, "window_radius", None) is not None:
        dcfg_kwargs["window_radius"] = args.window_radius
    if getattr(args, "mode", None) is not None:
        dcfg_kwargs["mode"] = args.mode
    dcfg = DenoiseConfig(**dcfg_kwargs)
    return dcfg, checkpoint, noise, (lambda im: denoise(im, dcfg, checkpoint, noise))


def _cmd_denoise(args) -> int:
    from .imaging import load_image, save_image

    if args.ckpt is None and args.sigma is None and args.beta is None:
        args.parser.error("either --ckpt or --sigma/--beta is required")
    dcfg, _, noise, denoiser = _build_denoiser(args)
    _print_config("denoise", {**asdict(dcfg), "in": args.input, "out": args.out,
                              "ckpt": args.ckpt or "",
                              "sigma": "" if noise is None else noise.sigma,
                              "beta": "" if noise is None else noise.beta})
    result = denoiser(load_image(args.input))
    save_image(result, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .imaging import load_image
    from .pipeline import (
        REFERENCE_SCORES,
        evaluate,
        read_pairs_manifest,
        write_metrics_csv,
    )

    if args.engine == "learned" and args.ckpt is None:
        args.parser.error("--engine learned requires --ckpt")
    denoiser = None
    dcfg_dict = {"engine": args.engine}
    if args.engine != "identity":
        dcfg, _, _, denoiser = _build_denoiser(args)
        dcfg_dict = asdict(dcfg)
    _print_config("eval", {**dcfg_dict, "pairs": args.pairs, "out": args.out,
                           "dataset": args.dataset or ""})
    pair_paths = read_pairs_manifest(args.pairs)
    pairs = [(load_image(n), load_image(r)) for n, r in pair_paths]
    names = [Path(n).stem for n, _ in pair_paths]
    result = evaluate(pairs, denoiser, names=names)
    write_metrics_csv(result, args.out)
    if args.dataset:
        scores = REFERENCE_SCORES.get(args.dataset.lower())
        if scores is None:
            raise ConfigError(
                f"unknown dataset {args.dataset!r}; known: {sorted(REFERENCE_SCORES)}"
            )
        for method, (ref_p, ref_s) in sorted(scores.items()):
            print(f"reference {args.dataset.lower()} {method} psnr_db={ref_p:.2f} ssim={ref_s:.4f}")
    print(args.out)
    return 0


def _parse_grid(spec: str | None):
    ks, sides, modes = [4, 8, 16], [1, 3, 5, 7], ["nonlocal", "local"]
    if not spec:
        return ks, sides, modes
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        key, _, text = part.partition("=")
        values = [v.strip() for v in text.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"empty grid values for {key!r}")
        if key == "k":
            ks = [int(v) for v in values]
        elif key == "side":
            sides = [int(v) for v in values]
        elif key == "mode":
            modes = values
        else:
            raise ConfigError(f"unknown grid key {key!r} (use k, side, mode)")
    return ks, sides, modes


def _cmd_ablate(args) -> int:
    from .bayes import NoiseParams
    from .imaging import load_image
    from .pipeline import ablate, read_pairs_manifest, write_ablation_csv

    ks, sides, modes = _parse_grid(args.grid)
    pairs_path = args.pairs or str(Path(args.data) / "pairs.txt")
    if not Path(pairs_path).exists():
        raise ConfigError(f"pairs manifest not found: {pairs_path}")
    cache = args.cache or str(Path(args.out).resolve().parent / "ckpt-cache")
    noise = None
    if args.sigma is not None or args.beta is not None:
        noise = NoiseParams(args.sigma or 0.0, args.beta or 0.0)
    base_cfg = None
    if args.engine == "learned":
        base_cfg = _resolve_train_config(args)
    _print_config("ablate", {"data": args.data, "pairs": pairs_path, "out": args.out,
                             "cache": cache, "engine": args.engine,
                             "k": ",".join(map(str, ks)),
                             "side": ",".join(map(str, sides)),
                             "mode": ",".join(modes),
                             "sigma": "" if noise is None else noise.sigma,
                             "beta": "" if noise is None else noise.beta,
                             "stride": args.stride})
    pair_paths = read_pairs_manifest(pairs_path)
    pairs = [(load_image(n), load_image(r)) for n, r in pair_paths]
    names = [Path(n).stem for n, _ in pair_paths]
    rows = ablate(
        pairs, ks, sides, modes, engine=args.engine, noise=noise,
        data_dir=args.data, base_cfg=base_cfg, cache_dir=cache,
        stride=args.stride, names=names,
    )
    write_ablation_csv(rows, args.out)
    print(args.out)
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NlbayesError as exc:
        sys.stderr.write(f"error: {exc.code}: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        sys.stderr.write(f"error: runtime: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
