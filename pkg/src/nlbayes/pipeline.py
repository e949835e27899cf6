"""Self-supervised training, dense inference, evaluation, and ablation sweeps.

Training only ever sees noisy images: each step samples crops, gathers
similar patches for a set of reference patches, and minimizes the negative
log likelihood of each observed reference patch under the predicted prior
plus the heteroscedastic noise model.  Inference applies the closed-form
posterior-mode estimate patch by patch and averages the densely overlapped
results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bayes import GaussianPrior, Likelihood, NoiseParams, cholesky_assemble, likelihood_from_prior, map_estimate, mle_prior
from .errors import CheckpointMismatchError, ConfigError, NumericsError
from .imaging import Image, extract_patches, load_image, psnr, reconstruct_dense, ssim
from .networks import Checkpoint, adam_step, embed_anchors, rebind_networks, save_checkpoint
from .search import (
    MODE_LOCAL_ADJACENT,
    MODE_NONLOCAL_EMBEDDING,
    MODE_NONLOCAL_EXACT,
    SEARCH_MODES,
    SearchConfig,
    knn_embedding,
    knn_exact,
    local_adjacent,
)

log = logging.getLogger(__name__)

VARIANT_PATCH = "NLBNN-P"
VARIANT_PIXEL = "NLBNN-S"

ENGINE_CLASSICAL = "mle-classical"
ENGINE_LEARNED = "learned"

IMAGE_SUFFIXES = (".pgm", ".nlbf")

# Published reference scores on the three confocal benchmark sets
# (PSNR dB, SSIM), printed next to user-supplied evaluations on request.
REFERENCE_SCORES = {
    "bpae": {VARIANT_PIXEL: (35.94, 0.9388), VARIANT_PATCH: (36.02, 0.9398)},
    "mouse-brain": {VARIANT_PIXEL: (37.74, 0.9611), VARIANT_PATCH: (38.12, 0.9631)},
    "zebrafish": {VARIANT_PIXEL: (32.18, 0.8986), VARIANT_PATCH: (32.48, 0.9036)},
}


@dataclass
class TrainConfig:
    crop: int = 90
    patch_side: int = 5
    k: int = 8
    epochs: int = 100
    batch: int = 4
    lr: float = 3e-4
    lr_halve_every: int = 40
    mode: str = MODE_NONLOCAL_EXACT
    noise: str = "known"  # "known" uses sigma/beta below, "blind" trains a noise net
    sigma: float = 0.0
    beta: float = 0.0
    seed: int = 0
    crops_per_image: int = 32
    refs_per_step: int = 256
    window_radius: int = 10
    temperature: float = 0.1
    depth: int = 6
    features: int = 32
    use_norm: bool = False
    leaky_slope: float = 0.1
    noise_features: int = 16
    embed_features: int = 64

    def __post_init__(self):
        if self.crop < self.patch_side * 3:
            raise ConfigError("crop must be at least 3x the patch side")
        for name in ("patch_side", "k", "epochs", "batch", "lr_halve_every",
                     "crops_per_image", "refs_per_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("lr and temperature must be positive")
        if self.mode not in SEARCH_MODES:
            raise ConfigError(f"unknown search mode {self.mode!r}")
        if self.noise not in ("known", "blind"):
            raise ConfigError(f"noise must be 'known' or 'blind', got {self.noise!r}")
        if self.sigma < 0 or self.beta < 0:
            raise ConfigError("sigma and beta must be non-negative")


@dataclass
class DenoiseConfig:
    stride: int = 1
    engine: str = ENGINE_CLASSICAL
    variant: str = VARIANT_PATCH
    patch_side: int = 5
    k: int = 8
    window_radius: int = 10
    mode: str = MODE_NONLOCAL_EXACT
    chunk: int = 512

    def __post_init__(self):
        if self.variant not in (VARIANT_PATCH, VARIANT_PIXEL):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == VARIANT_PIXEL:
            self.patch_side = 1
        if self.engine not in (ENGINE_CLASSICAL, ENGINE_LEARNED):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.stride < 1 or self.patch_side < 1 or self.k < 1 or self.chunk < 1:
            raise ConfigError("stride, patch_side, k, and chunk must be positive")
        if self.mode not in SEARCH_MODES:
            raise ConfigError(f"unknown search mode {self.mode!r}")


def list_image_files(data_dir) -> list[Path]:
    root = Path(data_dir)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {data_dir}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no .pgm or .nlbf images in {data_dir}")
    return files


def _load_planes(data_dir) -> list[np.ndarray]:
    planes = []
    for path in list_image_files(data_dir):
        img = load_image(path)
        for c in range(img.channels):
            planes.append(img.plane(c))
    return planes


def _tile_index(anchor, side, tiles_h, tiles_w) -> int:
    r, c = anchor
    tr = min((r + side // 2) // side, tiles_h - 1)
    tc = min((c + side // 2) // side, tiles_w - 1)
    return int(tr * tiles_w + tc)


class _NeighborSource:
    """Resolves the configured search mode against one extracted plane."""

    def __init__(self, plane, grid, mode, scfg, temperature=0.1,
                 embed=None, rng=None, sample=False):
        self.grid = grid
        self.mode = mode
        self.scfg = scfg
        self.temperature = temperature
        self.rng = rng
        self.sample = sample
        self.tile_grid = None
        self.embeddings = None
        if mode == MODE_LOCAL_ADJACENT:
            self.tile_grid = extract_patches(plane, grid.side, grid.side)
        elif mode == MODE_NONLOCAL_EMBEDDING:
            if embed is None:
                raise ConfigError("embedding mode needs an embedding network")
            self.embeddings = embed_anchors(plane, grid, embed)

    def __call__(self, ref: int):
        if self.mode == MODE_NONLOCAL_EXACT:
            return knn_exact(self.grid, ref, self.scfg)
        if self.mode == MODE_NONLOCAL_EMBEDDING:
            return knn_embedding(
                self.grid, ref, self.scfg, self.embeddings,
                temperature=self.temperature, rng=self.rng, sample=self.sample,
            )
        tg = self.tile_grid
        ncols = len(tg.cols)
        r, c = self.grid.anchors[ref]
        ri = int(np.searchsorted(tg.rows, r, side="right") - 1)
        ci = int(np.searchsorted(tg.cols, c, side="right") - 1)
        tref = max(ri, 0) * ncols + max(ci, 0)
        return local_adjacent(tg, tref, self.scfg)


def train(data_dir, cfg: TrainConfig) -> Checkpoint:
    """Fit the prior network (and, in blind mode, the noise network).

    Only noisy images are read; each observed patch serves as both input
    (through its neighbors) and target.  Returns an in-memory checkpoint;
    use :func:`nlbayes.networks.save_checkpoint` to persist it.
    """
    planes = _load_planes(data_dir)
    side = cfg.patch_side
    d = side * side
    crop = min([cfg.crop] + [min(p.shape) for p in planes])
    if crop < side * 3:
        raise ConfigError("images too small for the configured patch side")
    rng = np.random.default_rng(cfg.seed)
    store, net_cfg, prior, noise_net, embed_net = rebind_networks(asdict(cfg), rng)
    scfg = SearchConfig(k=cfg.k, window_radius=cfg.window_radius, mode=cfg.mode,
                        exclude_self=True)
    blind = cfg.noise == "blind"
    tiles_h = tiles_w = crop // side

    for epoch in range(cfg.epochs):
        lr_now = cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)
        tasks = []
        for pi, plane in enumerate(planes):
            h, w = plane.shape
            for _ in range(cfg.crops_per_image):
                r = int(rng.integers(0, h - crop + 1))
                c = int(rng.integers(0, w - crop + 1))
                tasks.append((pi, r, c))
        order = rng.permutation(len(tasks))
        epoch_losses = []
        for start in range(0, len(tasks), cfg.batch):
            group = [tasks[i] for i in order[start : start + cfg.batch]]
            refs_per_crop = max(1, cfg.refs_per_step // len(group))
            stacks, centers, targets = [], [], []
            sig_idx, beta_idx = [], []
            crop_stack = np.empty((len(group), 1, crop, crop))
            for bi, (pi, r, c) in enumerate(group):
                window = planes[pi][r : r + crop, c : c + crop]
                crop_stack[bi, 0] = window
                grid = extract_patches(window, side, 1)
                source = _NeighborSource(
                    window, grid, cfg.mode, scfg, cfg.temperature,
                    embed=embed_net, rng=rng, sample=True,
                )
                n_refs = min(refs_per_crop, len(grid))
                for ref in rng.choice(len(grid), size=n_refs, replace=False):
                    ns = source(int(ref))
                    stack = ns.neighbor_patches.reshape(cfg.k, side, side)
                    mu = stack.mean()
                    stacks.append(stack - mu)
                    centers.append(mu)
                    targets.append(grid.patches[ref])
                    if blind:
                        sig_idx.append(bi)
                        beta_idx.append(
                            bi * tiles_h * tiles_w
                            + _tile_index(grid.anchors[ref], side, tiles_h, tiles_w)
                        )
            x = np.stack(stacks)
            y = np.stack(targets)
            mu_arr = np.asarray(centers).reshape(-1, 1)

            mean_t, raw_t = prior.forward(x, train=True)
            mean_full = mean_t + ad.tensor(mu_arr)
            cov_x = ad.gram(ad.tril_cholesky_factor(raw_t, d))
            if blind:
                sig_t, beta_t, _ = noise_net.forward(crop_stack)
                sig_ref = ad.reshape(ad.take_rows(sig_t, sig_idx), (len(x), 1))
                beta_ref = ad.reshape(ad.take_rows(beta_t, beta_idx), (len(x), 1))
                var = ad.relu(mean_full) * (beta_ref * beta_ref) + sig_ref * sig_ref
            else:
                var = ad.relu(mean_full) * (cfg.beta ** 2) + ad.tensor(
                    np.full((len(x), d), cfg.sigma ** 2)
                )
            cov_y = ad.add_diagonal(cov_x, var)
            loss = ad.mean_all(ad.gaussian_nll(mean_full, cov_y, y))
            if blind:
                loss = loss + (-0.1) * (ad.mean_all(sig_t) + ad.mean_all(beta_t))

            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NumericsError(
                    f"non-finite loss {loss_val} at step {store.step + 1}"
                )
            store.zero_grad()
            loss.backward()
            adam_step(store, lr_now)
            store.quantize_fp32()
            epoch_losses.append(loss_val)
        log.info("epoch %d/%d lr %.2e loss %.5f", epoch + 1, cfg.epochs, lr_now,
                 float(np.mean(epoch_losses)))
    return Checkpoint(asdict(cfg), store)


def _resolve_inference(dcfg: DenoiseConfig, checkpoint, noise):
    """Reconcile the requested setup with a checkpoint, if any.

    Returns (side, k, window, mode, temperature, networks) where networks is
    (prior, noise_net, embed_net) or (None, None, None) for the classical
    engine without a checkpoint.
    """
    if dcfg.engine == ENGINE_LEARNED and checkpoint is None:
        raise ConfigError("learned engine requires a checkpoint")
    if checkpoint is None:
        return dcfg.patch_side, dcfg.k, dcfg.window_radius, dcfg.mode, 0.1, (None, None, None)
    ck = checkpoint.config
    if ck["patch_side"] != dcfg.patch_side:
        raise CheckpointMismatchError(
            f"checkpoint patch side {ck['patch_side']} does not match requested "
            f"{dcfg.patch_side} (variant {dcfg.variant})"
        )
    _, _, prior, noise_net, embed_net = rebind_networks(checkpoint)
    return (
        ck["patch_side"], ck["k"], ck["window_radius"], ck["mode"],
        ck.get("temperature", 0.1), (prior, noise_net, embed_net),
    )


def denoise(img: Image, dcfg: DenoiseConfig, checkpoint: Checkpoint | None = None,
            noise: NoiseParams | None = None) -> Image:
    """Denoise an image patch-wise and average the overlapped estimates.

    Channels are processed independently.  Noise parameters come from, in
    order of preference: the explicit ``noise`` argument, known values
    recorded in the checkpoint, or the checkpoint's noise network.
    """
    side, k, window, mode, temperature, nets = _resolve_inference(dcfg, checkpoint, noise)
    prior_net, noise_net, embed_net = nets
    if mode == MODE_NONLOCAL_EMBEDDING and embed_net is None:
        raise ConfigError("embedding search mode requires a checkpoint with an embedding net")
    known = None
    if noise is not None:
        known = noise
    elif checkpoint is not None and checkpoint.config["noise"] == "known":
        known = NoiseParams(checkpoint.config["sigma"], checkpoint.config["beta"])
    elif noise_net is None:
        raise ConfigError("noise parameters required: pass sigma/beta or a blind checkpoint")
    scfg = SearchConfig(k=k, window_radius=window, mode=mode, exclude_self=True)
    d = side * side
    out_planes = []
    fallbacks = 0
    for c in range(img.channels):
        plane = img.plane(c)
        grid = extract_patches(plane, side, dcfg.stride)
        source = _NeighborSource(plane, grid, mode, scfg, temperature,
                                 embed=embed_net, sample=False)
        if known is not None:
            sigma_c, beta_map, tiles = known.sigma, None, None
        else:
            sig_t, beta_t, tiles = noise_net.forward(plane[None, None])
            sigma_c = float(sig_t.data[0])
            beta_map = beta_t.data.reshape(tiles)
        denoised = np.empty_like(grid.patches)
        n = len(grid)
        for lo in range(0, n, dcfg.chunk):
            hi = min(lo + dcfg.chunk, n)
            neighbor_sets = [source(ref) for ref in range(lo, hi)]
            if dcfg.engine == ENGINE_LEARNED:
                stacks = np.empty((hi - lo, k, side, side))
                mus = np.empty(hi - lo)
                for j, ns in enumerate(neighbor_sets):
                    stack = ns.neighbor_patches.reshape(k, side, side)
                    mus[j] = stack.mean()
                    stacks[j] = stack - mus[j]
                mean_t, raw_t = prior_net.forward(stacks, train=False)
                means = mean_t.data + mus[:, None]
                raws = raw_t.data
            for j, ns in enumerate(neighbor_sets):
                ref = lo + j
                if dcfg.engine == ENGINE_LEARNED:
                    prior = GaussianPrior(means[j], cholesky_assemble(raws[j]))
                else:
                    prior = mle_prior(ns)
                if known is not None:
                    np_ref = NoiseParams(sigma_c, known.beta)
                else:
                    tr = min((grid.anchors[ref][0] + side // 2) // side, tiles[0] - 1)
                    tc = min((grid.anchors[ref][1] + side // 2) // side, tiles[1] - 1)
                    np_ref = NoiseParams(sigma_c, float(beta_map[tr, tc]))
                lik = likelihood_from_prior(prior, np_ref)
                estimate, fell_back = map_estimate(prior, lik, grid.patches[ref])
                fallbacks += int(fell_back)
                denoised[ref] = estimate
        out_planes.append(reconstruct_dense(grid, denoised).plane(0))
    if fallbacks:
        log.warning("map_estimate fell back to the prior mean on %d patches", fallbacks)
    return Image(np.stack(out_planes))


def evaluate(pairs, denoiser=None, names=None) -> dict:
    """Per-image quality metrics plus mean and standard error rows.

    ``pairs`` is a list of (noisy, reference) images; ``denoiser`` maps an
    image to its denoised estimate (identity when omitted).  The standard
    error of the mean uses the sample standard deviation and is reported
    as 0.0 for a single image.
    """
    rows = []
    for i, (noisy, reference) in enumerate(pairs):
        if noisy.data.shape != reference.data.shape:
            raise ValueError(f"pair {i}: dimension mismatch")
        output = denoiser(noisy) if denoiser is not None else noisy
        name = names[i] if names is not None else f"pair{i}"
        rows.append((name, psnr(output, reference), ssim(output, reference)))
    pvals = np.asarray([r[1] for r in rows])
    svals = np.asarray([r[2] for r in rows])
    n = len(rows)

    def sem(vals):
        return float(np.std(vals, ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    return {
        "rows": rows,
        "mean": (float(np.mean(pvals)), float(np.mean(svals))),
        "sem": (sem(pvals), sem(svals)),
    }


def _fmt_metric(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def write_metrics_csv(result: dict, path) -> None:
    """CSV with header image,psnr_db,ssim and summary rows mean,... sem,..."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "psnr_db", "ssim"])
        for name, p, s in result["rows"]:
            writer.writerow([name, _fmt_metric(p), _fmt_metric(s)])
        writer.writerow(["mean", _fmt_metric(result["mean"][0]), _fmt_metric(result["mean"][1])])
        writer.writerow(["sem", _fmt_metric(result["sem"][0]), _fmt_metric(result["sem"][1])])


def read_pairs_manifest(path) -> list[tuple[Path, Path]]:
    """Parse a noisy_path,reference_path manifest, one pair per line.

    Relative paths resolve against the manifest's directory; blank lines
    and '#' comments are skipped.
    """
    base = Path(path).parent
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'noisy,reference'")
            pairs.append((base / parts[0], base / parts[1]))
    if not pairs:
        raise ConfigError(f"no pairs listed in {path}")
    return pairs


ABLATION_MODES = {"nonlocal": MODE_NONLOCAL_EXACT, "local": MODE_LOCAL_ADJACENT}


def _config_hash(cfg: TrainConfig, data_files) -> str:
    payload = {"cfg": asdict(cfg), "data": [Path(f).name for f in data_files]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def ablate(
    pairs,
    ks,
    sides,
    modes,
    engine: str = ENGINE_CLASSICAL,
    noise: NoiseParams | None = None,
    data_dir=None,
    base_cfg: TrainConfig | None = None,
    cache_dir=None,
    stride: int = 1,
    names=None,
) -> list[tuple]:
    """Run one evaluation per (k, patch side, mode) grid cell.

    ``pairs`` are (noisy, reference) images.  The classical engine needs
    ``noise``; the learned engine trains one model per cell from
    ``data_dir`` / ``base_cfg``, caching checkpoints under ``cache_dir``
    keyed by a hash of the cell configuration.
    """
    rows = []
    for mode_name in modes:
        if mode_name not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {mode_name!r} (use nonlocal/local)")
    for k in ks:
        for side in sides:
            for mode_name in modes:
                smode = ABLATION_MODES[mode_name]
                variant = VARIANT_PIXEL if side == 1 else VARIANT_PATCH
                if engine == ENGINE_CLASSICAL:
                    if noise is None:
                        raise ConfigError("classical ablation requires noise parameters")
                    dcfg = DenoiseConfig(
                        stride=stride, engine=ENGINE_CLASSICAL, variant=variant,
                        patch_side=side, k=k, mode=smode,
                    )
                    denoiser = lambda im, d=dcfg: denoise(im, d, noise=noise)
                else:
                    if data_dir is None or base_cfg is None or cache_dir is None:
                        raise ConfigError(
                            "learned ablation requires data_dir, base_cfg, and cache_dir"
                        )
                    cell_cfg = TrainConfig(
                        **{**asdict(base_cfg), "k": k, "patch_side": side, "mode": smode}
                    )
                    cache = Path(cache_dir)
                    cache.mkdir(parents=True, exist_ok=True)
                    tag = _config_hash(cell_cfg, list_image_files(data_dir))
                    ckpt_path = cache / f"{tag}.nlbc"
                    if ckpt_path.exists():
                        from .networks import load_checkpoint

                        ckpt = load_checkpoint(ckpt_path)
                    else:
                        ckpt = train(data_dir, cell_cfg)
                        save_checkpoint(ckpt, ckpt_path)
                    dcfg = DenoiseConfig(
                        stride=stride, engine=ENGINE_LEARNED, variant=variant,
                        patch_side=side,
                    )
                    fallback_noise = (
                        NoiseParams(cell_cfg.sigma, cell_cfg.beta)
                        if cell_cfg.noise == "known" else None
                    )
                    denoiser = lambda im, d=dcfg, c=ckpt, nn=fallback_noise: denoise(
                        im, d, checkpoint=c, noise=nn
                    )
                result = evaluate(pairs, denoiser, names=names)
                rows.append((k, side, mode_name, result["mean"][0], result["mean"][1]))
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "patch_side", "mode", "psnr_db", "ssim"])
        for k, side, mode_name, p, s in rows:
            writer.writerow([k, side, mode_name, _fmt_metric(p), _fmt_metric(s)])
