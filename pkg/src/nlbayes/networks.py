"""Trainable networks: patch prior, noise level estimator, patch embedding.

Parameters live in a :class:`ParamStore`, an ordered named collection of
tensors with per-parameter Adam moments.  Checkpoints serialize the store
(and batch-norm running statistics) as 32-bit payloads behind a JSON
header, so parameter arrays are kept float32-representable in memory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FormatError, NumericsError
from .imaging import PatchGrid

CHECKPOINT_MAGIC = b"NLBC1\n"


@dataclass
class NetConfig:
    patch_side: int = 5
    k: int = 8
    depth: int = 6
    features: int = 32
    use_norm: bool = False
    leaky_slope: float = 0.1
    noise_depth: int = 5
    noise_features: int = 16
    embed_features: int = 64

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("depth must be >= 3")
        if self.features < 8:
            raise ValueError("features must be >= 8")

    @property
    def d(self) -> int:
        return self.patch_side * self.patch_side

    @property
    def n_cov(self) -> int:
        return self.d * (self.d + 1) // 2


class ParamStore:
    """Ordered map of named parameters plus Adam moments and running stats."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}
        self._stats: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def parameter(self, name: str, array) -> ad.Tensor:
        if name in self._params or name in self._stats:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = ad.parameter(np.asarray(array, dtype=np.float64))
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def stat(self, name: str, array) -> np.ndarray:
        """Register a non-trainable running-statistic array (mutated in place)."""
        if name in self._params or name in self._stats:
            raise ValueError(f"duplicate stat name {name!r}")
        arr = np.asarray(array, dtype=np.float64).copy()
        self._stats[name] = arr
        return arr

    def params(self):
        return self._params.items()

    def stats(self):
        return self._stats.items()

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._stats

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def quantize_fp32(self):
        """Round every array to its float32 value (in float64 storage).

        Keeps in-memory parameters identical to what a 32-bit checkpoint
        stores, so save/load round trips are bit-exact.
        """
        for t in self._params.values():
            t.data = t.data.astype(np.float32).astype(np.float64)
        for arr in self._stats.values():
            arr[...] = arr.astype(np.float32).astype(np.float64)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    store.step += 1
    t = store.step
    for name, p in store.params():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def _he_weights(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _conv_params(store, rng, name, cin, cout, ksize, zero=False, bias_fill=0.0):
    shape = (cout, cin, ksize, ksize)
    if zero:
        w = np.zeros(shape)
    else:
        w = _he_weights(rng, shape, cin * ksize * ksize)
    weight = store.parameter(f"{name}.w", w)
    bias = store.parameter(f"{name}.b", np.full(cout, bias_fill))
    return weight, bias


class PriorNet:
    """Regresses Gaussian prior parameters from a stack of neighbor patches.

    Input is (batch, k, side, side): the k similar patches concatenated as
    channels.  A conv trunk with a skip connection from the first conv to
    the last feeds two tails; each tail average-pools the side x side map
    to 1x1 and applies a 1x1 conv, yielding the d mean values and the
    d*(d+1)/2 covariance factor coefficients.  Zero-initialized tails make
    the network start at a neutral prior.
    """

    def __init__(self, cfg: NetConfig, store: ParamStore, rng: np.random.Generator):
        self.cfg = cfg
        self.store = store
        self.convs = []
        cin = cfg.k
        for i in range(cfg.depth):
            self.convs.append(_conv_params(store, rng, f"prior.conv{i}", cin, cfg.features, 3))
            cin = cfg.features
        self.bn = []
        if cfg.use_norm:
            for i in range(1, cfg.depth - 1):
                gamma = store.parameter(f"prior.bn{i}.gamma", np.ones(cfg.features))
                beta = store.parameter(f"prior.bn{i}.beta", np.zeros(cfg.features))
                rmean = store.stat(f"prior.bn{i}.mean", np.zeros(cfg.features))
                rvar = store.stat(f"prior.bn{i}.var", np.ones(cfg.features))
                self.bn.append((gamma, beta, rmean, rvar))
        self.mean_tail = _conv_params(store, rng, "prior.mean", cfg.features, cfg.d, 1, zero=True)
        self.cov_tail = _conv_params(store, rng, "prior.cov", cfg.features, cfg.n_cov, 1, zero=True)

    def forward(self, stack: np.ndarray, train: bool = False):
        """Returns (mean, cov_raw) tensors of shape (batch, d) and (batch, n_cov)."""
        cfg = self.cfg
        if stack.ndim != 4 or stack.shape[1] != cfg.k or stack.shape[2] != cfg.patch_side:
            raise ValueError(
                f"expected (batch, {cfg.k}, {cfg.patch_side}, {cfg.patch_side}) stack, "
                f"got {stack.shape}"
            )
        x = ad.tensor(stack)
        w0, b0 = self.convs[0]
        skip = ad.conv2d(x, w0, b0, pad=1)
        h = ad.leaky_relu(skip, cfg.leaky_slope)
        for i in range(1, cfg.depth - 1):
            w, b = self.convs[i]
            h = ad.conv2d(h, w, b, pad=1)
            if cfg.use_norm:
                gamma, beta, rmean, rvar = self.bn[i - 1]
                h = ad.batch_norm2d(h, gamma, beta, rmean, rvar, train)
            h = ad.leaky_relu(h, cfg.leaky_slope)
        w_last, b_last = self.convs[-1]
        trunk = ad.conv2d(h, w_last, b_last, pad=1) + skip
        pooled = ad.avg_pool2d(trunk, cfg.patch_side)
        batch = stack.shape[0]
        mean = ad.reshape(ad.conv2d(pooled, *self.mean_tail), (batch, cfg.d))
        cov_raw = ad.reshape(ad.conv2d(pooled, *self.cov_tail), (batch, cfg.n_cov))
        return mean, cov_raw


class NoiseNet:
    """Estimates noise parameters from a noisy crop.

    A small conv trunk feeds two heads: a global-average head for the
    image-wide sigma and a tile-pooled head for a per-patch beta map (tiles
    are side x side, so the map aligns with a stride = side patch grid).
    Head outputs pass through softplus; head biases start at -4 so the
    initial estimates are near zero and training has to raise them.
    """

    HEAD_BIAS = -4.0

    def __init__(self, cfg: NetConfig, store: ParamStore, rng: np.random.Generator):
        self.cfg = cfg
        self.store = store
        self.convs = []
        cin = 1
        for i in range(cfg.noise_depth):
            self.convs.append(
                _conv_params(store, rng, f"noise.conv{i}", cin, cfg.noise_features, 3)
            )
            cin = cfg.noise_features
        self.sigma_head = _conv_params(
            store, rng, "noise.sigma", cfg.noise_features, 1, 1, zero=True,
            bias_fill=self.HEAD_BIAS,
        )
        self.beta_head = _conv_params(
            store, rng, "noise.beta", cfg.noise_features, 1, 1, zero=True,
            bias_fill=self.HEAD_BIAS,
        )

    def forward(self, crops: np.ndarray):
        """Returns (sigma, beta_flat, tile_shape) for a (batch, 1, h, w) input.

        ``sigma`` is a (batch,) tensor, ``beta_flat`` a (batch * th * tw,)
        tensor of per-tile values; the input is cropped to tile-divisible
        dimensions first.
        """
        cfg = self.cfg
        side = cfg.patch_side
        batch, _, height, width = crops.shape
        th, tw = height // side, width // side
        if th < 1 or tw < 1:
            raise ValueError("crop smaller than one tile")
        x = ad.tensor(np.ascontiguousarray(crops[:, :, : th * side, : tw * side]))
        h = x
        for w, b in self.convs:
            h = ad.leaky_relu(ad.conv2d(h, w, b, pad=1), cfg.leaky_slope)
        sig_map = ad.conv2d(h, *self.sigma_head)
        sigma = ad.softplus(ad.reshape(ad.mean_over(sig_map, (1, 2, 3)), (batch,)))
        beta_map = ad.avg_pool2d(ad.conv2d(h, *self.beta_head), side)
        beta_flat = ad.softplus(ad.reshape(beta_map, (batch * th * tw,)))
        return sigma, beta_flat, (th, tw)


class EmbedNet:
    """Three 3x3 convolutions producing similarity-embedding feature maps."""

    def __init__(self, cfg: NetConfig, store: ParamStore, rng: np.random.Generator):
        self.cfg = cfg
        feats = cfg.embed_features
        self.convs = [
            _conv_params(store, rng, "embed.conv0", 1, feats, 3),
            _conv_params(store, rng, "embed.conv1", feats, feats, 3),
            _conv_params(store, rng, "embed.conv2", feats, feats, 3),
        ]

    def feature_map(self, plane: np.ndarray) -> np.ndarray:
        x = ad.tensor(plane[None, None, :, :])
        h = ad.leaky_relu(ad.conv2d(x, *self.convs[0], pad=1), self.cfg.leaky_slope)
        h = ad.leaky_relu(ad.conv2d(h, *self.convs[1], pad=1), self.cfg.leaky_slope)
        h = ad.conv2d(h, *self.convs[2], pad=1)
        return h.data[0]  # (features, height, width)


def embed_anchors(plane: np.ndarray, grid: PatchGrid, embed: EmbedNet) -> np.ndarray:
    """Per-anchor embedding vectors: feature-map windows at the grid anchors."""
    fmap = embed.feature_map(np.asarray(plane, dtype=np.float64))
    side = grid.side
    n = len(grid)
    feats = fmap.shape[0]
    out = np.empty((n, feats * side * side))
    for i in range(n):
        r, c = grid.anchors[i]
        out[i] = fmap[:, r : r + side, c : c + side].ravel()
    return out


@dataclass
class Checkpoint:
    """Everything needed to resume inference: config dict, store, step count."""

    config: dict
    store: ParamStore

    @property
    def step(self) -> int:
        return self.store.step


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic, a single-line JSON header, then float32 payloads."""
    tensors = []
    arrays = []
    for name, t in ckpt.store.params():
        tensors.append({"name": name, "shape": list(t.data.shape), "kind": "param"})
        arrays.append(t.data)
    for name, arr in ckpt.store.stats():
        tensors.append({"name": name, "shape": list(arr.shape), "kind": "stat"})
        arrays.append(arr)
    header = {
        "format": 1,
        "config": ckpt.config,
        "step": ckpt.store.step,
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for arr in arrays:
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint file: {path}")
    end = buf.find(b"\n", len(CHECKPOINT_MAGIC))
    if end < 0:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(buf[len(CHECKPOINT_MAGIC) : end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("bad checkpoint header") from exc
    store = ParamStore()
    offset = end + 1
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        chunk = buf[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError("payload mismatch in checkpoint")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        if not np.isfinite(arr).all():
            raise NumericsError(f"non-finite values in checkpoint tensor {entry['name']}")
        if entry["kind"] == "param":
            store.parameter(entry["name"], arr)
        else:
            store.stat(entry["name"], arr)
        offset += nbytes
    if offset != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    store.step = int(header.get("step", 0))
    return Checkpoint(header["config"], store)


def rebind_networks(ckpt_or_cfg, rng: np.random.Generator | None = None):
    """Build network objects over a store.

    Given a config dict (fresh training) the store is initialized from
    ``rng``; given a :class:`Checkpoint` the loaded arrays are re-bound to
    freshly built networks with matching names and shapes.
    """
    if isinstance(ckpt_or_cfg, Checkpoint):
        config = ckpt_or_cfg.config
        loaded = ckpt_or_cfg.store
    else:
        config = ckpt_or_cfg
        loaded = None
    net_cfg = NetConfig(
        patch_side=config["patch_side"],
        k=config["k"],
        depth=config["depth"],
        features=config["features"],
        use_norm=config["use_norm"],
        leaky_slope=config["leaky_slope"],
        noise_features=config.get("noise_features", 16),
        embed_features=config.get("embed_features", 64),
    )
    store = ParamStore()
    build_rng = rng if rng is not None else np.random.default_rng(config.get("seed", 0))
    prior = PriorNet(net_cfg, store, build_rng)
    noise = NoiseNet(net_cfg, store, build_rng) if config.get("noise") == "blind" else None
    embed = (
        EmbedNet(net_cfg, store, build_rng)
        if config.get("mode") == "nonlocal-embedding"
        else None
    )
    if loaded is not None:
        for name, t in store.params():
            if name not in loaded._params:
                raise FormatError(f"checkpoint missing parameter {name}")
            src = loaded._params[name].data
            if src.shape != t.data.shape:
                raise FormatError(f"checkpoint shape mismatch for {name}")
            t.data = src.copy()
        for name, arr in store.stats():
            if name not in loaded._stats:
                raise FormatError(f"checkpoint missing stat {name}")
            arr[...] = loaded._stats[name]
        store.step = loaded.step
    return store, net_cfg, prior, noise, embed
