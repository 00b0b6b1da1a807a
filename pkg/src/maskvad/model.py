"""Transformer autoencoder over patch tokens with a one-layer linear decoder.

Pure numpy, double precision, with an explicit backward pass so training
needs no autodiff framework and gradients can be checked against finite
differences. The encoder is a standard pre-norm ViT: patchify -> linear
embed -> (optional mask-token substitution) -> add learned positional
embeddings -> transformer blocks -> final layer norm. The decoder maps
each token linearly back to its patch's pixels.
"""

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, ndtr, ndtri

from .errors import ConfigError, NumericError, ShapeError
from .masking import PatchGrid, PatchMask

LN_EPS = 1e-6
_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

PRESETS = {
    "vit-b": dict(embed_dim=768, depth=12, heads=12, mlp_ratio=4.0),
    "tiny": dict(embed_dim=64, depth=2, heads=4, mlp_ratio=4.0),
}

CHECKPOINT_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (64, 64)
    patch_size: int = 8
    in_channels: int = 4
    out_channels: int = 1
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image size {h}x{w} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if min(self.in_channels, self.out_channels, self.depth) < 1:
            raise ConfigError("in_channels, out_channels and depth must be >= 1")

    @classmethod
    def from_preset(cls, name, image_size=(64, 64), patch_size=8,
                    in_channels=4, out_channels=1) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}, choose from {sorted(PRESETS)}")
        return cls(image_size=tuple(image_size), patch_size=patch_size,
                   in_channels=in_channels, out_channels=out_channels, **PRESETS[name])

    @property
    def grid(self) -> PatchGrid:
        h, w = self.image_size
        return PatchGrid.for_image(h, w, self.patch_size)

    @property
    def num_tokens(self) -> int:
        return self.grid.num_patches

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def out_patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.out_channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size), "patch_size": self.patch_size,
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "embed_dim": self.embed_dim, "depth": self.depth,
            "heads": self.heads, "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class EncodedFeatures:
    """Encoder output: one d-vector per spatial patch token."""

    tokens: np.ndarray  # (num_tokens, embed_dim)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict  # name -> np.ndarray, float64

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def param_shapes(config: ModelConfig) -> dict:
    """Stable dotted-name -> shape map defining the parameter set."""
    d, hd = config.embed_dim, config.hidden_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_tokens, d),
        "mask_token": (d,),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.proj.weight"] = (d, d)
        shapes[p + "attn.proj.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, hd)
        shapes[p + "mlp.fc1.bias"] = (hd,)
        shapes[p + "mlp.fc2.weight"] = (hd, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["decoder.weight"] = (d, config.out_patch_dim)
    shapes["decoder.bias"] = (config.out_patch_dim,)
    return shapes


def _trunc_normal(rng, shape, std=0.02, bound=2.0):
    # inverse-CDF sampling of a +-bound*std truncated normal
    lo, hi = ndtr(-bound), ndtr(bound)
    return ndtri(rng.uniform(lo, hi, size=shape)) * std


def init_params(config: ModelConfig, seed: int, pretrained: str | None = None) -> ModelParams:
    """Deterministic parameter initialization, or a checkpoint load.

    Weights use a truncated normal (std 0.02); biases start at zero and
    layer-norm scales at one. With ``pretrained`` given, tensors are read
    from the checkpoint and must match this config's names and shapes.
    """
    if pretrained is not None:
        params, _, _ = load_checkpoint(pretrained)
        _validate_tensors(config, params.tensors)
        return ModelParams(config, params.tensors)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif "norm" in name and name.endswith(".weight") and len(shape) == 1:
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = _trunc_normal(rng, shape)
    return ModelParams(config, tensors)


def _validate_tensors(config: ModelConfig, tensors: dict):
    expected = param_shapes(config)
    problems = []
    for name, shape in expected.items():
        if name not in tensors:
            problems.append(f"missing tensor {name} (expected shape {shape})")
        elif tensors[name].shape != shape:
            problems.append(
                f"tensor {name}: expected shape {shape}, got {tensors[name].shape}"
            )
    for name in tensors:
        if name not in expected:
            problems.append(f"unexpected tensor {name}")
    if problems:
        raise ConfigError("checkpoint does not match model config:\n  " + "\n  ".join(problems))


# ---------------------------------------------------------------------------
# patch <-> image layout

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., rows*cols, patch_size**2 * C), row-major patches."""
    *lead, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"cannot patchify {h}x{w} with patch size {p}")
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, patch_size: int, image_size, channels: int) -> np.ndarray:
    """Inverse of patchify."""
    *lead, n, dim = tokens.shape
    h, w = image_size
    p = patch_size
    if n != (h // p) * (w // p) or dim != p * p * channels:
        raise ShapeError(
            f"cannot fold {n}x{dim} tokens into {h}x{w}x{channels} with patch {p}"
        )
    x = tokens.reshape(*lead, h // p, w // p, p, p, channels)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h, w, channels)


# ---------------------------------------------------------------------------
# layer primitives (forward returns a cache consumed by the backward)

def _layer_norm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)

def _layer_norm_bwd(dy, g, cache):
    xhat, inv = cache
    lead = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(lead)
    db = dy.sum(lead)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db

def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))

def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI

def _softmax_last(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)

def _linear_bwd(dy, x, w):
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    return dx, dw, db


def _attention_fwd(x, t, prefix, heads):
    b, n, d = x.shape
    dh = d // heads
    qkv = x @ t[prefix + "qkv.weight"] + t[prefix + "qkv.bias"]
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = dh ** -0.5
    attn = _softmax_last((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = o @ t[prefix + "proj.weight"] + t[prefix + "proj.bias"]
    return out, (x, q, k, v, attn, o)

def _attention_bwd(dout, t, prefix, heads, cache):
    x, q, k, v, attn, o = cache
    b, n, d = x.shape
    dh = d // heads
    scale = dh ** -0.5
    do, dw_proj, db_proj = _linear_bwd(dout, o, t[prefix + "proj.weight"])
    do = do.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - (dattn * attn).sum(-1, keepdims=True))
    ds *= scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, n, 3 * d)
    dx, dw_qkv, db_qkv = _linear_bwd(dqkv, x, t[prefix + "qkv.weight"])
    grads = {prefix + "qkv.weight": dw_qkv, prefix + "qkv.bias": db_qkv,
             prefix + "proj.weight": dw_proj, prefix + "proj.bias": db_proj}
    return dx, grads


def _block_fwd(h, t, prefix, heads):
    n1, c_ln1 = _layer_norm_fwd(h, t[prefix + "norm1.weight"], t[prefix + "norm1.bias"])
    att, c_att = _attention_fwd(n1, t, prefix + "attn.", heads)
    h1 = h + att
    n2, c_ln2 = _layer_norm_fwd(h1, t[prefix + "norm2.weight"], t[prefix + "norm2.bias"])
    u = n2 @ t[prefix + "mlp.fc1.weight"] + t[prefix + "mlp.fc1.bias"]
    g = _gelu(u)
    mlp = g @ t[prefix + "mlp.fc2.weight"] + t[prefix + "mlp.fc2.bias"]
    h2 = h1 + mlp
    return h2, (c_ln1, c_att, c_ln2, n2, u, g)

def _block_bwd(dh2, t, prefix, heads, cache):
    c_ln1, c_att, c_ln2, n2, u, g = cache
    grads = {}
    dg, dw_fc2, db_fc2 = _linear_bwd(dh2, g, t[prefix + "mlp.fc2.weight"])
    du = dg * _gelu_grad(u)
    dn2, dw_fc1, db_fc1 = _linear_bwd(du, n2, t[prefix + "mlp.fc1.weight"])
    dh1, dg2, db2 = _layer_norm_bwd(dn2, t[prefix + "norm2.weight"], c_ln2)
    dh1 = dh1 + dh2
    datt, att_grads = _attention_bwd(dh1, t, prefix + "attn.", heads, c_att)
    dh, dg1, db1 = _layer_norm_bwd(datt, t[prefix + "norm1.weight"], c_ln1)
    dh = dh + dh1
    grads.update(att_grads)
    grads[prefix + "mlp.fc1.weight"] = dw_fc1
    grads[prefix + "mlp.fc1.bias"] = db_fc1
    grads[prefix + "mlp.fc2.weight"] = dw_fc2
    grads[prefix + "mlp.fc2.bias"] = db_fc2
    grads[prefix + "norm1.weight"] = dg1
    grads[prefix + "norm1.bias"] = db1
    grads[prefix + "norm2.weight"] = dg2
    grads[prefix + "norm2.bias"] = db2
    return dh, grads


# ---------------------------------------------------------------------------
# full forward / backward

def _mask_matrix(masks, config: ModelConfig, batch: int):
    """Normalize the mask argument to a (B, N) bool array, or None."""
    if masks is None:
        return None
    if isinstance(masks, PatchMask):
        masks = [masks] * batch
    if len(masks) != batch:
        raise ShapeError(f"{len(masks)} masks for a batch of {batch}")
    rows = []
    any_masked = False
    for m in masks:
        if m is None:
            rows.append(np.zeros(config.num_tokens, dtype=bool))
            continue
        if m.grid.patch_size != config.patch_size or m.grid.num_patches != config.num_tokens:
            raise ShapeError(
                f"mask grid {m.grid.rows}x{m.grid.cols} (patch {m.grid.patch_size}) "
                f"does not match model grid (patch {config.patch_size}, "
                f"{config.num_tokens} tokens)"
            )
        rows.append(m.masked)
        any_masked = any_masked or bool(m.masked.any())
    if not any_masked:
        return None  # empty masks are an exact no-op
    return np.stack(rows)


def forward_batch(params: ModelParams, x: np.ndarray, masks=None, with_cache: bool = False):
    """Run the autoencoder on a batch.

    x: (B, H, W, in_channels) float array. masks: None, one PatchMask for
    the whole batch, or a per-sample list (None entries allowed).
    Returns (pred, feats) and additionally a cache when requested.
    """
    cfg = params.config
    t = params.tensors
    h_img, w_img = cfg.image_size
    if x.ndim != 4 or x.shape[1:] != (h_img, w_img, cfg.in_channels):
        raise ShapeError(
            f"expected input (B, {h_img}, {w_img}, {cfg.in_channels}), got {x.shape}"
        )
    b = x.shape[0]
    mask_mat = _mask_matrix(masks, cfg, b)

    patches = patchify(x, cfg.patch_size)
    emb = patches @ t["patch_embed.weight"] + t["patch_embed.bias"]
    if mask_mat is not None:
        emb = np.where(mask_mat[:, :, None], t["mask_token"], emb)
    h = emb + t["pos_embed"]

    block_caches = []
    for i in range(cfg.depth):
        h, cache = _block_fwd(h, t, f"blocks.{i}.", cfg.heads)
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activations after block {i}")
        block_caches.append(cache)
    feats, c_ln = _layer_norm_fwd(h, t["norm.weight"], t["norm.bias"])

    pred_patches = feats @ t["decoder.weight"] + t["decoder.bias"]
    pred = unpatchify(pred_patches, cfg.patch_size, cfg.image_size, cfg.out_channels)

    if not with_cache:
        return pred, feats
    cache = {"patches": patches, "mask_mat": mask_mat,
             "blocks": block_caches, "ln": c_ln, "feats": feats}
    return pred, feats, cache


def backward_batch(params: ModelParams, cache: dict, d_pred: np.ndarray,
                   d_feats: np.ndarray | None = None) -> dict:
    """Parameter gradients given output cotangents d_pred and (optionally)
    a direct cotangent on the encoder features."""
    cfg = params.config
    t = params.tensors
    grads = {}

    d_pred_patches = patchify(d_pred, cfg.patch_size)
    dfeats, dw_dec, db_dec = _linear_bwd(d_pred_patches, cache["feats"], t["decoder.weight"])
    grads["decoder.weight"] = dw_dec
    grads["decoder.bias"] = db_dec
    if d_feats is not None:
        dfeats = dfeats + d_feats

    dh, dg, db = _layer_norm_bwd(dfeats, t["norm.weight"], cache["ln"])
    grads["norm.weight"] = dg
    grads["norm.bias"] = db

    for i in reversed(range(cfg.depth)):
        dh, block_grads = _block_bwd(dh, t, f"blocks.{i}.", cfg.heads, cache["blocks"][i])
        grads.update(block_grads)

    grads["pos_embed"] = dh.sum(0)
    mask_mat = cache["mask_mat"]
    if mask_mat is None:
        demb = dh
        grads["mask_token"] = np.zeros_like(t["mask_token"])
    else:
        grads["mask_token"] = dh[mask_mat].sum(0)
        demb = np.where(mask_mat[:, :, None], 0.0, dh)
    _, dw_pe, db_pe = _linear_bwd(demb, cache["patches"], t["patch_embed.weight"])
    grads["patch_embed.weight"] = dw_pe
    grads["patch_embed.bias"] = db_pe

    # parameters that received no gradient (possible for mask_token only)
    for name in params.tensors:
        if name not in grads:
            grads[name] = np.zeros_like(params.tensors[name])
    return grads


def _as_input_array(window):
    x = window.inputs if hasattr(window, "inputs") else np.asarray(window, dtype=float)
    return np.asarray(x, dtype=float)


def encode(params: ModelParams, window, mask: PatchMask | None = None) -> EncodedFeatures:
    """Encoder features for one window; with a mask this is the pseudo branch."""
    x = _as_input_array(window)
    _, feats = forward_batch(params, x[None], masks=None if mask is None else [mask])
    return EncodedFeatures(tokens=feats[0])


def decode(params: ModelParams, feats) -> np.ndarray:
    """Map encoder features to the predicted frame."""
    tokens = feats.tokens if isinstance(feats, EncodedFeatures) else np.asarray(feats)
    cfg = params.config
    if tokens.shape[-2:] != (cfg.num_tokens, cfg.embed_dim):
        raise ShapeError(
            f"features {tokens.shape} do not match {cfg.num_tokens} tokens "
            f"of dim {cfg.embed_dim}"
        )
    pred_patches = tokens @ params.tensors["decoder.weight"] + params.tensors["decoder.bias"]
    return unpatchify(pred_patches, cfg.patch_size, cfg.image_size, cfg.out_channels)


def forward(params: ModelParams, window, mask: PatchMask | None = None):
    """Predicted frame and encoder features for one window."""
    x = _as_input_array(window)
    pred, feats = forward_batch(params, x[None], masks=None if mask is None else [mask])
    return pred[0], EncodedFeatures(tokens=feats[0])


# ---------------------------------------------------------------------------
# checkpoint archive: zip of npy tensors plus a JSON metadata record

def _write_npy(zf: zipfile.ZipFile, name: str, arr: np.ndarray):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, buf.getvalue())


def save_checkpoint(path, params: ModelParams, step: int = 0, epoch: int = 0,
                    moments: dict | None = None, extra: dict | None = None):
    """Write a deterministic checkpoint archive (fixed timestamps, sorted keys)."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "step": int(step),
        "epoch": int(epoch),
    }
    if extra:
        meta["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(params.tensors):
            _write_npy(zf, f"params/{name}.npy", params.tensors[name])
        if moments is not None:
            for group in ("m", "v"):
                for name in sorted(moments[group]):
                    _write_npy(zf, f"adam_{group}/{name}.npy", moments[group][name])


def load_checkpoint(path):
    """Read a checkpoint archive -> (ModelParams, meta dict, moments or None)."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format version {meta.get('format_version')!r}"
            )
        tensors, m, v = {}, {}, {}
        for entry in zf.namelist():
            if not entry.endswith(".npy"):
                continue
            arr = np.lib.format.read_array(io.BytesIO(zf.read(entry)), allow_pickle=False)
            if entry.startswith("params/"):
                tensors[entry[len("params/"):-4]] = arr
            elif entry.startswith("adam_m/"):
                m[entry[len("adam_m/"):-4]] = arr
            elif entry.startswith("adam_v/"):
                v[entry[len("adam_v/"):-4]] = arr
    config = ModelConfig.from_dict(meta["model_config"])
    _validate_tensors(config, tensors)
    moments = {"m": m, "v": v} if m else None
    return ModelParams(config, tensors), meta, moments
