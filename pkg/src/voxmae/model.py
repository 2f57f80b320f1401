"""3D masked-autoencoder vision transformer.

Parameters live in a flat ``dict`` of named numpy arrays.  The forward
functions accept either raw arrays or :class:`~voxmae.autograd.Tensor`
leaves, so the same code path serves inference and gradient computation.
Token batches have shape ``(B, N, D)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import InvalidArgument
from .volumes import NORMALIZED, Volume


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    input_dims: tuple = (256, 256, 256)
    embed_dim: int = 1024
    depth: int = 24
    heads: int = 16
    mlp_ratio: float = 4.0
    decoder_dim: int = 512
    decoder_depth: int = 8
    decoder_heads: int = 16
    mask_ratio: float = 0.75
    # positional tables need a multiple of 6; pad the remainder with zeros
    pad_posembed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if any(d % self.patch_size for d in self.input_dims):
            raise InvalidArgument(f"input dims {self.input_dims} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise InvalidArgument("embedding dims must be divisible by their head counts")
        if not self.pad_posembed and (self.embed_dim % 6 or self.decoder_dim % 6):
            raise InvalidArgument("embedding dims must be divisible by 6")
        if not 0.0 < self.mask_ratio < 1.0:
            raise InvalidArgument(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")

    @property
    def grid(self):
        return tuple(d // self.patch_size for d in self.input_dims)

    @property
    def n_tokens(self):
        return int(np.prod(self.grid))

    @property
    def patch_volume(self):
        return self.patch_size ** 3

    @property
    def n_visible(self):
        return int(round((1.0 - self.mask_ratio) * self.n_tokens))

    @property
    def mlp_hidden(self):
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def decoder_mlp_hidden(self):
        return int(self.decoder_dim * self.mlp_ratio)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if k == "input_dims" else v) for k, v in d.items()})

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration used for desk-scale runs."""
    base = dict(patch_size=8, input_dims=(32, 32, 32), embed_dim=48, depth=2, heads=4,
                mlp_ratio=2.0, decoder_dim=24, decoder_depth=1, decoder_heads=2)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# tokenisation


@dataclass
class PatchSequence:
    tokens: np.ndarray  # (n_tokens, patch_volume)
    grid: tuple
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


def patchify_array(x, p):
    """(B, X, Y, Z) -> (B, N, p**3); tokens and in-token voxels are x-fastest."""
    b, nx, ny, nz = x.shape
    gx, gy, gz = nx // p, ny // p, nz // p
    # axes after reshape: b, gx, px, gy, py, gz, pz
    t = x.reshape(b, gx, p, gy, p, gz, p)
    t = t.transpose(0, 5, 3, 1, 6, 4, 2)  # b, gz, gy, gx, pz, py, px
    return t.reshape(b, gx * gy * gz, p ** 3)


def unpatchify_array(tokens, grid, p):
    b = tokens.shape[0]
    gx, gy, gz = grid
    t = tokens.reshape(b, gz, gy, gx, p, p, p)
    t = t.transpose(0, 3, 6, 2, 5, 1, 4)  # b, gx, px, gy, py, gz, pz
    return t.reshape(b, gx * p, gy * p, gz * p)


def patchify(v: Volume, patch_size: int) -> PatchSequence:
    if any(d % patch_size for d in v.dims):
        raise InvalidArgument(f"dims {v.dims} not divisible by patch size {patch_size}")
    tokens = patchify_array(v.voxels[None], patch_size)[0]
    return PatchSequence(tokens, tuple(d // patch_size for d in v.dims), v.spacing)


def unpatchify(s: PatchSequence) -> Volume:
    n, pv = s.tokens.shape
    p = round(pv ** (1 / 3))
    if p ** 3 != pv:
        raise InvalidArgument(f"token length {pv} is not a perfect cube")
    if int(np.prod(s.grid)) != n:
        raise InvalidArgument(f"grid {s.grid} does not hold {n} tokens")
    vox = unpatchify_array(s.tokens[None], s.grid, p)[0]
    return Volume(vox, s.spacing, NORMALIZED)


# ---------------------------------------------------------------------------
# positional encoding


def _sincos_1d(dim, positions):
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(positions, omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def posembed_3d(grid, dim, pad=False) -> np.ndarray:
    """Fixed 3-D sine-cosine table of shape (n_tokens, dim), x-fastest rows.

    ``dim`` is split into three equal blocks for the x, y and z coordinate.
    With ``pad`` the trailing ``dim % 6`` columns are left at zero.
    """
    if dim % 6 and not pad:
        raise InvalidArgument(f"positional dim {dim} must be divisible by 6")
    usable = dim - dim % 6
    if usable == 0:
        raise InvalidArgument(f"positional dim {dim} too small")
    gx, gy, gz = grid
    zz, yy, xx = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    block = usable // 3
    table = np.zeros((gx * gy * gz, dim))
    for a, coord in enumerate((xx, yy, zz)):
        table[:, a * block:(a + 1) * block] = _sincos_1d(block, coord.ravel().astype(np.float64))
    return table


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskPlan:
    n_tokens: int
    n_visible: int
    shuffle: np.ndarray
    restore: np.ndarray

    @property
    def visible_index(self):
        return self.shuffle[: self.n_visible]

    @property
    def visible_flags(self):
        flags = np.zeros(self.n_tokens, dtype=bool)
        flags[self.visible_index] = True
        return flags

    @property
    def masked_flags(self):
        return ~self.visible_flags


def random_mask(n_tokens, mask_ratio, rng_seed) -> MaskPlan:
    if not 0.0 < mask_ratio < 1.0:
        raise InvalidArgument(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    if n_tokens < 2:
        raise InvalidArgument("need at least two tokens to mask")
    n_visible = int(round((1.0 - mask_ratio) * n_tokens))
    if n_visible in (0, n_tokens):
        raise InvalidArgument(f"ratio {mask_ratio} leaves {n_visible} of {n_tokens} tokens visible")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    shuffle = rng.permutation(n_tokens)
    restore = np.argsort(shuffle)
    return MaskPlan(n_tokens, n_visible, shuffle, restore)


# ---------------------------------------------------------------------------
# parameters

_ENC_BLOCK = ("norm1.weight", "norm1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight",
              "attn.k.bias", "attn.v.weight", "attn.v.bias", "attn.proj.weight", "attn.proj.bias",
              "norm2.weight", "norm2.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight",
              "mlp.fc2.bias")


def _block_shapes(dim, hidden):
    shapes = {}
    for n in ("norm1", "norm2"):
        shapes[f"{n}.weight"] = (dim,)
        shapes[f"{n}.bias"] = (dim,)
    for n in ("q", "k", "v", "proj"):
        shapes[f"attn.{n}.weight"] = (dim, dim)
        shapes[f"attn.{n}.bias"] = (dim,)
    shapes["mlp.fc1.weight"] = (dim, hidden)
    shapes["mlp.fc1.bias"] = (hidden,)
    shapes["mlp.fc2.weight"] = (hidden, dim)
    shapes["mlp.fc2.bias"] = (dim,)
    return shapes


def parameter_shapes(cfg: ModelConfig, include_decoder=True) -> dict:
    d = cfg.embed_dim
    shapes = {"patch_embed.weight": (cfg.patch_volume, d), "patch_embed.bias": (d,), "cls_token": (1, d)}
    for i in range(cfg.depth):
        for k, s in _block_shapes(d, cfg.mlp_hidden).items():
            shapes[f"blocks.{i}.{k}"] = s
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    if include_decoder:
        dd = cfg.decoder_dim
        shapes["decoder_embed.weight"] = (d, dd)
        shapes["decoder_embed.bias"] = (dd,)
        shapes["mask_token"] = (1, dd)
        for i in range(cfg.decoder_depth):
            for k, s in _block_shapes(dd, cfg.decoder_mlp_hidden).items():
                shapes[f"decoder_blocks.{i}.{k}"] = s
        shapes["decoder_norm.weight"] = (dd,)
        shapes["decoder_norm.bias"] = (dd,)
        shapes["decoder_pred.weight"] = (dd, cfg.patch_volume)
        shapes["decoder_pred.bias"] = (cfg.patch_volume,)
    return shapes


def count_parameters(cfg: ModelConfig, include_decoder=False) -> int:
    """Closed-form learnable parameter count; positional tables are fixed and excluded."""
    d, h, p = cfg.embed_dim, cfg.mlp_hidden, cfg.patch_volume

    def block(dim, hidden):
        return 4 * dim + 4 * (dim * dim + dim) + dim * hidden + hidden + hidden * dim + dim

    total = p * d + d + d + cfg.depth * block(d, h) + 2 * d
    if include_decoder:
        dd = cfg.decoder_dim
        total += d * dd + dd + dd + cfg.decoder_depth * block(dd, cfg.decoder_mlp_hidden) + 2 * dd + dd * p + p
    return total


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def xavier_uniform(rng, shape, dtype=np.float32):
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, shape).astype(dtype)


INIT_SCHEMES = ("xavier", "trunc_normal")


def init_params(cfg: ModelConfig, seed=0, include_decoder=True, dtype=np.float32, scheme="xavier") -> dict:
    """Initial parameters: zero biases, unit norm gains, truncated-normal(0.02) tokens.

    Projection matrices are Xavier-uniform by default; ``scheme="trunc_normal"``
    draws them from the same truncated normal as the tokens.
    """
    if scheme not in INIT_SCHEMES:
        raise InvalidArgument(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg, include_decoder).items():
        if "norm" in name and name.endswith(".weight"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".weight") and scheme == "xavier":
            params[name] = xavier_uniform(rng, shape, dtype=dtype)
        else:
            params[name] = trunc_normal(rng, shape, dtype=dtype)
    return params


def encoder_params(params: dict) -> dict:
    return {k: v for k, v in params.items() if not (k.startswith("decoder") or k == "mask_token")}


def cast_params(params: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward


class Trace(dict):
    """Optional capture of intermediate activations.

    Keys: ``"attn"`` (list of per-block attention weights, encoder first),
    ``"blocks"`` (encoder block outputs as tensors), ``"unshuffled"``
    (decoder input tokens after mask insertion and restore, before the
    positional add) and ``"decoder_attn"``.
    """

    def __init__(self):
        super().__init__(attn=[], blocks=[], decoder_attn=[])


def _wrap(params):
    return {k: v if isinstance(v, ag.Tensor) else ag.Tensor(v) for k, v in params.items()}


def _attention(x, p, prefix, heads, trace_list):
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        return ag.transpose(ag.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(ag.linear(x, p[prefix + "attn.q.weight"], p[prefix + "attn.q.bias"]))
    k = split(ag.linear(x, p[prefix + "attn.k.weight"], p[prefix + "attn.k.bias"]))
    v = split(ag.linear(x, p[prefix + "attn.v.weight"], p[prefix + "attn.v.bias"]))
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ag.softmax(scores, axis=-1)
    if trace_list is not None:
        trace_list.append(attn.data)
    out = ag.matmul(attn, v)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return ag.linear(out, p[prefix + "attn.proj.weight"], p[prefix + "attn.proj.bias"])


def _block(x, p, prefix, heads, trace_list=None):
    h = ag.layer_norm(x, p[prefix + "norm1.weight"], p[prefix + "norm1.bias"])
    x = ag.add(x, _attention(h, p, prefix, heads, trace_list))
    h = ag.layer_norm(x, p[prefix + "norm2.weight"], p[prefix + "norm2.bias"])
    h = ag.gelu(ag.linear(h, p[prefix + "mlp.fc1.weight"], p[prefix + "mlp.fc1.bias"]))
    return ag.add(x, ag.linear(h, p[prefix + "mlp.fc2.weight"], p[prefix + "mlp.fc2.bias"]))


@dataclass
class Latent:
    tokens: ag.Tensor  # (B, 1 + n_kept, D), class token first
    plans: list | None

    @property
    def rows(self):
        return self.tokens.data


def _as_batch(tokens):
    if isinstance(tokens, PatchSequence):
        tokens = tokens.tokens
    if isinstance(tokens, ag.Tensor):
        return tokens if tokens.data.ndim == 3 else ag.reshape(tokens, (1,) + tokens.shape)
    tokens = np.asarray(tokens)
    return ag.Tensor(tokens if tokens.ndim == 3 else tokens[None])


def encode(params, cfg: ModelConfig, tokens, plans=None, trace: Trace | None = None) -> Latent:
    """Embed visible tokens, prepend the class token and run the encoder.

    ``tokens`` is (B, N, p**3) or a single :class:`PatchSequence`;
    ``plans`` is a list of B :class:`MaskPlan` (or one plan, or ``None``
    to keep every token).
    """
    p = _wrap(params)
    x = _as_batch(tokens)
    b, n, pv = x.shape
    if n != cfg.n_tokens or pv != cfg.patch_volume:
        raise InvalidArgument(f"expected tokens of shape (*, {cfg.n_tokens}, {cfg.patch_volume}), got {x.shape}")
    dtype = p["patch_embed.weight"].dtype
    if x.dtype != dtype:
        x = ag.Tensor(x.data.astype(dtype)) if not x.requires_grad else x
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if plans is not None and len(plans) != b:
        raise InvalidArgument(f"got {len(plans)} mask plans for a batch of {b}")

    h = ag.linear(x, p["patch_embed.weight"], p["patch_embed.bias"])
    pos = posembed_3d(cfg.grid, cfg.embed_dim, pad=cfg.pad_posembed).astype(dtype)
    h = ag.add(h, pos[None])
    if plans is not None:
        keep = np.stack([pl.visible_index for pl in plans])
        h = ag.gather_rows(h, keep)
    cls = ag.add(np.zeros((b, 1, cfg.embed_dim), dtype=dtype), p["cls_token"])
    h = ag.concat([cls, h], axis=1)
    for i in range(cfg.depth):
        h = _block(h, p, f"blocks.{i}.", cfg.heads, trace["attn"] if trace is not None else None)
        if trace is not None:
            trace["blocks"].append(h)
    h = ag.layer_norm(h, p["norm.weight"], p["norm.bias"])
    return Latent(h, plans)


def decode(params, cfg: ModelConfig, latent: Latent, trace: Trace | None = None) -> ag.Tensor:
    """Insert mask tokens, restore grid order and reconstruct every patch.

    Returns a (B, N, p**3) tensor of sigmoid intensities; the class token
    is dropped.
    """
    if latent.plans is None:
        raise InvalidArgument("decode needs the mask plans used by encode")
    p = _wrap(params)
    dtype = p["decoder_embed.weight"].dtype
    h = ag.linear(latent.tokens, p["decoder_embed.weight"], p["decoder_embed.bias"])
    b, kept, dd = h.shape
    n_mask = cfg.n_tokens - (kept - 1)
    mask_tokens = ag.add(np.zeros((b, n_mask, dd), dtype=dtype), p["mask_token"])
    body = ag.concat([h[:, 1:, :], mask_tokens], axis=1)
    body = ag.gather_rows(body, np.stack([pl.restore for pl in latent.plans]))
    if trace is not None:
        trace["unshuffled"] = body.data
    h = ag.concat([h[:, :1, :], body], axis=1)
    pos = posembed_3d(cfg.grid, dd, pad=cfg.pad_posembed).astype(dtype)
    pos = np.concatenate([np.zeros((1, dd), dtype=dtype), pos])  # class token row stays zero
    h = ag.add(h, pos[None])
    for i in range(cfg.decoder_depth):
        h = _block(h, p, f"decoder_blocks.{i}.", cfg.decoder_heads,
                   trace["decoder_attn"] if trace is not None else None)
    h = ag.layer_norm(h, p["decoder_norm.weight"], p["decoder_norm.bias"])
    h = ag.linear(h, p["decoder_pred.weight"], p["decoder_pred.bias"])
    return ag.sigmoid(h[:, 1:, :])


def mae_loss(recon, target, plans, masked_only=True):
    """Mean squared error over the voxels of masked tokens.

    ``recon`` may be a tensor (for gradients) or an array; ``target`` is
    an array of the same (B, N, p**3) shape.  Returns a scalar tensor.
    """
    recon = recon if isinstance(recon, ag.Tensor) else ag.Tensor(np.asarray(recon))
    target = np.asarray(target, dtype=recon.dtype)
    if recon.data.ndim == 2:
        recon = ag.reshape(recon, (1,) + recon.shape)
        target = target[None] if target.ndim == 2 else target
    if recon.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {recon.shape} vs {target.shape}")
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if masked_only:
        weights = np.stack([pl.masked_flags for pl in plans]).astype(recon.dtype)
    else:
        weights = np.ones(recon.shape[:2], dtype=recon.dtype)
    count = weights.sum()
    if count == 0:
        raise InvalidArgument("no masked tokens to score")
    per_token = ag.mean(ag.square(ag.sub(recon, target)), axis=-1)
    return ag.mul(ag.sum_(ag.mul(per_token, weights)), 1.0 / count)


def reconstruct(params, cfg, tokens, plans):
    """Convenience wrapper: encode + decode, returning a numpy array."""
    return decode(params, cfg, encode(params, cfg, tokens, plans)).data
