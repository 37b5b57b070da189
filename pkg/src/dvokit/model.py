"""Two-frame transformer for depth and relative pose, with a masked
cross-view completion pretraining objective.

A shared encoder embeds both frames; a cross-attention decoder processes the
target frame against the reference frame. Depth comes from either a per-token
linear head or a multi-scale fusion (DPT-style) head tapping four decoder
blocks; the relative pose comes from a 2-layer MLP over pooled, concatenated
encoder tokens. Adapter bottlenecks can be enabled in every block's MLP for
frozen-backbone finetuning.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class ModelConfig:
    patch_size: int = 8
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 48
    dec_depth: int = 4
    dec_heads: int = 4
    dpt_source_blocks: tuple[int, ...] = (1, 2, 3, 4)
    adapter_dim: int = 16
    adapter_scale: float = 0.1
    head_kind: str = "linear"  # linear | dpt
    min_depth: float = 0.1
    max_depth: float = 10.0
    mask_ratio: float = 0.9

    def __post_init__(self):
        self.dpt_source_blocks = tuple(self.dpt_source_blocks)
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("model dims must be divisible by their head counts")
        if len(self.dpt_source_blocks) != 4:
            raise ValueError("need exactly 4 tapped decoder blocks")
        if list(self.dpt_source_blocks) != sorted(self.dpt_source_blocks):
            raise ValueError("tapped blocks must be sorted")
        if self.dpt_source_blocks[0] < 1 or self.dpt_source_blocks[-1] > self.dec_depth:
            raise ValueError("tapped blocks must lie in [1, dec_depth]")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.head_kind not in ("linear", "dpt"):
            raise ValueError("head_kind must be 'linear' or 'dpt'")
        if self.head_kind == "dpt" and self.patch_size % 4:
            raise ValueError("the dpt head needs patch_size divisible by 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dpt_source_blocks"] = list(self.dpt_source_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale default: trains in minutes on synthetic pairs."""
    return ModelConfig(**overrides)


def paper_scale_config() -> ModelConfig:
    """Full-scale dimensions, used only for construction and counting checks."""
    return ModelConfig(
        patch_size=16,
        enc_dim=768,
        enc_depth=12,
        enc_heads=12,
        dec_dim=512,
        dec_depth=8,
        dec_heads=8,
        dpt_source_blocks=(2, 4, 6, 8),
        adapter_dim=32,
        head_kind="dpt",
        min_depth=0.1,
        max_depth=80.0,
    )


@dataclass
class TokenGrid:
    """Per-patch features plus the grid geometry they came from.

    `keep` lists the retained token positions when the frame was partially
    masked (pretraining); None means all rows*cols tokens are present.
    """

    tokens: Tensor
    rows: int
    cols: int
    keep: np.ndarray | None = None


# ---- patch plumbing ---------------------------------------------------------------


def patchify(image: Tensor, patch: int) -> Tensor:
    """(3, H, W) -> (N, patch*patch*3), rows-major patch order."""
    c, h, w = image.shape
    gh, gw = h // patch, w // patch
    x = image.reshape(c, gh, patch, gw, patch)
    return x.transpose(1, 3, 2, 4, 0).reshape(gh * gw, patch * patch * c)


def unpatchify_map(tokens: Tensor, rows: int, cols: int, patch: int) -> Tensor:
    """(N, patch*patch) -> (H, W)."""
    x = tokens.reshape(rows, cols, patch, patch)
    return x.transpose(0, 2, 1, 3).reshape(rows * patch, cols * patch)


def depth_from_raw(x: Tensor, min_depth: float, max_depth: float) -> Tensor:
    """Sigmoid-bounded inverse depth: outputs always in [min_depth, max_depth]."""
    inv_lo, inv_hi = 1.0 / max_depth, 1.0 / min_depth
    return 1.0 / (inv_lo + x.sigmoid() * (inv_hi - inv_lo))


# ---- heads ----------------------------------------------------------------------------


class LinearDepthHead(nn.Module):
    """Per-token inverse-depth regression through a 128-wide hidden layer."""

    def __init__(self, cfg: ModelConfig, rng):
        self.norm = nn.LayerNorm(cfg.dec_dim)
        self.fc1 = nn.Linear(cfg.dec_dim, 128, rng)
        self.fc2 = nn.Linear(128, cfg.patch_size**2, rng)
        self._cfg = cfg

    def __call__(self, blocks: list[Tensor], rows: int, cols: int) -> Tensor:
        raw = self.fc2(self.fc1(self.norm(blocks[-1])).gelu())
        grid = unpatchify_map(raw, rows, cols, self._cfg.patch_size)
        return depth_from_raw(grid, self._cfg.min_depth, self._cfg.max_depth)


class DptDepthHead(nn.Module):
    """Multi-scale fusion head tapping four decoder blocks.

    Tapped token grids are reshaped to 2D maps, projected to a common width,
    resized to {4, 2, 1, 1/2} x the token grid (shallow taps get the higher
    resolutions), fused coarse-to-fine with residual 3x3 conv units and 2x
    nearest upsampling, then upsampled to full image resolution.
    """

    def __init__(self, cfg: ModelConfig, rng):
        width = cfg.dec_dim
        self.norms = nn.ModuleList([nn.LayerNorm(cfg.dec_dim) for _ in range(4)])
        self.projs = nn.ModuleList([nn.Conv1x1(cfg.dec_dim, width, rng) for _ in range(4)])
        self.fuse = nn.ModuleList([nn.ResidualConvUnit(width, rng) for _ in range(4)])
        self.head_conv = nn.Conv3x3(width, 128, rng)
        self.head_out = nn.Conv1x1(128, 1, rng)
        self._cfg = cfg
        self._width = width

    def _reassemble(self, tokens: Tensor, rows: int, cols: int, tap_pos: int) -> Tensor:
        fmap = self.projs[tap_pos](
            self.norms[tap_pos](tokens).transpose(1, 0).reshape(self._cfg.dec_dim, rows, cols)
        )
        scale = (4, 2, 1, 0)[tap_pos]  # 0 marks the 1/2 downsample
        if scale == 0:
            return fmap[:, ::2, ::2]
        if scale == 1:
            return fmap
        return ad.upsample_nearest(fmap, scale)

    def __call__(self, blocks: list[Tensor], rows: int, cols: int) -> Tensor:
        if rows % 2 or cols % 2:
            raise ValueError("dpt head needs an even token grid")
        taps = [blocks[i - 1] for i in self._cfg.dpt_source_blocks]
        feats = [self._reassemble(t, rows, cols, i) for i, t in enumerate(taps)]
        x = self.fuse[3](feats[3])
        x = self.fuse[2](ad.upsample_nearest(x, 2) + feats[2])
        x = self.fuse[1](ad.upsample_nearest(x, 2) + feats[1])
        x = self.fuse[0](ad.upsample_nearest(x, 2) + feats[0])
        x = ad.upsample_nearest(x, self._cfg.patch_size // 4)
        raw = self.head_out(self.head_conv(x).gelu())[0]
        return depth_from_raw(raw, self._cfg.min_depth, self._cfg.max_depth)


class PoseHead(nn.Module):
    """2-layer MLP applied to patch-wise concatenated encoder tokens.

    The first layer acts per patch pair (so local correspondence information
    survives), the result is mean-pooled over patches, and the final layer
    starts at zero with a 0.01 output scale so training begins at the
    identity pose.
    """

    def __init__(self, cfg: ModelConfig, rng):
        self.fc1 = nn.Linear(2 * cfg.enc_dim, 128, rng)
        self.fc2 = nn.Linear(128, 6, rng, zero=True)

    def __call__(self, tokens_a: Tensor, tokens_b: Tensor) -> Tensor:
        if tokens_a.shape != tokens_b.shape:
            raise ValueError("token grids of both frames must match")
        per_patch = self.fc1(ad.concat([tokens_a, tokens_b], axis=1)).gelu()
        pooled = per_patch.mean(axis=0).reshape(1, -1)
        return (self.fc2(pooled) * 0.01).reshape(6)


class PixelHead(nn.Module):
    """Per-token pixel regression used by the completion pretraining."""

    def __init__(self, cfg: ModelConfig, rng):
        self.norm = nn.LayerNorm(cfg.dec_dim)
        self.fc1 = nn.Linear(cfg.dec_dim, 128, rng)
        self.fc2 = nn.Linear(128, cfg.patch_size**2 * 3, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.fc2(self.fc1(self.norm(tokens)).gelu())


# ---- the model -------------------------------------------------------------------------


class DvoModel(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None):
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(p * p * 3, cfg.enc_dim, rng)
        self.enc_blocks = nn.ModuleList(
            [
                nn.EncoderBlock(cfg.enc_dim, cfg.enc_heads, rng, cfg.adapter_dim, cfg.adapter_scale)
                for _ in range(cfg.enc_depth)
            ]
        )
        self.enc_norm = nn.LayerNorm(cfg.enc_dim)
        self.dec_proj = nn.Linear(cfg.enc_dim, cfg.dec_dim, rng)
        self.mask_token = ad.parameter(nn._init(rng, (cfg.dec_dim,)))
        self.dec_blocks = nn.ModuleList(
            [
                nn.DecoderBlock(cfg.dec_dim, cfg.dec_heads, rng, cfg.adapter_dim, cfg.adapter_scale)
                for _ in range(cfg.dec_depth)
            ]
        )
        self.depth_head = (
            DptDepthHead(cfg, rng) if cfg.head_kind == "dpt" else LinearDepthHead(cfg, rng)
        )
        self.pose_head = PoseHead(cfg, rng)
        self.pixel_head = PixelHead(cfg, rng)

    # `cfg` is an attribute but not a parameter: named_parameters skips
    # non-Tensor, non-Module values.

    def grid_shape(self, image_shape) -> tuple[int, int]:
        _, h, w = image_shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image dims {h}x{w} not divisible by patch size {p}")
        return h // p, w // p

    def encode(self, image, keep: np.ndarray | None = None) -> TokenGrid:
        """Patch-embed + positional encoding + encoder blocks.

        `keep` restricts processing to the listed token positions (masked
        pretraining); position encodings are applied per grid position before
        subsetting, so kept tokens are encoded identically either way.
        """
        img = image if isinstance(image, Tensor) else Tensor(image)
        rows, cols = self.grid_shape(img.shape)
        x = self.patch_embed(patchify(img, self.cfg.patch_size))
        x = x + Tensor(nn.posemb_2d(rows, cols, self.cfg.enc_dim))
        if keep is not None:
            keep = np.asarray(keep, dtype=np.int64)
            if keep.size == rows * cols:
                keep = None  # keeping everything is the unmasked path
            else:
                x = x[keep]
        for block in self.enc_blocks:
            x = block(x)
        return TokenGrid(tokens=self.enc_norm(x), rows=rows, cols=cols, keep=keep)

    def decode(self, tgt: TokenGrid, ref: TokenGrid) -> list[Tensor]:
        """Run decoder blocks on the target tokens with cross-attention to the
        reference tokens; returns every block's output so heads can tap
        intermediate depths. Masked target positions are filled with the
        learnable mask token."""
        x = self.dec_proj(tgt.tokens)
        n_full = tgt.rows * tgt.cols
        if tgt.keep is not None:
            base = self.mask_token.reshape(1, -1) * Tensor(np.ones((n_full, 1)))
            x = ad.row_scatter(base, tgt.keep, x)
        x = x + Tensor(nn.posemb_2d(tgt.rows, tgt.cols, self.cfg.dec_dim))
        y = self.dec_proj(ref.tokens) + Tensor(nn.posemb_2d(ref.rows, ref.cols, self.cfg.dec_dim))
        outs = []
        for block in self.dec_blocks:
            x = block(x, y)
            outs.append(x)
        return outs

    def depth_from_blocks(self, blocks: list[Tensor], rows: int, cols: int) -> Tensor:
        return self.depth_head(blocks, rows, cols)


def forward_dvo(model: DvoModel, image_a, image_b) -> tuple[Tensor, Tensor, Tensor]:
    """Depth maps for both frames plus the twist taking frame a to frame b.

    The encoder is shared; depth for each frame decodes with the other frame
    as reference; the pose head consumes encoder tokens.
    """
    grid_a = model.encode(image_a)
    grid_b = model.encode(image_b)
    depth_a = model.depth_from_blocks(model.decode(grid_a, grid_b), grid_a.rows, grid_a.cols)
    depth_b = model.depth_from_blocks(model.decode(grid_b, grid_a), grid_b.rows, grid_b.cols)
    twist = model.pose_head(grid_a.tokens, grid_b.tokens)
    return depth_a, depth_b, twist


# ---- masked cross-view completion pretraining -------------------------------------------


def normalized_patch_targets(image, patch: int) -> np.ndarray:
    """Per-patch pixel targets normalized to zero mean / unit variance."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    flat = patchify(img, patch).data
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    return (flat - mu) / np.sqrt(var + 1e-6)


def masked_patch_mse(pred: Tensor, targets: np.ndarray, masked: np.ndarray) -> Tensor:
    """Mean squared error over masked patches only."""
    return ((pred[masked] - Tensor(targets[masked])) ** 2.0).mean()


def sample_mask(n_tokens: int, mask_ratio: float, rng: np.random.Generator):
    """Uniformly random masked/kept index split; errors on degenerate covers."""
    n_mask = math.ceil(mask_ratio * n_tokens)
    if n_mask <= 0 or n_mask >= n_tokens:
        raise ValueError("mask covers all or no tokens")
    perm = rng.permutation(n_tokens)
    return np.sort(perm[:n_mask]), np.sort(perm[n_mask:])


def pretrain_step(model: DvoModel, image_a, image_b, rng: np.random.Generator) -> Tensor:
    """Reconstruction loss: predict the pixels of masked frame-a patches from
    the visible patches plus the fully visible second frame."""
    img = image_a if isinstance(image_a, Tensor) else Tensor(image_a)
    rows, cols = model.grid_shape(img.shape)
    masked, keep = sample_mask(rows * cols, model.cfg.mask_ratio, rng)
    grid_a = model.encode(img, keep=keep)
    grid_b = model.encode(image_b)
    blocks = model.decode(grid_a, grid_b)
    pred = model.pixel_head(blocks[-1])
    targets = normalized_patch_targets(img, model.cfg.patch_size)
    return masked_patch_mse(pred, targets, masked)


# ---- adapters / freezing / counting ------------------------------------------------------

_HEAD_PREFIXES = ("depth_head.", "pose_head.", "pixel_head.")


def _is_adapter(name: str) -> bool:
    return ".adapter_down." in name or ".adapter_up." in name


def freeze_for_adapters(model: DvoModel) -> int:
    """Mark everything except adapter branches and task heads non-trainable.

    Returns the number of frozen parameter tensors."""
    if model.cfg.adapter_dim <= 0:
        raise ValueError("adapters disabled in this config")
    frozen = 0
    for name, param in model.named_parameters():
        trainable = _is_adapter(name) or name.startswith(_HEAD_PREFIXES)
        param.requires_grad = trainable
        frozen += not trainable
    return frozen


def adapter_params_per_layer(dim: int, bottleneck: int) -> int:
    """Down W+b plus up W+b: d*d^ + d^ + d^*d + d."""
    return 2 * dim * bottleneck + bottleneck + dim


def adapter_param_count(cfg: ModelConfig) -> int:
    if cfg.adapter_dim <= 0:
        raise ValueError("adapters disabled in this config")
    return cfg.enc_depth * adapter_params_per_layer(cfg.enc_dim, cfg.adapter_dim) + (
        cfg.dec_depth * adapter_params_per_layer(cfg.dec_dim, cfg.adapter_dim)
    )


def count_parameters(model: DvoModel, trainable_only: bool = False) -> int:
    return sum(
        p.size for _, p in model.named_parameters() if p.requires_grad or not trainable_only
    )


def model_state(model: DvoModel) -> dict[str, np.ndarray]:
    return {name: param.data.copy() for name, param in model.named_parameters()}


def load_state(model: DvoModel, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Fill model parameters by name; returns names that stayed at init.

    Shape mismatches always raise; missing names raise only when strict.
    """
    missing = []
    for name, param in model.named_parameters():
        if name in arrays:
            src = arrays[name]
            if src.shape != param.data.shape:
                raise ValueError(
                    f"checkpoint/config mismatch for '{name}': {src.shape} vs {param.data.shape}"
                )
            param.data = np.array(src, dtype=np.float64)
        else:
            missing.append(name)
    if strict and missing:
        raise ValueError(f"checkpoint missing parameters: {missing[:4]}{'...' if len(missing) > 4 else ''}")
    return missing


# ---- checkpoint file format ----------------------------------------------------------------
# magic "DVOC", u32 version, u32 json length + UTF-8 JSON config, then blobs
# (u32 name length, name, u32 rank, u32 extents…, little-endian f64 data)
# ordered lexicographically by name. All integers little-endian.

_MAGIC = b"DVOC"
_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (json_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    config = json.loads(raw[offset : offset + json_len].decode("utf-8"))
    offset += json_len
    arrays: dict[str, np.ndarray] = {}
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        arrays[name] = data.reshape(shape).astype(np.float64)
    return config, arrays
