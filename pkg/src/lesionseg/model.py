"""3D shifted-window attention encoder, segmentation decoder and proxy heads.

Token grids halve at every stage; with the default configuration a 96^3
two-channel input is embedded to a 48^3 grid of 12-d tokens and leaves the
encoder as a (192, 3, 3, 3) bottleneck.
"""
import hashlib
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadConfig, HeadsAbsent, MissingFile, SchemaMismatch, ShapeMismatch

SCHEMA_VERSION = 1


@dataclass
class EncoderConfig:
    in_channels: int = 2
    patch_size: int = 2
    window_size: int = 2
    base_features: int = 12
    n_stages: int = 4
    heads_per_stage: list = field(default_factory=lambda: [3, 6, 12, 24])
    depths_per_stage: list = field(default_factory=lambda: [2, 2, 2, 2])
    img_size: int = 96
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    n_classes: int = 2
    proj_dim: int = 512

    def validate(self):
        if len(self.heads_per_stage) != self.n_stages:
            raise BadConfig("heads_per_stage must have n_stages entries")
        if len(self.depths_per_stage) != self.n_stages:
            raise BadConfig("depths_per_stage must have n_stages entries")
        if self.img_size % (self.patch_size * 2**self.n_stages):
            raise BadConfig(
                f"img_size {self.img_size} not divisible by "
                f"patch_size * 2**n_stages = {self.patch_size * 2**self.n_stages}"
            )
        for i, h in enumerate(self.heads_per_stage):
            if (self.base_features * 2**i) % h:
                raise BadConfig(f"stage {i}: features not divisible by {h} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig("dropout must be in [0, 1)")
        return self

    @property
    def bottleneck_features(self):
        return self.base_features * 2**self.n_stages

    @property
    def bottleneck_extent(self):
        return self.img_size // (self.patch_size * 2**self.n_stages)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ----------------------------------------------------------------------------
# windowed attention


def window_partition(x, w):
    b, d, h, wd, c = x.shape
    x = x.view(b, d // w, w, h // w, w, wd // w, w, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, w * w * w, c)


def window_reverse(windows, w, b, d, h, wd):
    x = windows.view(b, d // w, h // w, wd // w, w, w, w, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, wd, -1)


def _relative_index(w):
    coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), torch.arange(w), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (w - 1)
    span = 2 * w - 1
    return rel[..., 0] * span * span + rel[..., 1] * span + rel[..., 2]


def _shift_mask(d, h, wd, w, s):
    img = torch.zeros(1, d, h, wd, 1)
    cnt = 0
    spans = (slice(0, -w), slice(-w, -s), slice(-s, None))
    for a in spans:
        for b in spans:
            for c in spans:
                img[:, a, b, c, :] = cnt
                cnt += 1
    win = window_partition(img, w).squeeze(-1)
    mask = win[:, None, :] - win[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 3, heads))
        self.register_buffer("rel_index", _relative_index(window).reshape(-1), persistent=False)

    def forward(self, x, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self.rel_index].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(-1, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, window, shift, mlp_ratio):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        # x: (B, D, H, W, C)
        b, d, h, wd, c = x.shape
        w = min(self.window, d, h, wd)
        s = self.shift if min(d, h, wd) > self.window else 0
        y = self.norm1(x)
        mask = None
        if s:
            y = torch.roll(y, shifts=(-s, -s, -s), dims=(1, 2, 3))
            mask = _shift_mask(d, h, wd, w, s).to(x.device, x.dtype)
        win = window_partition(y, w)
        win = self.attn(win, mask)
        y = window_reverse(win, w, b, d, h, wd)
        if s:
            y = torch.roll(y, shifts=(s, s, s), dims=(1, 2, 3))
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        parts = [x[:, i::2, j::2, k::2, :] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class SwinEncoder(nn.Module):
    """Patch embedding followed by ``n_stages`` attention stages with merging.

    ``forward`` returns the hidden states, channel-first:
    [embedding, stage_1, ..., stage_n]; the last one is the bottleneck.
    """

    def __init__(self, cfg):
        super().__init__()
        f = cfg.base_features
        self.patch_embed = nn.Conv3d(cfg.in_channels, f, cfg.patch_size, stride=cfg.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(cfg.n_stages):
            dim = f * 2**i
            blocks = nn.ModuleList(
                SwinBlock(
                    dim,
                    cfg.heads_per_stage[i],
                    cfg.window_size,
                    0 if j % 2 == 0 else cfg.window_size // 2,
                    cfg.mlp_ratio,
                )
                for j in range(cfg.depths_per_stage[i])
            )
            self.stages.append(blocks)
            self.merges.append(PatchMerging(dim))

    @staticmethod
    def _to_channels_first(x):
        return F.layer_norm(x, x.shape[-1:]).permute(0, 4, 1, 2, 3).contiguous()

    def forward(self, x):
        x = self.patch_embed(x).permute(0, 2, 3, 4, 1)
        hidden = [self._to_channels_first(x)]
        for blocks, merge in zip(self.stages, self.merges):
            for blk in blocks:
                x = blk(x)
            x = merge(x)
            hidden.append(self._to_channels_first(x))
        return hidden


# ----------------------------------------------------------------------------
# convolutional parts


class SeededDropout(nn.Module):
    """Element dropout drawing its masks from a private generator.

    Two networks built with different ``seed`` values see different masks
    even when fed identical inputs in lock-step.
    """

    def __init__(self, p, seed=0):
        super().__init__()
        self.p = p
        self.generator = torch.Generator()
        self.generator.manual_seed(int(seed))

    def reseed(self, seed):
        self.generator.manual_seed(int(seed))

    def forward(self, x):
        if not self.training or self.p == 0:
            return x
        keep = torch.rand(x.shape, generator=self.generator) >= self.p
        return x * keep.to(x.device, x.dtype) / (1.0 - self.p)


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout, scale=2):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, scale, stride=scale)
        self.conv = conv_block(cout + cskip, cout)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class SegDecoder(nn.Module):
    """Upsampling decoder with a skip connection from every encoder stage."""

    def __init__(self, cfg, dropout_seed=0):
        super().__init__()
        f = cfg.base_features
        self.stem = conv_block(cfg.in_channels, f)
        ups = []
        for i in range(cfg.n_stages, 0, -1):
            ups.append(UpBlock(f * 2**i, f * 2 ** (i - 1), f * 2 ** (i - 1)))
        self.ups = nn.ModuleList(ups)
        self.final_up = UpBlock(f, f, f, scale=cfg.patch_size)
        self.dropout = SeededDropout(cfg.dropout, dropout_seed)
        self.head = nn.Conv3d(f, cfg.n_classes, 1)

    def forward(self, x, hidden):
        y = hidden[-1]
        for up, skip in zip(self.ups, reversed(hidden[:-1])):
            y = up(y, skip)
        y = self.final_up(y, self.stem(x))
        return self.head(self.dropout(y))


class InpaintHead(nn.Module):
    # entry block, one block per upsampling stage, transposed-conv output block
    def __init__(self, cfg):
        super().__init__()
        c = cfg.bottleneck_features
        blocks = [conv_block(c, c // 2)]
        c //= 2
        for _ in range(cfg.n_stages):
            cout = max(c // 2, cfg.base_features)
            blocks.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False), conv_block(c, cout)))
            c = cout
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.ConvTranspose3d(c, cfg.in_channels, cfg.patch_size, stride=cfg.patch_size)

    def forward(self, z):
        return self.out(self.blocks(z))


class ProxyHeads(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c = cfg.bottleneck_features
        self.rotation = nn.Linear(c, 4)
        self.inpaint = InpaintHead(cfg)
        self.contrast = nn.Linear(c, cfg.proj_dim)

    def forward(self, z):
        pooled = z.mean(dim=(2, 3, 4))
        return self.rotation(pooled), self.inpaint(z), self.contrast(pooled)


class SegModel(nn.Module):
    def __init__(self, cfg, with_proxy=False, with_decoder=True, dropout_seed=0):
        super().__init__()
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg)
        self.decoder = SegDecoder(cfg, dropout_seed) if with_decoder else None
        self.proxy_heads = ProxyHeads(cfg) if with_proxy else None

    def _check_input(self, x):
        c, s = self.cfg.in_channels, self.cfg.img_size
        if x.dim() != 5 or tuple(x.shape[1:]) != (c, s, s, s):
            raise ShapeMismatch(f"expected (B, {c}, {s}, {s}, {s}), got {tuple(x.shape)}")

    def encode(self, x):
        self._check_input(x)
        return self.encoder(x)

    def forward(self, x):
        """Segmentation logits, shape (B, n_classes, S, S, S)."""
        if self.decoder is None:
            raise HeadsAbsent("model was built without a segmentation decoder")
        hidden = self.encode(x)
        return self.decoder(x, hidden)

    def forward_proxy(self, x):
        """(rotation logits, reconstruction, projection) from one encoder pass."""
        if self.proxy_heads is None:
            raise HeadsAbsent("model was built without proxy heads")
        return self.proxy_heads(self.encode(x)[-1])


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, WindowAttention):
        nn.init.trunc_normal_(m.bias_table, std=0.02)
    elif isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)) and m.bias is not None:
        nn.init.zeros_(m.bias)


def build_model(cfg=None, with_proxy=False, with_decoder=True, seed=0, dropout_seed=None):
    """Build a SegModel with seeded weight initialization.

    ``dropout_seed`` defaults to ``seed``; give twin networks different values
    to decorrelate their dropout masks.
    """
    cfg = (cfg or EncoderConfig()).validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = SegModel(
            cfg,
            with_proxy=with_proxy,
            with_decoder=with_decoder,
            dropout_seed=seed if dropout_seed is None else dropout_seed,
        )
        model.apply(_init_weights)
    return model


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def forward_segment(model, x):
    return model(x)


def forward_proxy(model, x):
    return model.forward_proxy(x)


# ----------------------------------------------------------------------------
# checkpoints


def state_checksum(module_or_state, prefix=""):
    """SHA-256 over the named tensors (optionally restricted to ``prefix``)."""
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        if not name.startswith(prefix):
            continue
        arr = np.ascontiguousarray(state[name].detach().cpu().numpy())
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(model, path, training_stage="unknown", step=0, extra=None):
    """Write header JSON plus every weight array into one ``.npz`` archive."""
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {
        "schema_version": SCHEMA_VERSION,
        "encoder_config": asdict(model.cfg),
        "training_stage": training_stage,
        "step": int(step),
        "has_decoder": model.decoder is not None,
        "has_proxy": model.proxy_heads is not None,
        "digest": state_checksum({k: torch.from_numpy(v) for k, v in state.items()}),
    }
    if extra:
        header["extra"] = extra
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    arrays.update({f"w/{k}": v for k, v in state.items()})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return path


def read_checkpoint(path):
    """Return (header, state dict of tensors); validates schema and digest."""
    if not os.path.exists(path):
        raise MissingFile(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(bytes(npz["__header__"]).decode())
            state = {k[2:]: torch.from_numpy(npz[k].copy()) for k in npz.files if k.startswith("w/")}
    except (ValueError, KeyError, OSError, zipfile.BadZipFile, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaMismatch(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"schema_version {header.get('schema_version')} != {SCHEMA_VERSION}")
    if state_checksum(state) != header.get("digest"):
        raise SchemaMismatch("weight digest does not match header")
    return header, state


def load_model(path):
    """Rebuild the full model stored in a checkpoint."""
    header, state = read_checkpoint(path)
    cfg = EncoderConfig.from_dict(header["encoder_config"])
    model = build_model(cfg, with_proxy=header["has_proxy"], with_decoder=header["has_decoder"])
    model.load_state_dict(state)
    return model, header


def load_encoder_into(model, path):
    """Copy only encoder weights from ``path`` into ``model``.

    Everything is validated before the first tensor is written, so a bad file
    leaves ``model`` untouched.
    """
    header, state = read_checkpoint(path)
    if EncoderConfig.from_dict(header["encoder_config"]) != model.cfg:
        raise SchemaMismatch("encoder configuration differs from target model")
    target = model.encoder.state_dict()
    source = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    if set(source) != set(target):
        raise SchemaMismatch("encoder weight names differ from target model")
    for k, v in source.items():
        if v.shape != target[k].shape:
            raise SchemaMismatch(f"shape mismatch for encoder.{k}")
    with torch.no_grad():
        for k, v in model.encoder.state_dict().items():
            v.copy_(source[k])
    return header
