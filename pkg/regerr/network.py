"""Dense registration-error regressor.

Two untied 3D UNets encode the MRI and iUS patches into C-channel feature
maps at full resolution; their concatenation feeds a Swin-UNETR (shifted
window transformer encoder, convolutional decoder with skips) that emits a
one-channel error map in mm.

Submodule names of the transformer encoder follow the public Swin-UNETR
layout (``patch_embed``, ``layers1``..``layers4``, ``blocks``,
``downsample``) so published self-supervised weights can be mapped in.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from numpy.typing import NDArray
from pydantic import BaseModel, ValidationError, model_validator
from torch import nn

from .errors import (
    ConfigError,
    FormatError,
    KeyMismatchError,
    ShapeError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .manifest import get_library_version, is_format_compatible

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = "1.0"
SWIN_STAGES = 4


class ModelConfig(BaseModel):
    """Architecture hyperparameters."""

    patch_size: int = 64
    unet_feature_channels: int = 16
    unet_levels: int = 3
    swin_embed_dim: int = 48
    swin_depths: Tuple[int, int, int, int] = (2, 2, 2, 2)
    swin_heads: Tuple[int, int, int, int] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    output_activation: Literal["linear", "softplus"] = "softplus"

    @model_validator(mode="after")
    def _check_divisibility(self) -> "ModelConfig":
        divisor = 2 ** (SWIN_STAGES + 1)
        if self.patch_size < divisor or self.patch_size % divisor != 0:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by {divisor}")
        if self.patch_size % 2 ** (self.unet_levels - 1) != 0:
            raise ValueError(
                f"patch_size {self.patch_size} must be divisible by 2^(unet_levels-1)"
            )
        if min(self.unet_feature_channels, self.unet_levels, self.swin_embed_dim, self.window_size) < 1:
            raise ValueError("channel counts, levels and window size must be >= 1")
        for stage, heads in enumerate(self.swin_heads):
            dim = self.swin_embed_dim * 2**stage
            if heads < 1 or dim % heads != 0:
                raise ValueError(f"stage {stage} width {dim} is not divisible by {heads} heads")
        if min(self.swin_depths) < 1:
            raise ValueError("every Swin stage needs at least one block")
        return self

    @classmethod
    def toy(cls, **overrides: object) -> "ModelConfig":
        """Small CPU-friendly preset used by tests and selfcheck."""
        values: Dict[str, object] = {
            "patch_size": 32,
            "unet_feature_channels": 4,
            "swin_embed_dim": 12,
            "window_size": 4,
        }
        values.update(overrides)
        return cls.model_validate(values)


def make_model_config(**values: object) -> ModelConfig:
    """Validate a ModelConfig, raising ConfigError on invariant violations."""
    try:
        return ModelConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# Convolutional blocks
# ---------------------------------------------------------------------------


def _norm(channels: int) -> nn.GroupNorm:
    # single-group norm stays defined at 1-voxel bottlenecks
    return nn.GroupNorm(1, channels)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1, bias=False)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = _norm(out_channels)
        self.act = nn.LeakyReLU(0.01, inplace=True)
        self.skip: Optional[nn.Sequential] = None
        if in_channels != out_channels:
            self.skip = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1, bias=False), _norm(out_channels)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x if self.skip is None else self.skip(x)
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + residual)


class UpBlock(nn.Module):
    """Transposed-conv upsampling, skip concatenation, residual block."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.transp_conv = nn.ConvTranspose3d(in_channels, out_channels, 2, stride=2, bias=False)
        self.conv_block = ResBlock(2 * out_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.conv_block(torch.cat([self.transp_conv(x), skip], dim=1))


class UNetEncoder(nn.Module):
    """3D UNet mapping a 1-channel patch to C channels at full resolution."""

    def __init__(self, channels: int, levels: int):
        super().__init__()
        widths = [channels * 2**level for level in range(levels)]
        self.down = nn.ModuleList(
            ResBlock(1 if i == 0 else widths[i - 1], w) for i, w in enumerate(widths)
        )
        self.up = nn.ModuleList(UpBlock(widths[i], widths[i - 1]) for i in range(levels - 1, 0, -1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips: List[torch.Tensor] = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = block(x, skips.pop())
        return x


# ---------------------------------------------------------------------------
# Shifted-window transformer
# ---------------------------------------------------------------------------


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * nW, window^3, C)."""
    return rearrange(
        x, "b (d p1) (h p2) (w p3) c -> (b d h w) (p1 p2 p3) c", p1=window, p2=window, p3=window
    )


def window_reverse(windows: torch.Tensor, window: int, dims: Tuple[int, int, int]) -> torch.Tensor:
    """(B * nW, window^3, C) -> (B, D, H, W, C)."""
    d, h, w = (n // window for n in dims)
    return rearrange(
        windows,
        "(b d h w) (p1 p2 p3) c -> b (d p1) (h p2) (w p3) c",
        d=d,
        h=h,
        w=w,
        p1=window,
        p2=window,
        p3=window,
    )


def relative_position_index(window: int, table_window: int) -> torch.Tensor:
    """Index into a (2*table_window-1)^3 bias table for a ``window``^3 window."""
    coords = torch.stack(
        torch.meshgrid(*[torch.arange(window)] * 3, indexing="ij")
    ).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (table_window - 1)
    span = 2 * table_window - 1
    return rel[..., 0] * span * span + rel[..., 1] * span + rel[..., 2]


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: int, table_window: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * table_window - 1) ** 3, num_heads)
        )
        self.register_buffer(
            "relative_position_index",
            relative_position_index(window, table_window),
            persistent=False,
        )
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.num_heads)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        index: torch.Tensor = self.relative_position_index  # type: ignore[assignment]
        bias = self.relative_position_bias_table[index.reshape(-1)].reshape(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(-1, self.num_heads, n, n)
        out = attn.softmax(dim=-1) @ v
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden)
        self.linear2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear2(F.gelu(self.linear1(x)))


def _shift_mask(padded: int, window: int, shift: int) -> torch.Tensor:
    """Additive attention mask (nW, window^3, window^3) for shifted windows."""
    labels = torch.zeros((1, padded, padded, padded, 1))
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    count = 0
    for sd in bands:
        for sh in bands:
            for sw in bands:
                labels[:, sd, sh, sw, :] = count
                count += 1
    windows = window_partition(labels, window).squeeze(-1)
    diff = windows.unsqueeze(1) - windows.unsqueeze(2)
    return diff.masked_fill(diff != 0, -100.0).masked_fill(diff == 0, 0.0)


class SwinBlock(nn.Module):
    """Pre-norm (shifted) window attention + MLP on a cubic token grid."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        resolution: int,
        window: int,
        shifted: bool,
        mlp_ratio: float,
    ):
        super().__init__()
        self.resolution = resolution
        if resolution <= window:
            self.window, self.shift = resolution, 0
        else:
            self.window, self.shift = window, (window // 2 if shifted else 0)
        self.padded = math.ceil(resolution / self.window) * self.window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, self.window, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        mask = _shift_mask(self.padded, self.window, self.shift) if self.shift else None
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, D, H, W, C) channel-last tokens."""
        shortcut = x
        x = self.norm1(x)
        pad = self.padded - self.resolution
        if pad:
            x = F.pad(x, (0, 0, 0, pad, 0, pad, 0, pad))
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
        mask: Optional[torch.Tensor] = self.attn_mask  # type: ignore[assignment]
        windows = self.attn(window_partition(x, self.window), mask)
        x = window_reverse(windows, self.window, (self.padded,) * 3)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        if pad:
            x = x[:, : self.resolution, : self.resolution, : self.resolution]
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = rearrange(x, "b (d p1) (h p2) (w p3) c -> b d h w (p3 p2 p1 c)", p1=2, p2=2, p3=2)
        return self.reduction(self.norm(x))


class BasicLayer(nn.Module):
    def __init__(
        self,
        dim: int,
        depth: int,
        num_heads: int,
        resolution: int,
        window: int,
        mlp_ratio: float,
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, resolution, window, shifted=i % 2 == 1, mlp_ratio=mlp_ratio)
            for i in range(depth)
        )
        self.downsample = PatchMerging(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.downsample(x)


class PatchEmbed(nn.Module):
    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.proj = nn.Conv3d(in_channels, dim, kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


class SwinEncoder(nn.Module):
    """Returns five layer-normalized hidden states, channel-first."""

    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        dim = cfg.swin_embed_dim
        resolution = cfg.patch_size // 2
        self.patch_embed = PatchEmbed(in_channels, dim)
        for stage in range(SWIN_STAGES):
            layer = BasicLayer(
                dim * 2**stage,
                cfg.swin_depths[stage],
                cfg.swin_heads[stage],
                resolution // 2**stage,
                cfg.window_size,
                cfg.mlp_ratio,
            )
            # layers1..layers4 as in the published checkpoints
            self.add_module(f"layers{stage + 1}", nn.ModuleList([layer]))

    @staticmethod
    def _normalized(x: torch.Tensor) -> torch.Tensor:
        x = F.layer_norm(x, [x.shape[-1]])
        return rearrange(x, "b d h w c -> b c d h w")

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = rearrange(self.patch_embed(x), "b c d h w -> b d h w c")
        hidden = [self._normalized(x)]
        for stage in range(SWIN_STAGES):
            layers: nn.ModuleList = getattr(self, f"layers{stage + 1}")
            x = layers[0](x)
            hidden.append(self._normalized(x))
        return hidden


class SwinUNETR(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        f = cfg.swin_embed_dim
        self.encoder = SwinEncoder(in_channels, cfg)
        self.encoder1 = ResBlock(in_channels, f)
        self.encoder2 = ResBlock(f, f)
        self.encoder3 = ResBlock(2 * f, 2 * f)
        self.encoder4 = ResBlock(4 * f, 4 * f)
        self.encoder10 = ResBlock(16 * f, 16 * f)
        self.decoder5 = UpBlock(16 * f, 8 * f)
        self.decoder4 = UpBlock(8 * f, 4 * f)
        self.decoder3 = UpBlock(4 * f, 2 * f)
        self.decoder2 = UpBlock(2 * f, f)
        self.decoder1 = UpBlock(f, f)
        self.out = nn.Conv3d(f, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hidden = self.encoder(x)
        enc0 = self.encoder1(x)
        enc1 = self.encoder2(hidden[0])
        enc2 = self.encoder3(hidden[1])
        enc3 = self.encoder4(hidden[2])
        dec4 = self.encoder10(hidden[4])
        dec3 = self.decoder5(dec4, hidden[3])
        dec2 = self.decoder4(dec3, enc3)
        dec1 = self.decoder3(dec2, enc2)
        dec0 = self.decoder2(dec1, enc1)
        return self.out(self.decoder1(dec0, enc0))


class ErrorNet(nn.Module):
    """MRI/iUS patch pair -> per-voxel registration error (mm)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.unet_feature_channels
        self.encoder_mri = UNetEncoder(c, cfg.unet_levels)
        self.encoder_ius = UNetEncoder(c, cfg.unet_levels)
        self.swin = SwinUNETR(2 * c, cfg)

    def forward(self, mri: torch.Tensor, ius: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_size
        expected = (1, p, p, p)
        if mri.dim() != 5 or tuple(mri.shape[1:]) != expected or mri.shape != ius.shape:
            raise ShapeError(
                f"expected two (B, 1, {p}, {p}, {p}) tensors, got {tuple(mri.shape)} and {tuple(ius.shape)}"
            )
        features = torch.cat([self.encoder_mri(mri), self.encoder_ius(ius)], dim=1)
        out = self.swin(features)
        if self.cfg.output_activation == "softplus":
            out = F.softplus(out)
        return out


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, WindowAttention):
        nn.init.trunc_normal_(module.relative_position_bias_table, std=0.02)


def build_model(cfg: ModelConfig, init_seed: int = 0) -> ErrorNet:
    """Construct the network with initialization determined by ``init_seed``.

    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = ErrorNet(cfg)
        model.apply(_init_weights)
    return model


def predict(
    model: ErrorNet,
    mri_patch: NDArray[np.float32],
    ius_patch: NDArray[np.float32],
    device: Union[str, torch.device] = "cpu",
) -> NDArray[np.float32]:
    """Run one (P^3, P^3) pair or a (B, P^3) batch through the model."""
    mri = np.asarray(mri_patch, dtype=np.float32)
    ius = np.asarray(ius_patch, dtype=np.float32)
    if mri.shape != ius.shape or mri.ndim not in (3, 4):
        raise ShapeError(f"patch shapes {mri.shape} and {ius.shape} are not a valid pair")
    if not (np.all(np.isfinite(mri)) and np.all(np.isfinite(ius))):
        raise ShapeError("input patches must be finite")
    single = mri.ndim == 3
    if single:
        mri, ius = mri[None], ius[None]
    param = next(model.parameters())
    to_tensor = lambda a: torch.from_numpy(a[:, None]).to(device=device, dtype=param.dtype)  # noqa: E731
    model.eval()
    with torch.no_grad():
        out = model(to_tensor(mri), to_tensor(ius))[:, 0].float().cpu().numpy()
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Parameter audit
# ---------------------------------------------------------------------------


def _res_block_count(cin: int, cout: int) -> int:
    count = 27 * cin * cout + 2 * cout + 27 * cout * cout + 2 * cout
    if cin != cout:
        count += cin * cout + 2 * cout
    return count


def _up_block_count(cin: int, cout: int) -> int:
    return 8 * cin * cout + _res_block_count(2 * cout, cout)


def parameter_count_audit(cfg: ModelConfig) -> int:
    """Closed-form number of trainable parameters for ``cfg``."""
    c = cfg.unet_feature_channels
    widths = [c * 2**level for level in range(cfg.unet_levels)]
    unet = sum(_res_block_count(1 if i == 0 else widths[i - 1], w) for i, w in enumerate(widths))
    unet += sum(_up_block_count(widths[i], widths[i - 1]) for i in range(1, cfg.unet_levels))

    f = cfg.swin_embed_dim
    swin = 8 * 2 * c * f + f
    table = (2 * cfg.window_size - 1) ** 3
    for stage in range(SWIN_STAGES):
        d = f * 2**stage
        hidden = int(d * cfg.mlp_ratio)
        block = (
            2 * d
            + table * cfg.swin_heads[stage]
            + 3 * d * d + 3 * d
            + d * d + d
            + 2 * d
            + d * hidden + hidden + hidden * d + d
        )
        swin += cfg.swin_depths[stage] * block + 16 * d + 16 * d * d

    decoder = (
        _res_block_count(2 * c, f)
        + _res_block_count(f, f)
        + _res_block_count(2 * f, 2 * f)
        + _res_block_count(4 * f, 4 * f)
        + _res_block_count(16 * f, 16 * f)
        + _up_block_count(16 * f, 8 * f)
        + _up_block_count(8 * f, 4 * f)
        + _up_block_count(4 * f, 2 * f)
        + _up_block_count(2 * f, f)
        + _up_block_count(f, f)
        + f + 1
    )
    return 2 * unet + swin + decoder


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_parameters(model: ErrorNet, path: Union[str, Path]) -> Path:
    """Write the state dict plus a JSON sidecar with the ModelConfig."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "library_version": get_library_version(),
        "model_config": model.cfg.model_dump(mode="json"),
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def read_checkpoint_config(path: Union[str, Path]) -> ModelConfig:
    sidecar = _sidecar(Path(path))
    if not sidecar.exists():
        raise FileNotFoundError(f"Checkpoint sidecar not found: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        stored = str(meta["format_version"])
        cfg = ModelConfig.model_validate(meta["model_config"])
    except (json.JSONDecodeError, KeyError, ValidationError) as e:
        raise VersionMismatchError(f"Unreadable checkpoint sidecar {sidecar}: {e}") from e
    if not is_format_compatible(stored, CHECKPOINT_FORMAT_VERSION):
        raise VersionMismatchError(
            f"Checkpoint format {stored} is incompatible with {CHECKPOINT_FORMAT_VERSION}"
        )
    return cfg


def _load_state(path: Path) -> Dict[str, torch.Tensor]:
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise FormatError(f"Corrupted checkpoint {path}: {e}") from e
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise FormatError(f"{path} does not hold a state dict")
    return state  # type: ignore[return-value]


def load_parameters(path: Union[str, Path]) -> ErrorNet:
    """Rebuild a model from :func:`save_parameters` output."""
    path = Path(path)
    cfg = read_checkpoint_config(path)
    model = build_model(cfg)
    state = _load_state(path)
    _check_state(model.state_dict(), state, {k: k for k in model.state_dict()})
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# Pretrained transformer weights
# ---------------------------------------------------------------------------

_SWIN_PREFIX = "swin.encoder."
_SOURCE_PREFIXES = ("module.", "swinViT.")
_PATCH_EMBED_WEIGHT = "patch_embed.proj.weight"


def swin_encoder_keys(model: ErrorNet) -> List[str]:
    return [k for k in model.state_dict() if k.startswith(_SWIN_PREFIX)]


def identity_mapping(model: ErrorNet) -> Dict[str, str]:
    return {k: k for k in swin_encoder_keys(model)}


def default_pretrained_mapping(model: ErrorNet) -> Dict[str, str]:
    """Target key -> key in the published self-supervised Swin checkpoints.

    Source keys are compared after stripping ``module.`` and ``swinViT.``
    prefixes; the MLP there is named ``fc1``/``fc2``.
    """
    mapping: Dict[str, str] = {}
    for key in swin_encoder_keys(model):
        source = key[len(_SWIN_PREFIX) :]
        source = source.replace("mlp.linear1.", "mlp.fc1.").replace("mlp.linear2.", "mlp.fc2.")
        mapping[key] = source
    return mapping


def _normalize_source_key(key: str) -> str:
    changed = True
    while changed:
        changed = False
        for prefix in _SOURCE_PREFIXES:
            if key.startswith(prefix):
                key = key[len(prefix) :]
                changed = True
    return key


def _spread_input_channels(
    target: Dict[str, torch.Tensor], source: Dict[str, torch.Tensor], mapping: Dict[str, str]
) -> Dict[str, torch.Tensor]:
    """Widen single-modality patch-embedding filters to the fused feature channels.

    The published encoders embed one image channel; here the embedding sees
    the concatenated UNet features. Filters are repeated over the input
    channels and divided by the repeat count, so identical channels give the
    original response.
    """
    adapted = dict(source)
    for target_key, source_key in mapping.items():
        if not target_key.endswith(_PATCH_EMBED_WEIGHT) or source_key not in source:
            continue
        weight = source[source_key]
        shape = tuple(target[target_key].shape)
        if weight.dim() != 5 or tuple(weight.shape) == shape:
            continue
        same_kernel = (weight.shape[0], *weight.shape[2:]) == (shape[0], *shape[2:])
        if same_kernel and shape[1] % weight.shape[1] == 0:
            repeats = shape[1] // weight.shape[1]
            adapted[source_key] = weight.repeat(1, repeats, 1, 1, 1) / repeats
            logger.info("spread %s over %d input channels", source_key, shape[1])
    return adapted


def _check_state(
    target: Dict[str, torch.Tensor], source: Dict[str, torch.Tensor], mapping: Dict[str, str]
) -> None:
    for target_key, source_key in mapping.items():
        if source_key not in source:
            raise KeyMismatchError(f"checkpoint is missing key {source_key!r} (for {target_key})")
        if tuple(source[source_key].shape) != tuple(target[target_key].shape):
            raise ShapeMismatchError(
                f"{source_key}: checkpoint shape {tuple(source[source_key].shape)} "
                f"!= model shape {tuple(target[target_key].shape)}"
            )


def load_pretrained(
    model: ErrorNet,
    source: Union[str, Path],
    mapping: Optional[Dict[str, str]] = None,
) -> ErrorNet:
    """Replace the transformer encoder weights from an external checkpoint.

    Only keys named in ``mapping`` are touched; the UNet encoders and the
    decoder keep their values. Nothing is modified if any key is missing or
    has the wrong shape.
    A one-channel patch embedding is spread over the fused input channels.
    """
    raw = _load_state(Path(source))
    if mapping is None:
        mapping = default_pretrained_mapping(model)
        state = {_normalize_source_key(k): v for k, v in raw.items()}
    else:
        state = raw
    target = model.state_dict()
    state = _spread_input_channels(target, state, mapping)
    _check_state(target, state, mapping)
    with torch.no_grad():
        for target_key, source_key in mapping.items():
            target[target_key].copy_(state[source_key])
    logger.info("loaded %d pretrained tensors from %s", len(mapping), source)
    return model
