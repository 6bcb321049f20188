"""CAVE network and the single-image U-Net baseline.

Every frame runs through one shared U-Net contracting path. At each scale the
per-frame feature maps ``[T, C, H, W]`` are collapsed over time by a temporal
aggregator (ConvGRU, ConvLSTM or a temporal transformer) and the resulting 2D
maps feed the decoder's skip connections. Output channels are independent
sigmoids (artery, vein) so overlapping pixels can carry both labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn


class TemporalModule(str, Enum):
    NONE = "none"
    CONV_GRU = "conv_gru"
    CONV_LSTM = "conv_lstm"
    TEMPORAL_TRANSFORMER = "temporal_transformer"


@dataclass
class CaveConfig:
    base_channels: int = 64
    depth: int = 4
    temporal_module: TemporalModule = TemporalModule.CONV_GRU
    temporal_kernel: Tuple[int, int] = (3, 3)
    attn_heads: int = 4
    attn_layers: int = 1
    out_channels: int = 2
    positional_encoding: bool = True
    # False: the scale-0 skip carries the last frame's features instead of an aggregate
    aggregate_scale0: bool = True

    def __post_init__(self):
        self.temporal_module = TemporalModule(self.temporal_module)
        self.temporal_kernel = tuple(int(k) for k in self.temporal_kernel)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if any(k % 2 == 0 or k < 1 for k in self.temporal_kernel):
            raise ValueError("temporal_kernel sizes must be odd")
        if self.attn_layers < 1 or self.attn_heads < 1:
            raise ValueError("attn_layers and attn_heads must be >= 1")
        if self.temporal_module is TemporalModule.TEMPORAL_TRANSFORMER:
            for c in self.channels:
                if c % self.attn_heads:
                    raise ValueError(f"attn_heads={self.attn_heads} does not divide {c} channels")

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * 2**s for s in range(self.depth + 1)]

    @property
    def is_temporal(self) -> bool:
        return self.temporal_module is not TemporalModule.NONE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["temporal_module"] = self.temporal_module.value
        d["temporal_kernel"] = list(self.temporal_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CaveConfig":
        return cls(**d)


class DoubleConv(nn.Module):
    """(conv3x3 -> InstanceNorm -> ReLU) x 2. Convs carry no bias; the norm would cancel it."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Encoder(nn.Module):
    def __init__(self, cfg: CaveConfig, in_channels: int = 1):
        super().__init__()
        ch = cfg.channels
        self.inc = DoubleConv(in_channels, ch[0])
        self.downs = nn.ModuleList(DoubleConv(ch[s - 1], ch[s]) for s in range(1, cfg.depth + 1))

    def forward(self, x) -> List[torch.Tensor]:
        feats = [self.inc(x)]
        for down in self.downs:
            feats.append(down(F.max_pool2d(feats[-1], 2)))
        return feats


class ConvGRUCell(nn.Module):
    def __init__(self, in_ch: int, hidden: int, kernel: Tuple[int, int]):
        super().__init__()
        pad = (kernel[0] // 2, kernel[1] // 2)
        self.hidden = hidden
        self.gates = nn.Conv2d(in_ch + hidden, 2 * hidden, kernel, padding=pad)
        self.candidate = nn.Conv2d(in_ch + hidden, hidden, kernel, padding=pad)

    def forward(self, x, h):
        z, r = torch.sigmoid(self.gates(torch.cat([x, h], 1))).chunk(2, 1)
        h_tilde = torch.tanh(self.candidate(torch.cat([x, r * h], 1)))
        return (1 - z) * h + z * h_tilde


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch: int, hidden: int, kernel: Tuple[int, int]):
        super().__init__()
        pad = (kernel[0] // 2, kernel[1] // 2)
        self.hidden = hidden
        self.gates = nn.Conv2d(in_ch + hidden, 4 * hidden, kernel, padding=pad)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = self.gates(torch.cat([x, h], 1)).chunk(4, 1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class RecurrentAggregator(nn.Module):
    """Runs a conv-recurrent cell over ``[T, C, H, W]`` from a zero state; returns the final hidden state."""

    def __init__(self, channels: int, kernel, kind: TemporalModule):
        super().__init__()
        self.kind = kind
        cell = ConvGRUCell if kind is TemporalModule.CONV_GRU else ConvLSTMCell
        self.cell = cell(channels, channels, kernel)

    def forward(self, seq):
        if seq.shape[0] == 0:
            raise ValueError("cannot aggregate an empty sequence")
        h = seq.new_zeros((1, self.cell.hidden) + tuple(seq.shape[2:]))
        if self.kind is TemporalModule.CONV_GRU:
            for x in seq:
                h = self.cell(x[None], h)
        else:
            c = torch.zeros_like(h)
            for x in seq:
                h, c = self.cell(x[None], (h, c))
        return h[0]


def sinusoidal_encoding(length: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    position = torch.arange(length, device=device, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, device=device, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, device=device, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: dim // 2])
    return pe.to(dtype or torch.get_default_dtype())


class TransformerAggregator(nn.Module):
    """Self-attention along time at every pixel, then mean over time."""

    def __init__(self, channels: int, heads: int, layers: int, positional_encoding: bool = True):
        super().__init__()
        self.positional_encoding = positional_encoding
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=channels,
                nhead=heads,
                dim_feedforward=2 * channels,
                dropout=0.0,
                batch_first=True,
                norm_first=True,
            )
            for _ in range(layers)
        )

    def forward(self, seq):
        t, c, h, w = seq.shape
        if t == 0:
            raise ValueError("cannot aggregate an empty sequence")
        tokens = seq.permute(2, 3, 0, 1).reshape(h * w, t, c)
        if self.positional_encoding:
            tokens = tokens + sinusoidal_encoding(t, c, seq.device, seq.dtype)[None]
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens.mean(1).reshape(h, w, c).permute(2, 0, 1)


def make_aggregator(channels: int, cfg: CaveConfig) -> nn.Module:
    if cfg.temporal_module is TemporalModule.TEMPORAL_TRANSFORMER:
        return TransformerAggregator(channels, cfg.attn_heads, cfg.attn_layers, cfg.positional_encoding)
    return RecurrentAggregator(channels, cfg.temporal_kernel, cfg.temporal_module)


class Decoder(nn.Module):
    def __init__(self, cfg: CaveConfig):
        super().__init__()
        ch = cfg.channels
        # up layer s: upsample ch[s+1], concat skip ch[s], double-conv down to ch[s]
        self.ups = nn.ModuleList(DoubleConv(ch[s + 1] + ch[s], ch[s]) for s in reversed(range(cfg.depth)))
        self.head = nn.Conv2d(ch[0], cfg.out_channels, 1)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        """``pyramid``: per-scale ``[N, C_s, H_s, W_s]`` maps; returns logits ``[N, out, H, W]``."""
        x = pyramid[-1]
        for up, skip in zip(self.ups, reversed(pyramid[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if x.shape[-2:] != skip.shape[-2:]:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match upsampled {tuple(x.shape)}")
            x = up(torch.cat([x, skip], 1))
        return self.head(x)


class CaveNet(nn.Module):
    """Shared per-frame encoder, per-scale temporal aggregation, 2D decoder.

    With ``temporal_module=NONE`` this is the plain U-Net baseline and expects
    a single image (``T == 1``).
    """

    def __init__(self, cfg: Optional[CaveConfig] = None):
        super().__init__()
        self.cfg = cfg or CaveConfig()
        self.encoder = Encoder(self.cfg)
        if self.cfg.is_temporal:
            scales = self.cfg.channels if self.cfg.aggregate_scale0 else self.cfg.channels[1:]
            self.aggregators = nn.ModuleList(make_aggregator(c, self.cfg) for c in scales)
        else:
            self.aggregators = nn.ModuleList()
        self.decoder = Decoder(self.cfg)

    def check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected [T, 1, H, W] input, got {tuple(x.shape)}")
        if x.shape[0] == 0:
            raise ValueError("series has no frames")
        f = 2**self.cfg.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"H and W must be divisible by 2**depth = {f}, got {tuple(x.shape[2:])}")
        if not self.cfg.is_temporal and x.shape[0] != 1:
            raise ValueError("the U-Net baseline takes a single image (T == 1)")

    def spatial_encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Feature pyramid: per scale ``[T, C_s, H/2^s, W/2^s]``."""
        self.check_input(x)
        return self.encoder(x)

    def temporal_aggregate(self, pyramid: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        """Collapse time at every scale: ``[T, C, H, W] -> [1, C, H, W]``."""
        if not self.cfg.is_temporal:
            return list(pyramid)
        out = []
        aggs = iter(self.aggregators)
        for s, feats in enumerate(pyramid):
            if s == 0 and not self.cfg.aggregate_scale0:
                out.append(feats[-1:])
            else:
                out.append(next(aggs)(feats)[None])
        return out

    def spatial_decode(self, aggregated: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.decoder(aggregated)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits ``[2, H, W]`` for a ``[T, 1, H, W]`` series."""
        return self.spatial_decode(self.temporal_aggregate(self.spatial_encode(x)))[0]

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(x))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def cave_forward(model: CaveNet, series: torch.Tensor) -> torch.Tensor:
    if not model.cfg.is_temporal:
        raise ValueError("cave_forward needs a temporal model; use unet_forward for the baseline")
    return model.predict_proba(series)


def unet_forward(model: CaveNet, image: torch.Tensor) -> torch.Tensor:
    """U-Net probabilities for one ``[1, H, W]`` image (the MinIP for the baseline)."""
    if model.cfg.is_temporal:
        raise ValueError("unet_forward needs temporal_module=NONE")
    if image.ndim == 2:
        image = image[None]
    return model.predict_proba(image[None])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "cave-checkpoint/1"


def save_checkpoint(path, model: CaveNet, extra: Optional[dict] = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
            "state_dict": model.state_dict(),
            "extra": json.dumps(extra or {}, sort_keys=True),
        },
        path,
    )


def load_checkpoint(path, map_location="cpu") -> Tuple[CaveNet, dict]:
    blob = torch.load(path, map_location=map_location, weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    model = CaveNet(CaveConfig.from_dict(json.loads(blob["config"])))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, json.loads(blob["extra"])
