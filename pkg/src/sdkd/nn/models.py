"""Teacher and student forecasters.

Every model maps ``[B, I*C, H, W]`` (input frames folded into channels) to
``[B, D*C, H, W]``. ``features(x)`` returns ``(prediction, latent)`` where
``latent`` is the tap point used for latent-feature distillation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
from torch import nn

from .layers import GELU, FuseBlock, SelfAttention, gelu

TEACHER_KINDS = ("st_alternet", "simvp")
STUDENT_KINDS = ("unet", "resnet", "mlp_mixer")
KINDS = TEACHER_KINDS + STUDENT_KINDS

TEACHER_HIDDEN = 32
STUDENT_WIDTH_RATIO = 0.25


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    in_frames: int = 10
    out_frames: int = 10
    channels: int = 1
    hidden_dim: int | None = None
    depth: int | None = None
    kernel: int = 3
    heads: int = 4
    n_down: int = 2
    patch: int = 4  # mlp_mixer only
    grid: tuple[int, int] = (32, 32)  # mlp_mixer only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.hidden_dim is None:
            hidden = TEACHER_HIDDEN
            if self.kind in STUDENT_KINDS:
                hidden = round(STUDENT_WIDTH_RATIO * TEACHER_HIDDEN)
            object.__setattr__(self, "hidden_dim", hidden)
        if self.depth is None:
            object.__setattr__(self, "depth", {"st_alternet": 4, "simvp": 4, "unet": 2, "resnet": 3, "mlp_mixer": 2}[self.kind])
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")

    @property
    def in_channels(self) -> int:
        return self.in_frames * self.channels

    @property
    def out_channels(self) -> int:
        return self.out_frames * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**d)

    def student_of(self, kind: str, **overrides) -> "ModelSpec":
        """Student spec sharing this spec's I/O contract at 25% of its width."""
        hidden = max(1, round(STUDENT_WIDTH_RATIO * self.hidden_dim))
        return replace(self, kind=kind, hidden_dim=hidden, depth=None, **overrides)


def _check_divisible(x, factor: int):
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by {factor}")


def _down(cin, cout, k):
    return nn.Conv2d(cin, cout, k, stride=2, padding=k // 2)


def _up(cin, cout):
    return nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)


class STAlterNet(nn.Module):
    """Conv encoder, conv/attention latent evolution, transposed-conv decoder."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d, k = spec.hidden_dim, spec.kernel
        enc = [nn.Conv2d(spec.in_channels, d, k, padding=k // 2), GELU()]
        for _ in range(spec.n_down):
            enc += [_down(d, d, k), GELU()]
        self.encoder = nn.Sequential(*enc)
        self.evolve = nn.ModuleList(FuseBlock(d, k, spec.heads) for _ in range(spec.depth))
        dec = []
        for _ in range(spec.n_down):
            dec += [_up(d, d), GELU()]
        self.decoder = nn.Sequential(*dec)
        self.head = nn.Conv2d(d, spec.out_channels, 1)

    def features(self, x):
        _check_divisible(x, 2**self.spec.n_down)
        z = self.encoder(x)
        for block in self.evolve:
            z = block(z)
        return self.head(self.decoder(z)), z

    def forward(self, x):
        return self.features(x)[0]


class SimVP(nn.Module):
    """Purely convolutional encoder / translator / decoder with an encoder skip."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d, k = spec.hidden_dim, spec.kernel
        self.stem = nn.Conv2d(spec.in_channels, d, k, padding=k // 2)
        self.down = nn.ModuleList(_down(d, d, k) for _ in range(spec.n_down))
        self.translator = nn.ModuleList(
            nn.Sequential(nn.Conv2d(d, d, k, padding=k // 2), GELU(), nn.Conv2d(d, d, k, padding=k // 2))
            for _ in range(spec.depth)
        )
        self.up = nn.ModuleList(_up(d, d) for _ in range(spec.n_down))
        self.fuse = nn.Conv2d(2 * d, d, k, padding=k // 2)
        self.head = nn.Conv2d(d, spec.out_channels, 1)

    def features(self, x):
        _check_divisible(x, 2**self.spec.n_down)
        skip = gelu(self.stem(x))
        z = skip
        for layer in self.down:
            z = gelu(layer(z))
        for block in self.translator:
            z = z + block(z)
        latent = z
        for layer in self.up:
            z = gelu(layer(z))
        z = gelu(self.fuse(torch.cat([z, skip], dim=1)))
        return self.head(z), latent

    def forward(self, x):
        return self.features(x)[0]


class UNet(nn.Module):
    """``depth`` down levels doubling width, symmetric up path with concatenated skips."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d, k = spec.hidden_dim, spec.kernel
        widths = [d * 2**i for i in range(spec.depth + 1)]
        self.stem = nn.Conv2d(spec.in_channels, d, k, padding=k // 2)
        self.down = nn.ModuleList(_down(widths[i], widths[i + 1], k) for i in range(spec.depth))
        self.up = nn.ModuleList(_up(widths[i + 1], widths[i]) for i in reversed(range(spec.depth)))
        self.merge = nn.ModuleList(
            nn.Conv2d(2 * widths[i], widths[i], k, padding=k // 2) for i in reversed(range(spec.depth))
        )
        self.head = nn.Conv2d(d, spec.out_channels, 1)
        self.skip_log: list[tuple] | None = None

    def features(self, x):
        _check_divisible(x, 2**self.spec.depth)
        z = gelu(self.stem(x))
        skips = []
        for layer in self.down:
            skips.append(z)
            z = gelu(layer(z))
        latent = z
        for up, merge in zip(self.up, self.merge):
            z = gelu(up(z))
            skip = skips.pop()
            if self.skip_log is not None:
                self.skip_log.append((tuple(z.shape), tuple(skip.shape)))
            z = gelu(merge(torch.cat([z, skip], dim=1)))
        return self.head(z), latent

    def forward(self, x):
        return self.features(x)[0]


class ResBlock(nn.Module):
    """Identity shortcut around ``layers`` convolutions."""

    def __init__(self, d, k, layers: int = 3):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(d, d, k, padding=k // 2) for _ in range(layers))

    def forward(self, z):
        r = z
        for i, conv in enumerate(self.convs):
            r = conv(r if i == 0 else gelu(r))
        return z + r


class ResNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d, k = spec.hidden_dim, spec.kernel
        self.stem = nn.Conv2d(spec.in_channels, d, k, padding=k // 2)
        self.blocks = nn.ModuleList(ResBlock(d, k) for _ in range(spec.depth))
        self.head = nn.Conv2d(d, spec.out_channels, 1)

    def features(self, x):
        z = gelu(self.stem(x))
        for block in self.blocks:
            z = block(z)
        return self.head(z), z

    def forward(self, x):
        return self.features(x)[0]


class MixerBlock(nn.Module):
    def __init__(self, tokens, dim, token_hidden, channel_hidden):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.token_fc1 = nn.Linear(tokens, token_hidden)
        self.token_fc2 = nn.Linear(token_hidden, tokens)
        self.norm2 = nn.LayerNorm(dim)
        self.channel_fc1 = nn.Linear(dim, channel_hidden)
        self.channel_fc2 = nn.Linear(channel_hidden, dim)

    def forward(self, x):  # [B, N, D]
        y = self.norm1(x).transpose(1, 2)
        x = x + self.token_fc2(gelu(self.token_fc1(y))).transpose(1, 2)
        return x + self.channel_fc2(gelu(self.channel_fc1(self.norm2(x))))


class MLPMixer(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        h, w = spec.grid
        p, d = spec.patch, spec.hidden_dim
        if h % p or w % p:
            raise ValueError(f"grid {spec.grid} not divisible by patch {p}")
        self.hp, self.wp = h // p, w // p
        tokens = self.hp * self.wp
        self.embed = nn.Linear(p * p * spec.in_channels, d)
        self.blocks = nn.ModuleList(MixerBlock(tokens, d, tokens // 2, 2 * d) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, p * p * spec.out_channels)

    def features(self, x):
        b, c, h, w = x.shape
        if (h, w) != self.spec.grid:
            raise ValueError(f"mlp_mixer built for grid {self.spec.grid}, got ({h}, {w})")
        p = self.spec.patch
        t = x.reshape(b, c, self.hp, p, self.wp, p).permute(0, 2, 4, 3, 5, 1)
        t = self.embed(t.reshape(b, self.hp * self.wp, p * p * c))
        for block in self.blocks:
            t = block(t)
        t = self.norm(t)
        latent = t.transpose(1, 2).reshape(b, -1, self.hp, self.wp)
        o = self.spec.out_channels
        y = self.head(t).reshape(b, self.hp, self.wp, p, p, o).permute(0, 5, 1, 3, 2, 4)
        return y.reshape(b, o, h, w), latent

    def forward(self, x):
        return self.features(x)[0]


_REGISTRY = {
    "st_alternet": STAlterNet,
    "simvp": SimVP,
    "unet": UNet,
    "resnet": ResNet,
    "mlp_mixer": MLPMixer,
}


def build_model(spec: ModelSpec, seed: int | None = None) -> nn.Module:
    """Instantiate ``spec``; with ``seed`` the initialisation is reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return _REGISTRY[spec.kind](spec)


def alternation_groups(model: nn.Module) -> tuple[list, list]:
    """``(conv_params, attention_params)``; the second is empty for attention-free models."""
    attn = {id(p) for m in model.modules() if isinstance(m, SelfAttention) for p in m.parameters()}
    params = list(model.parameters())
    return [p for p in params if id(p) not in attn], [p for p in params if id(p) in attn]


def latent_channels(model: nn.Module) -> int:
    spec = model.spec
    if spec.kind == "unet":
        return spec.hidden_dim * 2**spec.depth
    return spec.hidden_dim
