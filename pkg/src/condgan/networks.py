"""Architecture builders for every model family at configurable resolution.

All models exchange channels-last image batches (B x H x W x 3) in [-1, 1]
and produce one scalar score per sample on the critic side. Construction is
single-threaded; built models support concurrent read-only inference with
training updates confined to one writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .conditioning import EmbeddingCompressor

FAMILIES = (
    "gan-cls",
    "stackgan-stage1",
    "stackgan-stage2",
    "wgan-cls",
    "cpggan",
)
LOSS_FAMILIES = ("gan-cls", "wgan-cls", "lsgan")

# Full-scale per-stage channel widths for resolutions 4, 8, ..., 256. The
# desk default divides these by 8 so CPU smoke training is feasible.
FULL_CHANNEL_SCHEDULE = (512, 512, 512, 512, 256, 128, 64)
DESK_CHANNEL_DIVISOR = 8
RGB_HIDDEN_CHANNELS = 9


class InvalidConfigError(ValueError):
    """Raised for architecture or experiment configs that cannot be built."""


@dataclass(frozen=True)
class ArchitectureConfig:
    """Declarative description of one model's topology."""

    family: str
    base_resolution: int = 4
    max_resolution: int = 64
    noise_dim: int = 128
    compressed_embed_dim: int = 128
    embedding_dim: int = 1024
    channel_schedule: tuple = ()
    noise_hack: bool = False
    noise_strength: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"unknown family {self.family!r}")
        ratio = self.max_resolution / self.base_resolution
        k = math.log2(ratio) if ratio >= 1 else -1
        if k < 0 or abs(k - round(k)) > 1e-9:
            raise InvalidConfigError(
                "max_resolution must be base_resolution times a power of two"
            )
        for name in ("noise_dim", "compressed_embed_dim", "embedding_dim"):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be positive")
        if self.noise_strength < 0:
            raise InvalidConfigError("noise_strength must be nonnegative")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.max_resolution // self.base_resolution)) + 1

    def resolved_channels(self) -> tuple:
        """Per-stage channel widths, defaulting to the full schedule divided
        by eight and extended by halving if more stages are requested."""
        if self.channel_schedule:
            schedule = tuple(int(c) for c in self.channel_schedule)
        else:
            schedule = tuple(
                max(c // DESK_CHANNEL_DIVISOR, 4) for c in FULL_CHANNEL_SCHEDULE
            )
        out = list(schedule[: self.num_stages])
        while len(out) < self.num_stages:
            out.append(max(out[-1] // 2, 4))
        return tuple(out)

    def stage_resolution(self, stage: int) -> int:
        return self.base_resolution * 2 ** (stage - 1)


def init_weights(module: nn.Module) -> None:
    """Small-variance normal initialization scaled by fan-in."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        fan_in = module.weight.shape[1] * (
            module.weight.shape[2] * module.weight.shape[3]
            if module.weight.dim() == 4
            else 1
        )
        nn.init.normal_(module.weight, 0.0, 1.0 / math.sqrt(max(fan_in, 1)))
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def to_nchw(images: torch.Tensor) -> torch.Tensor:
    return images.permute(0, 3, 1, 2).contiguous()


def to_nhwc(images: torch.Tensor) -> torch.Tensor:
    return images.permute(0, 2, 3, 1).contiguous()


def apply_multiplicative_noise(
    activations: torch.Tensor, strength: float, generator=None
) -> torch.Tensor:
    """Multiply activations elementwise by (1 + strength * g), g standard
    normal. The identity when strength is zero."""
    if strength < 0:
        raise ValueError("strength must be nonnegative")
    if strength == 0:
        return activations
    g = torch.randn(
        activations.shape,
        generator=generator,
        dtype=activations.dtype,
        device=activations.device,
    )
    return activations * (1.0 + strength * g)


class MultiplicativeNoise(nn.Module):
    """Training-only multiplicative Gaussian noise between critic layers."""

    def __init__(self, strength: float):
        super().__init__()
        self.strength = strength

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training:
            return x
        return apply_multiplicative_noise(x, self.strength)


def _norm_layer(kind: str, channels: int):
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "layer":
        # normalizes over all hidden units of the layer, per sample
        return nn.GroupNorm(1, channels)
    return nn.Identity()


def _activation(kind: str):
    if kind == "relu":
        return nn.ReLU()
    if kind == "leaky-relu":
        return nn.LeakyReLU(0.2)
    raise ValueError(f"unknown activation {kind!r}")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: str, act: str):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm_layer(norm, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm_layer(norm, channels)
        self.act = _activation(act)

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + x)


def _replicate_embedding(embedding: torch.Tensor, size: int) -> torch.Tensor:
    """Spatially replicate a (B, C) embedding to (B, C, size, size)."""
    return embedding[:, :, None, None].expand(-1, -1, size, size)


class SingleStageGenerator(nn.Module):
    """Direct generator: projects noise plus conditioning to a 4x4 block,
    then deconvolves up to the target resolution with a tanh image head.

    Two residual blocks sit on the 4x4 trunk.
    """

    def __init__(self, cfg: ArchitectureConfig, act: str = "relu"):
        super().__init__()
        self.cfg = cfg
        channels = cfg.resolved_channels()
        ch0 = channels[0]
        self.project = nn.Linear(cfg.noise_dim + cfg.compressed_embed_dim, ch0 * 16)
        self.trunk_norm = _norm_layer("batch", ch0)
        self.residual = nn.Sequential(
            ResidualBlock(ch0, "batch", act), ResidualBlock(ch0, "batch", act)
        )
        ups = []
        for i in range(cfg.num_stages - 1):
            ups.append(nn.ConvTranspose2d(channels[i], channels[i + 1], 4, 2, 1))
            ups.append(_norm_layer("batch", channels[i + 1]))
            ups.append(_activation(act))
        self.upsampler = nn.Sequential(*ups)
        self.to_rgb = nn.Conv2d(channels[-1], 3, 3, padding=1)
        self.act = _activation(act)
        self.apply(init_weights)

    def forward(self, noise: torch.Tensor, conditioning: torch.Tensor):
        h = self.project(torch.cat([noise, conditioning], dim=1))
        h = h.reshape(h.shape[0], -1, 4, 4)
        h = self.act(self.trunk_norm(h))
        h = self.residual(h)
        h = self.upsampler(h)
        return to_nhwc(torch.tanh(self.to_rgb(h)))


class RefinementGenerator(nn.Module):
    """Second-stage generator: consumes a low-resolution image, folds the
    conditioning back in at the 4x4 bottleneck, and upsamples to four times
    the input resolution."""

    def __init__(self, cfg: ArchitectureConfig, act: str = "relu"):
        super().__init__()
        self.cfg = cfg
        channels = cfg.resolved_channels()
        self.input_resolution = cfg.max_resolution // 4
        in_stage = int(math.log2(self.input_resolution // cfg.base_resolution))
        self.from_rgb = nn.Conv2d(3, channels[in_stage], 3, padding=1)
        downs = []
        for i in range(in_stage, 0, -1):
            downs.append(nn.Conv2d(channels[i], channels[i - 1], 4, 2, 1))
            downs.append(_norm_layer("batch", channels[i - 1]))
            downs.append(_activation(act))
        self.downsampler = nn.Sequential(*downs)
        ch0 = channels[0]
        self.merge = nn.Conv2d(ch0 + cfg.compressed_embed_dim, ch0, 3, padding=1)
        self.merge_norm = _norm_layer("batch", ch0)
        self.residual = nn.Sequential(
            *[ResidualBlock(ch0, "batch", act) for _ in range(3)]
        )
        ups = []
        for i in range(cfg.num_stages - 1):
            ups.append(nn.ConvTranspose2d(channels[i], channels[i + 1], 4, 2, 1))
            ups.append(_norm_layer("batch", channels[i + 1]))
            ups.append(_activation(act))
        self.upsampler = nn.Sequential(*ups)
        self.to_rgb = nn.Conv2d(channels[-1], 3, 3, padding=1)
        self.act = _activation(act)
        self.apply(init_weights)

    def forward(self, low_res: torch.Tensor, conditioning: torch.Tensor):
        if low_res.shape[1] != self.input_resolution:
            raise ValueError(
                f"expected {self.input_resolution}x{self.input_resolution} input, "
                f"got {tuple(low_res.shape)}"
            )
        h = self.act(self.from_rgb(to_nchw(low_res)))
        h = self.downsampler(h)
        cond = _replicate_embedding(conditioning, h.shape[-1])
        h = self.act(self.merge_norm(self.merge(torch.cat([h, cond], dim=1))))
        h = self.residual(h)
        h = self.upsampler(h)
        return to_nhwc(torch.tanh(self.to_rgb(h)))


class MatchingAwareDiscriminator(nn.Module):
    """Conditional critic: convolves the image down to 4x4, concatenates the
    spatially replicated compressed embedding in depth, and reduces to one
    scalar per sample.

    The head is a sigmoid for the probability family and linear otherwise.
    One residual block sits after the embedding merge; an extra merge
    convolution is added for the Wasserstein family, whose uncrippled critic
    can afford it.
    """

    def __init__(
        self,
        cfg: ArchitectureConfig,
        norm: str,
        probability_head: bool,
        extra_merge_conv: bool = False,
        input_resolution: int | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.probability_head = probability_head
        channels = cfg.resolved_channels()
        resolution = input_resolution or cfg.max_resolution
        n_down = int(math.log2(resolution // cfg.base_resolution))
        widths = [channels[min(i, len(channels) - 1)] for i in range(n_down + 1)]

        layers = [nn.Conv2d(3, widths[n_down - 1] if n_down else widths[0], 4, 2, 1)]
        layers.append(_activation("leaky-relu"))
        for i in range(n_down - 1, 0, -1):
            layers.append(nn.Conv2d(widths[i], widths[i - 1], 4, 2, 1))
            layers.append(_norm_layer(norm, widths[i - 1]))
            layers.append(_activation("leaky-relu"))
            if cfg.noise_hack:
                layers.append(MultiplicativeNoise(cfg.noise_strength))
        self.down = nn.Sequential(*layers)

        ch0 = widths[0]
        merge = [
            nn.Conv2d(ch0 + cfg.compressed_embed_dim, ch0, 1),
            _norm_layer(norm, ch0),
            _activation("leaky-relu"),
        ]
        if extra_merge_conv:
            merge += [
                nn.Conv2d(ch0, ch0, 3, padding=1),
                _norm_layer(norm, ch0),
                _activation("leaky-relu"),
            ]
        self.merge = nn.Sequential(*merge)
        self.residual = ResidualBlock(ch0, norm, "leaky-relu")
        self.final_conv = nn.Conv2d(ch0, ch0, 4)
        self.head = nn.Linear(ch0, 1)
        self.compress = EmbeddingCompressor(cfg.embedding_dim, cfg.compressed_embed_dim)
        self.apply(init_weights)

    def forward(self, images: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        """Score channels-last images against compressed embeddings (B, N_c)."""
        h = self.down(to_nchw(images))
        cond = _replicate_embedding(embedding, h.shape[-1])
        h = self.merge(torch.cat([h, cond], dim=1))
        h = self.residual(h)
        h = F.leaky_relu(self.final_conv(h), 0.2)
        score = self.head(h.flatten(1)).squeeze(1)
        return torch.sigmoid(score) if self.probability_head else score


class ProgressiveGenerator(nn.Module):
    """Growing generator: a 4x4 projection stage followed by doubling stages,
    each with its own image head so consecutive stages can be fade-blended.
    """

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.resolved_channels()
        self.project = nn.Linear(
            cfg.noise_dim + cfg.compressed_embed_dim, channels[0] * 16
        )
        self.stage_blocks = nn.ModuleList()
        self.rgb_heads = nn.ModuleList()
        for k in range(cfg.num_stages):
            in_ch = channels[max(k - 1, 0)]
            out_ch = channels[k]
            self.stage_blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 3, padding=1),
                    _norm_layer("layer", out_ch),
                    nn.ReLU(),
                    nn.Conv2d(out_ch, out_ch, 3, padding=1),
                    _norm_layer("layer", out_ch),
                    nn.ReLU(),
                )
            )
            self.rgb_heads.append(
                nn.Sequential(
                    nn.Conv2d(out_ch, RGB_HIDDEN_CHANNELS, 1),
                    nn.ReLU(),
                    nn.Conv2d(RGB_HIDDEN_CHANNELS, 3, 1),
                )
            )
        self.apply(init_weights)

    def _features(self, noise, conditioning, up_to_stage: int):
        h = self.project(torch.cat([noise, conditioning], dim=1))
        h = h.reshape(h.shape[0], -1, 4, 4)
        features = []
        for k in range(up_to_stage):
            if k > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.stage_blocks[k](h)
            features.append(h)
        return features

    def _rgb(self, features: torch.Tensor, stage_index: int) -> torch.Tensor:
        return to_nhwc(torch.tanh(self.rgb_heads[stage_index](features)))

    def forward(
        self,
        noise: torch.Tensor,
        conditioning: torch.Tensor,
        stage: int | None = None,
        alpha: float = 1.0,
    ) -> torch.Tensor:
        """Image at the given stage's resolution; during a fade (alpha < 1)
        the output blends the upscaled previous stage with the new one."""
        stage = stage or self.cfg.num_stages
        if not 1 <= stage <= self.cfg.num_stages:
            raise ValueError(f"stage must be in [1, {self.cfg.num_stages}]")
        features = self._features(noise, conditioning, stage)
        new_rgb = self._rgb(features[-1], stage - 1)
        if alpha >= 1.0 or stage == 1:
            return new_rgb
        from .progressive import blend_generator_output

        prev_rgb = self._rgb(features[-2], stage - 2)
        return blend_generator_output(prev_rgb, new_rgb, alpha)

    def stage_outputs(self, noise, conditioning):
        """One image per stage, at doubling resolutions."""
        features = self._features(noise, conditioning, self.cfg.num_stages)
        return tuple(self._rgb(f, k) for k, f in enumerate(features))


class ProgressiveDiscriminator(nn.Module):
    """Growing critic: per-stage input conversions feed a shared downsampling
    stack that ends in the embedding merge at 4x4."""

    def __init__(self, cfg: ArchitectureConfig, norm: str = "none"):
        super().__init__()
        self.cfg = cfg
        channels = cfg.resolved_channels()
        n = cfg.num_stages
        ch_max = max(channels)
        # Width entering stage k mirrors the generator one stage higher.
        entry = []
        for k in range(1, n + 1):
            if k < n:
                entry.append(channels[k])
            else:
                entry.append(ch_max if channels[k - 1] == ch_max else
                             max(channels[k - 1] // 2, 4))
        self.entry_widths = tuple(entry)

        self.from_rgb = nn.ModuleList(
            nn.Sequential(nn.Conv2d(3, entry[k], 1), nn.ReLU()) for k in range(n)
        )
        self.stage_blocks = nn.ModuleList()
        for k in range(1, n):
            width_in = entry[k]
            width_out = entry[k - 1]
            block = [
                nn.Conv2d(width_in, width_in, 3, padding=1),
                _norm_layer(norm, width_in),
                nn.ReLU(),
            ]
            if cfg.noise_hack:
                block.append(MultiplicativeNoise(cfg.noise_strength))
            block += [
                nn.Conv2d(width_in, width_out, 3, padding=1),
                _norm_layer(norm, width_out),
                nn.ReLU(),
                nn.AvgPool2d(2),
            ]
            self.stage_blocks.append(nn.Sequential(*block))

        base_width = entry[0]
        self.merge = nn.Sequential(
            nn.Conv2d(base_width + cfg.compressed_embed_dim, base_width, 3, padding=1),
            _norm_layer(norm, base_width),
            nn.ReLU(),
        )
        self.final_conv = nn.Conv2d(base_width, base_width, 4)
        self.head = nn.Linear(base_width, 1)
        self.compress = EmbeddingCompressor(cfg.embedding_dim, cfg.compressed_embed_dim)
        self.apply(init_weights)

    def forward(
        self,
        images: torch.Tensor,
        embedding: torch.Tensor,
        stage: int | None = None,
        alpha: float = 1.0,
    ) -> torch.Tensor:
        """Score images of the stage's resolution against compressed
        embeddings; during a fade the newest stage's features are blended
        with the previous input conversion applied to the downscaled image."""
        stage = stage or self.cfg.num_stages
        if not 1 <= stage <= self.cfg.num_stages:
            raise ValueError(f"stage must be in [1, {self.cfg.num_stages}]")
        expected = self.cfg.stage_resolution(stage)
        if images.shape[1] != expected:
            raise ValueError(
                f"stage {stage} expects {expected}x{expected} images, got "
                f"{tuple(images.shape)}"
            )
        h = self.from_rgb[stage - 1](to_nchw(images))
        if stage > 1:
            h = self.stage_blocks[stage - 2](h)
            if alpha < 1.0:
                from .progressive import blend_discriminator_input

                _, downscaled, weight = blend_discriminator_input(images, alpha)
                h_old = self.from_rgb[stage - 2](to_nchw(downscaled))
                h = weight * h + (1.0 - weight) * h_old
            for k in range(stage - 2, 0, -1):
                h = self.stage_blocks[k - 1](h)
        cond = _replicate_embedding(embedding, h.shape[-1])
        h = self.merge(torch.cat([h, cond], dim=1))
        h = F.relu(self.final_conv(h))
        return self.head(h.flatten(1)).squeeze(1)


def build_generator(cfg: ArchitectureConfig) -> nn.Module:
    """Construct the generator for a family; output pixels are tanh-bounded
    for every family."""
    if cfg.family == "gan-cls":
        return SingleStageGenerator(cfg, act="leaky-relu")
    if cfg.family in ("stackgan-stage1", "wgan-cls"):
        return SingleStageGenerator(cfg, act="relu")
    if cfg.family == "stackgan-stage2":
        return RefinementGenerator(cfg)
    if cfg.family == "cpggan":
        return ProgressiveGenerator(cfg)
    raise InvalidConfigError(f"unknown family {cfg.family!r}")


def build_discriminator(
    cfg: ArchitectureConfig, loss_family: str, batch_norm: bool | None = None
) -> nn.Module:
    """Construct the critic matching the loss family's head and
    normalization constraints.

    Batch normalization cannot be combined with a gradient-penalized loss:
    the penalty assumes each sample's gradient is its own, which batch
    statistics break.
    """
    if loss_family not in LOSS_FAMILIES:
        raise InvalidConfigError(f"unknown loss family {loss_family!r}")
    penalized = loss_family == "wgan-cls"
    if batch_norm is None:
        batch_norm = loss_family == "gan-cls"
    if batch_norm and penalized:
        raise InvalidConfigError(
            "batch normalization cannot be used together with a gradient penalty"
        )
    probability_head = loss_family == "gan-cls"

    if cfg.family == "cpggan":
        norm = "layer" if loss_family == "lsgan" else "none"
        return ProgressiveDiscriminator(cfg, norm=norm)
    norm = "batch" if batch_norm else "none"
    return MatchingAwareDiscriminator(
        cfg,
        norm=norm,
        probability_head=probability_head,
        extra_merge_conv=(cfg.family == "wgan-cls"),
    )
