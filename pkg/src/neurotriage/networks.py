"""The three vision networks: dense/SE detection trunks, the hemorrhage-subtype
Dense U-Net, and the three-head anatomy parcellation U-Net."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, InputTooSmall

NUM_OUTPUTS = 16

HEMORRHAGE_SEG_CLASSES = ("background", "intraparenchymal", "subarachnoid",
                          "intraventricular", "subdural", "epidural")

PARCELLATION_HEAD_STRUCTURES = (
    ("left_hemisphere", "right_hemisphere"),
    ("supratentorial", "infratentorial"),
    ("frontal_lobe", "parietal_lobe", "occipital_lobe", "temporal_lobe", "cerebellum",
     "basal_ganglia", "medulla_oblongata", "pons", "midbrain", "falx", "ventricles"),
)


@dataclass
class ForwardResult:
    """Logits plus the named intermediate features downstream stages consume."""
    logits: torch.Tensor | tuple[torch.Tensor, ...]
    features: dict[str, torch.Tensor]


class SEBlock3d(nn.Module):
    """Squeeze-and-excitation channel gate; output shape equals input shape."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        bottleneck = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, bottleneck)
        self.fc2 = nn.Linear(bottleneck, channels)
        self.channels = channels

    def forward(self, x):
        squeezed = x.mean(dim=(2, 3, 4))
        gate = torch.sigmoid(self.fc2(torch.relu(self.fc1(squeezed))))
        return x * gate[:, :, None, None, None]


class DenseLayer3d(nn.Module):
    """BN -> ReLU -> 3x3x3 conv producing `growth` channels, concatenated on."""

    def __init__(self, in_channels: int, growth: int):
        super().__init__()
        self.norm = nn.BatchNorm3d(in_channels)
        self.conv = nn.Conv3d(in_channels, growth, kernel_size=3, padding=1)

    def forward(self, x):
        out = self.conv(torch.relu(self.norm(x)))
        return torch.cat([x, out], dim=1)


class DenseBlock3d(nn.Module):
    def __init__(self, in_channels: int, growth: int, num_layers: int):
        super().__init__()
        if growth < 1 or num_layers < 1:
            raise ConfigError("growth rate and layer count must be >= 1")
        self.in_channels = in_channels
        self.growth = growth
        self.num_layers = num_layers
        self.out_channels = in_channels + growth * num_layers
        self.layers = nn.Sequential(*[
            DenseLayer3d(in_channels + i * growth, growth) for i in range(num_layers)
        ])

    def forward(self, x):
        return self.layers(x)


def _downsample(channels: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(channels, channels, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm3d(channels),
        nn.ReLU(inplace=True),
    )


# --- detection trunks --------------------------------------------------------

@dataclass(frozen=True)
class DetectionNetConfig:
    growth_rate: int
    init_features: int
    total_layers: int
    layer_distribution: tuple[int, ...]
    feature_dim: int
    se_reduction: int = 8
    num_outputs: int = NUM_OUTPUTS
    in_channels: int = 3
    stem_stride: int = 1
    downsample_strides: tuple[int, ...] | None = None

    def __post_init__(self):
        if sum(self.layer_distribution) != self.total_layers:
            raise ConfigError(
                f"layer distribution {self.layer_distribution} sums to "
                f"{sum(self.layer_distribution)}, expected {self.total_layers}")
        if any(n < 1 for n in self.layer_distribution):
            raise ConfigError("every stage needs at least one dense layer")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.num_outputs != NUM_OUTPUTS:
            raise ConfigError(f"output count is fixed at {NUM_OUTPUTS}")
        strides = self.strides
        if len(strides) != len(self.layer_distribution):
            raise ConfigError("downsampling schedule must give one stride per stage")

    @property
    def strides(self) -> tuple[int, ...]:
        if self.downsample_strides is not None:
            return self.downsample_strides
        return tuple(2 for _ in self.layer_distribution)


# published capacity presets: compact trunk and its expanded successor
CNTD = DetectionNetConfig(growth_rate=5, init_features=16, total_layers=15,
                          layer_distribution=(3, 3, 3, 3, 3), feature_dim=1638)
DEEPCNTD = DetectionNetConfig(growth_rate=8, init_features=64, total_layers=20,
                              layer_distribution=(4, 4, 4, 4, 4), feature_dim=4032)
# desk-scale variant for CPU training experiments
DEEPCNTD_REDUCED = DetectionNetConfig(growth_rate=4, init_features=16, total_layers=8,
                                      layer_distribution=(2, 2, 2, 2), feature_dim=256,
                                      stem_stride=2)

DETECTION_PRESETS = {
    "cntd": CNTD,
    "deepcntd": DEEPCNTD,
    "deepcntd_reduced": DEEPCNTD_REDUCED,
}


class DetectionNet(nn.Module):
    """Dense/SE trunk: stem -> [SE -> dense block -> SE -> strided conv]* ->
    global average pool -> linear projection (the feature vector) -> 16 logits."""

    def __init__(self, cfg: DetectionNetConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv3d(cfg.in_channels, cfg.init_features, kernel_size=3,
                      stride=cfg.stem_stride, padding=1),
            nn.BatchNorm3d(cfg.init_features),
            nn.ReLU(inplace=True),
        )
        stages = []
        channels = cfg.init_features
        for num_layers, stride in zip(cfg.layer_distribution, cfg.strides):
            block = DenseBlock3d(channels, cfg.growth_rate, num_layers)
            stages.append(nn.Sequential(
                SEBlock3d(channels, cfg.se_reduction),
                block,
                SEBlock3d(block.out_channels, cfg.se_reduction),
                _downsample(block.out_channels, stride),
            ))
            channels = block.out_channels
        self.stages = nn.Sequential(*stages)
        self.trunk_channels = channels
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.projection = nn.Linear(channels, cfg.feature_dim)
        self.head = nn.Linear(cfg.feature_dim, cfg.num_outputs)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def forward(self, x) -> ForwardResult:
        x = self.stages(self.stem(x))
        feature_vector = self.projection(self.pool(x).flatten(1))
        logits = self.head(feature_vector)
        return ForwardResult(logits=logits, features={"feature_vector": feature_vector})


# --- hemorrhage subtype segmentation ----------------------------------------

@dataclass(frozen=True)
class HemorrhageSegConfig:
    depth: int = 4
    base_channels: int = 16
    growth_rate: int = 4
    layers_per_block: int = 2
    se_reduction: int = 8
    num_classes: int = len(HEMORRHAGE_SEG_CLASSES)
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("U-Net depth must be >= 2")
        if self.num_classes != len(HEMORRHAGE_SEG_CLASSES):
            raise ConfigError("class count is fixed: background + 5 subtypes")

    @property
    def downsampling_factor(self) -> int:
        return 2 ** (self.depth - 1)


class _DenseSEBlock(nn.Module):
    """SE -> dense block -> SE, the repeated unit of the dense U-Net."""

    def __init__(self, in_channels, growth, layers, reduction):
        super().__init__()
        self.block = DenseBlock3d(in_channels, growth, layers)
        self.pre = SEBlock3d(in_channels, reduction)
        self.post = SEBlock3d(self.block.out_channels, reduction)
        self.out_channels = self.block.out_channels

    def forward(self, x):
        return self.post(self.block(self.pre(x)))


class HemorrhageSegNet(nn.Module):
    """3D Dense U-Net with SE gating; voxel logits for background + 5 subtypes."""

    def __init__(self, cfg: HemorrhageSegConfig):
        super().__init__()
        self.cfg = cfg
        g, L, r = cfg.growth_rate, cfg.layers_per_block, cfg.se_reduction

        self.stem = nn.Sequential(
            nn.Conv3d(cfg.in_channels, cfg.base_channels, kernel_size=3, padding=1),
            nn.BatchNorm3d(cfg.base_channels),
            nn.ReLU(inplace=True),
        )
        channels = cfg.base_channels
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        skip_channels = []
        for level in range(cfg.depth):
            block = _DenseSEBlock(channels, g, L, r)
            self.enc_blocks.append(block)
            channels = block.out_channels
            skip_channels.append(channels)
            if level < cfg.depth - 1:
                self.downs.append(_downsample(channels, 2))

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for level in range(cfg.depth - 2, -1, -1):
            skip = skip_channels[level]
            self.ups.append(nn.ConvTranspose3d(channels, skip, kernel_size=2, stride=2))
            block = _DenseSEBlock(2 * skip, g, L, r)
            self.dec_blocks.append(block)
            channels = block.out_channels

        self.decoder_channels = channels
        self.head = nn.Conv3d(channels, cfg.num_classes, kernel_size=1)

    def _check_input(self, x):
        factor = self.cfg.downsampling_factor
        bad = [d for d in x.shape[2:] if d % factor != 0]
        if bad:
            raise InputTooSmall(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor}")

    def forward(self, x) -> ForwardResult:
        self._check_input(x)
        x = self.stem(x)
        skips = []
        for level, block in enumerate(self.enc_blocks):
            x = block(x)
            skips.append(x)
            if level < self.cfg.depth - 1:
                x = self.downs[level](x)
        for i, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            skip = skips[self.cfg.depth - 2 - i]
            x = block(torch.cat([up(x), skip], dim=1))
        logits = self.head(x)
        return ForwardResult(logits=logits, features={"decoder_feature_map": x})


# --- brain anatomy parcellation ----------------------------------------------

@dataclass(frozen=True)
class ParcellationConfig:
    encoder_stages: int = 8
    decoder_stages: int = 7
    level_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    in_channels: int = 3
    head_classes: tuple[int, int, int] = (3, 3, 12)  # background + structures per head

    def __post_init__(self):
        if self.encoder_stages + self.decoder_stages != 15:
            raise ConfigError("the parcellation U-Net has exactly 15 stages")
        if (self.encoder_stages, self.decoder_stages) != (8, 7):
            raise ConfigError("stage split is fixed at 8 encoder + 7 decoder")
        expected = tuple(len(names) + 1 for names in PARCELLATION_HEAD_STRUCTURES)
        if self.head_classes != expected:
            raise ConfigError(f"head class counts are fixed at {expected}")

    @property
    def downsampling_factor(self) -> int:
        return 8

    @property
    def structure_names(self) -> tuple[str, ...]:
        return tuple(n for names in PARCELLATION_HEAD_STRUCTURES for n in names)


def _stage(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm3d(out_ch),
        nn.ReLU(inplace=True),
    )


class ParcellationNet(nn.Module):
    """15-stage U-Net (8 encoder + 7 decoder) with three sibling output heads.

    Downsampling uses strided convolutions, upsampling transposed convolutions;
    all three heads read the same final decoder feature map.
    """

    def __init__(self, cfg: ParcellationConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2, c3 = cfg.level_channels

        self.enc = nn.ModuleList([
            _stage(cfg.in_channels, c0),      # stage 1
            _stage(c0, c0),                   # stage 2 (skip 0)
            _stage(c0, c1, stride=2),         # stage 3
            _stage(c1, c1),                   # stage 4 (skip 1)
            _stage(c1, c2, stride=2),         # stage 5
            _stage(c2, c2),                   # stage 6 (skip 2)
            _stage(c2, c3, stride=2),         # stage 7
            _stage(c3, c3),                   # stage 8
        ])
        self.up2 = nn.ConvTranspose3d(c3, c2, kernel_size=2, stride=2)
        self.up1 = nn.ConvTranspose3d(c2, c1, kernel_size=2, stride=2)
        self.up0 = nn.ConvTranspose3d(c1, c0, kernel_size=2, stride=2)
        self.dec = nn.ModuleList([
            _stage(2 * c2, c2),               # stage 9
            _stage(c2, c2),                   # stage 10
            _stage(2 * c1, c1),               # stage 11
            _stage(c1, c1),                   # stage 12
            _stage(2 * c0, c0),               # stage 13
            _stage(c0, c0),                   # stage 14
            _stage(c0, c0),                   # stage 15
        ])
        self.decoder_channels = c0
        self.heads = nn.ModuleList([
            nn.Conv3d(c0, k, kernel_size=1) for k in cfg.head_classes
        ])

    def _check_input(self, x):
        factor = self.cfg.downsampling_factor
        bad = [d for d in x.shape[2:] if d % factor != 0]
        if bad:
            raise InputTooSmall(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor}")

    def forward(self, x) -> ForwardResult:
        self._check_input(x)
        x = self.enc[0](x)
        skip0 = self.enc[1](x)
        x = self.enc[2](skip0)
        skip1 = self.enc[3](x)
        x = self.enc[4](skip1)
        skip2 = self.enc[5](x)
        x = self.enc[6](skip2)
        x = self.enc[7](x)

        x = self.dec[0](torch.cat([self.up2(x), skip2], dim=1))
        x = self.dec[1](x)
        x = self.dec[2](torch.cat([self.up1(x), skip1], dim=1))
        x = self.dec[3](x)
        x = self.dec[4](torch.cat([self.up0(x), skip0], dim=1))
        x = self.dec[5](x)
        x = self.dec[6](x)

        logits = tuple(head(x) for head in self.heads)
        return ForwardResult(logits=logits, features={"decoder_feature_map": x})


# --- builders & helpers -------------------------------------------------------

def _seeded(build, seed: int):
    devices = [] if not torch.cuda.is_available() else None
    with torch.random.fork_rng(devices=devices or []):
        torch.manual_seed(seed)
        return build()


def build_detection_net(cfg: DetectionNetConfig, seed: int = 0) -> DetectionNet:
    return _seeded(lambda: DetectionNet(cfg), seed)


def build_hemorrhage_segnet(cfg: HemorrhageSegConfig, seed: int = 0) -> HemorrhageSegNet:
    return _seeded(lambda: HemorrhageSegNet(cfg), seed)


def build_parcellation_net(cfg: ParcellationConfig, seed: int = 0) -> ParcellationNet:
    return _seeded(lambda: ParcellationNet(cfg), seed)


def count_parameters(network: nn.Module) -> int:
    """Trainable-at-build scalar parameter count (freezing does not change it)."""
    return sum(p.numel() for p in network.parameters())


def dense_blocks_of(network: nn.Module) -> list[DenseBlock3d]:
    return [m for m in network.modules() if isinstance(m, DenseBlock3d)]


def describe(network: nn.Module, input_shape: tuple[int, ...] | None = None) -> str:
    """Plain-text architecture summary: module path, type, output shape, params."""
    shapes: dict[str, tuple] = {}
    if input_shape is not None:
        hooks = []

        def make_hook(name):
            def hook(_module, _inputs, output):
                if isinstance(output, torch.Tensor):
                    shapes[name] = tuple(output.shape)
            return hook

        for name, module in network.named_modules():
            if name:
                hooks.append(module.register_forward_hook(make_hook(name)))
        was_training = network.training
        network.eval()
        with torch.no_grad():
            network(torch.zeros((1,) + tuple(input_shape)))
        network.train(was_training)
        for h in hooks:
            h.remove()

    lines = [f"{type(network).__name__}: {count_parameters(network)} parameters"]
    for name, module in network.named_modules():
        if not name:
            continue
        own = sum(p.numel() for p in module.parameters(recurse=False))
        shape = shapes.get(name)
        cells = [name, type(module).__name__]
        if shape is not None:
            cells.append("x".join(str(s) for s in shape))
        if own:
            cells.append(f"{own} params")
        lines.append("  " + " | ".join(cells))
    return "\n".join(lines)
