"""Freeze-and-fuse: collapse segmentation feature maps to vectors, fuse them
with the detection feature vector and classify the 16 findings.

Only the collapse projections and fusion layers train; the three pretrained
trunks stay frozen (parameters and buffers alike)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from . import checkpointing, networks
from .errors import CheckpointMismatch, ConfigError, DimMismatch
from .networks import ForwardResult

POOLING_MODES = ("global_avg", "avg_plus_max")


@dataclass(frozen=True)
class FusionConfig:
    pooling: str = "global_avg"
    det_dim: int = 4032      # pass-through width of the detection feature vector
    hem_dim: int = 4032      # projection targets for the two segmentation sources
    anat_dim: int = 4032
    hidden_dims: tuple[int, ...] = (1024,)   # () selects the pure-linear fusion
    num_outputs: int = networks.NUM_OUTPUTS
    freeze_det: bool = True
    freeze_hem: bool = True
    freeze_anat: bool = True
    use_softmax_outputs: bool = False  # ablation: collapse class probabilities instead

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if min(self.det_dim, self.hem_dim, self.anat_dim) <= 0:
            raise ConfigError("projected dims must be positive")


@dataclass
class FrozenMarker:
    network: nn.Module
    checksum: str


def parameter_checksum(module: nn.Module) -> str:
    """Order-independent digest over all parameters and buffers (bit-exact)."""
    h = hashlib.sha256()
    items = list(module.state_dict().items())
    for name, tensor in sorted(items, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def freeze(network: nn.Module) -> FrozenMarker:
    """Mark every parameter non-trainable and pin normalization statistics."""
    for p in network.parameters():
        p.requires_grad_(False)
    network.eval()
    return FrozenMarker(network=network, checksum=parameter_checksum(network))


class CollapseProjection(nn.Module):
    """Global pooling over a feature map followed by a learned projection."""

    def __init__(self, in_channels: int, out_dim: int, pooling: str = "global_avg"):
        super().__init__()
        if pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        self.pooling = pooling
        self.in_channels = in_channels
        pooled = in_channels if pooling == "global_avg" else 2 * in_channels
        self.projection = nn.Linear(pooled, out_dim)

    def pool(self, fmap: torch.Tensor) -> torch.Tensor:
        avg = fmap.mean(dim=(2, 3, 4))
        if self.pooling == "global_avg":
            return avg
        mx = fmap.amax(dim=(2, 3, 4))
        return torch.cat([avg, mx], dim=1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.ndim != 5 or fmap.shape[1] != self.in_channels:
            raise DimMismatch(
                f"expected (B, {self.in_channels}, Z, Y, X) feature map, got {tuple(fmap.shape)}")
        return self.projection(self.pool(fmap))


def collapse_seg_features(fmap: torch.Tensor, projection: CollapseProjection) -> torch.Tensor:
    return projection(fmap)


class FusionHead(nn.Module):
    """Concatenate the three source vectors, then linear (ReLU-separated) layers."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        dims = (cfg.det_dim, cfg.hem_dim, cfg.anat_dim)
        self.source_dims = dims
        layers = []
        width = sum(dims)
        for hidden in cfg.hidden_dims:
            layers.append(nn.Linear(width, hidden))
            layers.append(nn.ReLU(inplace=True))
            width = hidden
        layers.append(nn.Linear(width, cfg.num_outputs))
        self.layers = nn.Sequential(*layers)

    def forward(self, f_det, f_hem, f_anat) -> torch.Tensor:
        for vec, dim, name in zip((f_det, f_hem, f_anat), self.source_dims,
                                  ("detection", "hemorrhage", "anatomy")):
            if vec.shape[-1] != dim:
                raise DimMismatch(f"{name} feature length {vec.shape[-1]}, expected {dim}")
        return self.layers(torch.cat([f_det, f_hem, f_anat], dim=-1))


def fuse_and_classify(f_det, f_hem, f_anat, head: FusionHead) -> torch.Tensor:
    return head(f_det, f_hem, f_anat)


class FusedModel(nn.Module):
    """Three frozen trunks -> collapse projections -> fusion layers -> 16 logits."""

    def __init__(self, det_net: networks.DetectionNet, hem_net: networks.HemorrhageSegNet,
                 anat_net: networks.ParcellationNet, cfg: FusionConfig):
        super().__init__()
        if det_net.feature_dim != cfg.det_dim:
            raise CheckpointMismatch(
                f"detection trunk emits {det_net.feature_dim}-d features, "
                f"fusion expects {cfg.det_dim}")
        self.cfg = cfg
        self.det_net = det_net
        self.hem_net = hem_net
        self.anat_net = anat_net

        hem_channels = (hem_net.cfg.num_classes if cfg.use_softmax_outputs
                        else hem_net.decoder_channels)
        anat_channels = (sum(anat_net.cfg.head_classes) if cfg.use_softmax_outputs
                         else anat_net.decoder_channels)
        self.collapse_hem = CollapseProjection(hem_channels, cfg.hem_dim, cfg.pooling)
        self.collapse_anat = CollapseProjection(anat_channels, cfg.anat_dim, cfg.pooling)
        self.fusion_head = FusionHead(cfg)

        self.frozen: dict[str, FrozenMarker] = {}
        for name, net, flag in (("detection", det_net, cfg.freeze_det),
                                ("hemorrhage_seg", hem_net, cfg.freeze_hem),
                                ("parcellation", anat_net, cfg.freeze_anat)):
            if flag:
                self.frozen[name] = freeze(net)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen trunks keep their normalization statistics pinned
        for marker in self.frozen.values():
            marker.network.eval()
        return self

    def _source_features(self, x):
        det = self.det_net(x)
        hem = self.hem_net(x)
        anat = self.anat_net(x)
        if self.cfg.use_softmax_outputs:
            hem_map = torch.softmax(hem.logits, dim=1)
            anat_map = torch.cat([torch.softmax(t, dim=1) for t in anat.logits], dim=1)
        else:
            hem_map = hem.features["decoder_feature_map"]
            anat_map = anat.features["decoder_feature_map"]
        return det.features["feature_vector"], hem_map, anat_map

    def forward(self, x) -> ForwardResult:
        f_det, hem_map, anat_map = self._source_features(x)
        f_hem = self.collapse_hem(hem_map)
        f_anat = self.collapse_anat(anat_map)
        logits = self.fusion_head(f_det, f_hem, f_anat)
        return ForwardResult(logits=logits, features={
            "detection_vector": f_det,
            "hemorrhage_vector": f_hem,
            "anatomy_vector": f_anat,
        })

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trunk_checksums(self) -> dict[str, str]:
        return {name: parameter_checksum(marker.network)
                for name, marker in self.frozen.items()}


def _expect_kind(ckpt, kind: str):
    if ckpt.kind != kind:
        raise CheckpointMismatch(f"expected a {kind} checkpoint, got {ckpt.kind!r}")
    return ckpt


def build_fused_model(det_ckpt, hem_ckpt, anat_ckpt, cfg: FusionConfig,
                      seed: int = 0) -> FusedModel:
    """Assemble the fused classifier from three trunk checkpoints (paths or objects)."""
    det = checkpointing.resolve_checkpoint(det_ckpt)
    hem = checkpointing.resolve_checkpoint(hem_ckpt)
    anat = checkpointing.resolve_checkpoint(anat_ckpt)
    _expect_kind(det, "detection")
    _expect_kind(hem, "hemorrhage_seg")
    _expect_kind(anat, "parcellation")

    det_net = checkpointing.build_net_from_checkpoint(det)
    hem_net = checkpointing.build_net_from_checkpoint(hem)
    anat_net = checkpointing.build_net_from_checkpoint(anat)

    devices = []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        return FusedModel(det_net, hem_net, anat_net, cfg)


_TRUNK_ROLES = (("det_net.", "detection"), ("hem_net.", "hemorrhage_seg"),
                ("anat_net.", "parcellation"))


def make_fused_checkpoint(model: FusedModel, epoch: int = 0, history=None,
                          rng_state=None, optimizer_state=None) -> checkpointing.Checkpoint:
    """Composite container: fusion parameters plus the three trunks and their checksums."""
    from dataclasses import asdict

    trunk_payload = {}
    for name, net in (("detection", model.det_net), ("hemorrhage_seg", model.hem_net),
                      ("parcellation", model.anat_net)):
        trunk_payload[name] = {
            "config": {"net": asdict(net.cfg)},
            "model_state": checkpointing.state_to_numpy(net),
        }
    fusion_state = {
        name: tensor for name, tensor in checkpointing.state_to_numpy(model).items()
        if name.startswith(("collapse_hem.", "collapse_anat.", "fusion_head."))
    }
    return checkpointing.Checkpoint(
        kind="fused",
        config={"fusion": asdict(model.cfg)},
        model_state=fusion_state,
        optimizer_state=optimizer_state,
        epoch=epoch,
        rng_state=rng_state,
        history=list(history or []),
        extra={
            "trunks": trunk_payload,
            "trunk_checksums": {name: parameter_checksum(net) for name, net in
                                (("detection", model.det_net),
                                 ("hemorrhage_seg", model.hem_net),
                                 ("parcellation", model.anat_net))},
        },
    )


def save_fused_checkpoint(model: FusedModel, path, epoch: int = 0, history=None,
                          rng_state=None, optimizer_state=None) -> None:
    ckpt = make_fused_checkpoint(model, epoch=epoch, history=history,
                                 rng_state=rng_state, optimizer_state=optimizer_state)
    checkpointing.save_checkpoint(ckpt, path)


def restore_fused_state(model: FusedModel, ckpt: checkpointing.Checkpoint) -> None:
    """Load a composite checkpoint into an already-assembled fused model."""
    state = {}
    for name in model.state_dict():
        for prefix, role in _TRUNK_ROLES:
            if name.startswith(prefix):
                state[name] = ckpt.extra["trunks"][role]["model_state"][name[len(prefix):]]
                break
        else:
            state[name] = ckpt.model_state[name]
    checkpointing.load_numpy_state(model, state)


def load_fused_model(path) -> FusedModel:
    """Rebuild a fused model; refuses to load if any trunk checksum mismatches."""
    ckpt = checkpointing.resolve_checkpoint(path)
    _expect_kind(ckpt, "fused")
    cfg = FusionConfig(**{
        **ckpt.config["fusion"],
        "hidden_dims": tuple(ckpt.config["fusion"]["hidden_dims"]),
    })

    trunks = {}
    for name, kind in (("detection", "detection"), ("hemorrhage_seg", "hemorrhage_seg"),
                       ("parcellation", "parcellation")):
        payload = ckpt.extra["trunks"][name]
        trunk_ckpt = checkpointing.Checkpoint(kind=kind, config=payload["config"],
                                              model_state=payload["model_state"])
        net = checkpointing.build_net_from_checkpoint(trunk_ckpt)
        actual = parameter_checksum(net)
        expected = ckpt.extra["trunk_checksums"][name]
        if actual != expected:
            raise CheckpointMismatch(f"{name} trunk checksum mismatch")
        trunks[name] = net

    model = FusedModel(trunks["detection"], trunks["hemorrhage_seg"],
                       trunks["parcellation"], cfg)
    fused_state = checkpointing.state_to_numpy(model)
    fused_state.update(ckpt.model_state)
    checkpointing.load_numpy_state(model, fused_state)
    return model
