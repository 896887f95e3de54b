"""Optimization loops for the pretraining tasks and fusion fine-tuning, plus
patient-level splitting, imbalance-aware losses and resumable checkpoints."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation, fusion
from .augment import AugmentConfig, augment_study
from .checkpointing import (
    Checkpoint,
    load_checkpoint,
    load_numpy_state,
    load_optimizer_state,
    optimizer_state_to_numpy,
    save_checkpoint,
    state_to_numpy,
)
from .core import NUM_FINDINGS, CTVolume, SeededRng, derive_seed
from .errors import Diverged, EmptyInput, ShapeMismatch
from .networks import DetectionNet, HemorrhageSegNet, ParcellationNet
from .preprocess import PreprocessConfig, preprocess_case_hu, window_channels

TASKS = ("detect_pretrain", "hem_seg", "parcellation", "fusion_finetune")
TASK_KINDS = {
    "detect_pretrain": "detection",
    "hem_seg": "hemorrhage_seg",
    "parcellation": "parcellation",
    "fusion_finetune": "fused",
}


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    max_epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    early_stop_target: float | None = None  # stop once the tune metric reaches this

    def __post_init__(self):
        if self.algorithm != "adam":
            raise ValueError("only the adaptive-moment optimizer ('adam') is supported")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    class_weights: tuple[float, ...] | None = None  # None: derive from train labels
    weight_clamp_max: float = 50.0
    ce_weight: float = 0.5
    dice_weight: float = 0.5

    def __post_init__(self):
        if self.class_weights is not None:
            if len(self.class_weights) != NUM_FINDINGS:
                raise ValueError(f"need {NUM_FINDINGS} class weights")
            if any(w <= 0 for w in self.class_weights):
                raise ValueError("class weights must be > 0")


# --- patient-level splitting --------------------------------------------------

SPLITS = ("train", "tune", "test")


@dataclass
class SplitManifest:
    assignment: dict[str, str]

    @property
    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for split in self.assignment.values():
            out[split] += 1
        return out

    def split_of(self, patient_id: str) -> str:
        return self.assignment[patient_id]

    def to_json(self) -> str:
        return json.dumps({"assignment": self.assignment, "counts": self.counts},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        return cls(assignment=dict(json.loads(text)["assignment"]))


def make_split(patient_ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Deterministic patient-granular split; counts within 1 of fraction*N."""
    unique = sorted(set(patient_ids))
    if not unique:
        raise EmptyInput("no patients to split")
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must be three positive values summing to 1")

    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(unique))
    n = len(unique)
    quotas = [f * n for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0

    assignment = {}
    cursor = 0
    for split, count in zip(SPLITS, counts):
        for idx in order[cursor:cursor + count]:
            assignment[unique[idx]] = split
        cursor += count
    return SplitManifest(assignment=assignment)


# --- losses -------------------------------------------------------------------

def class_weights_from_prevalence(labels, clamp_max: float = 50.0) -> np.ndarray:
    """Inverse-prevalence positive-class weights, clamped to [1, clamp_max]."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != NUM_FINDINGS:
        raise ValueError(f"expected an (N, {NUM_FINDINGS}) label matrix")
    n_pos = labels.sum(axis=0).astype(np.float64)
    n_neg = labels.shape[0] - n_pos
    weights = np.clip(n_neg / np.maximum(n_pos, 1.0), 1.0, clamp_max)
    weights[n_pos == 0] = clamp_max
    return weights


def weighted_bce_with_logits(logits, targets, weights) -> torch.Tensor:
    """Mean over findings of w*t*softplus(-z) + (1-t)*softplus(z).

    softplus keeps the computation in log-sum-exp form, so the loss stays
    finite far into saturation.
    """
    z = torch.as_tensor(logits, dtype=torch.float64) if not torch.is_tensor(logits) else logits
    t = torch.as_tensor(targets, dtype=z.dtype, device=z.device)
    w = torch.as_tensor(weights, dtype=z.dtype, device=z.device)
    per_finding = w * t * torch.nn.functional.softplus(-z) \
        + (1.0 - t) * torch.nn.functional.softplus(z)
    return per_finding.mean()


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 - mean soft Dice over classes, probs (B, C, ...) vs integer target (B, ...)."""
    num_classes = probs.shape[1]
    onehot = torch.nn.functional.one_hot(target.long(), num_classes)
    onehot = onehot.movedim(-1, 1).to(probs.dtype)
    dims = tuple(range(2, probs.ndim))
    intersection = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * intersection + eps) / (denom + eps)
    return 1.0 - dice.mean()


def segmentation_loss(logits, target, cfg: LossConfig) -> torch.Tensor:
    """Cross-entropy plus soft-Dice mix; tuples (multi-head nets) are summed."""
    if isinstance(logits, (tuple, list)):
        if not isinstance(target, (tuple, list)) or len(target) != len(logits):
            raise ShapeMismatch("need one target map per head")
        return sum(segmentation_loss(lg, tg, cfg) for lg, tg in zip(logits, target))
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    ce = torch.nn.functional.cross_entropy(logits, target.long())
    dice = soft_dice_loss(torch.softmax(logits, dim=1), target)
    return cfg.ce_weight * ce + cfg.dice_weight * dice


def hard_dice(pred_classes: torch.Tensor, target: torch.Tensor, num_classes: int) -> float:
    """Mean Dice over foreground classes present in the target."""
    scores = []
    for c in range(1, num_classes):
        p = pred_classes == c
        t = target == c
        t_sum = int(t.sum())
        if t_sum == 0:
            continue
        inter = int((p & t).sum())
        scores.append(2.0 * inter / (int(p.sum()) + t_sum))
    return float(np.mean(scores)) if scores else 0.0


# --- datasets -------------------------------------------------------------------

@dataclass
class Sample:
    study_id: str
    patient_id: str
    volume_hu: CTVolume                 # on the network grid, HU domain
    labels: np.ndarray                  # (16,) int
    hemorrhage_mask: np.ndarray | None = None
    parcellation_masks: np.ndarray | None = None


@dataclass
class StudyDataset:
    samples: list[Sample]
    pre_cfg: PreprocessConfig

    def __len__(self):
        return len(self.samples)

    @property
    def label_matrix(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples])

    def indices_for(self, split: SplitManifest, name: str) -> list[int]:
        return [i for i, s in enumerate(self.samples)
                if split.assignment.get(s.patient_id) == name]

    def windowed_inputs(self, indices) -> np.ndarray:
        """Stacked (N, 3, z, y, x) eval-time tensors (windowing only, no augmentation)."""
        out = []
        for i in indices:
            mc = window_channels(self.samples[i].volume_hu, self.pre_cfg)
            out.append(np.asarray(mc.voxels))
        return np.stack(out)


def dataset_from_cases(cases, pre_cfg: PreprocessConfig,
                       with_masks: bool = False) -> StudyDataset:
    """Preprocess in-memory phantom cases onto the network grid."""
    samples = []
    for case in cases:
        masks = {}
        if with_masks:
            masks = {"hemorrhage": case.hemorrhage_mask,
                     "parcellation": case.parcellation_masks}
        hu, moved = preprocess_case_hu(case.volume, masks, pre_cfg)
        samples.append(Sample(
            study_id=case.volume.study_id,
            patient_id=case.volume.patient_id,
            volume_hu=replace(hu, study_id=case.volume.study_id,
                              patient_id=case.volume.patient_id),
            labels=case.labels.to_binary(),
            hemorrhage_mask=moved.get("hemorrhage"),
            parcellation_masks=moved.get("parcellation"),
        ))
    return StudyDataset(samples=samples, pre_cfg=pre_cfg)


def load_study_dataset(data_dir, pre_cfg: PreprocessConfig,
                       with_masks: bool = False) -> StudyDataset:
    """Read a generated dataset directory (see the phantom manifest layout)."""
    from .preprocess import load_volume

    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    samples = []
    for entry in manifest["studies"]:
        vol = load_volume(data_dir / entry["volume"])
        vol = replace(vol, study_id=entry["study_id"], patient_id=entry["patient_id"])
        masks = {}
        if with_masks:
            masks = {"hemorrhage": np.load(data_dir / entry["hemorrhage_mask"]),
                     "parcellation": np.load(data_dir / entry["parcellation_mask"])}
        hu, moved = preprocess_case_hu(vol, masks, pre_cfg)
        samples.append(Sample(
            study_id=entry["study_id"],
            patient_id=entry["patient_id"],
            volume_hu=replace(hu, study_id=entry["study_id"],
                              patient_id=entry["patient_id"]),
            labels=np.array([int(b) for b in entry["labels"]], dtype=np.int64),
            hemorrhage_mask=moved.get("hemorrhage"),
            parcellation_masks=moved.get("parcellation"),
        ))
    return StudyDataset(samples=samples, pre_cfg=pre_cfg)


# --- the training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint        # final epoch state, resumable
    best_checkpoint: Checkpoint   # best tune-metric state
    history: list[dict]
    best_metric: float
    class_weights: np.ndarray | None = None


def history_to_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "metric", "value"])
        for row in history:
            writer.writerow([row["epoch"], row["split"], row["metric"], repr(row["value"])])


def _augment_sample(sample: Sample, task: str, epoch: int, opt_cfg: OptimizerConfig,
                    aug_cfg: AugmentConfig, pre_cfg: PreprocessConfig) -> np.ndarray:
    rng = SeededRng(derive_seed(opt_cfg.seed, "aug", epoch, sample.study_id))
    if task in ("hem_seg", "parcellation"):
        # geometric transforms would desynchronize the masks; intensity only
        aug_cfg = replace(aug_cfg, enable_translate=False, enable_flip=False)
    mc = augment_study(sample.volume_hu, rng, aug_cfg, pre_cfg)
    return np.asarray(mc.voxels)


def _targets_for(task: str, batch: list[Sample]):
    if task in ("detect_pretrain", "fusion_finetune"):
        return torch.as_tensor(np.stack([s.labels for s in batch]), dtype=torch.float32)
    if task == "hem_seg":
        return torch.as_tensor(np.stack([s.hemorrhage_mask for s in batch]).astype(np.int64))
    return tuple(
        torch.as_tensor(np.stack([s.parcellation_masks[h] for s in batch]).astype(np.int64))
        for h in range(3)
    )


def _batch_loss(model, task, inputs, batch, weights_t, loss_cfg):
    out = model(inputs)
    targets = _targets_for(task, batch)
    if task in ("detect_pretrain", "fusion_finetune"):
        return weighted_bce_with_logits(out.logits, targets, weights_t)
    return segmentation_loss(out.logits, targets, loss_cfg)


def _tune_metric(model, task, dataset, tune_idx, eval_inputs, batch_size) -> float:
    if task in ("detect_pretrain", "fusion_finetune"):
        labels = dataset.label_matrix[tune_idx]
        report = evaluation.evaluate_model(model, eval_inputs, labels,
                                           subset="all16", batch_size=batch_size,
                                           with_ci=False)
        return report.macro_auc if report.macro_auc is not None else 0.5
    was_training = model.training
    model.eval()
    scores = []
    with torch.no_grad():
        for i in range(0, len(tune_idx), batch_size):
            sel = tune_idx[i:i + batch_size]
            x = torch.as_tensor(eval_inputs[i:i + batch_size], dtype=torch.float32)
            out = model(x)
            batch = [dataset.samples[j] for j in sel]
            targets = _targets_for(task, batch)
            if task == "hem_seg":
                pred = out.logits.argmax(dim=1)
                scores.append(hard_dice(pred, targets, out.logits.shape[1]))
            else:
                per_head = [hard_dice(lg.argmax(dim=1), tg, lg.shape[1])
                            for lg, tg in zip(out.logits, targets)]
                scores.append(float(np.mean(per_head)))
    model.train(was_training)
    return float(np.mean(scores)) if scores else 0.0


def _rng_state() -> dict:
    return {"torch": torch.get_rng_state().numpy().copy()}


def _make_checkpoint(model, task, opt_cfg, loss_cfg, optimizer, epoch, history) -> Checkpoint:
    kind = TASK_KINDS[task]
    opt_state = optimizer_state_to_numpy(optimizer)
    if kind == "fused":
        ckpt = fusion.make_fused_checkpoint(model, epoch=epoch, history=list(history),
                                            rng_state=_rng_state(),
                                            optimizer_state=opt_state)
        ckpt.config.update({"task": task, "optimizer": asdict(opt_cfg),
                            "loss": asdict(loss_cfg)})
        return ckpt
    return Checkpoint(
        kind=kind,
        config={"net": asdict(model.cfg), "task": task,
                "optimizer": asdict(opt_cfg), "loss": asdict(loss_cfg)},
        model_state=state_to_numpy(model),
        optimizer_state=opt_state,
        epoch=epoch,
        rng_state=_rng_state(),
        history=list(history),
    )


def _restore(model, optimizer, ckpt: Checkpoint) -> None:
    if ckpt.kind == "fused":
        fusion.restore_fused_state(model, ckpt)
    else:
        load_numpy_state(model, ckpt.model_state)
    if ckpt.optimizer_state is not None:
        load_optimizer_state(optimizer, ckpt.optimizer_state)
    if ckpt.rng_state is not None and "torch" in ckpt.rng_state:
        torch.set_rng_state(torch.from_numpy(np.asarray(ckpt.rng_state["torch"])))


def train(model, task: str, dataset: StudyDataset, split: SplitManifest,
          opt_cfg: OptimizerConfig, loss_cfg: LossConfig = LossConfig(),
          aug_cfg: AugmentConfig | None = None,
          resume_from: Checkpoint | None = None) -> TrainResult:
    """Epoch loop with augmentation on the train split, adaptive-moment updates,
    per-epoch tune metric and best-checkpoint retention.  Deterministic given
    (seed, config, data); resuming from a checkpoint continues the exact
    trajectory."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if not dataset.samples:
        raise EmptyInput("dataset is empty")
    if aug_cfg is None:
        aug_cfg = AugmentConfig()
    _check_model(model, task)

    train_idx = dataset.indices_for(split, "train")
    tune_idx = dataset.indices_for(split, "tune")
    if not train_idx:
        raise EmptyInput("train split is empty")
    pre_cfg = dataset.pre_cfg

    weights = None
    weights_t = None
    if task in ("detect_pretrain", "fusion_finetune"):
        if loss_cfg.class_weights is not None:
            weights = np.asarray(loss_cfg.class_weights, dtype=np.float64)
        else:
            weights = class_weights_from_prevalence(
                dataset.label_matrix[train_idx], loss_cfg.weight_clamp_max)
        weights_t = torch.as_tensor(weights, dtype=torch.float32)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=opt_cfg.learning_rate,
                                 betas=(opt_cfg.beta1, opt_cfg.beta2),
                                 eps=opt_cfg.epsilon,
                                 weight_decay=opt_cfg.weight_decay)

    history: list[dict] = []
    start_epoch = 0
    if resume_from is not None:
        _restore(model, optimizer, resume_from)
        start_epoch = resume_from.epoch
        history = list(resume_from.history)

    tune_inputs = dataset.windowed_inputs(tune_idx) if tune_idx else None

    best_metric = -np.inf
    best_ckpt = None
    for row in history:
        if row["split"] == "tune" and row["value"] > best_metric:
            best_metric = row["value"]
    last_good = _make_checkpoint(model, task, opt_cfg, loss_cfg, optimizer,
                                 start_epoch, history)

    for epoch in range(start_epoch, opt_cfg.max_epochs):
        model.train()
        order_rng = SeededRng(derive_seed(opt_cfg.seed, "order", epoch))
        order = [train_idx[i] for i in order_rng.permutation(len(train_idx))]

        epoch_losses = []
        for b in range(0, len(order), opt_cfg.batch_size):
            batch = [dataset.samples[i] for i in order[b:b + opt_cfg.batch_size]]
            labels_before = np.stack([s.labels.copy() for s in batch])
            arrays = [_augment_sample(s, task, epoch, opt_cfg, aug_cfg, pre_cfg)
                      for s in batch]
            # augmentation transforms inputs only, never the targets
            assert np.array_equal(labels_before, np.stack([s.labels for s in batch]))
            inputs = torch.as_tensor(np.stack(arrays), dtype=torch.float32)
            loss = _batch_loss(model, task, inputs, batch, weights_t, loss_cfg)
            if not torch.isfinite(loss):
                raise Diverged(f"non-finite loss at epoch {epoch}", checkpoint=last_good)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))

        mean_loss = float(np.mean(epoch_losses))
        history.append({"epoch": epoch + 1, "split": "train",
                        "metric": "loss", "value": mean_loss})
        if not np.isfinite(mean_loss):
            raise Diverged(f"non-finite epoch loss at epoch {epoch}", checkpoint=last_good)

        if tune_idx:
            metric_name = ("macro_auc" if task in ("detect_pretrain", "fusion_finetune")
                           else "mean_dice")
            metric = _tune_metric(model, task, dataset, tune_idx, tune_inputs,
                                  opt_cfg.batch_size)
            history.append({"epoch": epoch + 1, "split": "tune",
                            "metric": metric_name, "value": metric})
        else:
            metric = -mean_loss

        last_good = _make_checkpoint(model, task, opt_cfg, loss_cfg, optimizer,
                                     epoch + 1, history)
        if metric > best_metric:
            best_metric = metric
            best_ckpt = last_good
        if opt_cfg.early_stop_target is not None and metric >= opt_cfg.early_stop_target:
            break

    if best_ckpt is None:
        best_ckpt = last_good
    return TrainResult(checkpoint=last_good, best_checkpoint=best_ckpt,
                       history=history, best_metric=float(best_metric),
                       class_weights=weights)


def _check_model(model, task: str) -> None:
    expected = {
        "detect_pretrain": DetectionNet,
        "hem_seg": HemorrhageSegNet,
        "parcellation": ParcellationNet,
        "fusion_finetune": fusion.FusedModel,
    }[task]
    if not isinstance(model, expected):
        raise ValueError(f"task {task!r} expects a {expected.__name__}")


__all__ = [
    "AugmentConfig", "Checkpoint", "LossConfig", "OptimizerConfig", "Sample",
    "SplitManifest", "StudyDataset", "TrainResult", "class_weights_from_prevalence",
    "dataset_from_cases", "hard_dice", "history_to_csv", "load_checkpoint",
    "load_study_dataset", "make_split", "save_checkpoint", "segmentation_loss",
    "soft_dice_loss", "train", "weighted_bce_with_logits",
]
