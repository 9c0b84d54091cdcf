"""Two-stage training: prototype learning + projection, then sparse grouping."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, StageOrderError, TrainingDivergence
from .grouping import threshold_groups
from .losses import (
    IGNORE_INDEX,
    cross_entropy_map,
    diversity_loss,
    entropy_loss,
    offclass_l1,
    stage1_loss,
    stage2_loss,
)
from .model import MultiScaleProtoNet

PARAM_GROUPS = ("trunk", "aspp", "prototypes", "head_proto", "group_weights", "group_head")
STAGE1_STEPS = ("warmup1", "joint1", "finetune1")
STAGE2_STEPS = ("warmup2", "joint2")


@dataclass
class StageConfig:
    name: str
    iterations: int
    lr: dict[str, float]
    lr_policy: str = "fixed"
    poly_power: float = 0.9
    loss: str = "stage1"
    enabled: bool = True

    def __post_init__(self):
        if self.name not in STAGE1_STEPS + STAGE2_STEPS:
            raise ConfigError(f"unknown step {self.name!r}")
        if self.lr_policy not in ("fixed", "poly"):
            raise ConfigError(f"unknown lr policy {self.lr_policy!r}")
        for group, lr in self.lr.items():
            if group not in PARAM_GROUPS:
                raise ConfigError(f"unknown parameter group {group!r}")
            if lr <= 0:
                raise ConfigError(f"learning rate for {group} must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset(PARAM_GROUPS) - set(self.lr)


@dataclass
class TrainingPlan:
    steps: list[StageConfig]
    profile: str = "toy"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 5e-4
    batch_size: int = 10
    seed: int = 0
    lambda_j: float = 0.25
    lambda_l1_stage1: float = 1e-4
    lambda_ent: float = 0.05
    lambda_l1_stage2: float = 1e-3
    alpha: float = 0.05
    flip: bool = True
    crop_pad: int = 8
    scale_jitter: tuple[float, float] | None = None

    def __post_init__(self):
        names = [s.name for s in self.steps]
        s1 = [i for i, n in enumerate(names) if n in STAGE1_STEPS]
        s2 = [i for i, n in enumerate(names) if n in STAGE2_STEPS]
        if s1 and s2 and max(s1) > min(s2):
            raise ConfigError("stage-1 steps must precede stage-2 steps")
        if min(self.lambda_j, self.lambda_l1_stage1, self.lambda_ent, self.lambda_l1_stage2) < 0:
            raise ConfigError("loss weights must be non-negative")

    def step(self, name: str) -> StageConfig:
        for s in self.steps:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingPlan":
        d = dict(d)
        d["steps"] = [StageConfig(**s) for s in d["steps"]]
        d["betas"] = tuple(d["betas"])
        if d.get("scale_jitter") is not None:
            d["scale_jitter"] = tuple(d["scale_jitter"])
        return cls(**d)


def poly_lr(iteration: int, total: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= iteration <= total:
        raise ValueError("iteration must lie in [0, total]")
    if total == 0:
        return base_lr
    return base_lr * (1.0 - iteration / total) ** power


TOY_LR_SCALE = 10.0
_HEADS = 2.5e-4
_TRUNK = 2.5e-5


def _full_schedule(warmup1, joint1, finetune1, l1_s1, lam_ent, l1_s2) -> dict:
    steps = [
        StageConfig("warmup1", warmup1, {"aspp": _HEADS, "prototypes": _HEADS}),
        StageConfig("joint1", joint1, {"trunk": _TRUNK, "aspp": _HEADS, "prototypes": _HEADS},
                    lr_policy="poly"),
        # replaced by the grouping stage, kept for reference only
        StageConfig("finetune1", finetune1, {"head_proto": 1e-5}, enabled=False),
        StageConfig("warmup2", 2000, {"group_weights": _HEADS}, loss="stage2"),
        StageConfig("joint2", 30000, {"group_weights": _HEADS, "group_head": _HEADS},
                    lr_policy="poly", loss="stage2"),
    ]
    return dict(steps=steps, lambda_j=0.25, lambda_l1_stage1=l1_s1, lambda_ent=lam_ent,
                lambda_l1_stage2=l1_s2)


PROFILES = ("cityscapes-like", "pascal-like", "ade20k-like", "toy")


def dataset_profile(name: str, seed: int = 0) -> TrainingPlan:
    if name == "cityscapes-like":
        kw = _full_schedule(3000, 30000, 2000, 1e-4, 0.05, 1e-3)
    elif name == "pascal-like":
        kw = _full_schedule(3000, 30000, 6000, 1e-4, 0.05, 1e-3)
    elif name == "ade20k-like":
        kw = _full_schedule(6000, 60000, 4000, 1e-5, 0.25, 1e-4)
    elif name == "toy":
        kw = _full_schedule(3000, 30000, 2000, 1e-4, 0.05, 1e-3)
        # 100x fewer iterations; 10x larger steps so the short run still converges
        kw["steps"] = [
            replace(s, iterations=math.ceil(s.iterations / 100),
                    lr={k: v * TOY_LR_SCALE for k, v in s.lr.items()})
            for s in kw["steps"]
        ]
    else:
        raise ConfigError(f"unknown profile {name!r}; expected one of {PROFILES}")
    return TrainingPlan(profile=name, seed=seed, **kw)


# -- batching ----------------------------------------------------------------

class BatchSampler:
    """Deterministic shuffled batches with flip/crop augmentation."""

    def __init__(self, dataset, plan: TrainingPlan, stream: int, reduction: int, dtype):
        self.dataset = dataset
        self.plan = plan
        self.rng = np.random.default_rng([plan.seed, stream])
        self.reduction = reduction
        self.dtype = dtype
        self.order: list[int] = []

    def _next_index(self) -> int:
        if not self.order:
            self.order = list(self.rng.permutation(len(self.dataset)))
        return int(self.order.pop())

    def _augment(self, image, labels):
        plan = self.plan
        if plan.scale_jitter is not None:
            from .backbone import downscale_labels, resize_bilinear

            f = self.rng.uniform(*plan.scale_jitter)
            H, W = labels.shape
            size = (max(1, round(H * f)), max(1, round(W * f)))
            image = resize_bilinear(image, size, "half_pixel", axes=(0, 1)).astype(image.dtype)
            labels = downscale_labels(labels, size)
        if plan.flip and self.rng.random() < 0.5:
            image, labels = image[:, ::-1], labels[:, ::-1]
        if plan.crop_pad > 0 or plan.scale_jitter is not None:
            H, W = self.dataset[0].labels.shape
            p = plan.crop_pad
            h, w = labels.shape
            ph, pw = max(H - h, 0) + p, max(W - w, 0) + p
            img = np.zeros((h + 2 * ph, w + 2 * pw, 3), dtype=image.dtype)
            lab = np.full((h + 2 * ph, w + 2 * pw), IGNORE_INDEX, dtype=labels.dtype)
            img[ph:ph + h, pw:pw + w] = image
            lab[ph:ph + h, pw:pw + w] = labels
            y = int(self.rng.integers(0, img.shape[0] - H + 1))
            x = int(self.rng.integers(0, img.shape[1] - W + 1))
            image, labels = img[y:y + H, x:x + W], lab[y:y + H, x:x + W]
        return image, labels

    def next(self):
        images, labels = [], []
        for _ in range(self.plan.batch_size):
            s = self.dataset[self._next_index()]
            img, lab = self._augment(s.image, s.labels)
            images.append(np.ascontiguousarray(img.transpose(2, 0, 1)))
            labels.append(np.ascontiguousarray(lab[::self.reduction, ::self.reduction]))
        return (torch.as_tensor(np.stack(images), dtype=self.dtype),
                torch.as_tensor(np.stack(labels).astype(np.int64)))


# -- loop ----------------------------------------------------------------------

@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("step", "iteration", "lr", "ce", "l_j", "l_ent", "l1", "total")

    def add(self, **row):
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r.get(k, "") for k in self.FIELDS})

    def losses(self, step: str) -> list[float]:
        return [r["total"] for r in self.rows if r["step"] == step]


StepHook = Callable[[str, int, MultiScaleProtoNet], None]


def _set_trainable(model: MultiScaleProtoNet, step: StageConfig):
    groups = model.param_groups()
    for name, params in groups.items():
        for p in params:
            p.requires_grad_(name in step.lr)
    missing = set(step.lr) - set(groups)
    if missing:
        raise StageOrderError(f"step {step.name} trains absent parameter groups {sorted(missing)}")
    return [{"params": groups[name], "lr": lr, "base_lr": lr} for name, lr in step.lr.items()]


def _stage1_terms(model, plan, images, labels):
    feats = model.features(images)
    scores = model.scores_from_features(feats, use_groups=False)
    ce = cross_entropy_map(scores, labels)
    l_j = diversity_loss(feats, model.bank, labels, negate=model.proto_cfg.negate_distances)
    l1 = offclass_l1(model.head_proto.weight, model.bank.class_of)
    total = stage1_loss(ce, l_j, plan.lambda_j, l1, plan.lambda_l1_stage1)
    return total, {"ce": ce.item(), "l_j": l_j.item(), "l1": l1.item()}


def _stage2_terms(model, plan, images, labels):
    with torch.no_grad():
        acts = model.prototype_activations(model.features(images))
    from .grouping import group_activation_map

    g = group_activation_map(acts, model.groups)
    scores = torch.einsum("cn,bnhw->bchw", model.groups.head, g)
    ce = cross_entropy_map(scores, labels)
    l_ent = entropy_loss(model.groups.weights)
    l1 = offclass_l1(model.groups.head, model.groups.group_class)
    total = stage2_loss(ce, l_ent, l1, plan.lambda_ent, plan.lambda_l1_stage2)
    return total, {"ce": ce.item(), "l_ent": l_ent.item(), "l1": l1.item()}


def run_step(step: StageConfig, plan: TrainingPlan, model: MultiScaleProtoNet, dataset,
             log: TrainingLog | None = None, hook: StepHook | None = None, stream: int = 0):
    if not step.enabled or step.iterations == 0:
        return model
    param_groups = _set_trainable(model, step)
    opt = torch.optim.Adam(param_groups, betas=plan.betas, weight_decay=plan.weight_decay)
    sampler = BatchSampler(dataset, plan, stream, model.reduction, model.dtype)
    terms_fn = _stage1_terms if step.loss == "stage1" else _stage2_terms
    model.train()
    for it in range(step.iterations):
        for g in opt.param_groups:
            g["lr"] = (poly_lr(it, step.iterations, g["base_lr"], step.poly_power)
                       if step.lr_policy == "poly" else g["base_lr"])
        images, labels = sampler.next()
        total, parts = terms_fn(model, plan, images, labels)
        if not torch.isfinite(total):
            raise TrainingDivergence(step.name, it, total.item())
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if step.loss == "stage2":
            model.groups.project_()
        if log is not None:
            log.add(step=step.name, iteration=it, lr=opt.param_groups[0]["lr"],
                    total=total.item(), **parts)
        if hook is not None:
            hook(step.name, it, model)
    for params in model.param_groups().values():
        for p in params:
            p.requires_grad_(False)
    model.eval()
    return model


def run_stage1(plan: TrainingPlan, model: MultiScaleProtoNet, dataset,
               log: TrainingLog | None = None, hook: StepHook | None = None):
    """Warm-up, joint training, then projection onto training features and dedup.

    The prototype head keeps its assignment initialisation throughout.
    """
    if model.stage != "init":
        raise StageOrderError(f"stage 1 needs a fresh model, got stage {model.stage!r}")
    if len(dataset) == 0:
        raise ValueError("empty training set")
    for k, step in enumerate(plan.steps):
        if step.name in STAGE1_STEPS:
            run_step(step, plan, model, dataset, log, hook, stream=k)
    model.project_and_dedup(dataset)
    return model


def run_stage2(plan: TrainingPlan, model: MultiScaleProtoNet, dataset,
               log: TrainingLog | None = None, hook: StepHook | None = None):
    """Learn group matrices (warm-up) then groups + group head; finish with thresholding."""
    if model.stage != "projected":
        raise StageOrderError("stage 2 needs a projected stage-1 model")
    model.init_groups(plan.seed + 7919)
    for k, step in enumerate(plan.steps):
        if step.name in STAGE2_STEPS:
            run_step(step, plan, model, dataset, log, hook, stream=k)
    model.raw_groups = model.groups
    model.groups = threshold_groups(model.raw_groups, plan.alpha)
    model.stage = "grouped"
    return model


def save_log(log: TrainingLog, path) -> Path:
    path = Path(path)
    log.write_csv(path)
    return path
