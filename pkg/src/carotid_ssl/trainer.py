"""Supervised and one-way-consistency semi-supervised training.

The student sees perturbed inputs (photometric + geometric + encoder dropout), the
EMA teacher sees clean inputs, and the teacher's output is warped with the student's
geometric perturbation before the masked MSE is taken.  Optionally the teacher also
runs ``T_mc`` noisy dropout passes whose predictive entropy gates the consistency
pixels.

Randomness is derived from ``(seed, epoch, stream)`` so an interrupted run resumed
from its last checkpoint continues exactly as the uninterrupted one would.
"""
from __future__ import annotations

import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .nets import ModelConfig, build_model, ema_update, forward, make_teacher
from .prior import PriorConfig, prior_loss
from .transforms import (
    PerturbationParams,
    PerturbationPolicy,
    apply_geometric,
    augment_labeled,
    perturb_input,
    sample_perturbation,
    transform_probabilities,
    validity_mask,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "carotid-ssl-checkpoint"
CHECKPOINT_VERSION = 1
SSL_MODES = ("off", "owc", "owc+uncertainty")
TASKS = ("localization", "segmentation")

# independent random streams per epoch
_ORDER, _UNLABELED, _PERTURB, _DROPOUT, _AUGMENT = range(5)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "segmentation"
    lr: float = 1e-5
    weight_decay: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_epochs: int = 120
    patience: int = 40
    lr_factor: float = 0.1
    lr_patience: int = 10
    batch_size: int = 8
    unlabeled_ratio: float = 1.0  # unlabeled samples per labeled sample in a step
    ssl_mode: str = "off"
    T_mc: int = 8
    mc_noise_std: float = 0.05
    ema_alpha: float = 0.999
    augment: bool = True
    max_rotation: float = 15.0
    rampup_unit: str = "epoch"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.ssl_mode not in SSL_MODES:
            raise ValueError(f"ssl_mode must be one of {SSL_MODES}, got {self.ssl_mode!r}")
        if self.rampup_unit not in ("epoch", "step"):
            raise ValueError("rampup_unit must be 'epoch' or 'step'")
        for name in ("lr", "max_epochs", "batch_size", "T_mc", "lr_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")

    @classmethod
    def localization(cls, **kw) -> "TrainConfig":
        return cls(**{"task": "localization", "lr": 1e-4, "weight_decay": 1e-4, "patience": 20, **kw})

    @classmethod
    def segmentation(cls, **kw) -> "TrainConfig":
        return cls(**{"task": "segmentation", "lr": 1e-5, "weight_decay": 5e-4, "patience": 40, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SlicePool:
    """In-memory slices: ``images`` N x m x H x W in [0, 1]; ``targets`` N x C x H x W or None."""

    images: np.ndarray
    targets: Optional[np.ndarray] = None
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def empty_like(cls, other: "SlicePool") -> "SlicePool":
        return cls(other.images[:0], None if other.targets is None else other.targets[:0], [])


@dataclass
class StepResult:
    metrics: dict
    perturbations: list[PerturbationParams] = field(default_factory=list)
    tensors: dict = field(default_factory=dict)


def derived_seed(*keys: int) -> int:
    return int(np.random.default_rng(list(keys)).integers(0, 2**31 - 1))


def _rng(seed: int, epoch: int, stream: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream, step])


class Trainer:
    def __init__(
        self,
        model_config: ModelConfig,
        train_config: TrainConfig,
        loss_config: Optional[L.LossConfig] = None,
        prior_config: Optional[PriorConfig] = None,
        policy: Optional[PerturbationPolicy] = None,
        out_dir: Optional[str | Path] = None,
        model: Optional[nn.Module] = None,
    ):
        self.model_config = model_config
        self.cfg = train_config
        self.loss_cfg = loss_config or (
            L.LossConfig.localization() if train_config.task == "localization" else L.LossConfig.segmentation()
        )
        self.prior_cfg = prior_config or PriorConfig(omega=self.loss_cfg.omega)
        self.policy = policy or PerturbationPolicy()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(derived_seed(train_config.seed, 0))
        self.student = model if model is not None else build_model(model_config)
        self.teacher = make_teacher(self.student)
        self.teacher.eval()
        self.optimizer = torch.optim.Adam(
            self.student.parameters(),
            lr=train_config.lr,
            betas=(train_config.adam_beta1, train_config.adam_beta2),
            weight_decay=train_config.weight_decay,
        )
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer, mode="max", factor=train_config.lr_factor, patience=train_config.lr_patience
        )
        self.epoch = 0
        self.step = 0
        self.best_metric = -math.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------ schedules

    @property
    def ramp_t(self) -> float:
        return float(self.epoch if self.cfg.rampup_unit == "epoch" else self.step)

    def lambda_t(self) -> float:
        return L.rampup_weight(self.ramp_t, self.loss_cfg.rampup_R, self.loss_cfg.rampup_k)

    def tau_t(self) -> float:
        return L.uncertainty_threshold(self.ramp_t, self.loss_cfg.rampup_R, self.loss_cfg.rampup_k)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    # ------------------------------------------------------------ losses

    def supervised_loss(self, p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if self.cfg.task == "localization":
            return L.loc_supervised_loss(p, g, self.loss_cfg)
        return L.seg_supervised_loss(L.two_class(p), g, self.loss_cfg)

    # ------------------------------------------------------------ uncertainty

    @torch.no_grad()
    def estimate_uncertainty(self, images: torch.Tensor, rng: np.random.Generator, model: Optional[nn.Module] = None) -> torch.Tensor:
        """Predictive entropy (N x H x W) of ``T_mc`` dropout passes on noise-perturbed inputs."""
        return estimate_uncertainty(model or self.teacher, images, self.cfg.T_mc, self.cfg.mc_noise_std, rng)

    # ------------------------------------------------------------ one step

    def train_step(
        self,
        x_l: torch.Tensor,
        y_l: torch.Tensor,
        x_u: Optional[torch.Tensor] = None,
        rng: Optional[np.random.Generator] = None,
        return_tensors: bool = False,
    ) -> StepResult:
        """One optimizer step on a labeled batch (and an unlabeled batch when SSL is on)."""
        rng = rng if rng is not None else _rng(self.cfg.seed, self.epoch, _PERTURB, self.step)
        sup_seed, con_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
        self.student.train()
        self.optimizer.zero_grad(set_to_none=True)

        out_sup = forward(self.student, x_l, dropout_active=True, dropout_seed=sup_seed)
        sup = self.supervised_loss(out_sup.probabilities, y_l)
        total = sup
        metrics = {"sup_loss": float(sup.detach())}
        if self.cfg.task == "localization" and self.loss_cfg.omega > 0:
            pri = prior_loss(out_sup.probabilities[:, 0], self.prior_cfg)
            total = total + self.loss_cfg.omega * pri
            metrics["prior_loss"] = float(pri.detach())

        result = StepResult(metrics)
        if self.cfg.ssl_mode != "off":
            x_all = x_l if x_u is None or len(x_u) == 0 else torch.cat([x_l, x_u])
            con, extra = self._consistency(x_all, rng, con_seed, return_tensors)
            lam = self.lambda_t()
            total = total + lam * con
            metrics["con_loss"] = float(con.detach())
            metrics["lambda_t"] = lam
            if self.cfg.ssl_mode == "owc+uncertainty":
                metrics["tau_t"] = self.tau_t()
            result.perturbations = extra.pop("perturbations")
            result.tensors = extra

        if not torch.isfinite(total):
            self._dump_diverged()
            raise TrainingDiverged(f"non-finite loss at epoch {self.epoch} step {self.step}")
        total.backward()
        if not all(torch.isfinite(q.grad).all() for q in self.student.parameters() if q.grad is not None):
            self._dump_diverged()
            raise TrainingDiverged(f"non-finite gradient at epoch {self.epoch} step {self.step}")
        self.optimizer.step()
        if self.cfg.ssl_mode != "off":
            ema_update(self.teacher, self.student, self.cfg.ema_alpha)
        self.step += 1
        metrics["loss"] = float(total.detach())
        return result

    def _consistency(self, x_all, rng, dropout_seed, return_tensors):
        params = [sample_perturbation(self.policy, rng) for _ in range(len(x_all))]
        x_pert = torch.stack([perturb_input(x, p) for x, p in zip(x_all, params)])
        p_s = forward(self.student, x_pert, dropout_active=True, dropout_seed=dropout_seed).probabilities
        with torch.no_grad():
            p_clean = forward(self.teacher, x_all, dropout_active=False).probabilities
            C, H, W = p_clean.shape[1:]
            p_t = torch.stack([transform_probabilities(p, prm.gamma) for p, prm in zip(p_clean, params)])
            v = torch.stack([validity_mask(prm.gamma, H, W, C, dtype=p_clean.dtype) for prm in params])
            u_t = None
            if self.cfg.ssl_mode == "owc+uncertainty":
                u = self.estimate_uncertainty(x_all, rng)
                u_t = torch.stack([apply_geometric(ui[None], prm.gamma, "bilinear")[0] for ui, prm in zip(u, params)])
        if u_t is None:
            con = L.consistency_mse(p_s, p_t, v)
        else:
            con = L.uncertainty_consistency(p_s, p_t, v, u_t, self.tau_t())
        extra = {"perturbations": params}
        if return_tensors:
            extra.update(x_all=x_all, x_perturbed=x_pert, p_student=p_s.detach(), p_teacher=p_t, p_teacher_clean=p_clean, valid=v, uncertainty=u_t)
        return con, extra

    def _dump_diverged(self):
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.save_checkpoint(self.out_dir / "diverged.pt")

    # ------------------------------------------------------------ epochs

    def run_epoch(self, train: SlicePool, unlabeled: Optional[SlicePool] = None) -> dict:
        cfg = self.cfg
        n = len(train)
        if n == 0:
            raise ValueError("empty training split")
        order = _rng(cfg.seed, self.epoch, _ORDER).permutation(n)
        aug_rng = _rng(cfg.seed, self.epoch, _AUGMENT)
        use_unlabeled = cfg.ssl_mode != "off" and unlabeled is not None and len(unlabeled) > 0
        if use_unlabeled:
            u_rng = _rng(cfg.seed, self.epoch, _UNLABELED)
            u_order = u_rng.permutation(len(unlabeled))
            u_per = max(1, int(round(cfg.unlabeled_ratio * cfg.batch_size)))
            u_pos = 0
        sums: dict[str, float] = {}
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            imgs = train.images[idx]
            tgts = train.targets[idx]
            if cfg.augment:
                pairs = [augment_labeled(i, t, aug_rng, cfg.max_rotation) for i, t in zip(imgs, tgts)]
                imgs = np.stack([p[0] for p in pairs])
                tgts = np.stack([p[1] for p in pairs])
            x_u = None
            if use_unlabeled:
                take = [u_order[(u_pos + j) % len(u_order)] for j in range(u_per)]
                u_pos += u_per
                x_u = torch.from_numpy(unlabeled.images[take])
            step_rng = _rng(cfg.seed, self.epoch, _PERTURB, n_steps)
            res = self.train_step(torch.from_numpy(imgs), torch.from_numpy(tgts), x_u, step_rng)
            for k, v in res.metrics.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        return {k: v / n_steps for k, v in sums.items()}

    @torch.no_grad()
    def validate(self, pool: SlicePool, batch_size: int = 16) -> tuple[float, float]:
        """(loss, mean foreground Dice) of the student on ``pool``."""
        probs = predict(self.student, pool.images, batch_size)
        p = torch.from_numpy(probs)
        g = torch.from_numpy(pool.targets)
        loss = float(self.supervised_loss(p, g))
        return loss, foreground_dice(probs, pool.targets)

    def fit(
        self,
        train: SlicePool,
        unlabeled: Optional[SlicePool] = None,
        val: Optional[SlicePool] = None,
        max_epochs: Optional[int] = None,
    ) -> list[dict]:
        """Train until ``max_epochs`` or early stop; keeps ``best.pt``/``last.pt`` in ``out_dir``."""
        if len(train) == 0:
            raise ValueError("empty training split")
        max_epochs = max_epochs or self.cfg.max_epochs
        while self.epoch < max_epochs:
            if self.bad_epochs >= self.cfg.patience:
                break
            lam, tau = (self.lambda_t(), self.tau_t())
            stats = self.run_epoch(train, unlabeled)
            val_loss, val_dice = (None, None)
            if val is not None and len(val) > 0:
                val_loss, val_dice = self.validate(val)
            else:
                # no validation data: select on (negative) training loss
                val_dice = -stats["loss"]
            record = {
                "epoch": self.epoch,
                "step": self.step,
                "train_loss": stats["loss"],
                "sup_loss": stats.get("sup_loss"),
                "con_loss": stats.get("con_loss"),
                "prior_loss": stats.get("prior_loss"),
                "val_loss": val_loss,
                "val_dice": val_dice,
                "lr": self.lr,
                "lambda_t": lam if self.cfg.ssl_mode != "off" else None,
                "tau_t": tau if self.cfg.ssl_mode == "owc+uncertainty" else None,
            }
            self.history.append(record)
            improved = val_dice > self.best_metric
            if improved:
                self.best_metric = val_dice
                self.best_epoch = self.epoch
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
            self.scheduler.step(val_dice)
            self.epoch += 1
            log.info("epoch %d loss %.4f val_dice %s lr %.2e", record["epoch"], record["train_loss"], val_dice, self.lr)
            if self.out_dir is not None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                if improved:
                    self.save_checkpoint(self.out_dir / "best.pt")
                self.save_checkpoint(self.out_dir / "last.pt")
                write_history(self.history, self.out_dir / "history.jsonl")
        return self.history

    # ------------------------------------------------------------ checkpoints

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "train_config": self.cfg.to_dict(),
            "loss_config": self.loss_cfg.to_dict(),
            "prior_config": asdict(self.prior_cfg),
            "policy": asdict(self.policy),
            "student": self.student.state_dict(),
            "teacher": self.teacher.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "history": list(self.history),
        }

    def save_checkpoint(self, path: str | Path) -> Path:
        return save_checkpoint(self.state_dict(), path)

    def load_state_dict(self, state: dict) -> None:
        self.student.load_state_dict(state["student"])
        self.teacher.load_state_dict(state["teacher"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.epoch = state["epoch"]
        self.step = state["step"]
        self.best_metric = state["best_metric"]
        self.best_epoch = state["best_epoch"]
        self.bad_epochs = state["bad_epochs"]
        self.history = list(state["history"])

    @classmethod
    def from_checkpoint(cls, path: str | Path, out_dir: Optional[str | Path] = None) -> "Trainer":
        state = load_checkpoint(path)
        policy = dict(state["policy"])
        for k, v in policy.items():
            if isinstance(v, list):
                policy[k] = tuple(v)
        trainer = cls(
            ModelConfig(**state["model_config"]),
            TrainConfig(**state["train_config"]),
            L.LossConfig(**state["loss_config"]),
            PriorConfig(**state["prior_config"]),
            PerturbationPolicy(**policy),
            out_dir,
        )
        trainer.load_state_dict(state)
        return trainer


# ---------------------------------------------------------------- helpers

@torch.no_grad()
def estimate_uncertainty(
    teacher: nn.Module, images: torch.Tensor, T_mc: int, noise_std: float, rng: np.random.Generator
) -> torch.Tensor:
    if T_mc < 1:
        raise ValueError("T_mc must be >= 1")
    seeds = rng.integers(0, 2**31 - 1, size=(T_mc, 2))
    passes = []
    for drop_seed, noise_seed in seeds:
        x = images
        if noise_std > 0:
            gen = torch.Generator().manual_seed(int(noise_seed))
            x = images + noise_std * torch.randn(images.shape, generator=gen, dtype=images.dtype)
        passes.append(forward(teacher, x, dropout_active=True, dropout_seed=int(drop_seed)).probabilities)
    return L.predictive_entropy(torch.stack(passes))


@torch.no_grad()
def predict(model: nn.Module, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
        out.append(forward(model, x, dropout_active=False).probabilities.numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0,), dtype=np.float32)
    return np.concatenate(out)


def foreground_dice(probs: np.ndarray, targets: np.ndarray) -> float:
    """Pooled Dice averaged over foreground classes (class 1.. for one-hot targets, channel 0 for sigmoid)."""
    if targets.shape[1] == 1:
        pred = probs[:, 0] >= 0.5
        gt = targets[:, 0] > 0.5
        pairs = [(pred, gt)]
    else:
        if probs.shape[1] == 1:
            lab = (probs[:, 0] >= 0.5).astype(np.int64)
        else:
            lab = probs.argmax(axis=1)
        gt_lab = targets.argmax(axis=1)
        pairs = [(lab == c, gt_lab == c) for c in range(1, targets.shape[1])]
    dices = []
    for p, g in pairs:
        tp = np.count_nonzero(p & g)
        den = np.count_nonzero(p) + np.count_nonzero(g)
        dices.append(1.0 if den == 0 else 2 * tp / den)
    return float(np.mean(dices))


def save_checkpoint(state: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    # serializing through a buffer keeps the archive independent of the file name
    torch.save(_canonical(state), buf)
    path.write_bytes(buf.getvalue())
    return path


def _canonical(obj):
    """Rebuild containers and intern strings so pickle's identity memo cannot depend on history.

    A resumed run holds equal but differently shared objects (e.g. optimizer param
    groups), which would otherwise change the checkpoint bytes.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint of this package")
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state.get('version')}")
    return state


def write_history(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history))
    return path


# ---------------------------------------------------------------- data pools

def localization_target(labels: np.ndarray) -> np.ndarray:
    """Filled vessel region (wall, plaque and the enclosed lumen) as a float mask."""
    from scipy import ndimage

    return ndimage.binary_fill_holes(labels > 0).astype(np.float32)


def pools_from_slices(slices, task: str) -> tuple[SlicePool, SlicePool]:
    """Split ``MultiSequenceSlice`` objects into a labeled pool (with targets) and an unlabeled pool."""
    lab, unl = [], []
    for s in slices:
        (lab if s.mask is not None else unl).append(s)

    def ids(group):
        return [f"{s.patient_id}:{s.slice_index}" for s in group]

    def stack(group, shape):
        return np.stack([s.images for s in group]).astype(np.float32) if group else np.zeros((0,) + shape, np.float32)

    shape = slices[0].images.shape if slices else (0, 0, 0)
    if task == "localization":
        targets = [localization_target(s.mask.labels())[None] for s in lab]
    else:
        targets = [s.mask.data.astype(np.float32) for s in lab]
    tgt = np.stack(targets) if targets else None
    return SlicePool(stack(lab, shape), tgt, ids(lab)), SlicePool(stack(unl, shape), None, ids(unl))


def pools_from_manifest(manifest, ids, task: str, class_scheme: Optional[str] = None) -> tuple[SlicePool, SlicePool]:
    from .data_core import load_slices

    return pools_from_slices(load_slices(manifest, ids, class_scheme), task)


@dataclass
class FoldResult:
    fold: int
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]
    metrics: dict


def cross_validate(
    manifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 5,
    loss_config: Optional[L.LossConfig] = None,
    policy: Optional[PerturbationPolicy] = None,
    class_scheme: Optional[str] = None,
    n_val: int = 1,
    out_dir: Optional[str | Path] = None,
) -> tuple[list[FoldResult], dict]:
    """Patient-wise k-fold training; returns per-fold test metrics and their mean."""
    from .data_core import kfold_patientwise
    from .evaluation import segmentation_metrics

    folds = kfold_patientwise(manifest, k=k, seed=train_config.seed, n_val=n_val)
    scheme = class_scheme or manifest.class_scheme
    results = []
    for i, split in enumerate(folds):
        seed = derived_seed(train_config.seed, i)
        cfg = TrainConfig(**{**train_config.to_dict(), "seed": seed})
        train_ids = _ids_for_keys(manifest, split.train)
        train, unlabeled = pools_from_manifest(manifest, train_ids, cfg.task, scheme)
        val, _ = pools_from_manifest(manifest, _ids_for_keys(manifest, split.val), cfg.task, scheme) if split.val else (None, None)
        test, _ = pools_from_manifest(manifest, _ids_for_keys(manifest, split.test), cfg.task, scheme)
        fold_dir = Path(out_dir) / f"fold{i}" if out_dir is not None else None
        trainer = Trainer(model_config, cfg, loss_config, policy=policy, out_dir=fold_dir)
        trainer.fit(train, unlabeled, val)
        if fold_dir is not None and (fold_dir / "best.pt").exists():
            trainer.load_state_dict(load_checkpoint(fold_dir / "best.pt"))
        probs = predict(trainer.student, test.images)
        report = segmentation_metrics(*hard_pairs(probs, test.targets))
        metrics = dict(report.macro)
        metrics["foreground_dice"] = foreground_dice(probs, test.targets)
        results.append(FoldResult(i, seed, split.train, split.val, split.test, metrics))
    mean = {key: float(np.mean([r.metrics[key] for r in results])) for key in results[0].metrics}
    return results, mean


def _ids_for_keys(manifest, keys) -> list[str]:
    keys = set(keys)
    return [p.id for p in manifest.patients if p.split_key in keys]


def hard_pairs(probs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-hot prediction and ground truth with at least two classes (background first)."""
    from .evaluation import probabilities_to_one_hot

    gt = targets if targets.shape[1] > 1 else np.concatenate([1 - targets, targets], axis=1)
    return probabilities_to_one_hot(probs), gt.astype(np.float32)
