"""Losses, Adam optimizer, and the finetuning loop."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, Volume, augment, mix64, slice_to_rgb
from .tensor import Tensor, log_softmax, softmax, tmean, tsum


# -- losses ----------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_channels: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) one-hot planes."""
    if labels.min() < 0 or labels.max() >= num_channels:
        raise ValueError(f"labels outside [0, {num_channels - 1}]")
    eye = np.eye(num_channels, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax probability at the true class."""
    y = one_hot(labels, logits.shape[1], dtype=logits.dtype)
    lsm = log_softmax(logits, axis=1)
    n_pixels = labels.size
    return -tsum(lsm * Tensor(y)) * (1.0 / n_pixels)


def soft_dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1e-5,
                   include_background: bool = True) -> Tensor:
    """One minus the channel-mean soft Dice overlap of softmax probabilities."""
    y = one_hot(labels, logits.shape[1], dtype=logits.dtype)
    p = softmax(logits, axis=1)
    yt = Tensor(y)
    inter = tsum(p * yt, axis=(0, 2, 3))
    psum = tsum(p, axis=(0, 2, 3))
    ysum = Tensor(y.sum(axis=(0, 2, 3)))
    dice = (inter * 2.0 + smooth) / (psum + ysum + smooth)
    if not include_background:
        dice = dice[1:]
    return 1.0 - tmean(dice)


def combined_loss(logits: Tensor, labels: np.ndarray, w_ce: float = 1.0,
                  w_dice: float = 1.0, dice_background: bool = True) -> Tensor:
    if w_ce < 0 or w_dice < 0:
        raise ValueError("loss weights must be non-negative")
    total = None
    if w_ce:
        total = cross_entropy(logits, labels) * w_ce
    if w_dice:
        d = soft_dice_loss(logits, labels, include_background=dice_background) * w_dice
        total = d if total is None else total + d
    if total is None:
        total = cross_entropy(logits, labels) * 0.0
    return total


def soft_dice_scores(logits: np.ndarray, labels: np.ndarray,
                     smooth: float = 1e-5) -> np.ndarray:
    """Per-channel soft Dice of softmax(logits) against one-hot labels (numpy)."""
    num = logits.shape[1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    y = one_hot(labels, num, dtype=np.float64)
    inter = (p * y).sum(axis=(0, 2, 3))
    return (2.0 * inter + smooth) / (p.sum(axis=(0, 2, 3)) + y.sum(axis=(0, 2, 3)) + smooth)


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam; parameters with requires_grad=False are skipped."""

    def __init__(self, params, lr: float = 5e-4, betas: tuple[float, float] = (0.5, 0.999),
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._moments: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m, v = self._moments.get(id(p)) or (np.zeros_like(p.data), np.zeros_like(p.data))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self._moments[id(p)] = (m, v)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def moment_arrays(self, named_params) -> dict[str, np.ndarray]:
        """Moment buffers keyed by parameter name (for checkpointing)."""
        out = {"t": np.array([float(self.t)])}
        for name, p in named_params:
            mv = self._moments.get(id(p))
            if mv is not None:
                out[f"m.{name}"] = mv[0].copy()
                out[f"v.{name}"] = mv[1].copy()
        return out


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 4
    epochs: int = 120
    w_ce: float = 1.0
    w_dice: float = 1.0
    seed: int = 0
    freeze_encoder: bool = True
    labeled_volumes: int = 0          # 0 means use every training volume
    dice_loss_background: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice_mean: float
    val_dice_per_class: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_state: dict[str, np.ndarray]
    best_val_dice: float
    best_epoch: int
    best_optimizer: dict[str, np.ndarray]


def _volume_mean_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """3D binary Dice per foreground class (both-empty counts as 1)."""
    out = np.zeros(num_classes)
    for c in range(1, num_classes + 1):
        p = pred == c
        g = gt == c
        denom = p.sum() + g.sum()
        out[c - 1] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, g).sum() / denom
    return out


def predict_label_volume(model, volume: Volume, batch: int = 8) -> np.ndarray:
    """Slice-wise argmax prediction stacked back into a label volume."""
    d = volume.image.shape[0]
    preds = []
    for start in range(0, d, batch):
        rgb = np.stack([slice_to_rgb(volume, i)
                        for i in range(start, min(start + batch, d))])
        logits = model.predict_logits(rgb)
        preds.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(preds, axis=0)


def validation_dice(model, volumes: list[Volume], num_classes: int) -> np.ndarray:
    """Per-class Dice averaged over volumes (model-selection metric)."""
    if not volumes:
        return np.zeros(num_classes)
    scores = [_volume_mean_dice(predict_label_volume(model, v), v.labels, num_classes)
              for v in volumes]
    return np.mean(scores, axis=0)


def train(model, train_volumes: list[Volume], val_volumes: list[Volume],
          cfg: TrainConfig, aug_cfg: AugmentConfig | None = None,
          num_classes: int = 3) -> TrainResult:
    """Finetune ``model`` on slices of the given (already normalized) volumes.

    Augmentation is re-seeded per (seed, epoch, sample) so runs are
    reproducible bit for bit; the checkpoint with the best validation Dice
    is retained alongside the optimizer moments at that epoch.
    """
    if not train_volumes:
        raise ValueError("training set is empty")
    model.encoder.set_frozen(cfg.freeze_encoder)
    optimizer = Adam(model.parameters(), lr=cfg.lr,
                     betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

    samples = [(vi, si) for vi, v in enumerate(train_volumes)
               for si in range(v.image.shape[0])]
    rgb_cache = {(vi, si): slice_to_rgb(train_volumes[vi], si) for vi, si in samples}

    history: list[EpochRecord] = []
    best = TrainResult(history, model.state_dict(), -1.0, -1, {})

    for epoch in range(cfg.epochs):
        order = np.random.default_rng(mix64(cfg.seed, 0xE0, epoch)).permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idxs = order[start:start + cfg.batch]
            imgs, labs = [], []
            for j in idxs:
                vi, si = samples[j]
                img = rgb_cache[(vi, si)]
                lab = train_volumes[vi].labels[si]
                if aug_cfg is not None:
                    img, lab = augment(img, lab, aug_cfg, mix64(cfg.seed, epoch, int(j)))
                imgs.append(img)
                labs.append(lab)
            batch_x = Tensor(np.stack(imgs).astype(np.float32))
            batch_y = np.stack(labs).astype(np.int64)
            logits = model(batch_x)
            loss = combined_loss(logits, batch_y, cfg.w_ce, cfg.w_dice,
                                 dice_background=cfg.dice_loss_background)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        per_class = validation_dice(model, val_volumes, num_classes)
        val_mean = float(per_class.mean()) if len(per_class) else 0.0
        history.append(EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)),
                                   val_dice_mean=val_mean,
                                   val_dice_per_class=[float(x) for x in per_class]))
        if val_mean > best.best_val_dice:
            best = TrainResult(history, model.state_dict(), val_mean, epoch,
                               optimizer.moment_arrays(model.named_parameters()))

    if best.best_epoch < 0:
        best = TrainResult(history, model.state_dict(), 0.0, cfg.epochs - 1,
                           optimizer.moment_arrays(model.named_parameters()))
    return best


def select_labeled(volumes: list[Volume], ordered_patients: list[int],
                   count: int) -> list[Volume]:
    """First ``count`` volumes following the shuffled patient order (0 = all)."""
    by_patient: dict[int, list[Volume]] = {}
    for v in volumes:
        by_patient.setdefault(v.patient_id, []).append(v)
    ordered = [v for pid in ordered_patients for v in by_patient.get(pid, [])]
    if count <= 0 or count >= len(ordered):
        return ordered
    return ordered[:count]


# -- loss gradient checks -----------------------------------------------------------


def gradcheck_losses(tolerance: float = 1e-4, verbose: bool = False
                     ) -> list[tuple[str, float, bool]]:
    from .gradcheck import check_gradients

    rng = np.random.default_rng(11)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    logits0 = rng.uniform(-1, 1, (2, 3, 4, 4))

    cases = [
        ("cross_entropy", lambda t: cross_entropy(t, labels)),
        ("soft_dice_loss", lambda t: soft_dice_loss(t, labels)),
        ("combined_loss", lambda t: combined_loss(t, labels, 1.0, 1.0)),
    ]
    results = []
    for name, build in cases:
        err = check_gradients(build, [logits0.copy()])
        ok = err <= tolerance
        results.append((name, err, ok))
        if verbose:
            print(f"  {name:<24s} rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    return results
