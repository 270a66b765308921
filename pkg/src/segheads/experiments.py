"""Experiment recipes: source pretraining, finetuning runs, the zero-shot
box-prompted baseline, and the comparison/ablation harnesses."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import Checkpoint, load_checkpoint, save_checkpoint
from .config import (RunConfig, augment_config, parse_config_text,
                     resolve_encoder, resolved_copy, snapshot, train_config)
from .data import (SplitSpec, Volume, augment, generate_blob_dataset,
                   generate_phantom_dataset, mix64, normalize_volume,
                   save_dataset, slice_to_rgb, split_patients)
from .encoder import EncoderConfig, ViTEncoder
from .heads import AutoSamHead, PromptedDecoder, box_from_mask
from .metrics import RunReport, evaluate_volume
from .model import SegModel, build_model
from .tensor import Tensor, concat, stack
from .training import (Adam, TrainResult, combined_loss, predict_label_volume,
                       select_labeled, train)

_HEAD_IDS = {"autosam": 1, "cnn": 2, "linear": 3, "scratch": 4}


class PretrainError(RuntimeError):
    """Source pretraining did not reach its validation Dice target."""


# -- dataset plumbing --------------------------------------------------------------


def generate_datasets(cfg: RunConfig, out_dir) -> tuple[Path, Path]:
    """Write the target phantom and source blob datasets as SVOL files."""
    out_dir = Path(out_dir)
    target = generate_phantom_dataset(cfg.n_patients, cfg.slices_per_volume,
                                      cfg.img_size, cfg.data_seed)
    source = generate_blob_dataset(cfg.pretrain_patients, cfg.slices_per_volume,
                                   cfg.img_size, mix64(cfg.data_seed, 0x50))
    target_dir = out_dir / "target"
    source_dir = out_dir / "source"
    save_dataset(target, target_dir)
    save_dataset(source, source_dir)
    return target_dir, source_dir


def normalized(volumes: list[Volume]) -> list[Volume]:
    return [normalize_volume(v) for v in volumes]


# -- prompted forward helpers --------------------------------------------------------


def _edge_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Bounding box on pixel-edge coordinates (half a pixel outside the
    tight index box, so single-pixel masks still span an area)."""
    x0, y0, x1, y1 = box_from_mask(mask)
    return (x0 - 0.5, y0 - 0.5, x1 + 0.5, y1 + 0.5)


def _binary_logits(fg: Tensor) -> Tensor:
    """(N,1,H,W) foreground map -> (N,2,H,W) logits whose argmax equals
    thresholding the map at zero."""
    zeros = Tensor(np.zeros(fg.shape, dtype=fg.dtype))
    return concat([zeros, fg], axis=1)


@dataclass
class PretrainedPair:
    """Encoder plus promptable decoder trained on the source distribution."""
    enc_cfg: EncoderConfig
    encoder: ViTEncoder
    decoder: PromptedDecoder
    source_val_dice: float = float("nan")


def _prompted_slice_mask(pair: PretrainedPair, rgb: np.ndarray,
                         box: tuple[float, float, float, float]) -> np.ndarray:
    emb = pair.encoder(Tensor(rgb[None].astype(np.float32)))
    prompts = pair.decoder.encode_box(box)
    logits = pair.decoder(emb, prompts)
    return logits.data[0, 0]


def _prompted_val_dice(pair: PretrainedPair, volumes: list[Volume]) -> float:
    """Mean per-instance Dice of thresholded box-prompted masks."""
    from .metrics import dice_score

    scores = []
    for v in volumes:
        for i in range(v.image.shape[0]):
            rgb = slice_to_rgb(v, i)
            for blob_id in np.unique(v.labels[i]):
                if blob_id == 0:
                    continue
                gt = v.labels[i] == blob_id
                m = _prompted_slice_mask(pair, rgb, _edge_box(gt))
                scores.append(dice_score(m > 0, gt))
    return float(np.mean(scores)) if scores else 0.0


# -- source pretraining ---------------------------------------------------------------


def pretrain_source(cfg: RunConfig, source_volumes: list[Volume]) -> PretrainedPair:
    """Train encoder plus prompted decoder on the high-contrast source
    distribution until validation Dice reaches the configured target.

    Raises PretrainError when the epoch budget is exhausted first.
    """
    enc_cfg = resolve_encoder(cfg)
    rng_seed = mix64(cfg.seed, 0x5E)
    rng = np.random.default_rng(rng_seed)
    encoder = ViTEncoder(enc_cfg, rng)
    decoder = PromptedDecoder(enc_cfg.dim, enc_cfg.grid_side, enc_cfg.img_size,
                              rng, twoway_layers=cfg.twoway_layers,
                              heads=enc_cfg.heads)
    pair = PretrainedPair(enc_cfg, encoder, decoder)

    volumes = normalized(source_volumes)
    split = split_patients(sorted({v.patient_id for v in volumes}),
                           seed=mix64(cfg.seed, 0x51))
    train_vols = split.volumes(volumes, "train")
    val_vols = split.volumes(volumes, "val")

    params = encoder.parameters() + decoder.parameters()
    optimizer = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    aug = augment_config(cfg)

    samples = [(vi, si, int(blob_id))
               for vi, v in enumerate(train_vols)
               for si in range(v.image.shape[0])
               for blob_id in np.unique(v.labels[si]) if blob_id != 0]
    achieved = 0.0
    for epoch in range(cfg.pretrain_epochs):
        order = np.random.default_rng(mix64(rng_seed, 0xE1, epoch)).permutation(len(samples))
        for start in range(0, len(order), cfg.batch):
            imgs, labs, boxes = [], [], []
            for j in order[start:start + cfg.batch]:
                vi, si, blob_id = samples[j]
                img = slice_to_rgb(train_vols[vi], si)
                lab = train_vols[vi].labels[si]
                if aug is not None:
                    a_img, a_lab = augment(img, lab, aug, mix64(rng_seed, epoch, int(j)))
                    if (a_lab == blob_id).any():
                        img, lab = a_img, a_lab
                target = lab == blob_id
                if not target.any():
                    continue
                imgs.append(img)
                labs.append(target)
                boxes.append(_edge_box(target))
            if not imgs:
                continue
            batch_x = Tensor(np.stack(imgs).astype(np.float32))
            batch_y = np.stack(labs).astype(np.int64)
            emb = encoder(batch_x)
            prompts = stack([decoder.encode_box(b) for b in boxes], axis=0)
            logits = _binary_logits(decoder(emb, prompts))
            loss = combined_loss(logits, batch_y, cfg.w_ce, cfg.w_dice)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        achieved = _prompted_val_dice(pair, val_vols)
        if achieved >= cfg.pretrain_dice_target:
            pair.source_val_dice = achieved
            return pair
    raise PretrainError(
        f"source val Dice {achieved:.4f} below target {cfg.pretrain_dice_target} "
        f"after {cfg.pretrain_epochs} epochs")


def save_pretrained(pair: PretrainedPair, cfg: RunConfig, path) -> None:
    tensors = {f"encoder.{k}": v for k, v in pair.encoder.state_dict().items()}
    tensors.update({f"decoder.{k}": v for k, v in pair.decoder.state_dict().items()})
    ckpt = Checkpoint(tensors=tensors, config_text=snapshot(resolved_copy(cfg)),
                      best_val_dice=pair.source_val_dice)
    save_checkpoint(ckpt, path)


def load_pretrained(path) -> PretrainedPair:
    ckpt = load_checkpoint(path)
    saved_cfg = parse_config_text(ckpt.config_text, source=str(path))
    enc_cfg = resolve_encoder(saved_cfg)
    rng = np.random.default_rng(0)
    encoder = ViTEncoder(enc_cfg, rng)
    decoder = PromptedDecoder(enc_cfg.dim, enc_cfg.grid_side, enc_cfg.img_size,
                              rng, twoway_layers=saved_cfg.twoway_layers,
                              heads=enc_cfg.heads)
    encoder.load_state_dict({k[len("encoder."):]: v for k, v in ckpt.tensors.items()
                             if k.startswith("encoder.")})
    decoder.load_state_dict({k[len("decoder."):]: v for k, v in ckpt.tensors.items()
                             if k.startswith("decoder.")})
    return PretrainedPair(enc_cfg, encoder, decoder,
                          source_val_dice=ckpt.best_val_dice)


# -- finetuning ------------------------------------------------------------------------


def _transfer_decoder_weights(head: AutoSamHead, decoder: PromptedDecoder) -> None:
    """Seed the prompt-free head from the pretrained promptable decoder:
    shared core weights directly, auxiliary tokens replicated per group."""
    head.core.load_state_dict(decoder.core.state_dict())
    aux_state = decoder.aux.state_dict()
    for group in head.groups:
        group.load_state_dict(aux_state)


def finetune(cfg: RunConfig, volumes: list[Volume], split: SplitSpec,
             pretrained: PretrainedPair | None,
             head_kind: str | None = None) -> tuple[SegModel, TrainResult]:
    """Train one head over the split's labeled subset. With a pretrained
    pair the encoder starts from (and, when frozen, stays at) the source
    weights; without one the whole model trains from random init."""
    kind = head_kind or cfg.head
    enc_cfg = pretrained.enc_cfg if pretrained else resolve_encoder(cfg)
    model = build_model(enc_cfg, kind, cfg.num_classes,
                        seed=mix64(cfg.seed, 0xF1, _HEAD_IDS.get(kind, 9)),
                        cnn_depth=cfg.cnn_depth, twoway_layers=cfg.twoway_layers)
    if pretrained is not None:
        model.encoder.load_state_dict(pretrained.encoder.state_dict())
        if isinstance(model.head, AutoSamHead):
            _transfer_decoder_weights(model.head, pretrained.decoder)

    train_vols = select_labeled(split.volumes(volumes, "train"),
                                split.patients("train"), cfg.labeled)
    val_vols = split.volumes(volumes, "val")
    result = train(model, train_vols, val_vols, train_config(cfg),
                   aug_cfg=augment_config(cfg), num_classes=cfg.num_classes)
    model.load_state_dict(result.best_state)
    return model, result


def evaluate_on_split(model: SegModel, volumes: list[Volume], split: SplitSpec,
                      cfg: RunConfig, method: str) -> RunReport:
    report = RunReport(method=method, n_labeled=cfg.labeled)
    for v in split.volumes(volumes, "test"):
        pred = predict_label_volume(model, v)
        report.volumes.append(evaluate_volume(pred, v, cfg.num_classes,
                                              assd_mode=cfg.assd_mode))
    return report


# -- zero-shot baseline -----------------------------------------------------------------


def zeroshot_predict_volume(pair: PretrainedPair, volume: Volume,
                            num_classes: int, overlap: str = "logit") -> np.ndarray:
    """Box-prompt every class present in the ground truth of each slice and
    composite the thresholded predictions into one label volume."""
    d, h, w = volume.labels.shape
    pred = np.zeros((d, h, w), dtype=np.uint8)
    for i in range(d):
        rgb = slice_to_rgb(volume, i)
        class_maps: list[tuple[int, np.ndarray]] = []
        for c in range(1, num_classes + 1):
            gt = volume.labels[i] == c
            if not gt.any():
                continue
            class_maps.append((c, _prompted_slice_mask(pair, rgb, _edge_box(gt))))
        if not class_maps:
            continue
        if overlap == "logit":
            stacked = np.stack([m for _, m in class_maps])
            winner = np.argmax(stacked, axis=0)
            best = stacked.max(axis=0)
            ids = np.array([c for c, _ in class_maps], dtype=np.uint8)
            pred[i] = np.where(best > 0, ids[winner], 0)
        elif overlap == "order":
            for c, m in class_maps:
                pred[i][m > 0] = c
        else:
            raise ValueError(f"unknown overlap rule {overlap!r}")
    return pred


def zeroshot_report(pair: PretrainedPair, volumes: list[Volume], split: SplitSpec,
                    cfg: RunConfig) -> RunReport:
    report = RunReport(method="zeroshot_box", n_labeled=0)
    for v in split.volumes(volumes, "test"):
        pred = zeroshot_predict_volume(pair, v, cfg.num_classes, cfg.zeroshot_overlap)
        report.volumes.append(evaluate_volume(pred, v, cfg.num_classes,
                                              assd_mode=cfg.assd_mode))
    return report


# -- harnesses ---------------------------------------------------------------------------


def _variant(cfg: RunConfig, **changes) -> RunConfig:
    out = copy.deepcopy(cfg)
    for key, value in changes.items():
        setattr(out, key, value)
        out.explicit.add(key)
    return out


@dataclass
class ComparisonResult:
    """Per-seed reports per method, for the labeled-volume comparison."""
    reports: dict[str, list[RunReport]] = field(default_factory=dict)

    def mean_dice(self, method: str) -> float:
        return float(np.mean([r.mean_dice_avg() for r in self.reports[method]]))

    def per_seed_dice(self, method: str) -> list[float]:
        return [r.mean_dice_avg() for r in self.reports[method]]


def method_comparison(cfg: RunConfig, volumes: list[Volume],
                      pair: PretrainedPair,
                      methods=("autosam", "cnn", "scratch", "zeroshot")) -> ComparisonResult:
    """Finetuned heads vs from-scratch training vs the zero-shot baseline,
    repeated over the configured split seeds."""
    vols = normalized(volumes)
    ids = sorted({v.patient_id for v in vols})
    result = ComparisonResult({m: [] for m in methods})
    for split_seed in cfg.split_seeds:
        split = split_patients(ids, seed=split_seed)
        for method in methods:
            if method == "zeroshot":
                report = zeroshot_report(pair, vols, split, cfg)
            elif method == "scratch":
                scfg = _variant(cfg, freeze=False)
                model, _ = finetune(scfg, vols, split, pretrained=None, head_kind="cnn")
                report = evaluate_on_split(model, vols, split, cfg, method)
            else:
                model, _ = finetune(cfg, vols, split, pair, head_kind=method)
                report = evaluate_on_split(model, vols, split, cfg, method)
            result.reports[method].append(report)
    return result


def ablate_depth(cfg: RunConfig, volumes: list[Volume], pair: PretrainedPair,
                 depths=(2, 3, 4, 5)) -> list[dict]:
    """CNN head stage-count sweep; one row per depth."""
    vols = normalized(volumes)
    ids = sorted({v.patient_id for v in vols})
    rows = []
    for k in depths:
        kcfg = _variant(cfg, cnn_depth=k)
        per_seed = []
        for split_seed in cfg.split_seeds:
            split = split_patients(ids, seed=split_seed)
            model, _ = finetune(kcfg, vols, split, pair, head_kind="cnn")
            per_seed.append(evaluate_on_split(model, vols, split, kcfg,
                                              f"cnn_k{k}").mean_dice_avg())
        rows.append({"depth": k, "dice_avg": float(np.mean(per_seed)),
                     "dice_std": float(np.std(per_seed))})
    return rows


def ablate_scale(cfg: RunConfig, volumes: list[Volume],
                 source_volumes: list[Volume],
                 scales=("tiny", "small", "base")) -> list[dict]:
    """Encoder width/depth sweep: pretrain per scale, then finetune the
    two strongest heads; one row per (scale, method)."""
    rows = []
    for tag in scales:
        scfg = _variant(cfg, scale=tag)
        scfg.explicit -= {"dim", "depth"}  # let the preset set the extents
        pair = pretrain_source(scfg, source_volumes)
        vols = normalized(volumes)
        ids = sorted({v.patient_id for v in vols})
        for method in ("autosam", "cnn"):
            per_seed_dice, per_seed_assd = [], []
            for split_seed in cfg.split_seeds:
                split = split_patients(ids, seed=split_seed)
                model, _ = finetune(scfg, vols, split, pair, head_kind=method)
                report = evaluate_on_split(model, vols, split, scfg, method)
                per_seed_dice.append(report.mean_dice_avg())
                mean_assd, _ = report.mean_assd()
                if mean_assd is not None:
                    per_seed_assd.append(mean_assd)
            rows.append({
                "scale": tag, "method": method,
                "dice_avg": float(np.mean(per_seed_dice)),
                "assd": float(np.mean(per_seed_assd)) if per_seed_assd else float("nan"),
            })
    return rows


def labeled_curve(cfg: RunConfig, volumes: list[Volume],
                  pair: PretrainedPair) -> list[dict]:
    """Dice versus labeled-volume count; one row per (method, n_labeled)."""
    vols = normalized(volumes)
    ids = sorted({v.patient_id for v in vols})
    rows = []
    for method in cfg.curve_methods:
        for n in cfg.curve_labeled:
            ncfg = _variant(cfg, labeled=n)
            per_seed = []
            for split_seed in cfg.split_seeds:
                split = split_patients(ids, seed=split_seed)
                if method == "scratch":
                    model, _ = finetune(_variant(ncfg, freeze=False), vols, split,
                                        pretrained=None, head_kind="cnn")
                else:
                    model, _ = finetune(ncfg, vols, split, pair, head_kind=method)
                per_seed.append(evaluate_on_split(model, vols, split, ncfg,
                                                  method).mean_dice_avg())
            rows.append({"method": method, "n_labeled": n,
                         "dice_avg": float(np.mean(per_seed)),
                         "dice_std": float(np.std(per_seed))})
    return rows
