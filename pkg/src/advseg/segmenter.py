"""The fixed victim: a 2D U-Net trained with cross-entropy, then frozen."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import losses, tensorio


class SegmenterError(Exception):
    pass


def _double_conv(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class SegModel(nn.Module):
    """U-Net over single-channel inputs, softmax over C+1 class channels."""

    def __init__(self, depth=4, base_channels=16, n_classes=4, seed=0):
        super().__init__()
        if depth < 2:
            raise SegmenterError("depth must be >= 2")
        torch.manual_seed(seed)
        self.depth = depth
        self.base_channels = base_channels
        self.n_classes = n_classes
        self.frozen = False
        chans = [base_channels * 2 ** i for i in range(depth)]
        self.down = nn.ModuleList()
        c_prev = 1
        for c in chans:
            self.down.append(_double_conv(c_prev, c))
            c_prev = c
        self.pool = nn.MaxPool2d(2)
        self.up_tr = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        for i in range(depth - 2, -1, -1):
            self.up_tr.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.up_conv.append(_double_conv(chans[i] * 2, chans[i]))
        self.out = nn.Conv2d(chans[0], n_classes + 1, 1)

    def forward(self, x):
        if x.dim() == 3:
            x = x[:, None]
        H, W = x.shape[-2:]
        divisor = 2 ** (self.depth - 1)
        if H % divisor or W % divisor:
            raise SegmenterError(
                f"spatial size {H}x{W} not divisible by {divisor}"
            )
        skips = []
        h = x
        for i, block in enumerate(self.down):
            h = block(h if i == 0 else self.pool(h))
            skips.append(h)
        for j, (tr, conv) in enumerate(zip(self.up_tr, self.up_conv)):
            skip = skips[self.depth - 2 - j]
            h = conv(torch.cat([tr(h), skip], dim=1))
        return torch.softmax(self.out(h), dim=1)  # (B, C+1, H, W)


def build_unet(depth: int, base_channels: int, n_classes: int, seed: int) -> SegModel:
    return SegModel(depth=depth, base_channels=base_channels,
                    n_classes=n_classes, seed=seed)


def segment(model: SegModel, img) -> np.ndarray:
    """Per-pixel class probabilities, (H, W, C+1), inference mode."""
    x = torch.as_tensor(np.asarray(img, dtype=np.float32))
    if x.dim() == 2:
        x = x[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = model(x)
    model.train(was_training)
    out = probs.permute(0, 2, 3, 1).numpy()
    return out[0] if np.asarray(img).ndim == 2 else out


def param_hash(model: nn.Module) -> str:
    """SHA-256 over all parameters and buffers (order-stable)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(H, W) int labels -> (H, W, C+1) one-hot float grid."""
    return np.eye(n_classes + 1, dtype=np.float32)[labels]


@dataclass
class SegTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    patch_size: tuple[int, int] = (64, 64)
    patches_per_slice: int = 2
    seed: int = 0
    balance_classes: bool = True  # sqrt-inverse-frequency pixel weights


def _class_weights(train_slices, n_classes: int) -> np.ndarray:
    """Sqrt-inverse-frequency weights, normalized to mean 1; tiny organ
    classes would otherwise vanish under the per-pixel mean."""
    counts = np.zeros(n_classes + 1, dtype=np.float64)
    for _, lab in train_slices:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=n_classes + 1)
    w = np.sqrt(counts.sum() / np.maximum(counts, 1.0))
    return (w / w.mean()).astype(np.float32)


def _weighted_xent(probs, target_onehot, pixel_weights):
    p = probs.clamp(losses.PROB_FLOOR, 1.0)
    ce = -(target_onehot * p.log()).sum(dim=-1)
    return (pixel_weights * ce).mean()


def mean_foreground_dice(model: SegModel, slices) -> float:
    """Macro mean Dice over foreground classes and slices."""
    from .evalreport import dice  # local import to avoid a cycle

    scores = []
    for img, lab in slices:
        pred = segment(model, img).argmax(axis=-1)
        for c in range(1, model.n_classes + 1):
            scores.append(dice(pred, lab, c))
    return float(np.mean(scores)) if scores else 0.0


def train_segmenter(model: SegModel, train_slices, val_slices,
                    config: SegTrainConfig) -> tuple[SegModel, list[dict]]:
    """Patch-based cross-entropy training; returns the best-validation-Dice
    checkpoint marked frozen, plus a per-epoch log."""
    if model.frozen:
        raise SegmenterError("model is frozen")
    if not train_slices:
        raise SegmenterError("empty training set")
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    weights = (_class_weights(train_slices, model.n_classes)
               if config.balance_classes else np.ones(model.n_classes + 1, np.float32))
    w_t = torch.as_tensor(weights)
    best_state, best_dice = None, -1.0
    log = []
    for epoch in range(config.epochs):
        patches = []
        for img, lab in train_slices:
            patches += tensorio.extract_patches(
                img, lab, config.patch_size, config.patches_per_slice, rng)
        order = rng.permutation(len(patches))
        model.train()
        ep_loss, n_batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [patches[i] for i in order[start : start + config.batch_size]]
            x = torch.as_tensor(np.stack([p.image for p in batch]))
            t = torch.as_tensor(
                np.stack([one_hot(p.labels, model.n_classes) for p in batch]))
            probs = model(x).permute(0, 2, 3, 1)
            labels = torch.as_tensor(np.stack([p.labels for p in batch]).astype(np.int64))
            loss = _weighted_xent(probs, t, w_t[labels])
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep_loss += float(losses.xent(probs.detach(), t))
            n_batches += 1
        val_dice = mean_foreground_dice(model, val_slices) if val_slices else 0.0
        log.append({"epoch": epoch, "xent": ep_loss / max(n_batches, 1),
                    "val_dice": val_dice})
        if val_dice >= best_dice:
            best_dice = val_dice
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    freeze(model)
    return model, log


def freeze(model: SegModel) -> SegModel:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.frozen = True
    return model


def save_checkpoint(path: str, model: SegModel):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"depth": model.depth, "base_channels": model.base_channels,
            "n_classes": model.n_classes, "frozen": model.frozen,
            "kind": "segmenter"}
    tensorio.save_arrays(path, arrays, meta=meta)


def load_checkpoint(path: str) -> SegModel:
    arrays, meta = tensorio.load_arrays(path)
    model = SegModel(depth=int(meta["depth"]),
                     base_channels=int(meta["base_channels"]),
                     n_classes=int(meta["n_classes"]))
    state = model.state_dict()
    model.load_state_dict(
        {k: torch.as_tensor(arrays[k]).to(state[k].dtype) for k in state})
    if meta.get("frozen"):
        freeze(model)
    return model
