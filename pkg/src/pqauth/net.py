"""Siamese residual CNN over (p,q) feature images.

One shared-weight encoder (stem, residual multi-branch blocks, two
reductions) embeds both input images; the head takes the elementwise L1
difference of the embeddings through a single dense unit and a sigmoid to a
matching score in [0, 1].  Training minimizes clamped binary cross-entropy
with Adam and early stopping on validation loss.

The `paper` preset reproduces the published stage shapes exactly
((35,35,256) -> (17,17,896) -> (8,8,1792), flatten 114688 at 299 input);
the `mini` preset keeps every mechanism at desk scale; `tiny` exists for
finite-difference gradient checks.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, asdict
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .chaos01 import FeatureImage
from .errors import (
    FormatError,
    InsufficientDataError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)

BCE_EPS = 1e-7
MODEL_MAGIC = b"SNM1"
MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; presets below cover the standard sizes."""

    input_hw: int = 299
    blocks_a: int = 5
    blocks_b: int = 10
    blocks_c: int = 5
    stem_width: int = 256
    a_width: int = 32
    b_width: int = 128
    c_width: int = 192
    reduction_a: tuple[int, int, int, int] = (384, 192, 192, 256)
    reduction_b_width: int = 256
    stem: str = "v1"
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("input_hw", "blocks_a", "blocks_b", "stem_width",
                     "a_width", "b_width", "c_width", "reduction_b_width"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.blocks_c < 0:
            raise ParameterError(f"blocks_c must be >= 0, got {self.blocks_c}")
        if self.stem not in ("v1", "tiny"):
            raise ParameterError(f"unknown stem variant {self.stem!r}")
        if len(self.reduction_a) != 4:
            raise ParameterError("reduction_a must be a 4-tuple (n, k, l, m)")
        object.__setattr__(self, "reduction_a", tuple(int(v) for v in self.reduction_a))

    # channel counts entering each stage
    @property
    def channels_a(self) -> int:
        return self.stem_width

    @property
    def channels_b(self) -> int:
        n, _, _, m = self.reduction_a
        return self.stem_width + n + m

    @property
    def reduction_b_outs(self) -> tuple[int, int, int]:
        w = self.reduction_b_width
        return ((384 * w) // 256, w, w)

    @property
    def channels_c(self) -> int:
        return self.channels_b + sum(self.reduction_b_outs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reduction_a"] = list(self.reduction_a)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        kwargs = dict(d)
        if "reduction_a" in kwargs:
            kwargs["reduction_a"] = tuple(kwargs["reduction_a"])
        return cls(**kwargs)


def paper_config(rng_seed: int = 0) -> ModelConfig:
    return ModelConfig(rng_seed=rng_seed)


def mini_config(rng_seed: int = 0) -> ModelConfig:
    return ModelConfig(
        input_hw=128,
        blocks_a=2,
        blocks_b=2,
        blocks_c=2,
        stem_width=64,
        a_width=16,
        b_width=32,
        c_width=48,
        reduction_a=(96, 48, 48, 64),
        reduction_b_width=64,
        rng_seed=rng_seed,
    )


def tiny_config(rng_seed: int = 0) -> ModelConfig:
    return ModelConfig(
        input_hw=16,
        blocks_a=1,
        blocks_b=1,
        blocks_c=0,
        stem_width=16,
        a_width=8,
        b_width=8,
        c_width=8,
        reduction_a=(16, 8, 8, 16),
        reduction_b_width=16,
        stem="tiny",
        rng_seed=rng_seed,
    )


def _conv_out(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if size + 2 * padding < kernel or out < 1:
        raise ParameterError(
            f"spatial arithmetic fails: size {size}, kernel {kernel}, stride {stride}"
        )
    return out


def stage_spatial(config: ModelConfig) -> dict[str, int]:
    """Spatial edge length after each stage; raises on inconsistent arithmetic."""
    s = config.input_hw
    if config.stem == "v1":
        s = _conv_out(s, 3, 2)
        s = _conv_out(s, 3)
        s = _conv_out(s, 3, 1, 1)
        s = _conv_out(s, 3, 2)  # max pool
        s = _conv_out(s, 1)
        s = _conv_out(s, 3)
        s = _conv_out(s, 3, 2)
    else:  # tiny
        s = _conv_out(s, 3, 1, 1)
        s = _conv_out(s, 3, 2)
    out = {"stem": s}
    s = _conv_out(s, 3, 2)
    out["reduction_a"] = s
    s = _conv_out(s, 3, 2)
    out["reduction_b"] = s
    return out


def embedding_shape(config: ModelConfig) -> tuple[int, int, int]:
    """(height, width, channels) of the encoder output."""
    s = stage_spatial(config)["reduction_b"]
    return (s, s, config.channels_c)


def flatten_size(config: ModelConfig) -> int:
    h, w, c = embedding_shape(config)
    return h * w * c


# ---------------------------------------------------------------------------
# modules

class BasicConv2d(nn.Module):
    """Conv -> BatchNorm -> ReLU, the unit every branch is assembled from."""

    def __init__(self, cin, cout, kernel, stride=1, padding=0):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=padding, bias=False)
        self.bn = nn.BatchNorm2d(cout, eps=1e-3)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


class StemV1(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        c1, c2, c3 = width // 8, width // 8, width // 4
        c4, c5 = (width * 5) // 16, (width * 3) // 4
        self.seq = nn.Sequential(
            BasicConv2d(3, c1, 3, stride=2),
            BasicConv2d(c1, c2, 3),
            BasicConv2d(c2, c3, 3, padding=1),
            nn.MaxPool2d(3, stride=2),
            BasicConv2d(c3, c4, 1),
            BasicConv2d(c4, c5, 3),
            BasicConv2d(c5, width, 3, stride=2),
        )

    def forward(self, x):
        return self.seq(x)


class StemTiny(nn.Module):
    """Two-conv stem for gradient-check-sized inputs."""

    def __init__(self, width: int):
        super().__init__()
        self.seq = nn.Sequential(
            BasicConv2d(3, width // 2, 3, padding=1),
            BasicConv2d(width // 2, width, 3, stride=2),
        )

    def forward(self, x):
        return self.seq(x)


class BlockA(nn.Module):
    """35x35-stage residual block: 1x1 / 1x1-3x3 / 1x1-3x3-3x3 branches."""

    def __init__(self, cin: int, bw: int, scale: float = 0.17):
        super().__init__()
        self.scale = scale
        self.branch0 = BasicConv2d(cin, bw, 1)
        self.branch1 = nn.Sequential(BasicConv2d(cin, bw, 1), BasicConv2d(bw, bw, 3, padding=1))
        self.branch2 = nn.Sequential(
            BasicConv2d(cin, bw, 1),
            BasicConv2d(bw, bw, 3, padding=1),
            BasicConv2d(bw, bw, 3, padding=1),
        )
        self.up = nn.Conv2d(3 * bw, cin, 1)
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x):
        y = torch.cat([self.branch0(x), self.branch1(x), self.branch2(x)], dim=1)
        return self.relu(x + self.scale * self.up(y))


class BlockB(nn.Module):
    """17x17-stage residual block with factored 1x7 / 7x1 convolutions."""

    def __init__(self, cin: int, bw: int, scale: float = 0.10):
        super().__init__()
        self.scale = scale
        self.branch0 = BasicConv2d(cin, bw, 1)
        self.branch1 = nn.Sequential(
            BasicConv2d(cin, bw, 1),
            BasicConv2d(bw, bw, (1, 7), padding=(0, 3)),
            BasicConv2d(bw, bw, (7, 1), padding=(3, 0)),
        )
        self.up = nn.Conv2d(2 * bw, cin, 1)
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x):
        y = torch.cat([self.branch0(x), self.branch1(x)], dim=1)
        return self.relu(x + self.scale * self.up(y))


class BlockC(nn.Module):
    """8x8-stage residual block with factored 1x3 / 3x1 convolutions."""

    def __init__(self, cin: int, bw: int, scale: float = 0.20):
        super().__init__()
        self.scale = scale
        self.branch0 = BasicConv2d(cin, bw, 1)
        self.branch1 = nn.Sequential(
            BasicConv2d(cin, bw, 1),
            BasicConv2d(bw, bw, (1, 3), padding=(0, 1)),
            BasicConv2d(bw, bw, (3, 1), padding=(1, 0)),
        )
        self.up = nn.Conv2d(2 * bw, cin, 1)
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x):
        y = torch.cat([self.branch0(x), self.branch1(x)], dim=1)
        return self.relu(x + self.scale * self.up(y))


class ReductionA(nn.Module):
    def __init__(self, cin: int, n: int, k: int, l: int, m: int):
        super().__init__()
        self.branch0 = BasicConv2d(cin, n, 3, stride=2)
        self.branch1 = nn.Sequential(
            BasicConv2d(cin, k, 1),
            BasicConv2d(k, l, 3, padding=1),
            BasicConv2d(l, m, 3, stride=2),
        )
        self.pool = nn.MaxPool2d(3, stride=2)

    def forward(self, x):
        return torch.cat([self.branch0(x), self.branch1(x), self.pool(x)], dim=1)


class ReductionB(nn.Module):
    def __init__(self, cin: int, width: int, outs: tuple[int, int, int]):
        super().__init__()
        o1, o2, o3 = outs
        self.branch0 = nn.Sequential(BasicConv2d(cin, width, 1), BasicConv2d(width, o1, 3, stride=2))
        self.branch1 = nn.Sequential(BasicConv2d(cin, width, 1), BasicConv2d(width, o2, 3, stride=2))
        self.branch2 = nn.Sequential(
            BasicConv2d(cin, width, 1),
            BasicConv2d(width, o3, 3, padding=1),
            BasicConv2d(o3, o3, 3, stride=2),
        )
        self.pool = nn.MaxPool2d(3, stride=2)

    def forward(self, x):
        return torch.cat([self.branch0(x), self.branch1(x), self.branch2(x), self.pool(x)], dim=1)


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.stem = StemV1(config.stem_width) if config.stem == "v1" else StemTiny(config.stem_width)
        self.blocks_a = nn.Sequential(*[BlockA(config.channels_a, config.a_width) for _ in range(config.blocks_a)])
        self.reduction_a = ReductionA(config.channels_a, *config.reduction_a)
        self.blocks_b = nn.Sequential(*[BlockB(config.channels_b, config.b_width) for _ in range(config.blocks_b)])
        self.reduction_b = ReductionB(config.channels_b, config.reduction_b_width, config.reduction_b_outs)
        self.blocks_c = nn.Sequential(*[BlockC(config.channels_c, config.c_width) for _ in range(config.blocks_c)])

    def forward(self, x):
        x = self.stem(x)
        x = self.blocks_a(x)
        x = self.reduction_a(x)
        x = self.blocks_b(x)
        x = self.reduction_b(x)
        x = self.blocks_c(x)
        return x


class SiameseModel(nn.Module):
    """Shared-weight encoder with an L1-similarity sigmoid head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        stage_spatial(config)  # raises on inconsistent arithmetic before any alloc
        self.config = config
        self.encoder = Encoder(config)
        self.head = nn.Linear(flatten_size(config), 1)

    def forward(self, xa: torch.Tensor, xb: torch.Tensor) -> torch.Tensor:
        fa = self.encoder(xa)
        fb = self.encoder(xb)
        diff = torch.abs(fa - fb).flatten(start_dim=1)
        return torch.sigmoid(self.head(diff)).squeeze(-1)


def _init_weights(model: nn.Module, seed: int) -> None:
    """Fan-in-scaled normal init; batch-norm scale 1, shift 0."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in)
                )
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.Linear):
            fan_in = module.in_features
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=gen) * math.sqrt(1.0 / fan_in)
                )
                module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(config: ModelConfig) -> SiameseModel:
    """Construct and deterministically initialize the model (inference mode)."""
    model = SiameseModel(config)
    _init_weights(model, config.rng_seed)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# inference

def _as_chw_tensor(image, hw: int, dtype=torch.float32) -> torch.Tensor:
    if isinstance(image, FeatureImage):
        image = image.pixels
    if isinstance(image, torch.Tensor):
        arr = image
        if arr.ndim == 3 and arr.shape[0] == 3:
            pass
        elif arr.ndim == 3 and arr.shape[2] == 3:
            arr = arr.permute(2, 0, 1)
        else:
            raise ShapeError(f"expected (H,W,3) or (3,H,W), got {tuple(arr.shape)}")
        tensor = arr.to(dtype)
    else:
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected (H,W,3) image, got {arr.shape}")
        tensor = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1).to(dtype)
    if tensor.shape[1] != hw or tensor.shape[2] != hw:
        raise ShapeError(f"image is {tuple(tensor.shape[1:])}, model expects ({hw}, {hw})")
    return tensor


def embed(model: SiameseModel, image) -> np.ndarray:
    """Deterministic inference-mode feature map of one image, as (H, W, C)."""
    x = _as_chw_tensor(image, model.config.input_hw).unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        feat = model.encoder(x)[0]
    if was_training:
        model.train()
    return feat.permute(1, 2, 0).numpy()


def score(model: SiameseModel, image_a, image_b) -> float:
    """Matching score in [0, 1]; exactly symmetric in its two arguments."""
    xa = _as_chw_tensor(image_a, model.config.input_hw).unsqueeze(0)
    xb = _as_chw_tensor(image_b, model.config.input_hw).unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        value = model(xa, xb)[0]
    if was_training:
        model.train()
    return float(value)


def bce_loss(pred, target) -> torch.Tensor:
    """Clamped binary cross-entropy; batch form is the mean."""
    if not isinstance(pred, torch.Tensor):
        pred = torch.as_tensor(pred, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=pred.dtype)
    clamped = torch.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(target * torch.log(clamped) + (1.0 - target) * torch.log(1.0 - clamped))
    return loss.mean()


# ---------------------------------------------------------------------------
# data plumbing

@dataclass
class PairBatch:
    images_a: torch.Tensor  # (B, 3, H, W) float32
    images_b: torch.Tensor
    labels: torch.Tensor  # (B,) float32, 1 iff same subject


Bank = Mapping[str, np.ndarray]  # subject id -> (n_segments, 3 channels, H, W) uint8


def _check_bank(bank: Bank, min_segments: int = 3) -> list[str]:
    ids = sorted(bank)
    if len(ids) < 2:
        raise InsufficientDataError(f"need at least 2 subjects, got {len(ids)}")
    for sid in ids:
        if bank[sid].shape[0] < min_segments:
            raise InsufficientDataError(
                f"subject {sid!r} has {bank[sid].shape[0]} segments; need >= {min_segments}"
            )
    return ids


def _draw_image(bank: Bank, sid: str, rng: np.random.Generator) -> np.ndarray:
    """3 random segments of one subject stacked into one 3-channel image."""
    n = bank[sid].shape[0]
    idx = rng.integers(0, n, size=3)
    return np.stack([bank[sid][idx[ch], ch] for ch in range(3)])


def pair_generator(bank: Bank, batch_size: int, seed: int) -> Iterator[PairBatch]:
    """Endless stream of seeded 50/50-balanced same/different pair batches."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    ids = _check_bank(bank)
    rng = np.random.default_rng(seed)
    pair_index = 0
    while True:
        xa = np.empty((batch_size, 3) + bank[ids[0]].shape[2:], dtype=np.float32)
        xb = np.empty_like(xa)
        labels = np.empty(batch_size, dtype=np.float32)
        for b in range(batch_size):
            positive = pair_index % 2 == 0
            pair_index += 1
            if positive:
                sid_a = sid_b = ids[rng.integers(0, len(ids))]
            else:
                ia, ib = rng.choice(len(ids), size=2, replace=False)
                sid_a, sid_b = ids[ia], ids[ib]
            xa[b] = _draw_image(bank, sid_a, rng)
            xb[b] = _draw_image(bank, sid_b, rng)
            labels[b] = 1.0 if positive else 0.0
        yield PairBatch(
            images_a=torch.from_numpy(xa),
            images_b=torch.from_numpy(xb),
            labels=torch.from_numpy(labels),
        )


class SplitMode(Enum):
    UserDisjoint = "user-disjoint"
    DataDisjoint = "data-disjoint"

    @classmethod
    def from_string(cls, name: str) -> "SplitMode":
        key = name.strip().lower().replace("_", "-")
        for mode in cls:
            if mode.value == key or mode.name.lower() == key.replace("-", ""):
                return mode
        raise ParameterError(f"unknown split mode {name!r}")


def _partition_sizes(total: int, fractions: Sequence[float]) -> list[int]:
    base = [int(math.floor(f * total)) for f in fractions]
    remainders = [f * total - b for f, b in zip(fractions, base)]
    short = total - sum(base)
    for idx in sorted(range(len(fractions)), key=lambda i: -remainders[i])[:short]:
        base[idx] += 1
    if any(b < 1 for b in base):
        raise ParameterError(
            f"partition of {total} items by fractions {list(fractions)} leaves an empty part"
        )
    return base


def split_data(
    segment_counts: Mapping[str, int],
    mode: SplitMode,
    fractions: Sequence[float],
    seed: int,
) -> list[dict[str, np.ndarray]]:
    """Partition subjects (UserDisjoint) or every subject's segments (DataDisjoint).

    Returns one {subject_id: segment indices} dict per fraction; deterministic
    for a given seed.
    """
    if len(fractions) < 2 or any(f <= 0 for f in fractions):
        raise ParameterError(f"fractions must be >= 2 positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    ids = sorted(segment_counts)
    if mode is SplitMode.UserDisjoint:
        sizes = _partition_sizes(len(ids), fractions)
        order = rng.permutation(len(ids))
        parts: list[dict[str, np.ndarray]] = []
        at = 0
        for size in sizes:
            chosen = sorted(ids[i] for i in order[at : at + size])
            parts.append({sid: np.arange(segment_counts[sid]) for sid in chosen})
            at += size
        return parts
    parts = [dict() for _ in fractions]
    for sid in ids:
        count = segment_counts[sid]
        sizes = _partition_sizes(count, fractions)
        order = rng.permutation(count)
        at = 0
        for part, size in zip(parts, sizes):
            part[sid] = np.sort(order[at : at + size])
            at += size
    return parts


def select_bank(bank: Bank, part: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Materialize the sub-bank a partition describes."""
    return {sid: bank[sid][np.asarray(idx, dtype=np.int64)] for sid, idx in part.items()}


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 5
    early_stop_patience: int = 10
    steps_per_epoch: int = 40
    val_pairs: int = 60
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "early_stop_patience",
                     "steps_per_epoch", "val_pairs"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class TrainResult:
    model: SiameseModel
    history: list[dict]
    best_epoch: int
    best_val_loss: float


def _fixed_val_batches(bank: Bank, n_pairs: int, seed: int, batch_size: int = 20) -> list[PairBatch]:
    gen = pair_generator(bank, batch_size, seed)
    batches = []
    taken = 0
    while taken < n_pairs:
        batches.append(next(gen))
        taken += batch_size
    return batches


def _mean_val_loss(model: SiameseModel, batches: Sequence[PairBatch]) -> float:
    model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for batch in batches:
            pred = model(batch.images_a, batch.images_b)
            total += float(bce_loss(pred, batch.labels)) * batch.labels.numel()
            count += batch.labels.numel()
    return total / count


def train(
    model: SiameseModel,
    train_bank: Bank,
    val_bank: Bank,
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Adam + early stopping on validation loss; best-epoch weights returned.

    Deterministic for a given (model seed, data, config seed): batch order,
    initialization and accumulation order are all fixed.
    """
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = pair_generator(train_bank, config.batch_size, config.seed)
    val_batches = _fixed_val_batches(val_bank, config.val_pairs, config.seed + 1)

    history: list[dict] = []
    best_state: dict | None = None
    best_val = math.inf
    best_epoch = -1
    for epoch in range(config.epochs):
        model.train()
        running = 0.0
        for _ in range(config.steps_per_epoch):
            batch = next(gen)
            optimizer.zero_grad()
            pred = model(batch.images_a, batch.images_b)
            loss = bce_loss(pred, batch.labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss.backward()
            optimizer.step()
            running += float(loss.detach())
        train_loss = running / config.steps_per_epoch
        val_loss = _mean_val_loss(model, val_batches)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if log is not None:
            log(f"epoch {epoch}: train_loss={train_loss:.4f} val_loss={val_loss:.4f}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        elif epoch - best_epoch >= config.early_stop_patience:
            if log is not None:
                log(f"early stop at epoch {epoch} (best epoch {best_epoch})")
            break
    assert best_state is not None
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_loss=best_val)


# ---------------------------------------------------------------------------
# gradient check

def grad_check(
    config: ModelConfig | None = None,
    seed: int = 0,
    n_samples: int = 64,
    step: float = 1e-3,
) -> float:
    """Max relative error of backprop gradients vs central finite differences.

    Runs in float64 on a tiny configuration; samples weights from every
    layer kind (stem/branch/up convolutions, batch-norm scale and shift,
    dense weight and bias).  A perturbation that lands on a ReLU/max-pool
    kink makes the central difference meaningless, so each sample is
    screened for local smoothness (difference estimates at two step sizes
    must agree) and resampled if it fails.
    """
    config = config or tiny_config(seed)
    if config.input_hw > 16 or (config.blocks_a + config.blocks_b + config.blocks_c) > 2:
        raise ParameterError("grad check expects a tiny config (input <= 16, <= 2 blocks)")
    model = build_model(config).double().train()
    rng = np.random.default_rng(seed)
    hw = config.input_hw
    xa = torch.from_numpy((rng.random((4, 3, hw, hw)) < 0.1).astype(np.float64))
    xb = torch.from_numpy((rng.random((4, 3, hw, hw)) < 0.1).astype(np.float64))
    labels = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)

    def loss_value() -> float:
        with torch.no_grad():
            return float(bce_loss(model(xa, xb), labels))

    model.zero_grad()
    bce_loss(model(xa, xb), labels).backward()
    analytic = {name: p.grad.detach().clone() for name, p in model.named_parameters()}

    kinds: dict[str, list[str]] = {"stem_conv": [], "branch_conv": [], "up_conv": [],
                                   "bn_weight": [], "bn_bias": [], "dense_weight": [], "dense_bias": []}
    for name, _ in model.named_parameters():
        if name.startswith("head."):
            kinds["dense_weight" if name.endswith("weight") else "dense_bias"].append(name)
        elif ".bn." in name:
            kinds["bn_weight" if name.endswith("weight") else "bn_bias"].append(name)
        elif ".up." in name:
            kinds["up_conv"].append(name)
        elif name.startswith("encoder.stem."):
            kinds["stem_conv"].append(name)
        else:
            kinds["branch_conv"].append(name)

    base_loss = loss_value()
    params = dict(model.named_parameters())
    per_kind = max(1, -(-n_samples // len(kinds)))
    max_rel = 0.0
    accepted = 0
    with torch.no_grad():
        for kind, names in kinds.items():
            if not names:
                continue
            taken = 0
            attempts = 0
            while taken < per_kind and attempts < 40 * per_kind:
                attempts += 1
                name = names[rng.integers(0, len(names))]
                flat = params[name].view(-1)
                idx = int(rng.integers(0, flat.numel()))
                orig = float(flat[idx])
                flat[idx] = orig + step
                loss_plus = loss_value()
                flat[idx] = orig - step
                loss_minus = loss_value()
                flat[idx] = orig
                fd = (loss_plus - loss_minus) / (2.0 * step)
                # a slope jump inside the interval shows up as a second
                # difference >= twice the error it induces in `fd`
                slope_fwd = (loss_plus - base_loss) / step
                slope_bwd = (base_loss - loss_minus) / step
                if abs(slope_fwd - slope_bwd) > 2e-3 * max(abs(slope_fwd), abs(slope_bwd), 1e-6):
                    continue
                an = float(analytic[name].view(-1)[idx])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                max_rel = max(max_rel, rel)
                taken += 1
                accepted += 1
            if taken < per_kind:
                raise ParameterError(f"could not find smooth sample points for kind {kind!r}")
    if accepted < n_samples:
        raise ParameterError(f"only {accepted} smooth samples found, wanted {n_samples}")
    return max_rel


# ---------------------------------------------------------------------------
# serialization

def _canonical_config_json(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _weight_records(model: SiameseModel) -> list[tuple[str, bytes]]:
    """Serialized (name, record bytes) for every persisted tensor, name-sorted."""
    records = []
    state = model.state_dict()
    for name in sorted(state):
        if name.endswith("num_batches_tracked"):
            continue
        tensor = state[name].detach().cpu().to(torch.float32).numpy()
        name_bytes = name.encode("utf-8")
        header = struct.pack("<H", len(name_bytes)) + name_bytes
        header += struct.pack("<B", tensor.ndim)
        header += b"".join(struct.pack("<I", d) for d in tensor.shape)
        records.append((name, header + tensor.astype("<f4").tobytes()))
    return records


def model_version_hash(model: SiameseModel) -> bytes:
    """32-byte digest binding the architecture config and every weight."""
    digest = hashlib.sha256()
    digest.update(_canonical_config_json(model.config))
    for _, record in _weight_records(model):
        digest.update(record)
    return digest.digest()


def save_model(
    model: SiameseModel,
    path: Union[str, Path],
    eer_threshold: float | None = None,
    run_config: Mapping | None = None,
) -> bytes:
    """Write the model file; returns its version hash."""
    meta = {
        "model_config": model.config.to_dict(),
        "eer_threshold": eer_threshold,
        "run_config": dict(run_config) if run_config is not None else None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    version = model_version_hash(model)
    with Path(path).open("wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for _, record in _weight_records(model):
            fh.write(record)
        fh.write(version)
    return version


def load_model(path: Union[str, Path]) -> tuple[SiameseModel, dict]:
    """Read a model file back; returns (model, metadata dict)."""
    raw = Path(path).read_bytes()
    at = 0
    if len(raw) < 10:
        raise FormatError("file too short for model header", offset=len(raw))
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MODEL_MAGIC!r}", offset=0)
    at = 4
    (fmt_version,) = struct.unpack_from("<H", raw, at)
    if fmt_version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {fmt_version}", offset=at)
    at += 2
    (meta_len,) = struct.unpack_from("<I", raw, at)
    at += 4
    if len(raw) < at + meta_len + 32:
        raise FormatError("truncated metadata block", offset=len(raw))
    try:
        meta = json.loads(raw[at : at + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}", offset=at) from exc
    at += meta_len
    try:
        config = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"metadata lacks a usable model_config: {exc}", offset=at) from exc

    weights: dict[str, torch.Tensor] = {}
    body_end = len(raw) - 32
    while at < body_end:
        if at + 2 > body_end:
            raise FormatError("dangling bytes before version hash", offset=at)
        (name_len,) = struct.unpack_from("<H", raw, at)
        if at + 2 + name_len + 1 > body_end:
            raise FormatError("truncated weight record header", offset=at)
        name = raw[at + 2 : at + 2 + name_len].decode("utf-8")
        cursor = at + 2 + name_len
        (rank,) = struct.unpack_from("<B", raw, cursor)
        cursor += 1
        if cursor + 4 * rank > body_end:
            raise FormatError(f"truncated shape of record {name!r}", offset=cursor)
        shape = struct.unpack_from(f"<{rank}I", raw, cursor) if rank else ()
        cursor += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        if cursor + 4 * count > body_end:
            raise FormatError(f"truncated data of record {name!r}", offset=cursor)
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=cursor).reshape(shape)
        weights[name] = torch.from_numpy(data.copy())
        at = cursor + 4 * count

    model = build_model(config)
    state = model.state_dict()
    expected = {k for k in state if not k.endswith("num_batches_tracked")}
    if set(weights) != expected:
        missing = sorted(expected - set(weights))
        extra = sorted(set(weights) - expected)
        raise FormatError(f"weight records mismatch: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, tensor in weights.items():
            if tuple(state[name].shape) != tuple(tensor.shape):
                raise FormatError(
                    f"record {name!r} has shape {tuple(tensor.shape)}, model expects {tuple(state[name].shape)}"
                )
            state[name].copy_(tensor)
    stored_hash = raw[body_end:]
    actual = model_version_hash(model)
    if stored_hash != actual:
        raise FormatError("version hash mismatch: file does not match its weights", offset=body_end)
    model.eval()
    return model, meta


def save_history(history: Sequence[Mapping], path: Union[str, Path]) -> None:
    """Training history as a JSON array of {epoch, train_loss, val_loss}."""
    Path(path).write_text(json.dumps(list(history), indent=2) + "\n")
