"""Small encoder-decoder pixel classifier, Adam, checkpoints and the training loop.

The network is plain torch; the loss and its gradient come from
:mod:`hetseg.losses` (float64 numpy) and are pushed back through the network
with ``logits.backward(grad)``. The optimizer is a hand-rolled Adam so its
state can be serialised into the checkpoint format directly.
"""
from __future__ import annotations

import csv
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .labelspace import LabelScheme
from .losses import LOSS_KINDS, Batch, compute_loss

ARMS = ("lb", "naive", "slac", "ub")
ARM_LOSS = {"lb": "xent", "naive": "naive", "slac": "slac", "ub": "xent"}

CKPT_MAGIC = b"HSEGCKPT"
CKPT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


class EncoderDecoder(nn.Module):
    """U-Net shaped classifier: ``depth`` 2x poolings, 3x3 convs, 1x1 head.

    Input and output are NCHW tensors; spatial extents must be divisible by
    ``2 ** depth``.
    """

    def __init__(self, in_channels=1, num_classes=5, depth=2, base_channels=16, skip=True):
        super().__init__()
        if depth < 0 or base_channels < 1 or num_classes < 2:
            raise ValueError("invalid architecture")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.depth = depth
        self.base_channels = base_channels
        self.skip = skip
        widths = [base_channels * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.down.append(_block(cin, w))
            cin = w
        self.bottom = _block(cin, widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(depth)):
            self.up.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.dec.append(_block(widths[i] * (2 if skip else 1), widths[i]))
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    @property
    def descriptor(self) -> tuple:
        return (self.in_channels, self.num_classes, self.depth, self.base_channels, bool(self.skip))

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for up, dec in zip(self.up, self.dec):
            x = F.relu(up(F.interpolate(x, scale_factor=2, mode="nearest")))
            s = skips.pop()
            if self.skip:
                x = torch.cat([x, s], dim=1)
            x = dec(x)
        return self.head(x)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_weights(model: EncoderDecoder, seed: int) -> EncoderDecoder:
    """He-style uniform init from ``seed``; zero biases."""
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                w = torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound
                m.weight.copy_(w.to(m.weight.dtype))
                m.bias.zero_()
    return model


def build_model(in_channels=1, num_classes=5, depth=2, base_channels=16, skip=True,
                seed=0, dtype=torch.float32) -> EncoderDecoder:
    model = EncoderDecoder(in_channels, num_classes, depth, base_channels, skip).to(dtype)
    return init_weights(model, seed)


def zero_final_layer(model: EncoderDecoder) -> EncoderDecoder:
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model


def _to_nchw(model, images) -> torch.Tensor:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise ValueError(f"images must be (B, H, W, C), got {x.shape}")
    factor = 2 ** model.depth
    if x.shape[1] % factor or x.shape[2] % factor:
        raise ValueError(f"H and W must be divisible by {factor}, got {x.shape[1]}x{x.shape[2]}")
    if x.shape[3] != model.in_channels:
        raise ValueError(f"expected {model.in_channels} input channels, got {x.shape[3]}")
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).to(dtype)


def forward(model: EncoderDecoder, images) -> np.ndarray:
    """Logits ``(B, H, W, C)`` as float64 numpy."""
    with torch.no_grad():
        out = model(_to_nchw(model, images))
    return out.permute(0, 2, 3, 1).double().numpy()


def backward(model: EncoderDecoder, images, labels, scheme: LabelScheme, loss_kind: str):
    """Loss and parameter gradients for one batch; gradients are left in ``p.grad``.

    Returns ``(grads, LossResult)`` with ``grads`` a list aligned with
    ``model.parameters()``.
    """
    model.zero_grad(set_to_none=False)
    out = model(_to_nchw(model, images))
    logits = out.permute(0, 2, 3, 1)
    try:
        result = compute_loss(loss_kind, Batch(logits.detach().double().numpy(), labels, scheme))
    except FloatingPointError as exc:
        raise TrainingDivergedError(f"loss evaluation failed: {exc}") from exc
    logits.backward(torch.from_numpy(result.grad).to(logits.dtype))
    grads = [p.grad for p in model.parameters()]
    for g in grads:
        if not torch.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite parameter gradient (loss={result.value!r})")
    return grads, result


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        params = list(params)
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads) -> AdamState:
    """In-place Adam update with bias correction; increments ``state.t``."""
    params, grads = list(params), list(grads)
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter, gradient and moment lists differ in length")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError("shape mismatch between parameter and gradient")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            step = (m / c1) / ((v / c2).sqrt() + state.eps)
            if not torch.isfinite(step).all():
                raise TrainingDivergedError("non-finite Adam update")
            p.sub_(state.lr * step)
    return state


# checkpoints -----------------------------------------------------------------

def _flat(tensors) -> bytes:
    if not tensors:
        return b""
    arr = torch.cat([t.detach().reshape(-1).float() for t in tensors]).numpy()
    return arr.astype("<f4").tobytes()


def _unflat(buf: bytes, like) -> list:
    arr = np.frombuffer(buf, dtype="<f4")
    out, pos = [], 0
    for t in like:
        n = t.numel()
        out.append(torch.from_numpy(arr[pos:pos + n].copy()).reshape(t.shape).to(t.dtype))
        pos += n
    return out


def save_checkpoint(path, model: EncoderDecoder, state: Optional[AdamState], epoch: int, val_loss: float) -> None:
    params = list(model.parameters())
    n = sum(p.numel() for p in params)
    in_c, n_cls, depth, base, skip = model.descriptor
    parts = [
        CKPT_MAGIC,
        struct.pack("<H", CKPT_VERSION),
        struct.pack("<HHHHB", in_c, n_cls, depth, base, int(skip)),
        struct.pack("<I", n),
        _flat(params),
    ]
    if state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts += [
            struct.pack("<B", 1),
            struct.pack("<Qdddd", state.t, state.lr, state.beta1, state.beta2, state.eps),
            _flat(state.m),
            _flat(state.v),
        ]
    parts.append(struct.pack("<Id", epoch, val_loss))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(model, adam_state_or_None, epoch, val_loss)``."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    in_c, n_cls, depth, base, skip = take("<HHHHB")
    model = EncoderDecoder(in_c, n_cls, depth, base, bool(skip))
    params = list(model.parameters())
    (n,) = take("<I")
    if n != sum(p.numel() for p in params):
        raise CheckpointError("parameter count does not match architecture")

    def blob():
        nonlocal pos
        if pos + 4 * n > len(data):
            raise CheckpointError("truncated checkpoint")
        out = _unflat(data[pos:pos + 4 * n], params)
        pos += 4 * n
        return out

    with torch.no_grad():
        for p, v in zip(params, blob()):
            p.copy_(v)
    (has_state,) = take("<B")
    state = None
    if has_state:
        t, lr, b1, b2, eps = take("<Qdddd")
        m = blob()
        v = blob()
        state = AdamState(m, v, t, lr, b1, b2, eps)
    epoch, val_loss = take("<Id")
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model, state, epoch, val_loss


# training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    arm: str = "slac"
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    lr: float = 0.01
    eval_every: int = 1
    checkpoint_dir: Optional[str] = None
    depth: int = 2
    base_channels: int = 16
    skip: bool = True
    loss: Optional[str] = None

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.loss is None:
            self.loss = ARM_LOSS[self.arm]
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    best_state: Optional[AdamState] = field(default=None, repr=False)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "wall_ms"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), r["wall_ms"]])


def dataset_loss(model, images, labels, scheme, loss_kind, batch_size=8) -> float:
    """Mean per-pixel loss over a whole dataset (sum-reduced per batch, then divided)."""
    total, pixels = 0.0, 0
    for start in range(0, len(images), batch_size):
        x, y = images[start:start + batch_size], labels[start:start + batch_size]
        try:
            res = compute_loss(loss_kind, Batch(forward(model, x), y, scheme), reduction="sum")
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"validation loss evaluation failed: {exc}") from exc
        total += res.value
        pixels += int(np.prod(np.shape(y)))
    return total / pixels


def train(config: TrainConfig, train_images, train_labels, val_images, val_labels,
          scheme: LabelScheme, verbose: bool = False):
    """Mini-batch Adam on the arm's loss; keep the epoch with the lowest validation loss.

    Returns ``(best_model, log)``.
    """
    train_images = np.asarray(train_images, dtype=np.float32)
    if train_images.ndim == 3:
        train_images = train_images[..., None]
    val_images = np.asarray(val_images, dtype=np.float32)
    if val_images.ndim == 3:
        val_images = val_images[..., None]
    train_labels, val_labels = np.asarray(train_labels), np.asarray(val_labels)
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("training and validation sets must be non-empty")

    loss_kind = config.loss
    model = build_model(train_images.shape[-1], scheme.num_base_labels, config.depth,
                        config.base_channels, config.skip, seed=config.seed)
    params = list(model.parameters())
    state = AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    best_params = None
    best_state = None
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    n = len(train_images)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, pixels = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            grads, res = backward(model, train_images[idx], train_labels[idx], scheme, loss_kind)
            adam_step(state, params, grads)
            npix = int(np.prod(train_labels[idx].shape))
            total += res.value * npix
            pixels += npix
        train_loss = total / pixels
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")

        val_loss = math.nan
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            val_loss = dataset_loss(model, val_images, val_labels, scheme, loss_kind, config.batch_size)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
            if val_loss < log.best_val_loss:
                log.best_val_loss, log.best_epoch = val_loss, epoch
                best_params = [p.detach().clone() for p in params]
                best_state = AdamState([m.clone() for m in state.m], [v.clone() for v in state.v],
                                       state.t, state.lr, state.beta1, state.beta2, state.eps)
        wall_ms = int(round((time.perf_counter() - t0) * 1000))
        log.rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "wall_ms": wall_ms})
        if verbose:
            print(f"[{config.arm}] epoch {epoch:3d} train {train_loss:.5f} val {val_loss:.5f} ({wall_ms} ms)")

    with torch.no_grad():
        for p, b in zip(params, best_params):
            p.copy_(b)
    log.best_state = best_state
    if ckpt_dir:
        save_checkpoint(ckpt_dir / f"{config.arm}.ckpt", model, best_state, log.best_epoch, log.best_val_loss)
        log.write_csv(ckpt_dir / f"{config.arm}_log.csv")
    return model, log
