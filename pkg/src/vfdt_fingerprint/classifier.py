"""Convolutional device classifier over 2 x L feature matrices.

Six convolution blocks (conv -> batch norm -> leaky ReLU -> max-pool along
the length axis), three fully connected blocks (linear -> dropout -> leaky
ReLU) and a final linear layer. The first kernel spans both input rows so
the I and Q features are mixed once; later kernels run along the length.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DataError, ValidationError

CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvBlockSpec:
    out_channels: int
    kernel: tuple = (1, 7)
    pool_w: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.out_channels < 1 or len(self.kernel) != 2 or min(self.kernel) < 1 or self.pool_w < 1:
            raise ValidationError(f"invalid conv block {self}")


def _default_conv_blocks():
    widths = (8, 16, 32, 32, 64, 64)
    return tuple(ConvBlockSpec(c, (2, 7) if i == 0 else (1, 7), 2) for i, c in enumerate(widths))


@dataclass(frozen=True)
class CnnConfig:
    num_classes: int = 10
    conv_blocks: tuple = field(default_factory=_default_conv_blocks)
    fc_widths: tuple = (256, 128, 64)
    dropout: float = 0.5
    leaky_slope: float = 0.1
    input_shape: tuple = (2, 1024)
    seed: int = 0

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlockSpec) else ConvBlockSpec(**b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(blocks) != 6:
            raise ValidationError(f"the network has exactly 6 conv blocks, got {len(blocks)}")
        if len(self.fc_widths) != 3 or min(self.fc_widths) < 1:
            raise ValidationError("the network has exactly 3 fully connected blocks of positive width")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must be in [0, 1)")
        if not 0 < self.leaky_slope < 1:
            raise ValidationError("leaky_slope must be in (0, 1)")
        height, width = self.input_shape
        for b in blocks:
            height -= b.kernel[0] - 1
            width //= b.pool_w
            if height < 1 or width < 1:
                raise ValidationError(f"input shape {self.input_shape} too small for the conv stack")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CnnConfig":
        data = dict(data)
        if "conv_blocks" in data:
            data["conv_blocks"] = tuple(ConvBlockSpec(**b) for b in data["conv_blocks"])
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    train_fraction: float = 0.9
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    #: "cosine" anneals the step size to zero over the run; "constant" keeps it fixed.
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must be in (0, 1)")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ValidationError("batch_size and learning_rate must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class LabeledExample:
    features: np.ndarray
    device_label: int
    domain_label: str = ""


class FingerprintCNN(nn.Module):
    def __init__(self, cfg: CnnConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        in_ch = 1
        height, width = cfg.input_shape
        for b in cfg.conv_blocks:
            kh, kw = b.kernel
            blocks += [
                nn.Conv2d(in_ch, b.out_channels, (kh, kw), padding=(0, kw // 2)),
                nn.BatchNorm2d(b.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM),
                nn.LeakyReLU(cfg.leaky_slope),
                nn.MaxPool2d((1, b.pool_w)),
            ]
            in_ch = b.out_channels
            height -= kh - 1
            width = (width + 2 * (kw // 2) - kw + 1) // b.pool_w
        self.features = nn.Sequential(*blocks)
        layers = []
        fan_in = in_ch * height * width
        for w in cfg.fc_widths:
            layers += [nn.Linear(fan_in, w), nn.Dropout(cfg.dropout), nn.LeakyReLU(cfg.leaky_slope)]
            fan_in = w
        layers.append(nn.Linear(fan_in, cfg.num_classes))
        self.head = nn.Sequential(*layers)
        self._init_weights(cfg.seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(m.weight[0].numel())
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if tuple(x.shape[2:]) != self.cfg.input_shape:
            raise ValidationError(f"expected inputs of shape (*, {self.cfg.input_shape}), got {tuple(x.shape)}")
        return self.head(self.features(x).flatten(1))


def build_model(cfg: CnnConfig) -> FingerprintCNN:
    return FingerprintCNN(cfg)


def _as_tensor(batch, dtype=torch.float32) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch.to(dtype)
    return torch.as_tensor(np.asarray(batch), dtype=dtype)


def forward(model: FingerprintCNN, batch, batch_size: int = 256) -> np.ndarray:
    """Inference-mode class scores (logits) for a batch of feature matrices."""
    x = _as_tensor(batch, next(model.parameters()).dtype)
    if x.dim() != 3:
        raise ValidationError(f"expected a (batch, rows, length) array, got shape {tuple(x.shape)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            scores = [model(x[k : k + batch_size]) for k in range(0, x.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(scores).cpu().numpy().astype(np.float64)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def stratified_split(dataset: Sequence[LabeledExample], train_fraction: float, seed: int):
    """Split indices so every (device, domain) group keeps ``train_fraction`` in training.

    Each group of at least two examples contributes at least one example to
    each side.
    """
    groups: dict = {}
    for idx, ex in enumerate(dataset):
        groups.setdefault((ex.device_label, ex.domain_label), []).append(idx)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for key in sorted(groups, key=lambda k: (k[0], str(k[1]))):
        members = np.array(groups[key])
        members = members[rng.permutation(members.size)]
        n_test = members.size - int(round(train_fraction * members.size))
        if members.size >= 2:
            n_test = min(max(n_test, 1), members.size - 1)
        test.extend(members[:n_test].tolist())
        train.extend(members[n_test:].tolist())
    return sorted(train), sorted(test)


def canonical_order(dataset: Sequence[LabeledExample]) -> list[int]:
    """Indices sorted by (device, domain, feature digest)."""

    def key(i):
        ex = dataset[i]
        digest = hashlib.sha256(np.ascontiguousarray(ex.features, dtype=np.float64).tobytes()).hexdigest()
        return ex.device_label, str(ex.domain_label), digest

    return sorted(range(len(dataset)), key=key)


def _stack(dataset: Sequence[LabeledExample], indices) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([dataset[i].features for i in indices]).astype(np.float32)
    y = np.array([dataset[i].device_label for i in indices], dtype=np.int64)
    return x, y


@dataclass
class TrainedModel:
    model: FingerprintCNN
    cnn_config: CnnConfig
    train_config: TrainConfig
    train_indices: list
    test_indices: list

    def predict(self, features) -> np.ndarray:
        return forward(self.model, features).argmax(axis=1)


def train(
    dataset: Sequence[LabeledExample],
    cnn_cfg: CnnConfig,
    train_cfg: TrainConfig = TrainConfig(),
    log=None,
) -> tuple[TrainedModel, list[dict]]:
    """Fit a fresh network with Adam on a stratified train/test split.

    Returns the model and one history record per epoch with training loss
    and train/test accuracy.

    Raises:
        ValidationError: fewer than two classes, labels outside the class
            range, or a split with an empty side.
    """
    labels = {ex.device_label for ex in dataset}
    if len(labels) < 2:
        raise ValidationError("training needs at least two classes")
    if min(labels) < 0 or max(labels) >= cnn_cfg.num_classes:
        raise ValidationError("device labels must lie in [0, num_classes)")
    # a content-defined order makes the split and shuffle independent of input order
    order = canonical_order(dataset)
    canonical = [dataset[i] for i in order]
    train_pos, test_pos = stratified_split(canonical, train_cfg.train_fraction, train_cfg.seed)
    if not train_pos or not test_pos:
        raise ValidationError("train/test split left one side empty")
    x_train, y_train = _stack(canonical, train_pos)
    x_test, y_test = _stack(canonical, test_pos)
    train_idx = sorted(order[k] for k in train_pos)
    test_idx = sorted(order[k] for k in test_pos)
    if not (np.all(np.isfinite(x_train)) and np.all(np.isfinite(x_test))):
        raise DataError("non-finite features")

    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_cfg.seed)
        model = build_model(cnn_cfg)
        opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
        schedule = None
        if train_cfg.lr_schedule == "cosine":
            schedule = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=train_cfg.epochs)
        loss_fn = nn.CrossEntropyLoss()
        gen = torch.Generator().manual_seed(train_cfg.seed)
        xt = torch.from_numpy(x_train)
        yt = torch.from_numpy(y_train)
        n = xt.shape[0]
        for epoch in range(train_cfg.epochs):
            model.train()
            order = torch.randperm(n, generator=gen)
            total = 0.0
            for k in range(0, n, train_cfg.batch_size):
                idx = order[k : k + train_cfg.batch_size]
                if idx.numel() < 2:
                    continue  # batch norm needs more than one example
                opt.zero_grad()
                loss = loss_fn(model(xt[idx]), yt[idx])
                loss.backward()
                opt.step()
                total += loss.item() * idx.numel()
            if schedule is not None:
                schedule.step()
            record = {
                "epoch": epoch + 1,
                "loss": total / n,
                "train_accuracy": float(np.mean(forward(model, x_train).argmax(1) == y_train)),
                "test_accuracy": float(np.mean(forward(model, x_test).argmax(1) == y_test)),
            }
            history.append(record)
            if log is not None:
                log(record)
    model.eval()
    return TrainedModel(model, cnn_cfg, train_cfg, train_idx, test_idx), history


def evaluate(model, dataset: Sequence[LabeledExample], num_classes: Optional[int] = None):
    """Accuracy and confusion matrix (rows = true class, columns = predicted).

    ``model`` may be a :class:`TrainedModel`, a network, or any callable
    mapping a feature batch to predicted labels.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    x = np.stack([ex.features for ex in dataset])
    y = np.array([ex.device_label for ex in dataset])
    if isinstance(model, TrainedModel):
        num_classes = num_classes or model.cnn_config.num_classes
        pred = model.predict(x)
    elif isinstance(model, FingerprintCNN):
        num_classes = num_classes or model.cfg.num_classes
        pred = forward(model, x).argmax(axis=1)
    else:
        pred = np.asarray(model(x))
        if num_classes is None:
            raise ValidationError("num_classes is required for a plain predictor")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValidationError("labels outside the model's class range")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    accuracy = float(np.trace(confusion) / confusion.sum())
    return accuracy, confusion


# -- gradient verification ----------------------------------------------------------------


def tiny_config(num_classes: int = 3, seed: int = 0) -> CnnConfig:
    """Smallest sensible network: 6 blocks of 2 channels over a 2 x 64 input."""
    blocks = tuple(ConvBlockSpec(2, (2, 3) if i == 0 else (1, 3), 2) for i in range(6))
    return CnnConfig(
        num_classes=num_classes,
        conv_blocks=blocks,
        fc_widths=(4, 4, 4),
        dropout=0.5,
        leaky_slope=0.1,
        input_shape=(2, 64),
        seed=seed,
    )


@dataclass
class GradientReport:
    max_relative_error: float
    tolerance: float
    n_parameters: int
    worst_parameter: str
    n_kink_skipped: int = 0

    @property
    def passed(self) -> bool:
        # a check dominated by kink crossings proves nothing
        return self.max_relative_error < self.tolerance and self.n_kink_skipped <= 0.1 * self.n_parameters


def _loss64(model, x, y, scale=1.0):
    return scale * nn.functional.cross_entropy(model(x), y)


def _prepare_for_check(model: FingerprintCNN):
    # batch statistics stay on (differentiable); dropout is switched off so the
    # loss is a deterministic function of the parameters
    model.double()
    model.train()
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.eval()


class _PatternRecorder:
    """Records which side of every leaky-ReLU kink and max-pool tie each input sits on."""

    def __init__(self, model: nn.Module):
        self.patterns: list = []
        self.handles = [
            m.register_forward_hook(self._hook)
            for m in model.modules()
            if isinstance(m, (nn.LeakyReLU, nn.MaxPool2d))
        ]

    def _hook(self, module, inputs, output):
        x = inputs[0].detach()
        if isinstance(module, nn.LeakyReLU):
            self.patterns.append(x > 0)
        else:
            kw = module.kernel_size[1] if isinstance(module.kernel_size, tuple) else module.kernel_size
            w = x.shape[-1] // kw * kw
            self.patterns.append(x[..., :w].reshape(*x.shape[:-1], -1, kw).argmax(-1))

    def take(self) -> list:
        out, self.patterns = self.patterns, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same_pattern(a: list, b: list) -> bool:
    return all(torch.equal(u, v) for u, v in zip(a, b))


def analytic_gradients(model, x, y, scale=1.0) -> dict:
    model.zero_grad()
    _loss64(model, x, y, scale).backward()
    return {name: p.grad.detach().clone() for name, p in model.named_parameters()}


def gradient_check(
    cnn_cfg: Optional[CnnConfig] = None,
    tolerance: float = 1e-4,
    batch_size: int = 4,
    seed: int = 0,
    inputs: Optional[np.ndarray] = None,
    step: float = 1e-4,
) -> GradientReport:
    """Compare backprop gradients with central finite differences.

    Each parameter ``p`` is perturbed by ``h = step * max(|p|, 1)`` in double
    precision. When a perturbation moves any leaky-ReLU input across zero or
    changes a max-pool winner, the loss is not smooth over ``[p - h, p + h]``
    and that parameter is counted as skipped rather than compared. Batch-norm
    running statistics are not part of the loss and are left out.
    """
    cfg = cnn_cfg or tiny_config()
    model = build_model(cfg)
    _prepare_for_check(model)
    gen = torch.Generator().manual_seed(seed)
    if inputs is None:
        x = torch.randn((batch_size, *cfg.input_shape), generator=gen, dtype=torch.float64)
    else:
        x = torch.as_tensor(inputs, dtype=torch.float64)
    y = torch.arange(x.shape[0]) % cfg.num_classes
    grads = analytic_gradients(model, x, y)

    # running statistics would drift with every forward pass; snapshot and restore
    buffers = {k: v.clone() for k, v in model.named_buffers()}
    recorder = _PatternRecorder(model)
    worst, worst_name, count, skipped = 0.0, "", 0, 0
    try:
        with torch.no_grad():
            _loss64(model, x, y)
            base = recorder.take()
            for name, p in model.named_parameters():
                flat = p.view(-1)
                g = grads[name].view(-1)
                for k in range(flat.numel()):
                    orig = flat[k].item()
                    h = step * max(abs(orig), 1.0)
                    flat[k] = orig + h
                    up = _loss64(model, x, y).item()
                    up_pattern = recorder.take()
                    flat[k] = orig - h
                    down = _loss64(model, x, y).item()
                    down_pattern = recorder.take()
                    flat[k] = orig
                    count += 1
                    if not (_same_pattern(base, up_pattern) and _same_pattern(base, down_pattern)):
                        skipped += 1
                        continue
                    numeric = (up - down) / (2 * h)
                    analytic = g[k].item()
                    denom = max(abs(numeric), abs(analytic), 1e-8)
                    err = abs(numeric - analytic) / denom
                    if err > worst:
                        worst, worst_name = err, f"{name}[{k}]"
    finally:
        recorder.close()
        for k, v in model.named_buffers():
            v.copy_(buffers[k])
    return GradientReport(worst, tolerance, count, worst_name, skipped)


# -- checkpoints -------------------------------------------------------------------------------


def save_checkpoint(model: FingerprintCNN, path, extra: Optional[dict] = None) -> None:
    """Write a self-describing checkpoint: config, parameters and running statistics."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "cnn_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[FingerprintCNN, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = build_model(CnnConfig.from_dict(payload["cnn_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
