"""Asymmetric auto-encoder: two-channel spatio-temporal encoder, sequential
decoder and the joint reconstruction + regularization training loop."""
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

import tensor as T
from data import MtsDataset
from layers import (
    ConvBlock,
    Dense,
    GruCell,
    SmbBlock,
    avg_pool1d,
    conv1d_block,
    gru_layer,
    repeat_matrix,
    smb_forward,
)
from regularizer import Step, centroid_steps, regularize
from tensor import Adam, ConfigurationError, DimensionError, NumericalError, Tape, Tensor, TrainingAborted

logger = logging.getLogger(__name__)

N_BLOCKS = 3


def default_pool(length):
    """Pool size giving an embedding length of about 8."""
    return max(1, length // 8)


@dataclass
class SmateConfig:
    T: int
    M: int
    gru_dim: int = 64
    conv_filters: int = 64
    window: int = 3
    smb_window: int = 3
    pool: int = None
    embed_dim: int = 64
    head_dim: int = None
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 300
    seed: int = 0
    batch_size: int = 0
    use_smb: bool = True
    min_score: float = None

    def __post_init__(self):
        if self.pool is None:
            self.pool = default_pool(self.T)
        if self.head_dim is None:
            self.head_dim = self.embed_dim
        self.validate()

    def validate(self):
        positive = ("T", "M", "gru_dim", "conv_filters", "window", "smb_window", "pool", "embed_dim", "head_dim", "epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 0:
            raise ConfigurationError(f"batch_size must be >= 0, got {self.batch_size}")

    @property
    def L(self):
        return -(-self.T // self.pool)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in known})


class SmateModel:
    def __init__(self, config: SmateConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.temporal = [
            GruCell(f"temporal.{i}", c.M if i == 0 else c.gru_dim, c.gru_dim, rng) for i in range(N_BLOCKS)
        ]
        self.smb = []
        self.conv = []
        for i in range(N_BLOCKS):
            d_in = c.M if i == 0 else c.conv_filters
            if c.use_smb:
                self.smb.append(SmbBlock(f"spatial.{i}.smb", d_in, c.smb_window, rng))
            self.conv.append(ConvBlock(f"spatial.{i}.conv", d_in, c.conv_filters, c.window, rng))
        self.head = [
            Dense("head.0", c.gru_dim + c.conv_filters, c.head_dim, rng),
            Dense("head.1", c.head_dim, c.embed_dim, rng),
        ]
        self.decoder_cell = GruCell("decoder.gru", c.embed_dim, c.gru_dim, rng)
        self.decoder_out = Dense("decoder.out", c.gru_dim, c.M, rng)
        self.centroid_steps = []

    @property
    def centroids(self):
        """Final centroids used for classification, or None before training."""
        return self.centroid_steps[-1] if self.centroid_steps else None

    def centroids_at(self, step):
        for cs in self.centroid_steps:
            if cs.step is Step(step):
                return cs
        raise ConfigurationError(f"no centroids recorded for step {Step(step).value!r}")

    def parameters(self):
        params = []
        for cell in self.temporal:
            params += cell.parameters()
        for block in self.smb + self.conv:
            params += block.parameters()
        for dense in self.head:
            params += dense.parameters()
        params += self.decoder_cell.parameters() + self.decoder_out.parameters()
        return params

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def buffers(self):
        merged = {}
        for block in self.conv:
            merged.update(block.buffers())
        return merged

    def check_input(self, x):
        expected = (self.config.T, self.config.M)
        if tuple(x.shape[-2:]) != expected:
            raise DimensionError(f"input series shape {tuple(x.shape[-2:])}, model expects {expected}")


def _batched(x):
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def encode(model: SmateModel, x, training=False, tape=None):
    """``(..., T, M)`` -> ``(..., L, D)`` spatio-temporal embedding."""
    x, single = _batched(x)
    model.check_input(x)
    pool = model.config.pool

    temporal = x
    for cell in model.temporal:
        temporal = gru_layer(cell, temporal, tape)
    temporal = avg_pool1d(temporal, pool)

    spatial = x
    for i, conv in enumerate(model.conv):
        if model.smb:
            spatial, _ = smb_forward(model.smb[i], spatial, tape)
        spatial = conv1d_block(conv, spatial, training, tape)
    spatial = avg_pool1d(spatial, pool)

    h = T.concat([temporal, spatial], axis=-1)
    h = model.head[0](h, "relu", tape)
    h = model.head[1](h, "none", tape)
    return T.reshape(h, h.shape[1:]) if single else h


def decode(model: SmateModel, h, tape=None):
    """``(..., L, D)`` -> ``(..., T, M)`` reconstruction."""
    h, single = _batched(h)
    c = model.config
    if tuple(h.shape[-2:]) != (c.L, c.embed_dim):
        raise DimensionError(f"embedding shape {tuple(h.shape[-2:])}, model expects {(c.L, c.embed_dim)}")
    upsampled = T.time_linear(repeat_matrix(c.T, c.pool), h)
    states = gru_layer(model.decoder_cell, upsampled, tape)
    out = model.decoder_out(states, "none", tape)
    return T.reshape(out, out.shape[1:]) if single else out


def reconstruction_loss(x, x_hat):
    """Mean over time (and samples) of per-step Euclidean errors."""
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"reconstruction_loss: shapes {x.shape} and {x_hat.shape} differ")
    return T.mean(T.norm(T.sub(x, x_hat), axis=-1))


def smb_weights(model: SmateModel, x, block=0):
    """Calibration weights ``s`` of one SMB for a single ``(T, M)`` series.

    Earlier spatial blocks run in inference mode to produce the block input.
    """
    if not model.smb:
        raise ConfigurationError("model was trained without SMB")
    spatial, _ = _batched(x)
    model.check_input(spatial)
    for i in range(block):
        spatial, _ = smb_forward(model.smb[i], spatial)
        spatial = conv1d_block(model.conv[i], spatial, training=False)
    _, s = smb_forward(model.smb[block], spatial)
    return s.data[0]


@dataclass
class EpochRecord:
    epoch: int
    L_R: float
    L_Reg: float
    total: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        return self.records[index]

    def to_csv(self):
        lines = ["epoch,L_R,L_Reg,total"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.L_R!r},{r.L_Reg!r},{r.total!r}")
        return "\n".join(lines) + "\n"


def stratified_batches(classes, batch_size, rng):
    """Splits sample indices so every batch gets labeled samples of every
    class whenever the class has at least as many labeled samples as there
    are batches. ``classes`` holds -1 for unlabeled samples.

    There are never more batches than labeled samples, and labeled samples
    are dealt first, so every batch holds at least one of them.
    """
    n = len(classes)
    n_labeled = int(np.sum(classes >= 0))
    if not batch_size or batch_size >= n or n_labeled <= 1:
        return [np.arange(n)]
    n_batches = min(-(-n // batch_size), n_labeled)
    buckets = [[] for _ in range(n_batches)]
    cursor = 0
    for k in sorted(set(classes.tolist()), key=lambda c: (c < 0, c)):
        members = rng.permutation(np.flatnonzero(classes == k))
        for i in members:
            buckets[cursor % n_batches].append(int(i))
            cursor += 1
    return [np.array(sorted(b), dtype=int) for b in buckets if b]


def _check_labels(dataset: MtsDataset):
    classes = dataset.class_indices()
    for k, label in enumerate(dataset.label_set):
        if not np.any(classes == k):
            raise ConfigurationError(f"class {label!r} has no labeled training sample")
    return classes


def fit_centroid_steps(model: SmateModel, dataset: MtsDataset):
    """All three regularization steps over the frozen model's training
    embeddings (no tape), in step order."""
    classes = dataset.class_indices()
    embeddings = encode(model, dataset.samples)
    steps = centroid_steps(embeddings, classes, classes >= 0, dataset.label_set, min_score=model.config.min_score)
    return [cs.detached() for cs in steps]


def fit_centroids(model: SmateModel, dataset: MtsDataset):
    """Final (unsupervised-adjusted) centroids of the training embeddings."""
    return fit_centroid_steps(model, dataset)[-1]


def train(model: SmateModel, dataset: MtsDataset, config: SmateConfig = None, on_epoch=None):
    """Joint optimization of ``L_R + lam * L_Reg`` with Adam."""
    config = config or model.config
    classes = _check_labels(dataset)
    if dataset.samples.shape[1:] != (model.config.T, model.config.M):
        raise ConfigurationError(
            f"dataset series are {dataset.samples.shape[1:]}, model expects {(model.config.T, model.config.M)}"
        )
    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    # Mini-batches may miss a class; start from the untrained model's centroids.
    previous = fit_centroids(model, dataset) if config.batch_size else None

    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        batches = stratified_batches(classes, config.batch_size, rng)
        for batch in batches:
            optimizer.zero_grad()
            tape = Tape()
            try:
                x = Tensor(dataset.samples[batch])
                h = encode(model, x, training=True, tape=tape)
                loss_r = reconstruction_loss(x, decode(model, h, tape))
                batch_classes = classes[batch]
                cs, loss_reg = regularize(
                    h, batch_classes, batch_classes >= 0, dataset.label_set,
                    fallback=previous, min_score=config.min_score,
                )
                total = T.add(loss_r, T.scale(loss_reg, config.lam)) if config.lam > 0 else loss_r
            except NumericalError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(total.item()):
                raise TrainingAborted(f"epoch {epoch}: loss is not finite")
            T.backward(tape, total)
            try:
                optimizer.step()
            except TrainingAborted as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
            previous = cs.detached()
            reported_total = loss_r.item() + config.lam * loss_reg.item()
            sums += (loss_r.item(), loss_reg.item(), reported_total)
        means = sums / len(batches)
        record = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]))
        log.append(record)
        logger.info("epoch %d L_R=%.6f L_Reg=%.6f total=%.6f", epoch, record.L_R, record.L_Reg, record.total)
        if on_epoch is not None:
            on_epoch(record)

    model.centroid_steps = fit_centroid_steps(model, dataset)
    return log
