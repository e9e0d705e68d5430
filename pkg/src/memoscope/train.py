"""ReLU MLPs trained with minibatch SGD + momentum, recorded as replayable traces.

The optimizer update is built out of graph expressions (see
:func:`sgd_update`), so the exact same step function serves both ordinary
training (values extracted, graph dropped each step) and analyses that
differentiate through a whole chain of updates.

A finished run is a :class:`TrainTrace`: config, the full batch schedule,
parameter snapshots, and per-epoch metrics.  Re-running a trace from its
initial snapshot reproduces every recorded value bit for bit.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError
from .data import Dataset
from .seeding import stream


@dataclass(frozen=True)
class RegularizerSpec:
    """One of: none, dropout(p), input_dropout(p), input_gaussian(sigma),
    hidden_gaussian(sigma), weight_decay(lam), adversarial(adv_weight, p)."""

    kind: str = "none"
    p: float = 0.0
    sigma: float = 0.0
    lam: float = 0.0
    adv_weight: float = 0.0

    _KINDS = ("none", "dropout", "input_dropout", "input_gaussian",
              "hidden_gaussian", "weight_decay", "adversarial")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate {self.p} outside [0, 1)")
        if self.sigma < 0 or self.lam < 0:
            raise ValueError("noise scale and weight decay must be nonnegative")
        if not 0.0 <= self.adv_weight <= 1.0:
            raise ValueError(f"adversarial weight {self.adv_weight} outside [0, 1]")

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def dropout(cls, p):
        return cls(kind="dropout", p=p)

    @classmethod
    def input_dropout(cls, p):
        return cls(kind="input_dropout", p=p)

    @classmethod
    def input_gaussian(cls, sigma):
        return cls(kind="input_gaussian", sigma=sigma)

    @classmethod
    def hidden_gaussian(cls, sigma):
        return cls(kind="hidden_gaussian", sigma=sigma)

    @classmethod
    def weight_decay(cls, lam):
        return cls(kind="weight_decay", lam=lam)

    @classmethod
    def adversarial(cls, weight, p):
        return cls(kind="adversarial", adv_weight=weight, p=p)


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple = (16, 16)
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 1000
    seed: int = 0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    lr_halving_epochs: int | None = None     # halve the rate every this many epochs
    snapshot_every_epochs: int | None = None  # initial and final are always kept
    stop_at_full_train_acc: bool = False

    def __post_init__(self):
        # zero is allowed so frozen-parameter analyses can reuse the same config
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum {self.momentum} outside [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))


@dataclass
class MLPParams:
    """Per-layer weights (m x n) and biases (m,) of an MLP ending in a linear layer."""

    weights: list
    biases: list

    def __post_init__(self):
        for i in range(len(self.weights) - 1):
            if self.weights[i + 1].shape[1] != self.weights[i].shape[0]:
                raise ShapeError(
                    f"layer {i} output {self.weights[i].shape[0]} vs "
                    f"layer {i + 1} input {self.weights[i + 1].shape[1]}")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def num_classes(self):
        return self.weights[-1].shape[0]

    @property
    def hidden_sizes(self):
        return tuple(w.shape[0] for w in self.weights[:-1])

    def parameter_count(self):
        return int(sum(w.size for w in self.weights) + sum(b.size for b in self.biases))

    def copy(self):
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flatten(self):
        return [a for pair in zip(self.weights, self.biases) for a in pair]


def params_equal(a: MLPParams, b: MLPParams) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.flatten(), b.flatten()))


def init_params(hidden_sizes, input_dim, num_classes, seed) -> MLPParams:
    """Uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)); zero biases."""
    sizes = [int(input_dim)] + [int(h) for h in hidden_sizes] + [int(num_classes)]
    if any(s < 1 for s in sizes):
        raise ValueError(f"all layer sizes must be >= 1, got {sizes}")
    rng = stream(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases)


def _as_nodes(params):
    if isinstance(params, MLPParams):
        return ([ad.leaf(w, "W") for w in params.weights],
                [ad.leaf(b, "b") for b in params.biases])
    return params  # already ([W nodes], [b nodes])


def forward(params, x, mode="eval", reg=None, rng=None):
    """Logits for x (single (n,) or batch (B,n)).

    In train mode the stochastic regularizers fire: input dropout / Gaussian
    noise on x, dropout / Gaussian noise on hidden activations.  Dropout uses
    inverted scaling (mask / (1-p)), so eval mode rescales nothing.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    reg = reg or RegularizerSpec()
    weights, biases = _as_nodes(params)
    h = x if isinstance(x, ad.Tensor) else ad.constant(x, op="input")
    stochastic = mode == "train"
    if stochastic and reg.kind in ("input_dropout", "input_gaussian"):
        if reg.kind == "input_dropout" and reg.p > 0:
            keep = (rng.random(h.shape) >= reg.p) / (1.0 - reg.p)
            h = h * ad.constant(keep, op="drop-mask")
        elif reg.kind == "input_gaussian" and reg.sigma > 0:
            h = h + ad.constant(rng.normal(0.0, reg.sigma, size=h.shape), op="in-noise")
    for W, b in zip(weights[:-1], biases[:-1]):
        h = ad.relu(ad.affine(h, W, b))
        if stochastic:
            if reg.kind in ("dropout", "adversarial") and reg.p > 0:
                keep = (rng.random(h.shape) >= reg.p) / (1.0 - reg.p)
                h = h * ad.constant(keep, op="drop-mask")
            elif reg.kind == "hidden_gaussian" and reg.sigma > 0:
                h = h + ad.constant(rng.normal(0.0, reg.sigma, size=h.shape), op="h-noise")
    return ad.affine(h, weights[-1], biases[-1])


def weight_decay_penalty(weights, biases, lam):
    """(lam/2)·sum of squared parameters, as a graph expression."""
    penalty = None
    for t in weights + biases:
        sq = ad.tensor_sum(t * t)
        penalty = sq if penalty is None else penalty + sq
    return penalty * (lam / 2.0)


def batch_loss(params, batch_x, batch_y, reg, rng, mode="train"):
    """Mean cross-entropy of a batch plus the (lam/2)·||theta||² term when asked."""
    weights, biases = _as_nodes(params)
    logits = forward((weights, biases), batch_x, mode=mode, reg=reg, rng=rng)
    loss = ad.mean_cross_entropy(logits, batch_y)
    if reg is not None and reg.kind == "weight_decay" and reg.lam > 0:
        loss = loss + weight_decay_penalty(weights, biases, reg.lam)
    return loss, (weights, biases)


def sgd_update(param_nodes, velocity_nodes, loss, lr, momentum):
    """v' = momentum·v + ∂loss/∂theta;  theta' = theta − lr·v', all as graph nodes."""
    n_weights = len(param_nodes[0])
    flat_params = list(param_nodes[0]) + list(param_nodes[1])
    flat_vel = list(velocity_nodes[0]) + list(velocity_nodes[1])
    grads = ad.gradient(loss, flat_params)
    new_vel = []
    for v, g in zip(flat_vel, grads):
        new_vel.append(v * momentum + g if momentum != 0.0 else g)
    new_params = [t - v * lr for t, v in zip(flat_params, new_vel)]
    return ((new_params[:n_weights], new_params[n_weights:]),
            (new_vel[:n_weights], new_vel[n_weights:]))


def sgd_step(params, velocity, batch, lr, momentum, reg=None, rng=None):
    """One SGD step on a batch; everything stays on the graph.

    `params` / `velocity` are ([W...], [b...]) node pairs (or MLPParams /
    arrays, which get wrapped), `batch` is (inputs, labels).  With an
    adversarial regularizer the batch loss becomes
    (1-w)·clean + w·loss-on-adversarial-copies, where the copies come from a
    box-constrained search against the current parameters (fresh each step,
    labels kept from the clean batch).
    """
    reg = reg or RegularizerSpec()
    batch_x, batch_y = batch
    weights, biases = _as_nodes(params)
    if isinstance(velocity, MLPParams):
        velocity = ([ad.constant(v) for v in velocity.weights],
                    [ad.constant(v) for v in velocity.biases])
    elif velocity is None:
        velocity = ([ad.zeros(w.shape) for w in weights], [ad.zeros(b.shape) for b in biases])

    if reg.kind == "adversarial" and reg.adv_weight > 0:
        from .critical import LassConfig, lass_batch

        adv_seed = int(rng.integers(0, 2**31 - 1))
        fwd = make_eval_forward(MLPParams([w.data for w in weights], [b.data for b in biases]))
        adv_x = lass_batch(fwd, np.asarray(batch_x), LassConfig(seed=adv_seed)).inputs
        clean_loss, _ = batch_loss((weights, biases), batch_x, batch_y, reg, rng)
        adv_loss, _ = batch_loss((weights, biases), adv_x, batch_y, reg, rng)
        loss = clean_loss * (1.0 - reg.adv_weight) + adv_loss * reg.adv_weight
    else:
        loss, _ = batch_loss((weights, biases), batch_x, batch_y, reg, rng)

    new_params, new_vel = sgd_update((weights, biases), velocity, loss, lr, momentum)
    for t in new_vel[0] + new_vel[1]:
        if not t.all_finite():
            raise NonFiniteError("non-finite gradient in SGD step")
    return new_params, new_vel


def make_batch_schedule(n, batch_size, epochs, rng):
    """Shuffled minibatch index lists, one per step; the last batch of an epoch
    may be short when batch_size does not divide n."""
    schedule = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            schedule.append(perm[start:start + batch_size].astype(np.int64))
    return schedule


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None
    correctness: np.ndarray  # bool per training example


@dataclass
class TrainTrace:
    config: TrainConfig
    input_dim: int
    num_classes: int
    batch_schedule: list
    snapshots: dict          # epoch -> MLPParams (0 = initialization)
    per_epoch: list          # EpochMetrics, in order
    epochs_run: int

    @property
    def final_params(self) -> MLPParams:
        return self.snapshots[self.epochs_run]


def evaluate(params: MLPParams, dataset: Dataset):
    """(accuracy, per-example correctness) of argmax predictions vs effective
    labels; prediction ties resolve to the lowest class index."""
    logits = forward(params, dataset.inputs, mode="eval").data
    predictions = np.argmax(logits, axis=1)
    correctness = predictions == dataset.effective_labels
    return float(correctness.mean()) if len(dataset) else 0.0, correctness


def dataset_loss(params: MLPParams, dataset: Dataset) -> float:
    logits = forward(params, dataset.inputs, mode="eval")
    return ad.mean_cross_entropy(logits, dataset.effective_labels).item()


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_halving_epochs:
        return config.learning_rate * 0.5 ** (epoch // config.lr_halving_epochs)
    return config.learning_rate


def train(dataset: Dataset, val_dataset: Dataset | None, config: TrainConfig,
          initial_params: MLPParams | None = None,
          batch_schedule: list | None = None) -> TrainTrace:
    """Epochs of shuffled minibatch SGD with per-epoch metrics and snapshots.

    Passing `initial_params` and `batch_schedule` replays a previous run;
    by default both derive deterministically from config.seed.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    n = len(dataset)
    params = initial_params.copy() if initial_params is not None else init_params(
        config.hidden_sizes, dataset.input_dim, dataset.num_classes, config.seed)
    if batch_schedule is None:
        batch_schedule = make_batch_schedule(n, config.batch_size, config.epochs,
                                             stream(config.seed, "shuffle"))
    reg_rng = stream(config.seed, "reg")
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size

    snapshots = {0: params.copy()}
    per_epoch = []
    velocity = MLPParams([np.zeros_like(w) for w in params.weights],
                         [np.zeros_like(b) for b in params.biases])
    epochs_run = 0
    for epoch in range(config.epochs):
        lr = _epoch_lr(config, epoch)
        for k in range(steps_per_epoch):
            idx = batch_schedule[epoch * steps_per_epoch + k]
            batch = (dataset.inputs[idx], dataset.effective_labels[idx])
            try:
                new_params, new_vel = sgd_step(
                    params, velocity, batch, lr, config.momentum,
                    reg=config.regularizer, rng=reg_rng)
            except NonFiniteError as err:
                raise NonFiniteError(
                    f"{err} (epoch {epoch + 1}, step {epoch * steps_per_epoch + k + 1})") from err
            params = MLPParams([w.data.copy() for w in new_params[0]],
                               [b.data.copy() for b in new_params[1]])
            velocity = MLPParams([w.data.copy() for w in new_vel[0]],
                                 [b.data.copy() for b in new_vel[1]])
        epochs_run = epoch + 1
        train_acc, correctness = evaluate(params, dataset)
        val_acc = evaluate(params, val_dataset)[0] if val_dataset is not None else None
        per_epoch.append(EpochMetrics(
            epoch=epochs_run, train_loss=dataset_loss(params, dataset),
            train_accuracy=train_acc, val_accuracy=val_acc, correctness=correctness))
        due = config.snapshot_every_epochs and epochs_run % config.snapshot_every_epochs == 0
        if due:
            snapshots[epochs_run] = params.copy()
        if config.stop_at_full_train_acc and train_acc >= 1.0:
            break
    snapshots[epochs_run] = params.copy()
    return TrainTrace(config=config, input_dim=dataset.input_dim,
                      num_classes=dataset.num_classes,
                      batch_schedule=batch_schedule[:epochs_run * steps_per_epoch],
                      snapshots=snapshots, per_epoch=per_epoch, epochs_run=epochs_run)


def replay(trace: TrainTrace, dataset: Dataset, val_dataset: Dataset | None = None) -> TrainTrace:
    """Re-run a trace from its initial snapshot and recorded batch schedule."""
    config = replace(trace.config, epochs=trace.epochs_run)
    return train(dataset, val_dataset, config,
                 initial_params=trace.snapshots[0],
                 batch_schedule=list(trace.batch_schedule))


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    epochs: int  # first 1-based epoch at 100% train accuracy, or the epochs run


def time_to_convergence(trace: TrainTrace) -> ConvergenceReport:
    """First epoch with train accuracy exactly 1.0, else a not-converged report."""
    for m in trace.per_epoch:
        if m.train_accuracy >= 1.0:
            return ConvergenceReport(True, m.epoch)
    return ConvergenceReport(False, trace.epochs_run)


def make_eval_forward(params: MLPParams):
    """Eval-mode forward closure over fixed parameters; accepts (n,) or (B,n)."""
    nodes = _as_nodes(params)

    def fwd(x):
        return forward(nodes, x, mode="eval")

    fwd.supports_batch = True
    fwd.num_classes = params.num_classes
    return fwd


# ---------------------------------------------------------------------------
# Trace container + metrics sidecar
# ---------------------------------------------------------------------------

_TRACE_MAGIC = b"MST1"


def _config_to_json(config: TrainConfig) -> str:
    d = asdict(config)
    d["hidden_sizes"] = list(config.hidden_sizes)
    return json.dumps(d, sort_keys=True)


def _config_from_json(text: str) -> TrainConfig:
    d = json.loads(text)
    d["regularizer"] = RegularizerSpec(**d["regularizer"])
    d["hidden_sizes"] = tuple(d["hidden_sizes"])
    return TrainConfig(**d)


def _write_array(buf, arr):
    arr = np.ascontiguousarray(arr)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.astype("<f8").tobytes())


def _read_array(raw, off):
    (ndim,) = struct.unpack_from("<B", raw, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    count = int(np.prod(shape))
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
    return arr, off + 8 * count


def save_trace(path, trace: TrainTrace):
    """Trace container: magic `MST1`, u32 version, JSON config blob, the batch
    schedule, per-epoch metric arrays, packed correctness bits, and parameter
    snapshots as little-endian f64 tensors."""
    buf = io.BytesIO()
    buf.write(_TRACE_MAGIC)
    cfg = _config_to_json(trace.config).encode()
    buf.write(struct.pack("<IIII", 1, trace.input_dim, trace.num_classes, trace.epochs_run))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(trace.batch_schedule)))
    for idx in trace.batch_schedule:
        buf.write(struct.pack("<I", idx.size))
        buf.write(idx.astype("<i8").tobytes())
    buf.write(struct.pack("<I", len(trace.per_epoch)))
    for m in trace.per_epoch:
        val = np.nan if m.val_accuracy is None else m.val_accuracy
        buf.write(struct.pack("<Iddd", m.epoch, m.train_loss, m.train_accuracy, val))
        bits = np.packbits(m.correctness)
        buf.write(struct.pack("<II", m.correctness.size, bits.size))
        buf.write(bits.tobytes())
    buf.write(struct.pack("<I", len(trace.snapshots)))
    for epoch in sorted(trace.snapshots):
        p = trace.snapshots[epoch]
        buf.write(struct.pack("<II", epoch, len(p.weights)))
        for w, b in zip(p.weights, p.biases):
            _write_array(buf, w)
            _write_array(buf, b)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_trace(path) -> TrainTrace:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _TRACE_MAGIC:
        raise ValueError(f"{path}: not a trace container")
    off = 4
    version, input_dim, num_classes, epochs_run = struct.unpack_from("<IIII", raw, off)
    off += 16
    if version != 1:
        raise ValueError(f"{path}: unsupported trace version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = _config_from_json(raw[off:off + cfg_len].decode())
    off += cfg_len
    (n_steps,) = struct.unpack_from("<I", raw, off)
    off += 4
    schedule = []
    for _ in range(n_steps):
        (size,) = struct.unpack_from("<I", raw, off)
        off += 4
        schedule.append(np.frombuffer(raw, dtype="<i8", count=size, offset=off).copy())
        off += 8 * size
    (n_epochs,) = struct.unpack_from("<I", raw, off)
    off += 4
    per_epoch = []
    for _ in range(n_epochs):
        epoch, loss, acc, val = struct.unpack_from("<Iddd", raw, off)
        off += struct.calcsize("<Iddd")
        nbits, nbytes = struct.unpack_from("<II", raw, off)
        off += 8
        bits = np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=off)
        off += nbytes
        correctness = np.unpackbits(bits)[:nbits].astype(bool)
        per_epoch.append(EpochMetrics(epoch, loss, acc, None if np.isnan(val) else val,
                                      correctness))
    (n_snaps,) = struct.unpack_from("<I", raw, off)
    off += 4
    snapshots = {}
    for _ in range(n_snaps):
        epoch, n_layers = struct.unpack_from("<II", raw, off)
        off += 8
        weights, biases = [], []
        for _ in range(n_layers):
            w, off = _read_array(raw, off)
            b, off = _read_array(raw, off)
            weights.append(w)
            biases.append(b)
        snapshots[epoch] = MLPParams(weights, biases)
    return TrainTrace(config=config, input_dim=input_dim, num_classes=num_classes,
                      batch_schedule=schedule, snapshots=snapshots,
                      per_epoch=per_epoch, epochs_run=epochs_run)


def write_metrics_json(path, trace: TrainTrace):
    """Human-readable per-epoch sidecar for a trace."""
    rows = [
        {"epoch": m.epoch, "train_loss": m.train_loss,
         "train_accuracy": m.train_accuracy, "val_accuracy": m.val_accuracy}
        for m in trace.per_epoch
    ]
    payload = {"config": json.loads(_config_to_json(trace.config)),
               "epochs_run": trace.epochs_run, "per_epoch": rows}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
