"""Loss sensitivity of training inputs, measured through the optimizer itself.

The dataset's inputs become differentiable graph leaves; T optimizer steps are
unrolled as one expression; at chosen probe steps t the mean loss over the
whole dataset is evaluated at the step-t parameters and differentiated back
through every update to the inputs.  The per-example norm of that gradient is
the sensitivity g_x at step t, and the per-step rows average into the
per-example summary.  Training is driven exactly as the plain trainer drives
it (same schedule, same update arithmetic); the measurement never alters it.

Memory grows linearly with T in full-retention mode.  The checkpointed mode
stores only segment-boundary states and recomputes forward segments during
each backward sweep; it engages automatically when the estimated graph size
crosses `max_graph_bytes`.

Gini summarization lives here too: the mean-absolute-difference coefficient
over a nonnegative vector, computed through the sorted closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .seeding import stream
from .train import TrainConfig, batch_loss, init_params, make_batch_schedule, sgd_update

_NORMS = {
    "l1": lambda g: np.abs(g).sum(axis=1),
    "l2": lambda g: np.sqrt((g * g).sum(axis=1)),
    "linf": lambda g: np.abs(g).max(axis=1),
}


@dataclass
class SensitivityRecord:
    per_step: np.ndarray        # (num probes, N), nonnegative
    probe_steps: list           # ascending step numbers, in [1, T]
    mean_per_example: np.ndarray  # (N,), mean of per_step over probes
    norm_kind: str
    T: int
    eval_set: Dataset

    def to_csv(self, path):
        """Columns: step, example_index, g_value (step counts SGD steps)."""
        lines = ["step,example_index,g_value"]
        for row, step in zip(self.per_step, self.probe_steps):
            for i, value in enumerate(row):
                lines.append(f"{step},{int(self.eval_set.indices[i])},{value!r}")
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class ClassSensitivityMatrix:
    values: np.ndarray          # (k, k); NaN marks missing rows/columns
    missing_rows: list          # eval classes with no examples
    missing_cols: list          # training classes with no examples
    T: int
    num_classes: int

    def to_csv(self, path):
        """Columns: i, j, value (missing classes carry nan)."""
        lines = ["i,j,value"]
        k = self.num_classes
        for i in range(k):
            for j in range(k):
                lines.append(f"{i},{j},{self.values[i, j]!r}")
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")


def default_probe_steps(T, every=10):
    """Multiples of `every` within [1, T], always including T."""
    steps = sorted(set(range(every, T + 1, every)) | {T})
    return steps


class _Unroll:
    """Shared driver for the sensitivity analyses.

    Walks T optimizer steps with the dataset inputs as one leaf.  In
    full-retention mode the parameter nodes stay chained and each probe
    backpropagates through the entire prefix.  In checkpointed mode the chain
    is cut at segment boundaries (values plus regularizer-rng state are
    stored) and each probe recomputes segments during its backward sweep.
    """

    def __init__(self, dataset, config: TrainConfig, T):
        if T < 1:
            raise ValueError("T must be >= 1")
        if config.lr_halving_epochs:
            raise ValueError("learning-rate schedules are not supported in unrolled analyses")
        if config.regularizer.kind == "adversarial":
            raise ValueError("adversarial training is not supported in unrolled analyses")
        self.dataset = dataset
        self.config = config
        self.T = T
        n = len(dataset)
        steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
        epochs = -(-T // steps_per_epoch)
        self.schedule = make_batch_schedule(n, config.batch_size, epochs,
                                            stream(config.seed, "shuffle"))[:T]
        self.X = ad.leaf(dataset.inputs, "inputs")
        self.labels = dataset.effective_labels
        params0 = init_params(config.hidden_sizes, dataset.input_dim,
                              dataset.num_classes, config.seed)
        self.params0 = params0

    def _fresh_state(self, params):
        weights = [ad.leaf(w, "W") for w in params.weights]
        biases = [ad.leaf(b, "b") for b in params.biases]
        vel = ([ad.zeros(w.shape) for w in params.weights],
               [ad.zeros(b.shape) for b in params.biases])
        return (weights, biases), vel

    def _step(self, state, velocity, t, rng):
        idx = self.schedule[t - 1]
        xb = ad.take_rows(self.X, idx)
        loss, _ = batch_loss(state, xb, self.labels[idx], self.config.regularizer, rng)
        return sgd_update(state, velocity, loss, self.config.learning_rate,
                          self.config.momentum)

    def _probe_loss(self, state):
        loss, _ = batch_loss(state, self.X, self.labels, None, None, mode="eval")
        return loss

    def run(self, probe_steps, probe_fn, checkpoint_segment=None):
        """probe_fn(t, input_gradient_array) is called at each probe step."""
        probes = set(probe_steps)
        if any(not 1 <= p <= self.T for p in probes):
            raise ValueError(f"probe steps must lie in [1, {self.T}]")
        if checkpoint_segment:
            self._run_checkpointed(sorted(probes), probe_fn, int(checkpoint_segment))
        else:
            self._run_full(sorted(probes), probe_fn)

    def _run_full(self, probes, probe_fn):
        rng = stream(self.config.seed, "reg")
        state, velocity = self._fresh_state(self.params0)
        try:
            for t in range(1, self.T + 1):
                state, velocity = self._step(state, velocity, t, rng)
                if t in probes:
                    loss = self._probe_loss(state)
                    loss.require_finite(f"probe loss at step {t}")
                    gX = ad.gradient_values(loss, [self.X])[0]
                    if not np.isfinite(gX).all():
                        raise ad.NonFiniteError(f"non-finite input gradient at step {t}")
                    probe_fn(t, gX)
        except MemoryError as err:
            raise MemoryError(
                "unrolled graph exhausted memory; rerun with a checkpoint "
                "interval (checkpoint_segment of roughly sqrt(T))") from err

    def _run_checkpointed(self, probes, probe_fn, segment):
        # forward pass storing only boundary values + rng state
        rng = stream(self.config.seed, "reg")
        boundaries = {}  # step index s -> (param arrays, velocity arrays, rng state)

        def snapshot(step, state, velocity):
            boundaries[step] = (
                ([w.data.copy() for w in state[0]], [b.data.copy() for b in state[1]]),
                ([v.data.copy() for v in velocity[0]], [v.data.copy() for v in velocity[1]]),
                rng.bit_generator.state,
            )

        state, velocity = self._fresh_state(self.params0)
        snapshot(0, state, velocity)
        for t in range(1, self.T + 1):
            state, velocity = self._step(state, velocity, t, rng)
            # cut the chain: keep values only
            state = ([ad.leaf(w.data, "W") for w in state[0]],
                     [ad.leaf(b.data, "b") for b in state[1]])
            velocity = ([ad.leaf(v.data, "vW") for v in velocity[0]],
                        [ad.leaf(v.data, "vb") for v in velocity[1]])
            if t % segment == 0 or t == self.T:
                snapshot(t, state, velocity)

        starts = sorted(boundaries)

        def rebuild(a, b):
            """Re-run steps a+1..b from boundary a; returns leaves and exit nodes."""
            params_vals, vel_vals, rng_state = boundaries[a]
            seg_rng = stream(0, "reg")
            seg_rng.bit_generator.state = rng_state
            entry_state = ([ad.leaf(w, "W") for w in params_vals[0]],
                           [ad.leaf(x, "b") for x in params_vals[1]])
            entry_vel = ([ad.leaf(v, "vW") for v in vel_vals[0]],
                         [ad.leaf(v, "vb") for v in vel_vals[1]])
            state, velocity = entry_state, entry_vel
            for t in range(a + 1, b + 1):
                state, velocity = self._step(state, velocity, t, seg_rng)
            return entry_state, entry_vel, state, velocity

        for probe in probes:
            grad_X = np.zeros_like(self.dataset.inputs)
            # last (possibly partial) segment: from the boundary below the probe
            below = max(s for s in starts if s < probe)
            entry_state, entry_vel, state, _vel = rebuild(below, probe)
            loss = self._probe_loss(state)
            loss.require_finite(f"probe loss at step {probe}")
            entry_nodes = (entry_state[0] + entry_state[1] + entry_vel[0] + entry_vel[1])
            grads = ad.vjp_values([loss], [np.float64(1.0)], [self.X] + entry_nodes)
            grad_X += grads[0]
            seeds = grads[1:]
            # earlier segments, newest first
            boundary = below
            while boundary > 0:
                prev = max(s for s in starts if s < boundary)
                entry_state, entry_vel, exit_state, exit_vel = rebuild(prev, boundary)
                exit_nodes = (exit_state[0] + exit_state[1] + exit_vel[0] + exit_vel[1])
                entry_nodes = (entry_state[0] + entry_state[1] + entry_vel[0] + entry_vel[1])
                grads = ad.vjp_values(exit_nodes, seeds, [self.X] + entry_nodes)
                grad_X += grads[0]
                seeds = grads[1:]
                boundary = prev
            if not np.isfinite(grad_X).all():
                raise ad.NonFiniteError(f"non-finite input gradient at step {probe}")
            probe_fn(probe, grad_X)


def _estimated_graph_bytes(dataset, config, T):
    n, d = dataset.inputs.shape
    batch = min(config.batch_size, n)
    sizes = [d] + list(config.hidden_sizes) + [dataset.num_classes]
    per_step = batch * d  # gathered batch
    for a, b in zip(sizes[:-1], sizes[1:]):
        per_step += 3 * a * b + 6 * batch * b  # params/grads/updates + activations/adjoints
    return per_step * 8 * T


def unrolled_loss_sensitivity(dataset, config: TrainConfig, T, probe_steps=None,
                              norm_kind="l1", checkpoint_segment=None,
                              max_graph_bytes=2 * 1024**3) -> SensitivityRecord:
    """Per-example loss sensitivity over T unrolled optimizer steps.

    At each probe step t, the mean loss over the full dataset at the step-t
    parameters is differentiated with respect to every input; `norm_kind`
    (l1, l2 or linf) collapses each example's gradient to one number.
    `checkpoint_segment` forces segmented recomputation; by default it turns
    on when the estimated retained-graph size exceeds `max_graph_bytes`.
    """
    if norm_kind not in _NORMS:
        raise ValueError(f"norm_kind must be one of {sorted(_NORMS)}")
    probes = list(probe_steps) if probe_steps is not None else default_probe_steps(T)
    if checkpoint_segment is None and _estimated_graph_bytes(dataset, config, T) > max_graph_bytes:
        checkpoint_segment = max(1, int(np.sqrt(T)))
    unroll = _Unroll(dataset, config, T)
    rows, steps = [], []
    norm = _NORMS[norm_kind]

    def probe_fn(t, gX):
        rows.append(norm(gX))
        steps.append(t)

    unroll.run(probes, probe_fn, checkpoint_segment)
    per_step = np.stack(rows)
    return SensitivityRecord(
        per_step=per_step, probe_steps=steps,
        mean_per_example=per_step.mean(axis=0),
        norm_kind=norm_kind, T=T, eval_set=dataset,
    )


def class_sensitivity(dataset, config: TrainConfig, T, num_classes=None,
                      probe_steps=None, checkpoint_segment=None) -> ClassSensitivityMatrix:
    """k x k matrix of class-conditional sensitivities.

    Entry (i, j): the loss restricted to evaluation examples of class i
    (their mean cross-entropy term), differentiated through the unroll, L1
    norm per input, averaged over training examples of class j and over the
    probe steps.  Empty classes mark their whole row/column missing (NaN).
    """
    k = num_classes or dataset.num_classes
    labels = dataset.effective_labels
    class_members = [np.flatnonzero(labels == i) for i in range(k)]
    missing = [i for i, m in enumerate(class_members) if m.size == 0]
    probes = list(probe_steps) if probe_steps is not None else default_probe_steps(T)

    unroll = _Unroll(dataset, config, T)
    records = _class_probe(unroll, probes, class_members, k, checkpoint_segment)
    values = np.mean(records, axis=0) if records else np.zeros((k, k))
    for i in missing:
        values[i, :] = np.nan
        values[:, i] = np.nan
    return ClassSensitivityMatrix(values=values, missing_rows=list(missing),
                                  missing_cols=list(missing), T=T, num_classes=k)


def _class_probe(unroll: _Unroll, probes, class_members, k, checkpoint_segment):
    """Per probe step, a k x k matrix of mean L1 input-gradient norms."""
    labels = unroll.labels
    records = []

    def probe_fn(t, state):
        matrix = np.zeros((k, k))
        for i in range(k):
            members = class_members[i]
            if members.size == 0:
                continue
            logits = _eval_logits(unroll, state, members)
            per_example, _ = ad.cross_entropy(logits, labels[members])
            class_loss = ad.mean_all(per_example)
            gX = ad.gradient_values(class_loss, [unroll.X])[0]
            norms = np.abs(gX).sum(axis=1)
            for j in range(k):
                cols = class_members[j]
                if cols.size:
                    matrix[i, j] = norms[cols].mean()
        records.append(matrix)

    _run_with_state_probe(unroll, probes, probe_fn, checkpoint_segment)
    return records


def _eval_logits(unroll: _Unroll, state, members):
    from .train import forward

    xb = ad.take_rows(unroll.X, members)
    return forward(state, xb, mode="eval")


def _run_with_state_probe(unroll: _Unroll, probes, probe_fn, checkpoint_segment):
    if checkpoint_segment:
        raise NotImplementedError(
            "class-conditional probes need the full unrolled graph; lower T instead")
    probes = set(probes)
    rng = stream(unroll.config.seed, "reg")
    state, velocity = unroll._fresh_state(unroll.params0)
    for t in range(1, unroll.T + 1):
        state, velocity = unroll._step(state, velocity, t, rng)
        if t in probes:
            probe_fn(t, state)


def gini(values) -> float:
    """Mean-absolute-difference Gini coefficient of a nonnegative vector.

    Computed through the sorted closed form (identical to the pairwise
    definition), after shifting by the smallest value, which the pairwise
    numerator is algebraically blind to; the shift makes an all-equal vector
    come out exactly 0.  Sorting first makes permutations of the same values
    give the identical float.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("gini needs a nonempty 1-d vector")
    if (v < 0).any():
        raise ValueError("gini is defined for nonnegative values")
    s = np.sort(v)  # canonical order: sums no longer depend on input permutation
    total = s.sum()
    if total == 0.0:
        raise ValueError("gini of an all-zero vector is undefined")
    n = s.size
    shifted = s - s[0]
    weights = 2.0 * np.arange(1, n + 1) - n - 1.0
    numerator = float(weights @ shifted)
    return numerator / (n * total)


def gini_curve(record: SensitivityRecord):
    """(step, gini of that step's sensitivities) for every probe, in order."""
    return [(step, gini(row)) for step, row in zip(record.probe_steps, record.per_step)]
