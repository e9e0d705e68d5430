"""Box-constrained adversarial sample search and the critical-sample ratio.

A sample is *critical* when some point within an L∞ box of radius r around it
gets a different predicted class.  The search takes signed-gradient steps with
added Gaussian noise (a Langevin variant of the fast-gradient-sign update),
projecting back into the box after every step; the noise lets it escape
points where the input gradient vanishes, which stops the pure sign-gradient
search cold.

The per-sample search is the contract; :func:`csr` scores a whole dataset and
uses a vectorized variant when the model accepts batches (per-sample noise
streams are identical either way, results can differ only by float round-off
inside batched matrix products).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .seeding import child_seed, stream


class SearchError(RuntimeError):
    """The model produced non-finite output or otherwise broke the search."""


class SnapshotGapError(KeyError):
    """A requested training epoch has no stored parameter snapshot."""


@dataclass(frozen=True)
class LassConfig:
    alpha: float = 0.25          # signed-gradient step size
    beta: float = 0.2            # Gaussian noise scale (0 disables the noise)
    r: float = 0.3               # L∞ box radius around the original point
    max_iter: int = 100
    seed: int = 0
    clamp_to_domain: bool = True  # keep iterates inside `domain` (pixel data)
    domain: tuple = (0.0, 1.0)
    # "predicted_crossentropy": ascend the cross-entropy of the originally
    # predicted class, gradient taken at the current iterate (sign-gradient
    # convention).  "logit_at_origin": single signed gradient of the predicted
    # logit, evaluated once at the original point and reused every step.
    gradient_mode: str = "predicted_crossentropy"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.r <= 0:
            raise ValueError("box radius must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.gradient_mode not in ("predicted_crossentropy", "logit_at_origin"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")


@dataclass
class CriticalSampleResult:
    found: bool
    x_hat: np.ndarray | None
    iterations_used: int
    original_prediction: int
    flipped_prediction: int | None
    error: str | None = None


@dataclass
class CsrReport:
    csr: float
    per_sample: list
    dataset_size: int
    epoch_tag: int | None = None


def _logits_of(forward_fn, x_arr):
    node = forward_fn(ad.leaf(np.asarray(x_arr, dtype=np.float64)))
    if not node.all_finite():
        raise SearchError("model produced non-finite output")
    return node


def _project(x_t, x0, r):
    # per-coordinate: pull any escapee back onto the box surface
    over = x_t - x0
    np.clip(over, -r, r, out=over)
    return x0 + over


def lass_search(forward_fn, x, config: LassConfig) -> CriticalSampleResult:
    """Search the r-box around x for a point whose predicted class differs.

    `forward_fn` maps an input node (n,) to a logits node (k,).  Returns a
    not-found result after max_iter; a found result's x_hat genuinely flips
    the prediction (it is re-evaluated, never inferred).
    """
    x0 = np.asarray(x, dtype=np.float64)
    k0 = int(np.argmax(_logits_of(forward_fn, x0).data))
    rng = stream(config.seed, "noise")

    frozen_direction = None
    if config.gradient_mode == "logit_at_origin":
        xl = ad.leaf(x0)
        logits = forward_fn(xl)
        selector = np.zeros(logits.shape)
        selector[k0] = 1.0
        score = ad.tensor_sum(logits * ad.constant(selector))
        frozen_direction = np.sign(ad.gradient_values(score, [xl])[0])

    x_t = x0.copy()
    for iteration in range(1, config.max_iter + 1):
        if frozen_direction is not None:
            step = config.alpha * frozen_direction
        else:
            xl = ad.leaf(x_t)
            logits = forward_fn(xl)
            if not logits.all_finite():
                raise SearchError("model produced non-finite output")
            loss, _ = ad.softmax_cross_entropy(logits, k0)
            g = ad.gradient_values(loss, [xl])[0]
            step = config.alpha * np.sign(g)
        if config.beta > 0:
            step = step + config.beta * rng.standard_normal(x0.shape)
        x_t = _project(x_t + step, x0, config.r)
        if config.clamp_to_domain:
            x_t = np.clip(x_t, config.domain[0], config.domain[1])
        if np.max(np.abs(x_t - x0)) > config.r + 1e-12:
            raise SearchError("box projection failed to hold the iterate")
        prediction = int(np.argmax(_logits_of(forward_fn, x_t).data))
        if prediction != k0:
            return CriticalSampleResult(True, x_t, iteration, k0, prediction)
    return CriticalSampleResult(False, None, config.max_iter, k0, None)


def fgsm_search(forward_fn, x, config: LassConfig) -> CriticalSampleResult:
    """The deterministic sign-gradient baseline: the same search with beta = 0."""
    return lass_search(forward_fn, x, replace(config, beta=0.0))


def _per_sample_config(config: LassConfig, position: int) -> LassConfig:
    return replace(config, seed=child_seed(config.seed, "lass", position))


@dataclass
class BatchSearchResult:
    inputs: np.ndarray           # adversarial copy per row (last iterate when not found)
    results: list                # CriticalSampleResult per row


def lass_batch(forward_fn, X, config: LassConfig) -> BatchSearchResult:
    """Vectorized search over the rows of X against a batch-capable model.

    Each row draws from its own noise stream (the one
    :func:`_per_sample_config` would hand the sequential search), so decisions
    match the per-sample path up to round-off in batched matrix products.
    """
    X0 = np.asarray(X, dtype=np.float64)
    n, dim = X0.shape
    logits0 = forward_fn(ad.constant(X0)).data
    if not np.isfinite(logits0).all():
        raise SearchError("model produced non-finite output")
    k0 = np.argmax(logits0, axis=1)
    k = logits0.shape[1]
    rngs = [stream(child_seed(config.seed, "lass", i), "noise") for i in range(n)]

    frozen = None
    if config.gradient_mode == "logit_at_origin":
        xl = ad.leaf(X0)
        logits = forward_fn(xl)
        selector = np.zeros((n, k))
        selector[np.arange(n), k0] = 1.0
        score = ad.tensor_sum(logits * ad.constant(selector))
        frozen = np.sign(ad.gradient_values(score, [xl])[0])

    X_t = X0.copy()
    active = np.arange(n)
    results = [None] * n
    for iteration in range(1, config.max_iter + 1):
        if active.size == 0:
            break
        xa = X_t[active]
        if frozen is not None:
            step = config.alpha * frozen[active]
        else:
            xl = ad.leaf(xa)
            logits = forward_fn(xl)
            if not logits.all_finite():
                raise SearchError("model produced non-finite output")
            per_example, _ = ad.cross_entropy(logits, k0[active])
            g = ad.gradient_values(ad.tensor_sum(per_example), [xl])[0]
            step = config.alpha * np.sign(g)
        if config.beta > 0:
            noise = np.stack([rngs[i].standard_normal(dim) for i in active])
            step = step + config.beta * noise
        xa = _project(xa + step, X0[active], config.r)
        if config.clamp_to_domain:
            xa = np.clip(xa, config.domain[0], config.domain[1])
        X_t[active] = xa
        predictions = np.argmax(forward_fn(ad.constant(xa)).data, axis=1)
        flipped = predictions != k0[active]
        for row, pred in zip(active[flipped], predictions[flipped]):
            results[row] = CriticalSampleResult(True, X_t[row].copy(), iteration,
                                                int(k0[row]), int(pred))
        active = active[~flipped]
    for row in active:
        results[row] = CriticalSampleResult(False, None, config.max_iter, int(k0[row]), None)
    return BatchSearchResult(inputs=X_t, results=results)


def csr(forward_fn, dataset, config: LassConfig, batched=None) -> CsrReport:
    """Fraction of dataset examples with a prediction flip inside the r-box.

    Per-sample search errors are recorded on the sample (counted not-found),
    never fatal.  Results are ordered by example position regardless of how
    the work was scheduled.
    """
    if len(dataset) == 0:
        raise ValueError("csr needs a nonempty dataset")
    if batched is None:
        batched = bool(getattr(forward_fn, "supports_batch", False))
    results = None
    if batched:
        try:
            results = lass_batch(forward_fn, dataset.inputs, config).results
        except SearchError:
            results = None  # isolate the failing sample via the per-sample path
    if results is None:
        results = []
        for i in range(len(dataset)):
            cfg_i = _per_sample_config(config, i)
            try:
                results.append(lass_search(forward_fn, dataset.inputs[i], cfg_i))
            except SearchError as err:
                results.append(CriticalSampleResult(False, None, 0, -1, None, error=str(err)))
    found = sum(r.found for r in results)
    return CsrReport(csr=found / len(dataset), per_sample=results, dataset_size=len(dataset))


def csr_over_training(trace, dataset, config: LassConfig, every_k_epochs: int):
    """CSR of `dataset` at epoch 0, every k-th epoch, and the final epoch.

    Requires the trace to hold a snapshot at each requested epoch; a missing
    one raises :class:`SnapshotGapError` naming the epoch.
    """
    from .train import make_eval_forward

    requested = sorted(set(range(0, trace.epochs_run + 1, every_k_epochs)) | {trace.epochs_run})
    series = []
    for epoch in requested:
        if epoch not in trace.snapshots:
            raise SnapshotGapError(f"no parameter snapshot at epoch {epoch}")
        fwd = make_eval_forward(trace.snapshots[epoch])
        report = csr(fwd, dataset, config)
        report.epoch_tag = epoch
        series.append((epoch, report))
    return series


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def write_csr_csv(path, report: CsrReport, dataset):
    """Columns: example_index, found, iterations, linf_distance, original_class, flipped_class."""
    lines = ["example_index,found,iterations,linf_distance,original_class,flipped_class"]
    for i, res in enumerate(report.per_sample):
        dist = ""
        if res.found:
            dist = repr(float(np.max(np.abs(res.x_hat - dataset.inputs[i]))))
        flipped = "" if res.flipped_prediction is None else str(res.flipped_prediction)
        lines.append(f"{int(dataset.indices[i])},{int(res.found)},{res.iterations_used},"
                     f"{dist},{res.original_prediction},{flipped}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_csr_summary(path, report: CsrReport, config: LassConfig):
    payload = {
        "csr": report.csr,
        "dataset_size": report.dataset_size,
        "epoch_tag": report.epoch_tag,
        "config": {
            "alpha": config.alpha, "beta": config.beta, "r": config.r,
            "max_iter": config.max_iter, "seed": config.seed,
            "clamp_to_domain": config.clamp_to_domain, "domain": list(config.domain),
            "gradient_mode": config.gradient_mode,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
