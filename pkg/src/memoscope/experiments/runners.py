"""Config-driven experiment runners.

Each runner trains whatever its experiment needs, writes plot-ready CSV
artifacts (single header row, LF endings, floats via repr so bytes are
reproducible), optionally renders figures next to them, and finishes with a
hashed manifest.  Sweeps schedule independent cells over a process pool and
write rows sorted by cell key, so reruns and worker counts never change the
bytes.  Per-run seeds derive from the global seed and the cell's labels,
never from submission order.
"""

from __future__ import annotations

import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .. import data as mdata
from .. import synthdigits
from ..critical import LassConfig, csr_over_training
from ..seeding import child_seed, stream
from ..sensitivity import class_sensitivity, default_probe_steps, gini_curve, unrolled_loss_sensitivity
from ..train import (RegularizerSpec, TrainConfig, evaluate, time_to_convergence, train)
from .config import ConfigError, ExperimentConfig
from .manifest import write_manifest

VARIANTS = ("real", "randX", "randY")


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class RunContext:
    """Collects artifacts for one run and writes the manifest at the end."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.artifacts = []
        self._start = time.monotonic()
        os.makedirs(cfg.out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.cfg.out_dir, name)

    def add(self, path):
        self.artifacts.append(path)
        return path

    def write_csv(self, name, header, rows, comments=()):
        path = self.path(name)
        with open(path, "w", newline="") as fh:
            for comment in comments:
                fh.write(f"# {comment}\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        return self.add(path)

    def write_text(self, name, text):
        path = self.path(name)
        with open(path, "w") as fh:
            fh.write(text)
        return self.add(path)

    def finish(self):
        duration = time.monotonic() - self._start
        manifest = write_manifest(self.cfg.out_dir, self.cfg.kind, self.cfg.echo(),
                                  self.artifacts, duration)
        return {"manifest": manifest, "artifacts": list(self.artifacts)}


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig):
    """(training pool, clean validation set), both at working resolution."""
    source = cfg.get_str("data.source", "synthetic")
    if source == "idx":
        directory = cfg.get_str("data.dir") or os.environ.get("MEMOSCOPE_MNIST_DIR")
        if not directory:
            raise ConfigError("data.source=idx needs data.dir (or MEMOSCOPE_MNIST_DIR)")
        train_ds, val_ds = mdata.load_mnist_dir(directory)
        val_count = cfg.get_int("data.val_count", 10_000)
    elif source == "synthetic":
        train_count = cfg.get_int("data.synthetic.train_count", 12_000)
        val_count = cfg.get_int("data.synthetic.val_count", 10_000)
        seed = cfg.get_int("data.synthetic.seed", 0)
        directory = cfg.get_str("data.synthetic.dir") or os.path.join(
            os.path.expanduser("~"), ".cache", "memoscope",
            f"synth-s{seed}-t{train_count}-v{val_count}")
        names = [os.path.join(directory, n) for n in mdata.MNIST_FILES.values()]
        if not all(os.path.exists(n) for n in names):
            synthdigits.write_corpus(directory, train_count, val_count, seed)
        train_ds, val_ds = mdata.load_mnist_dir(directory)
    else:
        raise ConfigError(f"unknown data.source {source!r}")
    if cfg.get_bool("data.downscale", True):
        train_ds = mdata.downscale(train_ds)
        val_ds = mdata.downscale(val_ds)
    if val_count < len(val_ds):
        val_ds = mdata.subset(val_ds, val_count, seed=child_seed(cfg.seed, "val-subset"))
    return train_ds, val_ds


def working_set(cfg: ExperimentConfig, pool, key="data.subset", default=1000):
    n = cfg.get_int(key, default)
    if n >= len(pool):
        return pool
    return mdata.subset(pool, n, seed=child_seed(cfg.seed, "subset"))


def variant_dataset(base, variant, seed, fraction=1.0):
    if variant == "real":
        return base
    if variant == "randX":
        return mdata.inject_input_noise(base, fraction, seed)
    if variant == "randY":
        return mdata.inject_label_noise(base, fraction, seed)
    raise ConfigError(f"unknown dataset variant {variant!r}")


def train_config_from(cfg: ExperimentConfig, prefix="train", **overrides):
    base = dict(
        hidden_sizes=tuple(cfg.get_int_list(f"{prefix}.hidden", [16, 16])),
        learning_rate=cfg.get_float(f"{prefix}.lr", 0.01),
        momentum=cfg.get_float(f"{prefix}.momentum", 0.9),
        batch_size=cfg.get_int(f"{prefix}.batch", 100),
        epochs=cfg.get_int(f"{prefix}.epochs", 100),
        lr_halving_epochs=cfg.get_int(f"{prefix}.lr_halving_epochs", None),
    )
    base.update(overrides)
    return TrainConfig(**base)


def lass_config_from(cfg: ExperimentConfig, seed):
    return LassConfig(
        alpha=cfg.get_float("lass.alpha", 0.25),
        beta=cfg.get_float("lass.beta", 0.2),
        r=cfg.get_float("lass.r", 0.3),
        max_iter=cfg.get_int("lass.max_iter", 100),
        seed=seed,
        clamp_to_domain=cfg.get_bool("lass.clamp", True),
    )


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

def _run_cell(job):
    key, fn, payload = job
    try:
        return key, fn(payload), None
    except Exception as err:  # cell isolation: a sweep never dies with one cell
        return key, None, f"{type(err).__name__}: {err}\n{traceback.format_exc(limit=3)}"


def run_cells(cells, workers):
    """Execute (key, fn, payload) cells; results come back sorted by key.

    fn must be a module-level function (the pool pickles by reference).
    """
    if workers <= 1 or len(cells) <= 1:
        results = [_run_cell(job) for job in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    return sorted(results, key=lambda item: item[0])


def _collect_errors(ctx, results):
    errors = [(key, err) for key, _, err in results if err]
    if errors:
        text = "".join(f"cell {key}: {err}\n" for key, err in errors)
        ctx.write_text("errors.txt", text)
    return {key: value for key, value, err in results if not err}


# ---------------------------------------------------------------------------
# easy / hard examples (single-epoch difficulty)
# ---------------------------------------------------------------------------

def _easy_hard_cell(payload):
    dataset, config = payload
    trace = train(dataset, None, config)
    return trace.per_epoch[0].correctness


def run_easy_hard(cfg: ExperimentConfig):
    """Per-example misclassification rate over R fresh single-epoch runs, for
    the real/randX/randY variants, plus the matched binomial reference."""
    ctx = RunContext(cfg)
    pool, _ = load_datasets(cfg)
    base = working_set(cfg, pool)
    runs = cfg.get_int("easy_hard.runs", 100)
    variants = cfg.get_str_list("easy_hard.variants", list(VARIANTS))

    cells = []
    for variant in variants:
        dataset = variant_dataset(base, variant, child_seed(cfg.seed, "easy-hard-data", variant))
        for r in range(runs):
            config = train_config_from(cfg, epochs=1,
                                       seed=child_seed(cfg.seed, "easy-hard", variant, r))
            cells.append(((variant, r), _easy_hard_cell, (dataset, config)))
    results = _collect_errors(ctx, run_cells(cells, cfg.workers))

    rates = {}
    rows = []
    for variant in variants:
        correct = np.stack([results[(variant, r)] for r in range(runs)
                            if (variant, r) in results])
        rate = 1.0 - correct.mean(axis=0)
        rates[variant] = rate
        rows.extend((variant, int(base.indices[i]), rate[i]) for i in range(len(rate)))
    ctx.write_csv("easy_hard_rates.csv",
                  ["variant", "example_index", "misclassification_rate"], rows)

    reference = None
    if "randX" in rates:
        p_correct = float(1.0 - rates["randX"].mean())
        reference = binomial_reference(runs, p_correct, len(base),
                                       child_seed(cfg.seed, "easy-hard-binomial"))
        ctx.write_csv("binomial_reference.csv", ["sample_index", "rate"],
                      [(i, 1.0 - v) for i, v in enumerate(reference)],
                      comments=[f"Binomial(n={runs}, p={p_correct!r}) correct-rate draws, emitted as misclassification rates"])
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_easy_hard(ctx.path("easy_hard.png"), rates,
                                     None if reference is None else 1.0 - reference))
    summary = ctx.finish()
    summary["rates"] = rates
    return summary


def binomial_reference(n, p, count, seed):
    """`count` draws of Binomial(n, p)/n (success rates), deterministic in seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    rng = stream(seed, "binomial")
    return rng.binomial(n, p, size=count) / n


# ---------------------------------------------------------------------------
# gini curve / class matrix (unrolled loss sensitivity)
# ---------------------------------------------------------------------------

def _sensitivity_config(cfg, seed):
    # the unrolled reproduction runs plain SGD (no momentum) by default
    return train_config_from(cfg, momentum=cfg.get_float("train.momentum", 0.0), seed=seed)


def _gini_cell(payload):
    dataset, config, T, probes, norm_kind = payload
    record = unrolled_loss_sensitivity(dataset, config, T, probes, norm_kind)
    return record.per_step, record.probe_steps


def run_gini_curve(cfg: ExperimentConfig):
    """Inequality of per-example sensitivities as training progresses."""
    ctx = RunContext(cfg)
    pool, _ = load_datasets(cfg)
    base = working_set(cfg, pool)
    T = cfg.get_int("gini.T", 500)
    probes = default_probe_steps(T, cfg.get_int("gini.probe_every", 10))
    norm_kind = cfg.get_str("gini.norm", "l1")
    variants = cfg.get_str_list("gini.variants", ["real", "randX"])
    unique_mode = cfg.get_bool("gini.unique_classes", False)

    cells = []
    for variant in variants:
        dataset = variant_dataset(base, variant, child_seed(cfg.seed, "gini-data", variant))
        if unique_mode:
            dataset = mdata.unique_class_labels(dataset)
        config = _sensitivity_config(cfg, child_seed(cfg.seed, "gini", variant))
        cells.append((variant, _gini_cell, (dataset, config, T, probes, norm_kind)))
    results = _collect_errors(ctx, run_cells(cells, cfg.workers))

    rows, curves = [], {}
    for variant in variants:
        if variant not in results:
            continue
        per_step, steps = results[variant]
        from ..sensitivity import gini

        curve = [(step, gini(row)) for step, row in zip(steps, per_step)]
        curves[variant] = curve
        rows.extend((variant, step, value) for step, value in curve)
    ctx.write_csv("gini_curve.csv", ["variant", "step", "gini"], rows)
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_gini_curves(ctx.path("gini_curve.png"), curves))
    summary = ctx.finish()
    summary["curves"] = curves
    return summary


def _class_matrix_cell(payload):
    dataset, config, T, probes = payload
    return class_sensitivity(dataset, config, T, probe_steps=probes)


def run_class_matrix(cfg: ExperimentConfig):
    """Class-conditional sensitivity matrices for real and noise variants."""
    ctx = RunContext(cfg)
    pool, _ = load_datasets(cfg)
    base = working_set(cfg, pool)
    T = cfg.get_int("class_matrix.T", 120)
    probes = default_probe_steps(T, cfg.get_int("class_matrix.probe_every", 20))
    variants = cfg.get_str_list("class_matrix.variants", ["real", "randX"])

    cells = []
    for variant in variants:
        dataset = variant_dataset(base, variant, child_seed(cfg.seed, "class-data", variant))
        config = _sensitivity_config(cfg, child_seed(cfg.seed, "class", variant))
        cells.append((variant, _class_matrix_cell, (dataset, config, T, probes)))
    results = _collect_errors(ctx, run_cells(cells, cfg.workers))

    matrices = {}
    for variant in variants:
        if variant not in results:
            continue
        matrix = results[variant]
        matrices[variant] = matrix
        rows = [(i, j, matrix.values[i, j])
                for i in range(matrix.num_classes) for j in range(matrix.num_classes)]
        ctx.write_csv(f"class_matrix_{variant}.csv", ["i", "j", "value"], rows)
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_class_matrices(ctx.path("class_matrix.png"), matrices))
    summary = ctx.finish()
    summary["matrices"] = matrices
    return summary


# ---------------------------------------------------------------------------
# capacity / time-to-convergence sweeps
# ---------------------------------------------------------------------------

def _capacity_cell(payload):
    dataset, val_dataset, config = payload
    trace = train(dataset, val_dataset, config)
    return max(m.val_accuracy for m in trace.per_epoch)


def run_capacity_sweep(cfg: ExperimentConfig):
    """Best validation accuracy per (input-noise fraction, hidden width)."""
    ctx = RunContext(cfg)
    pool, val = load_datasets(cfg)
    base = working_set(cfg, pool)
    hidden_grid = cfg.get_int_list("capacity.hidden", [16, 64, 256, 1024])
    noise_grid = cfg.get_float_list("capacity.noise_fractions", [0.0, 0.5])

    cells = []
    for fraction in noise_grid:
        dataset = (base if fraction == 0.0 else
                   mdata.inject_input_noise(base, fraction, child_seed(cfg.seed, "cap-data", repr(fraction))))
        for width in hidden_grid:
            config = train_config_from(cfg, hidden_sizes=(width, width),
                                       seed=child_seed(cfg.seed, "capacity", repr(fraction), width))
            cells.append(((repr(fraction), width), _capacity_cell, (dataset, val, config)))
    results = _collect_errors(ctx, run_cells(cells, cfg.workers))

    rows = []
    table = {}
    for fraction in noise_grid:
        for width in hidden_grid:
            key = (repr(fraction), width)
            acc = results.get(key, float("nan"))
            table[(fraction, width)] = acc
            rows.append((fraction, width, acc))
    ctx.write_csv("capacity_sweep.csv", ["noise_fraction", "hidden_units", "best_val_acc"], rows)
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_capacity(ctx.path("capacity_sweep.png"), noise_grid, hidden_grid, table))
    summary = ctx.finish()
    summary["table"] = table
    return summary


def _ttc_cell(payload):
    dataset, config = payload
    trace = train(dataset, None, config)
    report = time_to_convergence(trace)
    return report.converged, report.epochs


def run_ttc_sweep(cfg: ExperimentConfig):
    """Epochs to reach 100% train accuracy along one axis (capacity or
    dataset size) for several input-noise levels.  Cells that never converge
    are emitted with sentinel -1 and noted."""
    ctx = RunContext(cfg)
    pool, _ = load_datasets(cfg)
    axis = cfg.get_str("ttc.axis", "dataset_size")
    noise_grid = cfg.get_float_list("ttc.noise_levels", [0.0, 1.0])
    max_epochs = cfg.get_int("ttc.max_epochs", 1500)
    if axis == "dataset_size":
        axis_values = cfg.get_int_list("ttc.sizes", [1000, 2000, 4000])
        fixed = ("capacity", cfg.get_int("ttc.capacity", 256))
    elif axis == "capacity":
        axis_values = cfg.get_int_list("ttc.capacities", [16, 64, 256, 1024])
        fixed = ("dataset_size", cfg.get_int("ttc.size", 1000))
    else:
        raise ConfigError("ttc.axis must be dataset_size or capacity")

    cells = []
    for value in axis_values:
        size = value if axis == "dataset_size" else fixed[1]
        width = value if axis == "capacity" else fixed[1]
        sample = mdata.subset(pool, size, seed=child_seed(cfg.seed, "ttc-subset", size))
        for level in noise_grid:
            dataset = (sample if level == 0.0 else
                       mdata.inject_input_noise(sample, level, child_seed(cfg.seed, "ttc-data", size, repr(level))))
            # one training seed per axis value: noise levels compare like-for-like
            config = train_config_from(cfg, hidden_sizes=(width, width), epochs=max_epochs,
                                       stop_at_full_train_acc=True,
                                       seed=child_seed(cfg.seed, "ttc", value))
            cells.append(((value, repr(level)), _ttc_cell, (dataset, config)))
    results = _collect_errors(ctx, run_cells(cells, cfg.workers))

    rows, table, notes = [], {}, []
    for value in axis_values:
        for level in noise_grid:
            outcome = results.get((value, repr(level)))
            if outcome is None:
                rows.append((value, level, -1))
                continue
            converged, epochs = outcome
            table[(value, level)] = (converged, epochs)
            if converged:
                rows.append((value, level, epochs))
            else:
                rows.append((value, level, -1))
                notes.append(f"not converged: axis={value} noise={level} after max_epochs={max_epochs}")
    comments = [f"fixed {fixed[0]} = {fixed[1]}", f"axis = {axis}"] + notes
    ctx.write_csv("ttc_sweep.csv", [f"{axis}", "noise_level", "epochs_to_converge"],
                  rows, comments=comments)
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_ttc(ctx.path("ttc_sweep.png"), axis, axis_values, noise_grid, table))
    summary = ctx.finish()
    summary["table"] = table
    return summary


# ---------------------------------------------------------------------------
# CSR throughout training
# ---------------------------------------------------------------------------

def _csr_curve_cell(payload):
    dataset, val_subset, config, lass_cfg, cadence = payload
    trace = train(dataset, val_subset, config)
    series = csr_over_training(trace, val_subset, lass_cfg, cadence)
    acc0_train = evaluate(trace.snapshots[0], dataset)[0]
    acc0_val = evaluate(trace.snapshots[0], val_subset)[0]
    points = []
    for epoch, report in series:
        if epoch == 0:
            train_acc, val_acc = acc0_train, acc0_val
        else:
            metric = trace.per_epoch[epoch - 1]
            train_acc, val_acc = metric.train_accuracy, metric.val_accuracy
        points.append((epoch, report.csr, train_acc, val_acc))
    return points


def _csr_fraction_cells(cfg, val_subset, labels_and_datasets):
    cadence = cfg.get_int("csr.snapshot_every", 25)
    cells = []
    for label, dataset in labels_and_datasets:
        config = train_config_from(cfg, snapshot_every_epochs=cadence,
                                   seed=child_seed(cfg.seed, "csr", label))
        lass_cfg = lass_config_from(cfg, child_seed(cfg.seed, "csr-lass", label))
        cells.append((label, _csr_curve_cell, (dataset, val_subset, config, lass_cfg, cadence)))
    return cells


def _write_csr_rows(ctx, name, results, order):
    rows = []
    series = {}
    for label in order:
        if label not in results:
            continue
        series[label] = results[label]
        for epoch, csr_value, train_acc, val_acc in results[label]:
            rows.append((epoch, label, csr_value, train_acc, val_acc))
    ctx.write_csv(name, ["epoch", "variant", "csr", "train_acc", "val_acc"], rows)
    return series


def run_csr_curve(cfg: ExperimentConfig):
    """CSR on the clean validation set over training, per dataset variant."""
    ctx = RunContext(cfg)
    pool, val = load_datasets(cfg)
    base = working_set(cfg, pool)
    val_subset = mdata.subset(val, min(cfg.get_int("csr.val_subset", 400), len(val)),
                              seed=child_seed(cfg.seed, "csr-val"))
    variants = cfg.get_str_list("csr.variants", list(VARIANTS))
    pairs = [(variant, variant_dataset(base, variant, child_seed(cfg.seed, "csr-data", variant)))
             for variant in variants]
    results = _collect_errors(ctx, run_cells(_csr_fraction_cells(cfg, val_subset, pairs),
                                             cfg.workers))
    series = _write_csr_rows(ctx, "csr_curve.csv", results, variants)
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_csr_curves(ctx.path("csr_curve.png"), series))
    summary = ctx.finish()
    summary["series"] = series
    return summary


def run_noise_level_grid(cfg: ExperimentConfig):
    """CSR + accuracy curves for partially noised training sets (both kinds)."""
    ctx = RunContext(cfg)
    pool, val = load_datasets(cfg)
    base = working_set(cfg, pool)
    val_subset = mdata.subset(val, min(cfg.get_int("csr.val_subset", 400), len(val)),
                              seed=child_seed(cfg.seed, "csr-val"))
    fractions = cfg.get_float_list("noise_grid.fractions", [0.2, 0.5, 0.8])
    kinds = cfg.get_str_list("noise_grid.kinds", ["randX", "randY"])
    pairs = []
    for kind in kinds:
        for fraction in fractions:
            label = f"{kind}@{fraction!r}"
            dataset = variant_dataset(base, kind, child_seed(cfg.seed, "grid-data", label),
                                      fraction=fraction)
            pairs.append((label, dataset))
    results = _collect_errors(ctx, run_cells(_csr_fraction_cells(cfg, val_subset, pairs),
                                             cfg.workers))
    series = _write_csr_rows(ctx, "noise_level_grid.csv", results, [label for label, _ in pairs])
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_csr_curves(ctx.path("noise_level_grid.png"), series))
    summary = ctx.finish()
    summary["series"] = series
    return summary


# ---------------------------------------------------------------------------
# regularizer sweep
# ---------------------------------------------------------------------------

def _reg_cell(payload):
    randy, real, val, config_randy, config_real = payload
    randy_trace = train(randy, None, config_randy)
    real_trace = train(real, val, config_real)
    return (randy_trace.per_epoch[-1].train_accuracy,
            max(m.val_accuracy for m in real_trace.per_epoch))


def reg_grid_from(cfg: ExperimentConfig):
    """(label, param, RegularizerSpec) triples; the unregularized baseline once."""
    grid = [("none", 0.0, RegularizerSpec.none())]
    for p in cfg.get_float_list("reg.dropout", [0.1, 0.3, 0.5, 0.7, 0.9]):
        grid.append(("dropout", p, RegularizerSpec.dropout(p)))
    for p in cfg.get_float_list("reg.input_dropout", []):
        grid.append(("input_dropout", p, RegularizerSpec.input_dropout(p)))
    for s in cfg.get_float_list("reg.input_gaussian", []):
        grid.append(("input_gaussian", s, RegularizerSpec.input_gaussian(s)))
    for s in cfg.get_float_list("reg.hidden_gaussian", []):
        grid.append(("hidden_gaussian", s, RegularizerSpec.hidden_gaussian(s)))
    for lam in cfg.get_float_list("reg.weight_decay", [0.001, 0.01, 0.1, 0.5, 1.0]):
        grid.append(("weight_decay", lam, RegularizerSpec.weight_decay(lam)))
    for pair in cfg.get_str_list("reg.adversarial", []):
        w, p = (float(x) for x in pair.split(":"))
        grid.append(("adversarial", w, RegularizerSpec.adversarial(w, p)))
    return grid


def run_reg_sweep(cfg: ExperimentConfig):
    """Memorization (final train accuracy on fully label-noised data) against
    clean-data validation accuracy, per regularizer setting."""
    ctx = RunContext(cfg)
    pool, val = load_datasets(cfg)
    base = working_set(cfg, pool)
    randy = mdata.inject_label_noise(base, 1.0, child_seed(cfg.seed, "reg-randy"))
    grid = reg_grid_from(cfg)

    cells = []
    for label, param, spec in grid:
        key = (label, repr(float(param)))
        config_randy = train_config_from(cfg, regularizer=spec,
                                         seed=child_seed(cfg.seed, "reg-randy", label, repr(param)))
        config_real = train_config_from(cfg, regularizer=spec,
                                        seed=child_seed(cfg.seed, "reg-real", label, repr(param)))
        cells.append((key, _reg_cell, (randy, base, val, config_randy, config_real)))
    results = _collect_errors(ctx, run_cells(cells, cfg.workers))

    rows, table = [], {}
    for label, param, _ in grid:
        key = (label, repr(float(param)))
        outcome = results.get(key, (float("nan"), float("nan")))
        table[(label, float(param))] = outcome
        rows.append((label, float(param), outcome[0], outcome[1]))
    ctx.write_csv("reg_sweep.csv",
                  ["regularizer", "param", "randY_final_train_acc", "real_best_val_acc"], rows)
    if cfg.plots:
        from . import plots
        ctx.add(plots.plot_reg_sweep(ctx.path("reg_sweep.png"), table))
    summary = ctx.finish()
    summary["table"] = table
    return summary


# ---------------------------------------------------------------------------
# first-layer filter dump
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    """Binary PGM (P5, maxval 255) from a uint8 image."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {image.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5 {image.shape[1]} {image.shape[0]} 255\n".encode())
        fh.write(image.tobytes())


def filter_images(params, image_shape):
    """First-layer rows as min-max normalized uint8 images; a constant row
    (degenerate normalization) maps to mid-gray 128."""
    rows = params.weights[0]
    images = []
    for row in rows:
        lo, hi = row.min(), row.max()
        if hi - lo <= 0:
            img = np.full(image_shape, 128, dtype=np.uint8)
        else:
            img = np.round((row - lo) / (hi - lo) * 255.0).reshape(image_shape).astype(np.uint8)
        images.append(img)
    return images


def contact_sheet(images, pad=1):
    """Tile unit images into one near-square grid with white separators."""
    count = len(images)
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    h, w = images[0].shape
    sheet = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 255, dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        sheet[top:top + h, left:left + w] = img
    return sheet


def dump_filters(params, out_dir, image_shape):
    """One PGM per first-layer unit plus a tiled contact sheet."""
    os.makedirs(out_dir, exist_ok=True)
    images = filter_images(params, image_shape)
    paths = []
    for i, img in enumerate(images):
        path = os.path.join(out_dir, f"filter_{i:04d}.pgm")
        write_pgm(path, img)
        paths.append(path)
    sheet_path = os.path.join(out_dir, "filters_sheet.pgm")
    write_pgm(sheet_path, contact_sheet(images))
    paths.append(sheet_path)
    return paths


def run_dump_filters(cfg: ExperimentConfig):
    """Train on the chosen variant and dump the first-layer filters."""
    ctx = RunContext(cfg)
    pool, _ = load_datasets(cfg)
    base = working_set(cfg, pool)
    variant = cfg.get_str("filters.variant", "real")
    dataset = variant_dataset(base, variant, child_seed(cfg.seed, "filters-data", variant))
    config = train_config_from(cfg, seed=child_seed(cfg.seed, "filters"))
    trace = train(dataset, None, config)
    for path in dump_filters(trace.final_params, ctx.path("filters"), dataset.image_shape):
        ctx.add(path)
    summary = ctx.finish()
    summary["filter_count"] = len(trace.final_params.weights[0])
    return summary


RUNNERS = {
    "easy_hard": run_easy_hard,
    "gini_curve": run_gini_curve,
    "class_matrix": run_class_matrix,
    "capacity_sweep": run_capacity_sweep,
    "ttc_sweep": run_ttc_sweep,
    "csr_curve": run_csr_curve,
    "noise_level_grid": run_noise_level_grid,
    "reg_sweep": run_reg_sweep,
    "dump_filters": run_dump_filters,
}


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.kind](cfg)
