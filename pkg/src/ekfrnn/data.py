"""Datasets, standard scaling, fit metrics and synthetic benchmark generators."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConstantReference, DimensionMismatch, ParseError

logger = logging.getLogger(__name__)

# x+ = A x + B u + xi,  y = 1 iff C x + D + zeta >= 0
BINARY_A = np.array([[0.8, 0.2, -0.1], [0.0, 0.9, 0.1], [0.1, -0.1, 0.7]])
BINARY_B = np.array([-1.0, 0.5, 1.0])
BINARY_C = np.array([-2.0, 1.5, 0.5])
BINARY_D = -2.0
BINARY_CHANGE_PROB = 0.9


@dataclass(frozen=True, eq=False)
class Scaling:
    """Per-channel means and standard deviations computed on training data.

    Binary output channels keep mean 0 and std 1 so the transform leaves them
    untouched.
    """

    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def scale_u(self, U):
        return (np.asarray(U, dtype=float) - self.u_mean) / self.u_std

    def scale_y(self, Y):
        return (np.asarray(Y, dtype=float) - self.y_mean) / self.y_std

    def unscale_u(self, U):
        return np.asarray(U, dtype=float) * self.u_std + self.u_mean

    def unscale_y(self, Y):
        return np.asarray(Y, dtype=float) * self.y_std + self.y_mean

    def apply(self, dataset):
        exps = tuple((self.scale_u(U), self.scale_y(Y)) for U, Y in dataset.experiments)
        return replace(dataset, experiments=exps, scaling=self)

    def inverse(self, dataset):
        exps = tuple((self.unscale_u(U), self.unscale_y(Y)) for U, Y in dataset.experiments)
        return replace(dataset, experiments=exps, scaling=None)

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)] for k in ("u_mean", "u_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("u_mean", "u_std", "y_mean", "y_std")})

    @classmethod
    def identity(cls, n_u, n_y):
        return cls(np.zeros(n_u), np.ones(n_u), np.zeros(n_y), np.ones(n_y))


@dataclass(frozen=True, eq=False)
class Dataset:
    """One or more input/output experiments.

    Parameters
    ----------
    experiments : tuple of (U, Y)
        ``U`` is ``N x n_u`` and ``Y`` is ``N x n_y`` for every experiment.
    Ts : float, optional
        Sample time.
    binary : tuple of bool
        Flags output channels holding 0/1 labels; those are never scaled.
    scaling : Scaling, optional
        Set once the data have been standardized.
    meta : dict
        Free-form provenance (generator name, seed, train/test split).
    """

    experiments: tuple
    Ts: float = None
    binary: tuple = None
    scaling: Scaling = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        exps = []
        for U, Y in self.experiments:
            U = np.asarray(U, dtype=float)
            Y = np.asarray(Y, dtype=float)
            if U.ndim == 1:
                U = U[:, None]
            if Y.ndim == 1:
                Y = Y[:, None]
            if U.shape[0] != Y.shape[0] or U.shape[0] < 1:
                raise DimensionMismatch(
                    f"experiment has {U.shape[0]} inputs and {Y.shape[0]} outputs"
                )
            exps.append((U, Y))
        if not exps:
            raise ValueError("a dataset needs at least one experiment")
        n_u, n_y = exps[0][0].shape[1], exps[0][1].shape[1]
        for U, Y in exps:
            if U.shape[1] != n_u or Y.shape[1] != n_y:
                raise DimensionMismatch("experiments disagree on n_u / n_y")
        object.__setattr__(self, "experiments", tuple(exps))
        if self.binary is None:
            object.__setattr__(self, "binary", (False,) * n_y)
        else:
            object.__setattr__(self, "binary", tuple(bool(b) for b in self.binary))
            if len(self.binary) != n_y:
                raise DimensionMismatch("binary flags must have one entry per output")

    @classmethod
    def from_arrays(cls, U, Y, **kw):
        return cls(experiments=((U, Y),), **kw)

    @property
    def n_u(self):
        return self.experiments[0][0].shape[1]

    @property
    def n_y(self):
        return self.experiments[0][1].shape[1]

    @property
    def n_samples(self):
        return sum(U.shape[0] for U, _ in self.experiments)

    @property
    def n_experiments(self):
        return len(self.experiments)

    @property
    def U(self):
        """Inputs of all experiments stacked in time."""
        return np.vstack([U for U, _ in self.experiments])

    @property
    def Y(self):
        return np.vstack([Y for _, Y in self.experiments])

    def head(self, n):
        """First ``n`` samples of every experiment."""
        return replace(self, experiments=tuple((U[:n], Y[:n]) for U, Y in self.experiments))


def as_dataset(data):
    """Accept a Dataset, a ``(U, Y)`` pair or a list of pairs."""
    if isinstance(data, Dataset):
        return data
    if isinstance(data, tuple) and len(data) == 2 and not isinstance(data[0], tuple):
        return Dataset.from_arrays(*data)
    return Dataset(experiments=tuple(data))


def load_csv(path, n_u, n_y, experiment_column="experiment"):
    """Read ``u1..u{n_u}, y1..y{n_y}`` columns, grouped by an optional experiment id."""
    u_names = [f"u{i + 1}" for i in range(n_u)]
    y_names = [f"y{i + 1}" for i in range(n_y)]
    groups = {}
    order = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        missing = [c for c in u_names + y_names if c not in header]
        if missing:
            raise DimensionMismatch(f"{path}: missing columns {missing}")
        extra = [h for h in header if h.startswith(("u", "y")) and h[1:].isdigit()
                 and h not in u_names + y_names]
        if extra:
            raise DimensionMismatch(f"{path}: unexpected columns {extra} for n_u={n_u}, n_y={n_y}")
        idx_u = [header.index(c) for c in u_names]
        idx_y = [header.index(c) for c in y_names]
        idx_e = header.index(experiment_column) if experiment_column in header else None
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=rownum)
            try:
                u = [float(row[i]) for i in idx_u]
                y = [float(row[i]) for i in idx_y]
            except ValueError as exc:
                raise ParseError(str(exc), row=rownum) from None
            key = row[idx_e].strip() if idx_e is not None else "0"
            if key not in groups:
                groups[key] = ([], [])
                order.append(key)
            groups[key][0].append(u)
            groups[key][1].append(y)
    if not order:
        raise ParseError("no data rows", row=2)
    exps = tuple(
        (np.array(groups[k][0]).reshape(-1, n_u), np.array(groups[k][1]).reshape(-1, n_y))
        for k in order
    )
    meta = {}
    sidecar = _sidecar_path(path)
    try:
        with open(sidecar) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    binary = meta.get("binary")
    return Dataset(experiments=exps, Ts=meta.get("Ts"), binary=binary, meta=meta)


def _sidecar_path(path):
    return str(path) + ".meta.json"


def save_csv(dataset, path, meta=None):
    """Write ``dataset`` at 17 significant digits plus a JSON metadata sidecar."""
    n_u, n_y = dataset.n_u, dataset.n_y
    header = [f"u{i + 1}" for i in range(n_u)] + [f"y{i + 1}" for i in range(n_y)]
    multi = dataset.n_experiments > 1
    if multi:
        header = ["experiment"] + header
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for e, (U, Y) in enumerate(dataset.experiments):
            for k in range(U.shape[0]):
                row = [f"{v:.17g}" for v in U[k]] + [f"{v:.17g}" for v in Y[k]]
                w.writerow(([str(e)] if multi else []) + row)
    doc = dict(dataset.meta)
    doc.update(meta or {})
    doc["binary"] = list(dataset.binary)
    if dataset.Ts is not None:
        doc["Ts"] = dataset.Ts
    with open(_sidecar_path(path), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def standardize(dataset, scaling=None):
    """Map non-binary channels to zero mean and unit standard deviation.

    Statistics are computed on ``dataset`` unless a frozen ``scaling`` from the
    training data is passed. Returns ``(scaled_dataset, scaling)``.
    """
    if scaling is None:
        U, Y = dataset.U, dataset.Y
        u_mean, u_std = U.mean(axis=0), U.std(axis=0)
        y_mean, y_std = Y.mean(axis=0), Y.std(axis=0)
        for name, mean, std in (("u", u_mean, u_std), ("y", y_mean, y_std)):
            flat = std <= 0
            if np.any(flat):
                logger.warning("channels %s%s have zero std; left unscaled",
                               name, list(np.flatnonzero(flat) + 1))
                mean[flat] = 0.0
                std[flat] = 1.0
        binary = np.asarray(dataset.binary, dtype=bool)
        y_mean[binary] = 0.0
        y_std[binary] = 1.0
        scaling = Scaling(u_mean, u_std, y_mean, y_std)
    return scaling.apply(dataset), scaling


def split_train_test(dataset, n_train=None):
    """First ``n_train`` samples for training and the rest for testing.

    Defaults to ``meta['n_train']`` or half of the (single) experiment.
    """
    if dataset.n_experiments != 1:
        raise ValueError("split_train_test expects a single experiment")
    U, Y = dataset.experiments[0]
    if n_train is None:
        n_train = dataset.meta.get("n_train", U.shape[0] // 2)
    train = replace(dataset, experiments=((U[:n_train], Y[:n_train]),))
    test = replace(dataset, experiments=((U[n_train:], Y[n_train:]),))
    return train, test


def bfr(Y, Yhat):
    """Best fit rate ``100 (1 - ||Y - Yhat|| / ||Y - mean(Y)||)`` in percent."""
    Y = np.asarray(Y, dtype=float)
    Yhat = np.asarray(Yhat, dtype=float)
    if Y.shape != Yhat.shape:
        raise DimensionMismatch(f"Y {Y.shape} vs Yhat {Yhat.shape}")
    if Y.ndim == 1:
        Y = Y[:, None]
        Yhat = Yhat[:, None]
    den = np.linalg.norm(Y - Y.mean(axis=0))
    if den == 0.0:
        raise ConstantReference("measured signal is constant")
    return 100.0 * (1.0 - np.linalg.norm(Y - Yhat) / den)


def accuracy(Y, Yhat):
    """Fraction of samples whose prediction thresholded at 0.5 equals the label."""
    Y = np.asarray(Y, dtype=float)
    Yhat = np.asarray(Yhat, dtype=float)
    if Y.shape != Yhat.shape:
        raise DimensionMismatch(f"Y {Y.shape} vs Yhat {Yhat.shape}")
    return float(np.mean((Yhat >= 0.5).astype(float) == Y))


def gen_binary_linear(sigma=0.0, N_total=2000, seed=0):
    """Third-order linear system observed through a thresholded output.

    ``u`` is redrawn from ``U(0, 1)`` with probability 0.9 at every step.
    Process and measurement noises are independent ``N(0, sigma^2)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    u = np.empty(N_total)
    u_cur = rng.uniform(0.0, 1.0)
    for k in range(N_total):
        if k > 0 and rng.uniform() < BINARY_CHANGE_PROB:
            u_cur = rng.uniform(0.0, 1.0)
        u[k] = u_cur
    xi = rng.normal(0.0, 1.0, size=(N_total, 3)) * sigma
    zeta = rng.normal(0.0, 1.0, size=N_total) * sigma
    x = np.zeros(3)
    y = np.empty(N_total)
    for k in range(N_total):
        y[k] = 1.0 if BINARY_C @ x + BINARY_D + zeta[k] >= 0.0 else 0.0
        x = BINARY_A @ x + BINARY_B * u[k] + xi[k]
    meta = {"generator": "binary_linear", "sigma": sigma, "seed": seed,
            "N_total": N_total, "n_train": N_total // 2}
    return Dataset.from_arrays(u[:, None], y[:, None], binary=(True,), meta=meta)


# Substitute nonlinear benchmark:
#   x1+ = 0.8 x1 + 0.4 x2 + 0.4 tanh(2 u)
#   x2+ = -0.3 x1 + 0.7 x2 + 0.2 u
#   y   = x1 + 0.5 tanh(2 x2) + e,   e ~ N(0, 0.01^2)
# driven by a random-phase multisine with 25 lines below 0.2 cycles/sample.
NONLINEAR_NOISE_STD = 0.01


def gen_nonlinear_benchmark(seed=0, N_total=2000):
    """Saturated second-order SISO recursion excited by a random-phase multisine.

    The first half of the samples is the training split.
    """
    rng = np.random.default_rng(seed)
    k = np.arange(N_total)
    n_lines = 25
    freqs = rng.uniform(0.002, 0.2, size=n_lines)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_lines)
    amps = rng.uniform(0.5, 1.0, size=n_lines)
    u = (amps[None, :] * np.sin(2.0 * math.pi * freqs[None, :] * k[:, None] + phases)).sum(axis=1)
    u *= 1.2 / u.std()
    x1 = x2 = 0.0
    y = np.empty(N_total)
    for t in range(N_total):
        y[t] = x1 + 0.5 * math.tanh(2.0 * x2)
        x1, x2 = (0.8 * x1 + 0.4 * x2 + 0.4 * math.tanh(2.0 * u[t]),
                  -0.3 * x1 + 0.7 * x2 + 0.2 * u[t])
    y += NONLINEAR_NOISE_STD * rng.normal(size=N_total)
    meta = {"generator": "nonlinear_benchmark", "seed": seed,
            "N_total": N_total, "n_train": N_total // 2}
    return Dataset.from_arrays(u[:, None], y[:, None], meta=meta)


def score(dataset, Yhats):
    """Accuracy for all-binary outputs, BFR (numeric channels) otherwise.

    Returns ``(metric_name, value)`` computed over all experiments stacked.
    """
    ds = as_dataset(dataset)
    Y = ds.Y
    Yhat = np.vstack(Yhats)
    binary = np.asarray(ds.binary, dtype=bool)
    if binary.all():
        return "accuracy", accuracy(Y, Yhat)
    return "bfr", bfr(Y[:, ~binary], Yhat[:, ~binary])


LOG_COLUMNS = ("epoch", "objective", "fit", "zero_fraction", "wall_time")


def save_log_csv(log, path):
    """Write a per-epoch training log (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([row["epoch"]] + [f"{row[c]:.17g}" for c in LOG_COLUMNS[1:]])
