"""Training loop with early stopping, repeated k-fold CV, and grid search."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .features import FeatureWindow
from .nn import Adam, CnnModel, loss_and_gradients


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float = 0.001
    batch_size: int = 5
    max_epochs: int = 100
    patience: int = 5
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 0 or self.max_epochs < 0:
            raise ValueError("patience and max_epochs must be >= 0")


def windows_to_arrays(windows: list[FeatureWindow]):
    x = np.stack([w.samples for w in windows])
    y = np.array([w.label for w in windows], dtype=int)
    return x, y


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0


def _mean_loss(model, x, y):
    probs = model.forward(x, train=False)
    return float(-np.log(probs[np.arange(len(y)), y] + 1e-300).mean())


def train(model: CnnModel, windows: list[FeatureWindow],
          hyper: Hyperparameters = Hyperparameters(),
          seed: int = 0) -> TrainHistory:
    """Adam training with per-epoch shuffling and early stopping.

    A validation slice (hyper.val_fraction of the windows) is carved off
    with the run seed; training stops once validation loss fails to improve
    for `patience` consecutive epochs, and the best-validation parameters
    are restored.
    """
    if not windows:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    # single precision halves the optimizer's and BLAS memory traffic;
    # the quantized deployment path tolerates far coarser weights anyway
    model.astype(np.float32)
    x, y = windows_to_arrays(windows)
    n_val = int(round(len(windows) * hyper.val_fraction))
    order = rng.permutation(len(windows))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("empty training set after validation split")
    xv, yv = x[val_idx], y[val_idx]
    xt, yt = x[train_idx], y[train_idx]
    has_val = len(val_idx) > 0

    opt = Adam(lr=hyper.learning_rate)
    history = TrainHistory()
    best_loss = np.inf
    best_weights = model.get_weights()
    stale = 0

    for epoch in range(hyper.max_epochs):
        idx = rng.permutation(len(xt)) if hyper.shuffle else np.arange(len(xt))
        epoch_loss = 0.0
        for start in range(0, len(xt), hyper.batch_size):
            batch = idx[start:start + hyper.batch_size]
            loss, grads = loss_and_gradients(model, xt[batch], yt[batch],
                                             rng=rng,
                                             weight_decay=hyper.weight_decay)
            epoch_loss += loss
            opt.step([p for _, p in model.parameters()], grads)
        history.train_loss.append(epoch_loss / len(xt))

        if has_val:
            vloss = _mean_loss(model, xv, yv)
            vacc = float((model.predict(xv) == yv).mean())
        else:
            vloss, vacc = history.train_loss[-1], float("nan")
        history.val_loss.append(vloss)
        history.val_accuracy.append(vacc)

        if vloss < best_loss - 1e-12:
            best_loss = vloss
            best_weights = model.get_weights()
            history.best_epoch = epoch + 1
            stale = 0
        else:
            stale += 1
            if stale > hyper.patience:
                break

    history.stopped_epoch = len(history.train_loss)
    model.set_weights(best_weights)
    return history


@dataclass
class CvResult:
    fold_accuracies: list  # (repeat, fold) ordered
    mean_accuracy: float
    std_error: float  # sigma / sqrt(repeats)
    repeats: int
    splits: int


def kfold_validate(model_factory, windows: list[FeatureWindow], k: int = 10,
                   repeats: int = 3,
                   hyper: Hyperparameters = Hyperparameters(),
                   seed: int = 0) -> CvResult:
    """Repeated k-fold cross-validation.

    model_factory(seed) must return a fresh model.  Every fold appears
    exactly once as validation per repeat; the standard error is the
    standard deviation of all fold accuracies over sqrt(repeats).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(windows) < k:
        raise ValueError("need at least k windows")
    x, y = windows_to_arrays(windows)
    accs = []
    for rep in range(repeats):
        rng = np.random.default_rng((seed, rep))
        order = rng.permutation(len(windows))
        folds = np.array_split(order, k)
        for fi, fold in enumerate(folds):
            train_ids = np.concatenate([f for j, f in enumerate(folds) if j != fi])
            model = model_factory((seed, rep, fi))
            train(model, [windows[i] for i in train_ids], hyper,
                  seed=int(rng.integers(2 ** 31)))
            acc = float((model.predict(x[fold]) == y[fold]).mean())
            accs.append(acc)
    sigma = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return CvResult(fold_accuracies=accs,
                    mean_accuracy=float(np.mean(accs)),
                    std_error=sigma / np.sqrt(repeats),
                    repeats=repeats, splits=k)


def standard_error(fold_accuracies, repeats: int) -> float:
    """sigma_error = sigma / sqrt(n), n = number of repeats."""
    sigma = float(np.std(fold_accuracies, ddof=1))
    return sigma / np.sqrt(repeats)


@dataclass(frozen=True)
class TuneSpace:
    epochs: tuple = tuple(range(10, 101, 10))
    learning_rates: tuple = (0.001, 0.01, 0.1, 0.002, 0.02, 0.2, 0.003, 0.03, 0.3)

    def __post_init__(self):
        if not self.epochs or not self.learning_rates:
            raise ValueError("grids must be non-empty")
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be > 0")


@dataclass
class GridResult:
    entries: list  # (epochs, lr, val_accuracy)
    best_epochs: int
    best_lr: float
    best_accuracy: float


def grid_search(space: TuneSpace, model_factory,
                windows: list[FeatureWindow],
                hyper: Hyperparameters = Hyperparameters(),
                seed: int = 0) -> GridResult:
    """Exhaustive grid evaluation by validation accuracy.

    Each grid point gets its own seeded stream derived from (seed, point),
    so enumeration order cannot change the result.  Ties break toward the
    lowest learning rate, then the lowest epoch count.
    """
    rng_master = np.random.default_rng(seed)
    val_n = max(1, int(round(len(windows) * 0.25)))
    order = rng_master.permutation(len(windows))
    val_ids, train_ids = order[:val_n], order[val_n:]
    train_windows = [windows[i] for i in train_ids]
    xv, yv = windows_to_arrays([windows[i] for i in val_ids])

    entries = []
    for ei, epochs in enumerate(space.epochs):
        for li, lr in enumerate(space.learning_rates):
            point_seed = (seed, ei, li)
            model = model_factory(point_seed)
            h = replace(hyper, learning_rate=lr, max_epochs=epochs)
            train(model, train_windows, h,
                  seed=int(np.random.default_rng(point_seed).integers(2 ** 31)))
            acc = float((model.predict(xv) == yv).mean())
            entries.append((epochs, lr, acc))

    best = max(entries, key=lambda e: (e[2], -e[1], -e[0]))
    return GridResult(entries=entries, best_epochs=best[0], best_lr=best[1],
                      best_accuracy=best[2])
