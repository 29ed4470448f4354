"""Maximum-likelihood training: minibatch SGD with classical momentum, the
1/(1+t/half_life) learning-rate schedule, L2 and dropout regularization,
validation-best snapshotting, hyperparameter grid search, and ensembles of
independently initialized, optionally bootstrapped networks.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Panel
from .network import (
    Architecture,
    MlpParams,
    backward,
    batch_loss,
    forward_batch,
    init_params,
    load_model_file,
    save_model,
)
from .pipeline import ArrayBatchStream

PROB_FLOOR = 1e-300


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, lr: float, detail: str = ""):
        self.epoch = epoch
        self.lr = lr
        super().__init__(f"training diverged at epoch {epoch} (lr={lr:.6g}) {detail}".strip())


def learning_rate(t: int, lr0: float, half_life: float) -> float:
    """Epoch-indexed schedule lr0 / (1 + t/half_life)."""
    if t < 0:
        raise ValueError("epoch index must be >= 0")
    return lr0 / (1.0 + t / half_life)


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    keep_prob: tuple[float, ...] | float | None = None  # input + hidden layers
    lr0: float = 0.1
    half_life: float = 800.0
    momentum: float = 0.9
    batch_size: int = 4000
    epochs: int = 10
    samples_per_epoch: int | None = None  # None -> one full pass
    l2_lambda: float = 0.0
    seed: int = 0
    bootstrap: bool = False
    snapshot_best: bool = True  # keep validation-best parameters
    l2_include_biases: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.half_life <= 0:
            raise ValueError("half_life must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def architecture(self, input_dim: int) -> Architecture:
        return Architecture(
            input_dim=input_dim,
            hidden=self.hidden,
            activation=self.activation,
            keep_prob=self.keep_prob,
        )


def _as_xy(data):
    if isinstance(data, Panel):
        return data.covariates, data.next_states
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _member_probs(member: MlpParams, X: np.ndarray, chunk: int = 8192) -> np.ndarray:
    out = np.empty((len(X), member.arch.output_dim))
    for i in range(0, len(X), chunk):
        out[i : i + chunk] = member.predict_probs(X[i : i + chunk])
    return out


@dataclass(frozen=True)
class EnsembleModel:
    """M networks sharing one schema and normalization; prediction is the
    arithmetic mean of the member probability vectors."""

    members: tuple[MlpParams, ...]
    schema: object = None
    stats: object = None
    member_seeds: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("an ensemble needs at least one member")
        dims = {m.arch.input_dim for m in self.members}
        if len(dims) != 1:
            raise ValueError("members disagree on input dimension")

    @property
    def input_dim(self) -> int:
        return self.members[0].arch.input_dim

    def predict_probs(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.mean([_member_probs(m, X) for m in self.members], axis=0)

    def predict_logits(self, X: np.ndarray) -> np.ndarray:
        # an ensemble has no shared pre-activations; its canonical logits are
        # the log of the averaged probabilities
        return np.log(np.maximum(self.predict_probs(X), PROB_FLOOR))

    def predict_log_probs(self, X: np.ndarray) -> np.ndarray:
        return self.predict_logits(X)

    def input_gradients(self, X: np.ndarray, v: int) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.mean([m.input_gradients(X, v) for m in self.members], axis=0)

    def num_params(self) -> int:
        return sum(m.num_params() for m in self.members)

    def save(self, path, store_dtype: str = "float64"):
        if self.schema is None or self.stats is None:
            raise ValueError("cannot save an ensemble without schema and stats")
        meta = dict(self.meta)
        meta["member_seeds"] = list(self.member_seeds)
        save_model(path, self.members, self.schema, self.stats, meta=meta, store_dtype=store_dtype)

    @classmethod
    def load(cls, path, expect_schema_hash: str | None = None) -> "EnsembleModel":
        members, schema, stats, meta = load_model_file(path, expect_schema_hash)
        return cls(
            members=tuple(members),
            schema=schema,
            stats=stats,
            member_seeds=tuple(meta.get("member_seeds", ())),
            meta=meta,
        )


def nll_loss(model, data, chunk: int = 8192) -> float:
    """Negative average log-likelihood (the paper's cross-entropy loss).

    Accepts an MlpParams, an EnsembleModel, or anything with predict_probs;
    ensemble probabilities are averaged before the log. Underflow is floored
    at 1e-300 and flagged with a warning.
    """
    X, y = _as_xy(data)
    if len(y) == 0:
        raise ValueError("nll_loss needs at least one sample")
    total = 0.0
    flagged = False
    for i in range(0, len(X), chunk):
        P = model.predict_probs(X[i : i + chunk])
        p = P[np.arange(len(P)), y[i : i + chunk]]
        if np.any(p < PROB_FLOOR):
            flagged = True
        total += -np.log(np.maximum(p, PROB_FLOOR)).sum()
    if flagged:
        warnings.warn("probability underflow floored at 1e-300 in nll_loss", stacklevel=2)
    return float(total / len(y))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    valid_loss: float | None
    wall_time: float


@dataclass
class TrainResult:
    params: MlpParams
    log: list[EpochRecord]
    best_epoch: int
    final_valid_loss: float | None

    def write_log_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "valid_loss", "wall_time"])
            for r in self.log:
                w.writerow([
                    r.epoch,
                    f"{r.lr!r}",
                    f"{r.train_loss!r}",
                    "" if r.valid_loss is None else f"{r.valid_loss!r}",
                    f"{r.wall_time:.3f}",
                ])


def _batch_source(train, config: TrainConfig):
    if hasattr(train, "epoch") and hasattr(train, "n_samples"):
        return train
    X, y = _as_xy(train)
    return ArrayBatchStream(X, y, batch_size=config.batch_size, seed=config.seed)


def _endless_batches(stream):
    pass_index = 0
    while True:
        for batch in stream.epoch(pass_index):
            yield batch
        pass_index += 1


def sgd_train(config: TrainConfig, train, valid=None) -> TrainResult:
    """Minibatch SGD with momentum: v <- mu v - lr(t) g, theta <- theta + v.

    ``g`` is the minibatch mean gradient of [-log-likelihood + l2 penalty],
    dropout is active during training, and the learning rate follows the
    epoch schedule. Returns the parameters of the validation-best epoch when
    snapshotting is on (and a validation set exists), else the final epoch.
    """
    stream = _batch_source(train, config)
    arch = config.architecture(input_dim=_stream_input_dim(stream))
    params0 = init_params(arch, config.seed)
    Ws, bs = params0.mutable_arrays()
    vWs = [np.zeros_like(W) for W in Ws]
    vbs = [np.zeros_like(b) for b in bs]
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**64 - 1), 1]))
    train_mode = any(p < 1.0 for p in arch.keep_prob)
    batches = _endless_batches(stream)
    spe = config.samples_per_epoch or stream.n_samples
    valid_xy = _as_xy(valid) if valid is not None and _has_rows(valid) else None

    log: list[EpochRecord] = []
    best_loss = np.inf
    best_snapshot = None
    best_epoch = -1
    t0 = time.monotonic()
    for t in range(config.epochs):
        lr = learning_rate(t, config.lr0, config.half_life)
        seen = 0
        loss_sum = 0.0
        n_batches = 0
        while seen < spe:
            X, y = next(batches)
            try:
                params = MlpParams(arch, tuple(Ws), tuple(bs))
            except ValueError as e:
                raise TrainingDiverged(t, lr, str(e)) from e
            _, trace = forward_batch(params, X, rng=dropout_rng if train_mode else None)
            loss = batch_loss(params, trace, y, config.l2_lambda, config.l2_include_biases)
            if not np.isfinite(loss):
                raise TrainingDiverged(t, lr, f"batch loss {loss!r}")
            grad_W, grad_b = backward(params, trace, y, config.l2_lambda, config.l2_include_biases)
            for l in range(arch.num_layers):
                vWs[l] = config.momentum * vWs[l] - lr * grad_W[l]
                vbs[l] = config.momentum * vbs[l] - lr * grad_b[l]
                Ws[l] += vWs[l]
                bs[l] += vbs[l]
            seen += len(y)
            loss_sum += loss * len(y)
            n_batches += 1
        params = MlpParams(arch, tuple(Ws), tuple(bs))
        train_loss = loss_sum / seen
        valid_loss = nll_loss(params, valid_xy) if valid_xy is not None else None
        log.append(EpochRecord(t, lr, train_loss, valid_loss, time.monotonic() - t0))
        if config.snapshot_best and valid_loss is not None and valid_loss < best_loss:
            best_loss = valid_loss
            best_snapshot = params
            best_epoch = t
    final = MlpParams(arch, tuple(Ws), tuple(bs))
    if best_snapshot is not None:
        return TrainResult(best_snapshot, log, best_epoch, log[-1].valid_loss)
    return TrainResult(final, log, config.epochs - 1, log[-1].valid_loss if log else None)


def _has_rows(data) -> bool:
    X, _ = _as_xy(data)
    return len(X) > 0


def _stream_input_dim(stream) -> int:
    if isinstance(stream, ArrayBatchStream):
        return stream.X.shape[1]
    for X, _ in stream.epoch(0):
        return X.shape[1]
    raise ValueError("empty training stream")


@dataclass
class GridSearchResult:
    best_config: TrainConfig
    best_result: TrainResult
    leaderboard: list[dict]

    def write_leaderboard_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid_index", "valid_loss", "num_params", "status", "config"])
            for row in self.leaderboard:
                w.writerow([row["grid_index"], row["valid_loss"], row["num_params"],
                            row["status"], row["config"]])


def grid_search(grid, train, valid) -> GridSearchResult:
    """Train one model per grid point and rank by validation loss.

    Ties break toward fewer parameters, then the lower grid index. Raises
    TrainingDiverged listing every abort when no run survives.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    rows = []
    results = {}
    aborts = []
    for i, cfg in enumerate(grid):
        entry = {"grid_index": i, "config": _config_label(cfg)}
        try:
            res = sgd_train(cfg, train, valid)
            vloss = res.log[res.best_epoch].valid_loss if res.best_epoch >= 0 else res.final_valid_loss
            if vloss is None:
                vloss = nll_loss(res.params, valid)
            entry.update(valid_loss=vloss, num_params=res.params.num_params(), status="ok")
            results[i] = (vloss, res)
        except TrainingDiverged as e:
            entry.update(valid_loss="", num_params="", status=f"diverged: {e}")
            aborts.append((i, str(e)))
        rows.append(entry)
    if not results:
        detail = "; ".join(f"grid[{i}]: {msg}" for i, msg in aborts)
        raise TrainingDiverged(-1, float("nan"), f"all grid points diverged ({detail})")
    best_i = min(results, key=lambda i: (results[i][0], results[i][1].params.num_params(), i))
    return GridSearchResult(grid[best_i], results[best_i][1], rows)


def _config_label(cfg: TrainConfig) -> str:
    return (
        f"hidden={list(cfg.hidden)} act={cfg.activation} lr0={cfg.lr0} "
        f"l2={cfg.l2_lambda} batch={cfg.batch_size} epochs={cfg.epochs}"
    )


def train_ensemble(config: TrainConfig, train, valid=None, n_members: int = 1,
                   seed: int | None = None, schema=None, stats=None) -> EnsembleModel:
    """Fit M networks with independent seeds (and, when config.bootstrap is
    set, independent with-replacement resamples of the training set); diverged
    members are dropped and reported, and the ensemble fails if all drop."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    base_seed = config.seed if seed is None else seed
    X, y = _as_xy(train)
    members = []
    member_seeds = []
    failures = []
    for m in range(n_members):
        m_seed = int(np.random.default_rng(np.random.SeedSequence([base_seed, m])).integers(2**31))
        cfg = replace(config, seed=m_seed)
        if config.bootstrap:
            idx = np.random.default_rng(np.random.SeedSequence([base_seed, m, 7])).integers(
                0, len(y), size=len(y)
            )
            data = (X[idx], y[idx])
        else:
            data = (X, y)
        try:
            members.append(sgd_train(cfg, data, valid).params)
            member_seeds.append(m_seed)
        except TrainingDiverged as e:
            failures.append((m, str(e)))
            warnings.warn(f"ensemble member {m} dropped: {e}", stacklevel=2)
    if not members:
        detail = "; ".join(f"member {m}: {msg}" for m, msg in failures)
        raise TrainingDiverged(-1, float("nan"), f"all ensemble members diverged ({detail})")
    return EnsembleModel(
        members=tuple(members),
        schema=schema,
        stats=stats,
        member_seeds=tuple(member_seeds),
        meta={"dropped_members": [m for m, _ in failures]},
    )


def refit_on_train_plus_valid(config: TrainConfig, train, valid) -> TrainResult:
    """Re-run sgd_train on the union of train and validation (the test set is
    never passed in); with an empty validation set this is plain sgd_train."""
    Xt, yt = _as_xy(train)
    if valid is None or not _has_rows(valid):
        return sgd_train(replace(config, snapshot_best=False), (Xt, yt))
    Xv, yv = _as_xy(valid)
    union = (np.concatenate([Xt, Xv]), np.concatenate([yt, yv]))
    return sgd_train(replace(config, snapshot_best=False), union)
