"""Mini-batch training, leave-one-subject-out evaluation and report tables."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import EpochSet, LeakageError, derive_seed, make_loso_folds, split_train_val
from .decoders import ArchitectureConfig, build
from .nn import ParamStore, backward, forward, init_params, loss_softmax_xent
from .signal import standardize

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "History",
    "RunResult",
    "LosoReport",
    "train",
    "predict_logits",
    "evaluate",
    "run_loso",
    "summarize_models",
]


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    early_stop_patience: int = 20
    seed: int = 0
    train_ratio: float = 0.8
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not 0 <= self.early_stop_patience <= self.max_epochs:
            raise ValueError("early_stop_patience must be in [0, max_epochs]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def with_seed(self, seed: int) -> "TrainConfig":
        from dataclasses import replace

        return replace(self, seed=int(seed))


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def as_tuple(self):
        return tuple(map(tuple, (self.train_loss, self.train_acc, self.val_loss, self.val_acc)))


class _Adam:
    def __init__(self, params: ParamStore, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: {n: np.zeros_like(a) for n, a in v.items()} for k, v in params.params.items()}
        self.v = {k: {n: np.zeros_like(a) for n, a in v.items()} for k, v in params.params.items()}

    def step(self, params: ParamStore, grads):
        c = self.cfg
        self.t += 1
        lr_t = c.learning_rate * math.sqrt(1 - c.beta2**self.t) / (1 - c.beta1**self.t)
        for layer, g_layer in grads.items():
            for name, g in g_layer.items():
                m, v = self.m[layer][name], self.v[layer][name]
                m *= c.beta1
                m += (1 - c.beta1) * g
                v *= c.beta2
                v += (1 - c.beta2) * g * g
                params.params[layer][name] -= (lr_t * m / (np.sqrt(v) + c.epsilon)).astype(m.dtype)


def _input(es: EpochSet, dtype) -> np.ndarray:
    return np.asarray(es.data, dtype=dtype)[:, None, :, :]


def predict_logits(stack, params: ParamStore, data: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for ``(n, 1, channels, samples)`` input."""
    outs = [forward(stack, params, data[i:i + batch_size], "eval")[0]
            for i in range(0, data.shape[0], batch_size)]
    return np.concatenate(outs)


def _check_disjoint(es: EpochSet, forbidden, where):
    if forbidden:
        hit = set(es.subject_ids.tolist()) & set(forbidden)
        if hit:
            raise LeakageError(f"{where}: held-out subject(s) {sorted(hit)} present in training data")


def train(stack, params: ParamStore, train_set: EpochSet, val_set: EpochSet, cfg: TrainConfig,
          forbidden_subjects: Sequence[str] = ()):
    """Adam on softmax cross-entropy with best-validation-accuracy checkpointing.

    Returns ``(best_params, history, best_epoch)``; ``best_epoch`` is 1-based.
    ``forbidden_subjects`` are asserted absent from every training and
    validation batch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    _check_disjoint(val_set, forbidden_subjects, "validation set")
    dtype = np.dtype(cfg.dtype)
    params = params.astype(dtype)
    x_train, y_train = _input(train_set, dtype), train_set.labels
    x_val, y_val = _input(val_set, dtype), val_set.labels
    opt = _Adam(params, cfg)
    history = History()
    best = (-1.0, None, 0)
    since_best = 0
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if forbidden_subjects:
                _check_disjoint(train_set.take(idx), forbidden_subjects, f"epoch {epoch} batch {b}")
            logits, cache = forward(stack, params, x_train[idx], "train",
                                    derive_seed(cfg.seed, epoch, b))
            loss, dlogits = loss_softmax_xent(logits, y_train[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch {b}")
            _, grads = backward(cache, dlogits.astype(dtype), need_input_grad=False)
            opt.step(params, grads)
            params.apply_state(cache.state_updates)
            total_loss += loss * idx.size
            correct += int(np.sum(logits.argmax(axis=1) == y_train[idx]))

        val_logits = predict_logits(stack, params, x_val)
        val_loss, _ = loss_softmax_xent(val_logits.astype(np.float64), y_val)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        val_acc = float(np.mean(val_logits.argmax(axis=1) == y_val))
        history.train_loss.append(total_loss / n)
        history.train_acc.append(correct / n)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        if val_acc > best[0]:
            best = (val_acc, params.copy(), epoch)
            since_best = 0
        else:
            since_best += 1
        log.debug("epoch %d loss %.4f val_acc %.3f", epoch, total_loss / n, val_acc)
        if since_best >= cfg.early_stop_patience:
            break
    return best[1], history, best[2]


def evaluate(stack, params: ParamStore, test: EpochSet) -> float:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    dtype = next((a.dtype for v in params.params.values() for a in v.values()), np.float64)
    logits = predict_logits(stack, params, _input(test, dtype))
    return float(np.mean(logits.argmax(axis=1) == test.labels))


# ---------------------------------------------------------------- reports

def _ordinal(i: int) -> str:
    suffix = "th" if 10 <= i % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(i % 10, "th")
    return f"{i}{suffix} acc."


@dataclass
class LosoReport:
    """Per-subject x per-repetition accuracies with Average and Std rows."""

    model: str
    subjects: list[str]
    cells: np.ndarray
    published_averages: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.subjects = [str(s) for s in self.subjects]
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.shape[0] != len(self.subjects) or self.cells.ndim != 2:
            raise ValueError(f"cells {self.cells.shape} do not match {len(self.subjects)} subjects")
        if np.any((self.cells < 0) | (self.cells > 1)):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def n_repetitions(self) -> int:
        return self.cells.shape[1]

    def subject_averages(self) -> list[float]:
        if self.published_averages is not None:
            return [float(v) for v in self.published_averages]
        return self.cells.mean(axis=1).tolist()

    def column_average(self) -> np.ndarray:
        return self.cells.mean(axis=0)

    def column_std(self) -> np.ndarray:
        return self.cells.std(axis=0)

    @property
    def grand_mean(self) -> float:
        return float(np.mean(self.subject_averages()))

    @property
    def grand_std(self) -> float:
        return float(np.std(self.subject_averages()))

    def header(self) -> list[str]:
        return ["subject"] + [_ordinal(i) for i in range(1, self.n_repetitions + 1)] + ["Average"]

    def rows(self) -> list[list]:
        avgs = self.subject_averages()
        rows = [[s, *c, a] for s, c, a in zip(self.subjects, self.cells.tolist(), avgs)]
        rows.append(["Average", *self.column_average().tolist(), self.grand_mean])
        rows.append(["Std.", *self.column_std().tolist(), self.grand_std])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        for note in self.notes:
            buf.write(f"# {note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for row in self.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, model: str = "") -> "LosoReport":
        notes = [ln[1:].strip() for ln in text.splitlines() if ln.startswith("#")]
        body = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        rows = list(csv.reader(body))
        if not rows or rows[0][0] != "subject" or rows[0][-1] != "Average":
            raise ValueError("report table must start with a 'subject,...,Average' header")
        width = len(rows[0])
        subjects, cells, avgs = [], [], []
        for row in rows[1:]:
            if len(row) != width:
                raise ValueError(f"row {row!r} has {len(row)} fields, expected {width}")
            if row[0] in ("Average", "Std.", "Std"):
                continue
            subjects.append(row[0])
            cells.append([float(v) for v in row[1:-1]])
            avgs.append(float(row[-1]))
        report = cls(model, subjects, np.array(cells), notes=notes)
        computed = report.cells.mean(axis=1)
        if not np.allclose(computed, avgs, atol=1e-9):
            # published tables round each cell and the average separately
            if not np.allclose(computed, avgs, atol=0.0125):
                raise ValueError("Average column disagrees with its repetition cells")
            report.published_averages = np.array(avgs)
        return report

    def to_text(self) -> str:
        lines = [
            "[loso_report]",
            f"model = {self.model}",
            f"subjects = {len(self.subjects)}",
            f"repetitions = {self.n_repetitions}",
            f"grand_mean = {self.grand_mean!r}",
            f"grand_std = {self.grand_std!r}",
        ]
        for s, c, a in zip(self.subjects, self.cells.tolist(), self.subject_averages()):
            lines.append(f"subject.{s} = {' '.join(repr(v) for v in c)} | {a!r}")
        return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    test_subject: str
    repetition_index: int
    test_accuracy: float
    best_epoch: int
    history: History


def _as_subject_map(data) -> dict[str, EpochSet]:
    if isinstance(data, Mapping):
        return {str(k): v for k, v in data.items()}
    out = {}
    for es in data:
        subs = es.subjects
        if len(subs) != 1:
            raise ValueError(f"each EpochSet must hold one subject, got {subs}")
        out[subs[0]] = es
    return out


def _run_fold(arch, data, fold, rep, cfg, check_leakage=True):
    seed = derive_seed(cfg.seed, fold.index, rep)
    trains, vals = [], []
    for j, subject in enumerate(fold.train_subjects):
        tr, va = split_train_val(data[subject], cfg.train_ratio, derive_seed(seed, j))
        trains.append(tr)
        vals.append(va)
    train_set = EpochSet.concatenate(trains)
    val_set = EpochSet.concatenate(vals)
    test_set = data[fold.test_subject]
    if check_leakage:
        _check_disjoint(train_set, [fold.test_subject], f"fold {fold.index}")
    train_set, (val_set, test_set) = standardize(train_set, [val_set, test_set])

    stack = build(arch)
    params = init_params(stack, derive_seed(seed, 1_000_003))
    try:
        best, history, best_epoch = train(stack, params, train_set, val_set, cfg.with_seed(seed),
                                          forbidden_subjects=[fold.test_subject])
        acc = evaluate(stack, best, test_set)
    except (ValueError, FloatingPointError) as exc:
        raise type(exc)(f"fold {fold.index} (test subject {fold.test_subject}), "
                        f"repetition {rep + 1}: {exc}") from exc
    log.info("%s fold %d rep %d test %s acc %.3f (best epoch %d)", arch.model_label,
             fold.index, rep + 1, fold.test_subject, acc, best_epoch)
    return RunResult(fold.test_subject, rep + 1, acc, best_epoch, history)


def run_loso(arch: ArchitectureConfig, data, cfg: TrainConfig = TrainConfig(),
             n_repetitions: int = 4, n_jobs: int = 1):
    """Leave-one-subject-out over every subject, ``n_repetitions`` reshuffles each.

    Each source subject is split ``train_ratio`` : rest, the parts are pooled
    into one training and one validation set, and the trained model is
    scored on the held-out subject. Returns ``(LosoReport, [RunResult])``.
    """
    data = _as_subject_map(data)
    subjects = list(data)
    if len(subjects) < 2:
        raise ValueError(f"LOSO needs at least 2 subjects, got {len(subjects)}")
    for s, es in data.items():
        if es.n_channels != arch.n_channels or es.n_samples != arch.n_samples:
            raise ValueError(
                f"subject {s}: epochs are {es.n_channels} x {es.n_samples}, architecture expects "
                f"{arch.n_channels} x {arch.n_samples}"
            )
        counts = es.class_counts(arch.n_classes)
        if counts.min() < 2:
            raise ValueError(f"subject {s}: every class needs at least 2 trials, got {counts.tolist()}")
    plan = make_loso_folds(subjects, cfg.seed)
    jobs = [(fold, rep) for fold in plan for rep in range(n_repetitions)]
    if n_jobs == 1:
        results = [_run_fold(arch, data, f, r, cfg) for f, r in jobs]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_run_fold)(arch, data, f, r, cfg) for f, r in jobs)
    cells = np.zeros((len(subjects), n_repetitions))
    for (fold, rep), res in zip(jobs, results):
        cells[fold.index, rep] = res.test_accuracy
    return LosoReport(arch.model_label, subjects, cells), results


@dataclass
class ModelSummary:
    model: str
    mean: float
    std: float
    normalized: float


def summarize_models(reports: Sequence[LosoReport]) -> list[ModelSummary]:
    """Grand means and their ratio to the across-model average of grand means."""
    if not reports:
        raise ValueError("need at least one report")
    means = [r.grand_mean for r in reports]
    overall = float(np.mean(means))
    return [ModelSummary(r.model, m, r.grand_std, m / overall) for r, m in zip(reports, means)]
