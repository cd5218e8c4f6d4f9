"""Experiment harness: stratified k-fold plans, confusion metrics, training
loops, and mean(std) report generation across fold models.

Each fold's model is scored on the single held-out 20% test split, so the
reported mean(std) reflects model variance on fixed evaluation data.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch

from . import tokenizer as tok
from .baselines import LinearSvc, ResNet1D, ResNetConfig, TfidfModel, dummy_predict
from .encoder import EncoderConfig, HTransformer
from .fusion import HashedDescriptionEmbedder, structured_vector
from .nncore import (
    AmsGrad,
    NonFiniteError,
    balanced_class_weights,
    save_checkpoint,
    weighted_cross_entropy,
)
from .records import PatientRecord, split_train_test
from .synth import planted_label

MODEL_FAMILIES = ("dummy", "svc", "resnet", "htrans", "oracle")
MODES = ("text_only", "fused")

STRUCTURED_DIM = 771  # 768 medication dims + 3 anthropometric dims


# ---------------------------------------------------------------------------
# confusion counts and metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_from_pairs(y_true, y_pred) -> ConfusionCounts:
    """Count a (label, prediction) pair list; the positive class is 1."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction vectors differ in length")
    return ConfusionCounts(
        tp=int(np.sum((y_true == 1) & (y_pred == 1))),
        fp=int(np.sum((y_true == 0) & (y_pred == 1))),
        fn=int(np.sum((y_true == 1) & (y_pred == 0))),
        tn=int(np.sum((y_true == 0) & (y_pred == 0))),
    )


@dataclass(frozen=True)
class MetricsEntry:
    precision: float
    recall: float
    f1: float
    mcc: float

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(counts: ConfusionCounts) -> MetricsEntry:
    """Precision, recall, F1 and MCC with the zero-denominator -> 0 convention."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    denom_sq = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(denom_sq) if denom_sq else 0.0
    return MetricsEntry(precision=precision, recall=recall, f1=f1, mcc=mcc)


METRIC_NAMES = ("precision", "recall", "f1", "mcc")


@dataclass(frozen=True)
class MetricsReport:
    """Per-fold metric entries plus their mean and population std."""

    entries: tuple[MetricsEntry, ...]
    mean: MetricsEntry
    std: MetricsEntry

    @classmethod
    def from_entries(cls, entries) -> "MetricsReport":
        entries = tuple(entries)
        if not entries:
            raise ValueError("a report needs at least one metrics entry")
        means = {}
        stds = {}
        for name in METRIC_NAMES:
            values = np.array([getattr(e, name) for e in entries], dtype=np.float64)
            means[name] = float(values.mean())
            stds[name] = float(values.std(ddof=0))
        return cls(entries=entries, mean=MetricsEntry(**means), std=MetricsEntry(**stds))

    def as_dict(self) -> dict:
        return {
            "folds": [e.as_dict() for e in self.entries],
            "mean": self.mean.as_dict(),
            "std": self.std.as_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls.from_entries(MetricsEntry(**e) for e in obj["folds"])


# ---------------------------------------------------------------------------
# stratified k-fold
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]  # (train_idx, val_idx) per fold
    test_indices: np.ndarray | None = None


def stratified_kfold(labels, k: int = 5, seed: int = 42) -> FoldPlan:
    """Shuffle each class by seed, deal round-robin into k validation folds."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        cls_idx = np.flatnonzero(labels == cls)
        if len(cls_idx) < k:
            raise ValueError(f"class {cls} has {len(cls_idx)} members, fewer than k={k}")
        shuffled = rng.permutation(cls_idx)
        for j, idx in enumerate(shuffled):
            fold_of[idx] = j % k
    all_idx = np.arange(len(labels))
    folds = tuple(
        (all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)
    )
    return FoldPlan(k=k, seed=seed, folds=folds)


# ---------------------------------------------------------------------------
# torch training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 12
    learning_rate: float = 3e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    class_weighting: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodedDataset:
    """Token matrices plus optional structured features for deep models."""

    ids: np.ndarray  # (n, length) int64
    mask: np.ndarray  # (n, length) int8
    labels: np.ndarray  # (n,) int64
    extra: np.ndarray | None = None  # (n, STRUCTURED_DIM) float32

    def subset(self, indices) -> "EncodedDataset":
        extra = None if self.extra is None else self.extra[indices]
        return EncodedDataset(self.ids[indices], self.mask[indices], self.labels[indices], extra)

    def __len__(self) -> int:
        return len(self.ids)

    def batch_tensors(self, indices):
        ids = torch.from_numpy(self.ids[indices])
        mask = torch.from_numpy(self.mask[indices]).float()
        extra = None
        if self.extra is not None:
            extra = torch.from_numpy(self.extra[indices])
        labels = torch.from_numpy(self.labels[indices])
        return ids, mask, extra, labels


def encode_dataset(
    records: list[PatientRecord],
    vocab: tok.Vocab,
    budget: int,
    reserve_cls: bool,
    extra: np.ndarray | None = None,
) -> EncodedDataset:
    n = len(records)
    ids = np.zeros((n, budget), dtype=np.int64)
    mask = np.zeros((n, budget), dtype=np.int8)
    for i, record in enumerate(records):
        seq = tok.encode(vocab, record.consult_texts(), budget, reserve_cls=reserve_cls)
        ids[i] = seq.ids
        mask[i] = seq.mask
    labels = np.array([r.label for r in records], dtype=np.int64)
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float32)
    return EncodedDataset(ids=ids, mask=mask, labels=labels, extra=extra)


def predict_torch(model: torch.nn.Module, data: EncodedDataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            ids, mask, extra, _ = data.batch_tensors(slice(start, start + batch_size))
            logits = model(ids, mask, extra) if extra is not None else model(ids, mask)
            preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def train_torch_model(
    model: torch.nn.Module,
    train_data: EncodedDataset,
    val_data: EncodedDataset | None,
    cfg: TrainingConfig,
) -> tuple[torch.nn.Module, list[dict]]:
    """Run exactly cfg.epochs epochs of AMSGrad and keep the best-val-F1 state.

    Logs train loss and validation F1 per epoch; ties on F1 keep the earliest
    epoch. With zero epochs the initial model and an empty log are returned.
    Non-finite losses abort with diagnostics.
    """
    optimizer = AmsGrad(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    class_weights = None
    if cfg.class_weighting:
        class_weights = balanced_class_weights(train_data.labels)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    best_f1 = -1.0
    best_state = None
    n = len(train_data)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            ids, mask, extra, labels = train_data.batch_tensors(batch)
            logits = model(ids, mask, extra) if extra is not None else model(ids, mask)
            loss = weighted_cross_entropy(logits, labels, class_weights)
            if not torch.isfinite(loss):
                raise NonFiniteError(
                    f"non-finite training loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_data is not None and len(val_data):
            preds = predict_torch(model, val_data)
            entry["val_f1"] = compute_metrics(confusion_from_pairs(val_data.labels, preds)).f1
            if entry["val_f1"] > best_f1:
                best_f1 = entry["val_f1"]
                best_state = copy.deepcopy(model.state_dict())
        log.append(entry)
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, log


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class RunArtifact:
    run_id: str
    family: str
    mode: str
    seed: int
    config_snapshot: str
    wall_clock_seconds: float
    fold_logs: list = field(default_factory=list)
    checkpoint_paths: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    report: MetricsReport
    artifact: RunArtifact


def _record_texts(records: list[PatientRecord]) -> list[str]:
    return [" ".join(r.consult_texts()) for r in records]


def _structured_matrix(records, embedder, skip_unknown) -> np.ndarray:
    return np.stack([structured_vector(r, embedder, skip_unknown) for r in records]).astype(
        np.float32
    )


def run_experiment(
    records: list[PatientRecord],
    family: str,
    mode: str = "text_only",
    *,
    training: TrainingConfig | None = None,
    encoder_params: dict | None = None,
    vocab_size: int = 16384,
    budget: int = 8192,
    test_fraction: float = 0.2,
    k_folds: int = 5,
    seed: int = 42,
    folds_to_train: int | None = None,
    embedder=None,
    skip_unknown_meds: bool = False,
    tfidf_ngrams: int = 1,
    out_dir: str | Path | None = None,
    config_snapshot: str | None = None,
) -> ExperimentResult:
    """Split, cross-validate, train per fold, and score every fold model on
    the held-out test split. ``folds_to_train`` limits how many fold models
    are actually trained (all k by default)."""
    if family not in MODEL_FAMILIES:
        raise ValueError(f"unknown model family {family!r}; expected one of {MODEL_FAMILIES}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    training = training or TrainingConfig(seed=seed)
    started = time.perf_counter()

    train_pool, test = split_train_test(records, test_fraction, seed)
    pool_labels = np.array([r.label for r in train_pool], dtype=np.int64)
    test_labels = np.array([r.label for r in test], dtype=np.int64)
    plan = stratified_kfold(pool_labels, k_folds, seed)
    n_folds = plan.k if folds_to_train is None else min(folds_to_train, plan.k)

    pool_extra = test_extra = None
    if mode == "fused":
        embedder = embedder or HashedDescriptionEmbedder()
        pool_extra = _structured_matrix(train_pool, embedder, skip_unknown_meds)
        test_extra = _structured_matrix(test, embedder, skip_unknown_meds)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    entries: list[MetricsEntry] = []
    fold_logs: list = []
    checkpoint_paths: list[str] = []

    if family == "oracle":
        preds = np.array([planted_label(r.consult_texts()) for r in test], dtype=np.int64)
        for _ in range(n_folds):
            entries.append(compute_metrics(confusion_from_pairs(test_labels, preds)))

    elif family == "dummy":
        for f in range(n_folds):
            train_idx, _ = plan.folds[f]
            preds = dummy_predict(pool_labels[train_idx], len(test), seed + f)
            entries.append(compute_metrics(confusion_from_pairs(test_labels, preds)))

    elif family == "svc":
        pool_texts = _record_texts(train_pool)
        test_texts = _record_texts(test)
        for f in range(n_folds):
            train_idx, _ = plan.folds[f]
            tfidf = TfidfModel.fit([pool_texts[i] for i in train_idx], ngrams=tfidf_ngrams)
            X_train = tfidf.transform([pool_texts[i] for i in train_idx])
            X_test = tfidf.transform(test_texts)
            if mode == "fused":
                X_train = sp.hstack([X_train, sp.csr_matrix(pool_extra[train_idx])]).tocsr()
                X_test = sp.hstack([X_test, sp.csr_matrix(test_extra)]).tocsr()
            svc = LinearSvc().fit(X_train, pool_labels[train_idx])
            preds = svc.predict(X_test)
            entries.append(compute_metrics(confusion_from_pairs(test_labels, preds)))
            fold_logs.append({"objective": svc.objective_history[-1], "converged": svc.converged})

    elif family in ("resnet", "htrans"):
        pooling = (encoder_params or {}).get("pooling", "cls")
        reserve_cls = family == "htrans" and pooling == "cls"
        vocab = tok.train_bpe(_record_texts(train_pool), vocab_size)
        pool_data = encode_dataset(train_pool, vocab, budget, reserve_cls, pool_extra)
        test_data = encode_dataset(test, vocab, budget, reserve_cls, test_extra)
        extra_dim = STRUCTURED_DIM if mode == "fused" else 0
        for f in range(n_folds):
            train_idx, val_idx = plan.folds[f]
            fold_seed = seed * 1000 + f
            torch.manual_seed(fold_seed)
            if family == "htrans":
                cfg = EncoderConfig(
                    vocab_size=len(vocab),
                    budget=budget,
                    fused_extra_dim=extra_dim,
                    **(encoder_params or {}),
                )
                model = HTransformer(cfg, dropout_seed=fold_seed + 1)
            else:
                model = ResNet1D(
                    ResNetConfig(vocab_size=len(vocab), fused_extra_dim=extra_dim),
                    dropout_seed=fold_seed + 1,
                )
            fold_training = copy.copy(training)
            fold_training.seed = fold_seed
            model, log = train_torch_model(
                model, pool_data.subset(train_idx), pool_data.subset(val_idx), fold_training
            )
            preds = predict_torch(model, test_data)
            entries.append(compute_metrics(confusion_from_pairs(test_labels, preds)))
            fold_logs.append(log)
            if out_dir is not None:
                ckpt = out_dir / f"fold{f}.npz"
                save_checkpoint(ckpt, model)
                checkpoint_paths.append(str(ckpt))

    report = MetricsReport.from_entries(entries)
    snapshot = config_snapshot if config_snapshot is not None else json.dumps(
        {
            "family": family,
            "mode": mode,
            "vocab_size": vocab_size,
            "budget": budget,
            "test_fraction": test_fraction,
            "k_folds": k_folds,
            "seed": seed,
            "training": training.as_dict(),
            "encoder_params": encoder_params or {},
        },
        sort_keys=True,
    )
    run_id = hashlib.sha1(
        f"{snapshot}|{family}|{mode}|{time.time_ns()}".encode()
    ).hexdigest()[:12]
    artifact = RunArtifact(
        run_id=run_id,
        family=family,
        mode=mode,
        seed=seed,
        config_snapshot=snapshot,
        wall_clock_seconds=time.perf_counter() - started,
        fold_logs=fold_logs,
        checkpoint_paths=checkpoint_paths,
    )
    if out_dir is not None:
        save_run(out_dir, report, artifact)
    return ExperimentResult(report=report, artifact=artifact)


# ---------------------------------------------------------------------------
# reports on disk
# ---------------------------------------------------------------------------

def save_run(out_dir: str | Path, report: MetricsReport, artifact: RunArtifact) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps({"artifact": artifact.as_dict(), "report": report.as_dict()}, indent=2)
        + "\n",
        encoding="utf-8",
    )
    name = f"{artifact.family}/{artifact.mode}"
    (out_dir / "report.txt").write_text(
        render_report_table([(name, report)]) + "\n", encoding="utf-8"
    )
    (out_dir / "config.json").write_text(artifact.config_snapshot + "\n", encoding="utf-8")


def load_run(run_dir: str | Path) -> tuple[str, str, MetricsReport]:
    obj = json.loads((Path(run_dir) / "report.json").read_text(encoding="utf-8"))
    artifact = obj["artifact"]
    name = f"{artifact['family']}/{artifact['mode']}"
    return artifact["run_id"], name, MetricsReport.from_dict(obj["report"])


def _format_cell(mean: float | None, std: float | None, percent: bool, n: int) -> str:
    if mean is None:
        return "--"
    if percent:
        cell = f"{mean * 100:.2f}"
        if n > 1 and std is not None:
            cell += f" ({std * 100:.2f})"
    else:
        cell = f"{mean:.3f}"
        if n > 1 and std is not None:
            cell += f" ({std:.3f})"
    return cell


def render_report_table(rows: list[tuple[str, MetricsReport | None]]) -> str:
    """Plain-text table: mean (std), 2 decimals for percentages, 3 for MCC."""
    header = ["Model", "F1 (%)", "Precision (%)", "Recall (%)", "MCC"]
    table = [header]
    for name, report in rows:
        if report is None:
            table.append([name, "--", "--", "--", "--"])
            continue
        n = len(report.entries)
        table.append(
            [
                name,
                _format_cell(report.mean.f1, report.std.f1, True, n),
                _format_cell(report.mean.precision, report.std.precision, True, n),
                _format_cell(report.mean.recall, report.std.recall, True, n),
                _format_cell(report.mean.mcc, report.std.mcc, False, n),
            ]
        )
    widths = [max(len(row[c]) for row in table) for c in range(len(header))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[c] for c in range(len(header))))
    return "\n".join(lines)
