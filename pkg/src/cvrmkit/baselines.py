"""Comparison models: TF-IDF + linear SVC, a 1-D convolutional ResNet over
learned token embeddings, and a stratified dummy classifier."""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch

from .encoder import TokenEmbedding
from .nncore import BatchNorm1d, Dropout

_TOKEN_RE = re.compile(r"[^\W\d_]+", re.UNICODE)


def tfidf_tokenize(text: str) -> list[str]:
    """Lowercase, split on non-letters, drop length-1 tokens."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if len(t) > 1]


class TfidfModel:
    """TF-IDF with raw counts, idf = ln((1+N)/(1+df)) + 1, L2-normed rows.

    Unigrams by default; ``ngrams`` > 1 additionally indexes adjacent token
    n-grams (a config hook, off unless asked for).
    """

    def __init__(self, vocabulary: dict[str, int], idf: np.ndarray, ngrams: int = 1):
        self.vocabulary = dict(vocabulary)
        self.idf = np.asarray(idf, dtype=np.float64)
        self.ngrams = ngrams

    @staticmethod
    def _terms(text: str, ngrams: int) -> list[str]:
        tokens = tfidf_tokenize(text)
        terms = list(tokens)
        for n in range(2, ngrams + 1):
            terms.extend(" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
        return terms

    @classmethod
    def fit(cls, texts: list[str], ngrams: int = 1) -> "TfidfModel":
        if not texts:
            raise ValueError("cannot fit TF-IDF on an empty corpus")
        df: dict[str, int] = {}
        for text in texts:
            for term in set(cls._terms(text, ngrams)):
                df[term] = df.get(term, 0) + 1
        if not df:
            raise ValueError("vocabulary is empty after tokenization")
        vocabulary = {term: i for i, term in enumerate(sorted(df))}
        n = len(texts)
        idf = np.empty(len(vocabulary))
        for term, i in vocabulary.items():
            idf[i] = np.log((1.0 + n) / (1.0 + df[term])) + 1.0
        return cls(vocabulary, idf, ngrams)

    def transform(self, texts: list[str]) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for r, text in enumerate(texts):
            counts: dict[int, int] = {}
            for term in self._terms(text, self.ngrams):
                j = self.vocabulary.get(term)
                if j is not None:
                    counts[j] = counts.get(j, 0) + 1
            for j, c in counts.items():
                rows.append(r)
                cols.append(j)
                vals.append(c * self.idf[j])
        X = sp.csr_matrix(
            (vals, (rows, cols)), shape=(len(texts), len(self.vocabulary)), dtype=np.float64
        )
        norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
        norms[norms == 0] = 1.0
        return (sp.diags(1.0 / norms) @ X).tocsr()

    @classmethod
    def fit_transform(cls, texts: list[str], ngrams: int = 1) -> tuple["TfidfModel", sp.csr_matrix]:
        model = cls.fit(texts, ngrams)
        return model, model.transform(texts)

    def to_json(self) -> str:
        return json.dumps(
            {"vocabulary": self.vocabulary, "idf": self.idf.tolist(), "ngrams": self.ngrams}
        )

    @classmethod
    def from_json(cls, payload: str) -> "TfidfModel":
        obj = json.loads(payload)
        return cls(obj["vocabulary"], np.array(obj["idf"]), obj.get("ngrams", 1))


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class LinearSvc:
    """Primal linear SVC with squared hinge loss.

    Minimizes 0.5*||w||^2 + C * sum max(0, 1 - y*(w.x + b))^2 over labels
    mapped {0,1} -> {-1,+1}, by full-gradient descent with Armijo
    backtracking (monotone objective), stopping when the absolute objective
    improvement falls below tol.
    """

    C: float = 1.0
    tol: float = 1e-4
    max_iter: int = 2000
    weights: np.ndarray | None = None
    bias: float = 0.0
    objective_history: list[float] = field(default_factory=list)
    converged: bool = False

    @staticmethod
    def _objective_grad(w, b, X, y, C):
        f = X @ w + b
        margins = 1.0 - y * f
        active = margins > 0
        am = margins * active
        obj = 0.5 * float(w @ w) + C * float(am @ am)
        coef = -2.0 * C * (y * am)
        grad_w = w + X.T @ coef
        grad_b = float(coef.sum())
        return obj, grad_w, grad_b

    def objective(self, X, y01) -> float:
        y = np.where(np.asarray(y01) == 1, 1.0, -1.0)
        obj, _, _ = self._objective_grad(self.weights, self.bias, X, y, self.C)
        return obj

    def fit(self, X, y01) -> "LinearSvc":
        y01 = np.asarray(y01)
        if not set(np.unique(y01)) <= {0, 1}:
            raise ValueError("labels must be 0/1")
        y = np.where(y01 == 1, 1.0, -1.0)
        n_features = X.shape[1]
        w = np.zeros(n_features)
        b = 0.0
        obj, grad_w, grad_b = self._objective_grad(w, b, X, y, self.C)
        history = [obj]
        step = 1.0
        self.converged = False
        for _ in range(self.max_iter):
            g_sq = float(grad_w @ grad_w) + grad_b * grad_b
            if g_sq == 0.0:
                self.converged = True
                break
            # Armijo backtracking keeps the objective monotone
            accepted = False
            while step > 1e-16:
                w_new = w - step * grad_w
                b_new = b - step * grad_b
                obj_new, gw_new, gb_new = self._objective_grad(w_new, b_new, X, y, self.C)
                if obj_new <= obj - 1e-4 * step * g_sq:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:  # stalled at numerical precision
                self.converged = True
                break
            improvement = obj - obj_new
            w, b, grad_w, grad_b = w_new, b_new, gw_new, gb_new
            obj = obj_new
            history.append(obj)
            step = min(step * 2.0, 1e6)
            if improvement < self.tol:
                self.converged = True
                break
        if not self.converged:
            warnings.warn(
                f"LinearSvc did not converge within {self.max_iter} iterations "
                f"(last objective {obj:.6g})",
                ConvergenceWarning,
            )
        self.weights = w
        self.bias = b
        self.objective_history = history
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X @ self.weights).ravel() + self.bias

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.int64)

    def to_json(self) -> str:
        return json.dumps(
            {"weights": self.weights.tolist(), "bias": self.bias, "C": self.C, "tol": self.tol}
        )

    @classmethod
    def from_json(cls, payload: str) -> "LinearSvc":
        obj = json.loads(payload)
        model = cls(C=obj["C"], tol=obj["tol"])
        model.weights = np.array(obj["weights"])
        model.bias = float(obj["bias"])
        return model


@dataclass
class ResNetConfig:
    vocab_size: int
    embed_dim: int = 64
    layers: int = 8
    base_filters: int = 16
    kernel: int = 3
    head_hidden: int = 20
    head_dropout: float = 0.5
    fused_extra_dim: int = 0

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd for same-padding")
        if self.layers % 2 != 0:
            raise ValueError("layers must pair up for residual skips")


class _ConvBlock(torch.nn.Module):
    """conv (same padding) -> batch norm -> ReLU."""

    def __init__(self, in_ch, out_ch, kernel):
        super().__init__()
        self.conv = torch.nn.Conv1d(in_ch, out_ch, kernel, padding=kernel // 2)
        self.bn = BatchNorm1d(out_ch)

    def forward(self, x):
        return torch.relu(self.bn(self.conv(x)))


class _ResidualPair(torch.nn.Module):
    """Two conv blocks with a skip from the pair input (1x1 projection when
    channel widths differ), followed by stride-2 max pooling."""

    def __init__(self, in_ch, out_ch, kernel):
        super().__init__()
        self.block1 = _ConvBlock(in_ch, out_ch, kernel)
        self.block2 = _ConvBlock(out_ch, out_ch, kernel)
        self.skip = (
            torch.nn.Identity() if in_ch == out_ch else torch.nn.Conv1d(in_ch, out_ch, 1)
        )
        self.pool = torch.nn.MaxPool1d(2)

    def forward(self, x):
        y = self.block2(self.block1(x)) + self.skip(x)
        return self.pool(y)


class ResNet1D(torch.nn.Module):
    """1-D convolutional ResNet over learned token embeddings.

    Channel width starts at base_filters and doubles every residual pair;
    a stride-2 max pool follows each pair, so sequences must be at least
    2^(layers/2) long. Pads flow through as zero embeddings (no masking);
    classification uses a global max pool and a small MLP head.
    """

    def __init__(self, cfg: ResNetConfig, dropout_seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.min_length = 2 ** (cfg.layers // 2)
        generator = None
        if dropout_seed is not None:
            generator = torch.Generator().manual_seed(dropout_seed)
        self.embedding = TokenEmbedding(cfg.vocab_size, cfg.embed_dim)
        pairs = []
        in_ch = cfg.embed_dim
        width = cfg.base_filters
        for _ in range(cfg.layers // 2):
            pairs.append(_ResidualPair(in_ch, width, cfg.kernel))
            in_ch = width
            width *= 2
        self.pairs = torch.nn.ModuleList(pairs)
        self.out_channels = in_ch
        self.fc1 = torch.nn.Linear(in_ch + cfg.fused_extra_dim, cfg.head_hidden)
        self.dropout = Dropout(cfg.head_dropout, generator)
        self.fc2 = torch.nn.Linear(cfg.head_hidden, 2)

    def forward(self, ids: torch.Tensor, mask=None, extra: torch.Tensor | None = None):
        if ids.shape[1] < self.min_length:
            raise ValueError(
                f"sequence length {ids.shape[1]} is below the pooling depth minimum "
                f"{self.min_length}"
            )
        x = self.embedding(ids).permute(0, 2, 1)  # (B, C, L)
        for pair in self.pairs:
            x = pair(x)
        feature = x.amax(dim=2)
        if self.cfg.fused_extra_dim:
            if extra is None:
                raise ValueError("model was configured for fusion but got no structured features")
            feature = torch.cat([feature, extra.to(feature.dtype)], dim=1)
        elif extra is not None:
            raise ValueError("text-only model received structured features")
        h = self.dropout(torch.relu(self.fc1(feature)))
        return self.fc2(h)


def dummy_predict(labels_train, n_test: int, seed: int) -> np.ndarray:
    """Stratified dummy: each prediction drawn from the training prevalence."""
    labels_train = np.asarray(labels_train)
    if labels_train.size == 0:
        raise ValueError("training labels must be non-empty")
    p1 = float(labels_train.mean())
    rng = np.random.default_rng(seed)
    return (rng.random(n_test) < p1).astype(np.int64)
