import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
import torch

from cvrmkit.baselines import (
    ConvergenceWarning,
    LinearSvc,
    ResNet1D,
    ResNetConfig,
    TfidfModel,
    dummy_predict,
    tfidf_tokenize,
)
from cvrmkit.nncore import grad_check, weighted_cross_entropy


class TestTfidf:
    def test_tokenizer_contract(self):
        assert tfidf_tokenize("Bekend met DM-2, al 3 jaar.") == ["bekend", "met", "dm", "al", "jaar"]

    def test_identical_documents_identical_rows(self):
        model, X = TfidfModel.fit_transform(["aa bb cc", "aa bb cc"])
        assert np.allclose(X[0].toarray(), X[1].toarray())

    def test_ubiquitous_term_idf_is_one(self):
        model = TfidfModel.fit(["aa bb", "aa cc", "aa dd"])
        assert abs(model.idf[model.vocabulary["aa"]] - 1.0) < 1e-12

    def test_idf_formula(self):
        model = TfidfModel.fit(["aa bb", "aa cc", "aa dd"])
        expected = math.log((1 + 3) / (1 + 1)) + 1
        assert abs(model.idf[model.vocabulary["bb"]] - expected) < 1e-12

    def test_rows_are_unit_norm(self):
        _, X = TfidfModel.fit_transform(["aa bb bb", "cc dd", "aa"])
        norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
        assert np.allclose(norms, 1.0)

    def test_unseen_terms_give_zero_row(self):
        model, _ = TfidfModel.fit_transform(["aa bb"])
        X = model.transform(["zz yy"])
        assert X.nnz == 0

    def test_vocabulary_sorted_and_fit_order_independent(self):
        a = TfidfModel.fit(["bb aa", "cc aa"])
        b = TfidfModel.fit(["cc aa", "bb aa"])
        assert a.vocabulary == b.vocabulary
        assert list(a.vocabulary) == sorted(a.vocabulary)
        assert np.allclose(a.idf, b.idf)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            TfidfModel.fit([])

    def test_json_round_trip(self):
        model, _ = TfidfModel.fit_transform(["aa bb", "cc aa"])
        clone = TfidfModel.from_json(model.to_json())
        X1 = model.transform(["aa cc"])
        X2 = clone.transform(["aa cc"])
        assert np.allclose(X1.toarray(), X2.toarray())

    def test_ngram_hook_is_off_by_default(self):
        model = TfidfModel.fit(["aa bb cc", "aa bb dd"])
        assert "aa bb" not in model.vocabulary
        bigram = TfidfModel.fit(["aa bb cc", "aa bb dd"], ngrams=2)
        assert "aa bb" in bigram.vocabulary
        clone = TfidfModel.from_json(bigram.to_json())
        assert clone.ngrams == 2


class TestLinearSvc:
    def test_separable_two_points(self):
        X = sp.csr_matrix(np.array([[-1.0], [1.0]]))
        y = np.array([0, 1])
        svc = LinearSvc().fit(X, y)
        assert (svc.predict(X) == y).all()

    def test_objective_monotone_non_increasing(self):
        rng = np.random.default_rng(0)
        X = sp.csr_matrix(rng.normal(size=(40, 5)))
        y = (rng.random(40) < 0.5).astype(int)
        svc = LinearSvc().fit(X, y)
        diffs = np.diff(svc.objective_history)
        assert (diffs <= 1e-12).all()

    def test_objective_within_one_percent_of_grid_oracle(self):
        rng = np.random.default_rng(42)
        n = 20
        X_dense = rng.normal(size=(n, 2))
        y01 = (X_dense[:, 0] + 0.5 * X_dense[:, 1] + 0.3 * rng.normal(size=n) > 0).astype(int)
        X = sp.csr_matrix(X_dense)
        svc = LinearSvc(C=1.0, tol=1e-6).fit(X, y01)

        y = np.where(y01 == 1, 1.0, -1.0)

        def objective(w1, w2, b):
            w = np.array([w1, w2])
            margins = np.maximum(0.0, 1.0 - y * (X_dense @ w + b))
            return 0.5 * w @ w + 1.0 * (margins ** 2).sum()

        grid = np.linspace(-4, 4, 81)
        grid_best = min(
            objective(w1, w2, b) for w1, w2, b in itertools.product(grid, grid, grid)
        )
        assert svc.objective(X, y01) <= grid_best * 1.01

    def test_defaults_match_expected_config(self):
        svc = LinearSvc()
        assert svc.C == 1.0 and svc.tol == 1e-4

    def test_non_convergence_warns_and_returns_best(self):
        rng = np.random.default_rng(1)
        X = sp.csr_matrix(rng.normal(size=(30, 4)))
        y = (rng.random(30) < 0.5).astype(int)
        with pytest.warns(ConvergenceWarning):
            svc = LinearSvc(tol=0.0, max_iter=3).fit(X, y)
        assert svc.weights is not None

    def test_labels_validated(self):
        X = sp.csr_matrix(np.ones((2, 1)))
        with pytest.raises(ValueError):
            LinearSvc().fit(X, np.array([1, 2]))

    def test_json_round_trip(self):
        X = sp.csr_matrix(np.array([[-1.0], [1.0]]))
        svc = LinearSvc().fit(X, np.array([0, 1]))
        clone = LinearSvc.from_json(svc.to_json())
        assert np.allclose(clone.decision_function(X), svc.decision_function(X))


class TestResNet:
    def make_model(self, **overrides):
        cfg = dict(vocab_size=50, embed_dim=16)
        cfg.update(overrides)
        torch.manual_seed(0)
        return ResNet1D(ResNetConfig(**cfg), dropout_seed=1)

    def test_output_shape(self):
        model = self.make_model()
        ids = torch.randint(0, 50, (3, 64))
        assert model(ids).shape == (3, 2)

    def test_all_pad_input_is_finite(self):
        model = self.make_model()
        model.eval()
        out = model(torch.zeros(2, 32, dtype=torch.long))
        assert torch.isfinite(out).all()

    def test_min_length_enforced(self):
        model = self.make_model()
        with pytest.raises(ValueError):
            model(torch.zeros(1, 8, dtype=torch.long))

    def test_channel_progression(self):
        model = self.make_model(base_filters=16, layers=8)
        assert model.out_channels == 128

    def test_receptive_field_locality(self):
        # one residual pair: conv k=3 twice -> radius 2; far tokens are invisible
        cfg = ResNetConfig(vocab_size=50, embed_dim=8, layers=2, base_filters=4)
        torch.manual_seed(0)
        model = ResNet1D(cfg, dropout_seed=1)
        model.eval()
        ids = torch.randint(1, 50, (1, 32))
        x1 = model.embedding(ids).permute(0, 2, 1)
        out1 = model.pairs[0].block2(model.pairs[0].block1(x1))
        ids2 = ids.clone()
        ids2[0, 20] = (ids2[0, 20] + 1) % 49 + 1
        x2 = model.embedding(ids2).permute(0, 2, 1)
        out2 = model.pairs[0].block2(model.pairs[0].block1(x2))
        assert torch.allclose(out1[..., :18], out2[..., :18], atol=1e-6)
        assert not torch.allclose(out1[..., 18:23], out2[..., 18:23], atol=1e-6)

    def test_gradient_check(self):
        cfg = ResNetConfig(vocab_size=30, embed_dim=8, layers=4, base_filters=4, head_hidden=6)
        torch.manual_seed(2)
        model = ResNet1D(cfg, dropout_seed=3).double()
        model.eval()
        ids = torch.randint(1, 30, (2, 32))
        labels = torch.tensor([0, 1])

        def loss_fn():
            return weighted_cross_entropy(model(ids), labels)

        assert grad_check(loss_fn, list(model.parameters()), max_entries_per_param=3) <= 1e-4

    def test_fused_extra_dim(self):
        model = self.make_model(fused_extra_dim=7)
        ids = torch.randint(0, 50, (2, 32))
        assert model(ids, extra=torch.randn(2, 7)).shape == (2, 2)
        with pytest.raises(ValueError):
            model(ids)


class TestDummy:
    def test_all_positive_training_predicts_all_ones(self):
        preds = dummy_predict(np.ones(10), 20, seed=0)
        assert (preds == 1).all()

    def test_prevalence_respected(self):
        train = np.array([1] * 2 + [0] * 8)
        preds = dummy_predict(train, 10_000, seed=1)
        assert abs(preds.mean() - 0.2) < 0.02

    def test_empty_training_labels_rejected(self):
        with pytest.raises(ValueError):
            dummy_predict(np.array([]), 5, seed=0)

    def test_deterministic_per_seed(self):
        train = np.array([0, 1, 1, 0])
        a = dummy_predict(train, 50, seed=9)
        b = dummy_predict(train, 50, seed=9)
        assert (a == b).all()
