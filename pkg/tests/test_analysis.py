import numpy as np
import pytest

from gspace.analysis import (
    DegenerateDataError,
    FlopsModel,
    flops_estimate,
    gradient_variance,
    mixture_variance_check,
    purity,
    stationarity_ratio,
    tfidf_summarize,
    tokenize,
    total_variance_decomposition,
)
from gspace.core import GradientMatrix, GspaceError
from gspace.online import Partition


def matrix_of(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return GradientMatrix(rows=rows, ids=np.arange(rows.shape[0]))


def partition_of(labels, K=None):
    labels = list(labels)
    K = K if K is not None else max(labels) + 1
    sizes = [labels.count(k) for k in range(K)]
    return Partition(
        assignments={i: (k, 1.0) for i, k in enumerate(labels)},
        cluster_sizes=sizes,
        K=K,
    )


class TestGradientVariance:
    def test_single_row(self):
        assert gradient_variance(matrix_of([[1.0, 2.0, 3.0]])) == 0.0

    def test_antipodal_pair(self):
        v = np.array([1.0, 2.0, 2.0])
        var = gradient_variance(matrix_of([v, -v]))
        assert var == pytest.approx(float(v @ v), rel=1e-12)

    def test_identical_rows(self):
        assert gradient_variance(matrix_of([[3.0, 1.0]] * 5)) == pytest.approx(0.0)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        rows = rng.standard_normal((40, 7))
        expected = float(np.mean(np.sum((rows - rows.mean(axis=0)) ** 2, axis=1)))
        assert gradient_variance(matrix_of(rows)) == pytest.approx(expected, rel=1e-12)


class TestMixtureVariance:
    def test_single_subset(self):
        rng = np.random.default_rng(1)
        sample = rng.standard_normal((100, 5))
        result = mixture_variance_check([sample], [1.0])
        assert result.lhs == pytest.approx(gradient_variance(sample), rel=1e-12)
        assert result.relative_error <= 1e-12

    def test_orthogonal_support_kills_cross_term(self):
        rng = np.random.default_rng(2)
        d = 8
        a = np.zeros((200, d))
        b = np.zeros((200, d))
        a[:, : d // 2] = rng.standard_normal((200, d // 2))
        b[:, d // 2 :] = rng.standard_normal((200, d // 2))
        alphas = [0.3, 0.7]
        result = mixture_variance_check([a, b], alphas)
        direct = 0.3**2 * gradient_variance(a) + 0.7**2 * gradient_variance(b)
        assert result.rhs == pytest.approx(direct, rel=1e-12)
        assert result.relative_error <= 1e-9

    def test_paired_draws_identity(self):
        rng = np.random.default_rng(3)
        base = rng.standard_normal((500, 16))
        subsets = [base + 0.5 * rng.standard_normal((500, 16)) for _ in range(4)]
        alphas = rng.dirichlet(np.ones(4))
        result = mixture_variance_check(subsets, alphas)
        assert result.relative_error <= 1e-9

    def test_identity_over_random_configs(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            k = int(rng.integers(1, 9))
            d = int(rng.integers(1, 65))
            trials = int(rng.integers(5, 60))
            shared = rng.standard_normal((trials, d))
            subsets = [shared * rng.uniform(-2, 2) + rng.standard_normal((trials, d)) for _ in range(k)]
            alphas = rng.dirichlet(np.ones(k))
            assert mixture_variance_check(subsets, alphas).relative_error <= 1e-9

    def test_rejects_nonconvex_weights(self):
        sample = np.ones((4, 2))
        with pytest.raises(GspaceError):
            mixture_variance_check([sample, sample], [0.7, 0.7])
        with pytest.raises(GspaceError):
            mixture_variance_check([sample, sample], [-0.5, 1.5])


class TestTotalVarianceDecomposition:
    def test_trivial_partition(self):
        rng = np.random.default_rng(5)
        G = matrix_of(rng.standard_normal((30, 4)))
        report = total_variance_decomposition(partition_of([0] * 30), G)
        assert report.between_term == pytest.approx(0.0, abs=1e-12)
        assert report.within_term == pytest.approx(report.total_variance, rel=1e-12)
        assert report.variance_ratio == pytest.approx(1.0)

    def test_antipodal_two_clusters(self):
        v = np.array([2.0, 1.0])
        G = matrix_of([v, -v])
        report = total_variance_decomposition(partition_of([0, 1]), G)
        assert report.within_term == pytest.approx(0.0, abs=1e-12)
        assert report.between_term == pytest.approx(float(v @ v), rel=1e-12)
        assert stationarity_ratio(report) == pytest.approx(0.0, abs=1e-12)

    def test_identity_over_random_partitions(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            d = int(rng.integers(1, 16))
            K = int(rng.integers(1, min(n, 6) + 1))
            G = matrix_of(rng.standard_normal((n, d)) * rng.uniform(0.1, 5))
            labels = rng.integers(0, K, size=n)
            report = total_variance_decomposition(partition_of(labels.tolist(), K=K), G)
            total = report.within_term + report.between_term
            assert abs(total - report.total_variance) <= 1e-9 * max(report.total_variance, 1e-12)
            assert report.within_term <= report.total_variance + 1e-12
            if report.between_term > 1e-12:
                assert report.within_term < report.total_variance

    def test_empty_cluster_flagged(self):
        G = matrix_of([[1.0], [2.0]])
        report = total_variance_decomposition(partition_of([0, 0], K=2), G)
        assert report.empty_clusters == [1]
        assert report.weights[1] == 0.0

    def test_missing_gradient_is_error(self):
        G = matrix_of([[1.0]])
        part = Partition(assignments={5: (0, 1.0)}, cluster_sizes=[1], K=1)
        with pytest.raises(GspaceError):
            total_variance_decomposition(part, G)


class TestStationarityRatio:
    def test_homogeneous_is_one(self):
        # equal cluster means: between-term vanishes
        rng = np.random.default_rng(7)
        block = rng.standard_normal((50, 6))
        G = matrix_of(np.vstack([block, block]))
        labels = [0] * 50 + [1] * 50
        report = total_variance_decomposition(partition_of(labels), G)
        assert stationarity_ratio(report) == pytest.approx(1.0, abs=1e-6)

    def test_monotone_in_separation(self):
        rng = np.random.default_rng(8)
        ratios = []
        for sep in (0.0, 2.0, 8.0):
            a = rng.standard_normal((60, 4))
            b = rng.standard_normal((60, 4)) + sep
            G = matrix_of(np.vstack([a, b]))
            report = total_variance_decomposition(partition_of([0] * 60 + [1] * 60), G)
            ratios.append(stationarity_ratio(report))
        assert ratios[0] > ratios[1] > ratios[2]

    def test_zero_total_variance_is_error(self):
        G = matrix_of([[1.0, 0.0]] * 4)
        report = total_variance_decomposition(partition_of([0, 0, 1, 1]), G)
        with pytest.raises(DegenerateDataError):
            stationarity_ratio(report)


class TestFlops:
    def test_paper_table_values(self):
        model = FlopsModel(f_base=100, f_lora=10, f_sp=1, k=3)
        router, total = flops_estimate(model, "ensemble")
        assert (router, total) == (130, 460)
        router, total = flops_estimate(model, "routed")
        assert (router, total) == (1, 111)

    def test_k_zero(self):
        model = FlopsModel(f_base=100, f_lora=10, f_sp=0, k=0)
        _, ensemble_total = flops_estimate(model, "ensemble")
        assert ensemble_total == 100 + 3 * 10
        _, g_total = flops_estimate(model, "routed")
        assert g_total == 110

    def test_inequality_region(self):
        # routed total < ensemble total iff f_sp < 2*f_lora + k*(f_base+f_lora)
        rng = np.random.default_rng(9)
        for _ in range(300):
            f_base, f_lora, f_sp = rng.uniform(0, 100, size=3)
            k = int(rng.integers(0, 6))
            model = FlopsModel(f_base=f_base, f_lora=f_lora, f_sp=f_sp, k=k)
            _, ensemble_total = flops_estimate(model, "ensemble")
            _, g_total = flops_estimate(model, "routed")
            expect_less = f_sp < 2 * f_lora + k * (f_base + f_lora)
            assert (g_total < ensemble_total) == expect_less

    def test_negative_fields_rejected(self):
        with pytest.raises(GspaceError):
            FlopsModel(f_base=-1, f_lora=0, f_sp=0, k=0)

    def test_unknown_method(self):
        with pytest.raises(GspaceError):
            flops_estimate(FlopsModel(1, 1, 1, 1), "other")


class TestTfidf:
    def test_code_vs_finance_structure(self):
        texts = {0: "def return int", 1: "stock market tax"}
        part = partition_of([0, 1])
        summary = tfidf_summarize(part, texts, top_m=5)
        assert {t for t, _ in summary[0]} >= {"def", "return", "int"}
        assert {t for t, _ in summary[1]} >= {"stock", "market", "tax"}

    def test_identical_text_everywhere_deterministic(self):
        texts = {i: "same words here" for i in range(4)}
        part = partition_of([0, 1, 2, 3])
        summary = tfidf_summarize(part, texts, top_m=3)
        for k in range(4):
            assert [t for t, _ in summary[k]] == ["here", "same", "words"]
            weights = [w for _, w in summary[k]]
            assert len(set(weights)) == 1  # equal idf under smoothing

    def test_single_cluster_reduces_to_tf(self):
        texts = {0: "alpha alpha alpha beta beta gamma"}
        summary = tfidf_summarize(partition_of([0]), texts, top_m=3)
        assert [t for t, _ in summary[0]] == ["alpha", "beta", "gamma"]
        weights = [w for _, w in summary[0]]
        assert weights[0] > weights[1] > weights[2]

    def test_cluster_without_text_is_empty(self):
        texts = {0: "words here"}
        summary = tfidf_summarize(partition_of([0, 1]), texts, top_m=3)
        assert summary[1] == []

    def test_tokenizer_lowercases_unicode_words(self):
        assert tokenize("Hello, WORLD! Déjà_vu 42") == ["hello", "world", "déjà_vu", "42"]


class TestPurity:
    def test_perfect(self):
        tags = {0: "a", 1: "a", 2: "b", 3: "b"}
        assert purity(partition_of([0, 0, 1, 1]), tags) == 1.0

    def test_majority_fraction(self):
        tags = {0: "a", 1: "a", 2: "b", 3: "b"}
        assert purity(partition_of([0, 0, 0, 1]), tags) == pytest.approx(3 / 4)

    def test_missing_tag_errors(self):
        with pytest.raises(GspaceError):
            purity(partition_of([0, 0]), {0: "a"})
