import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptfuse.errors import ValidationError
from promptfuse.fusion import (
    ProjectionLayer,
    SimilarityMatrix,
    contrastive_loss,
    fuse,
    l2_normalize,
    predict,
    project_audio,
    similarity_logits,
    temporal_pool,
)


def unit(i, dim=512):
    v = torch.zeros(dim)
    v[i] = 1.0
    return v


class TestTemporalPool:
    def test_identical_rows(self):
        v = torch.randn(512)
        pooled = temporal_pool(v.expand(16, 512))
        torch.testing.assert_close(pooled, v)

    def test_two_row_mean(self):
        rows = torch.stack([unit(0), unit(1)])
        pooled = temporal_pool(rows)
        assert pooled[0] == pooled[1] == 0.5
        assert pooled[2:].abs().sum() == 0

    def test_matches_column_sum_oracle(self):
        torch.manual_seed(0)
        m = torch.randn(16, 512)
        oracle = np.array([float(sum(m[t, j] for t in range(16))) / 16 for j in range(512)])
        np.testing.assert_allclose(temporal_pool(m).numpy(), oracle, atol=1e-6)

    def test_permutation_invariance(self):
        torch.manual_seed(1)
        for _ in range(20):
            m = torch.randn(16, 512)
            perm = torch.randperm(16)
            d = (temporal_pool(m) - temporal_pool(m[perm])).abs().max()
            assert float(d) < 1e-6

    def test_empty_is_error(self):
        with pytest.raises(ValidationError):
            temporal_pool(torch.zeros(0, 512))


class TestProjectAudio:
    def test_zero_input_zero_bias(self):
        layer = ProjectionLayer()
        with torch.no_grad():
            layer.bias.zero_()
        out = project_audio(torch.zeros(1024), layer)
        assert out.abs().max() == 0

    def test_identity_block(self):
        layer = ProjectionLayer()
        with torch.no_grad():
            layer.weight.zero_()
            layer.weight[:, :512] = torch.eye(512)
            layer.bias.zero_()
        out = project_audio(unit(1, 1024), layer)
        torch.testing.assert_close(out, unit(1, 512))

    def test_matches_double_loop_oracle(self):
        torch.manual_seed(2)
        layer = ProjectionLayer()
        x = torch.randn(1024)
        with torch.no_grad():
            got = project_audio(x, layer).numpy()
        w = layer.weight.detach().numpy().astype(np.float64)
        b = layer.bias.detach().numpy().astype(np.float64)
        xs = x.numpy().astype(np.float64)
        oracle = np.empty(512)
        for i in range(512):
            acc = b[i]
            for j in range(1024):
                acc += w[i, j] * xs[j]
            oracle[i] = acc
        np.testing.assert_allclose(got, oracle, atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            project_audio(torch.zeros(512), ProjectionLayer())


class TestFuse:
    def test_zero_audio_matches_disabled_path(self):
        v = torch.randn(512)
        with_zero = fuse(v, torch.zeros(512), audio_enabled=True)
        disabled = fuse(v, None, audio_enabled=False)
        torch.testing.assert_close(with_zero, disabled)

    def test_collinear(self):
        out = fuse(unit(0), unit(0), True)
        torch.testing.assert_close(out, unit(0))

    def test_orthogonal_sum(self):
        out = fuse(unit(0), unit(1), True)
        expected = (unit(0) + unit(1)) / math.sqrt(2)
        torch.testing.assert_close(out, expected)

    def test_zero_norm_is_degenerate(self):
        with pytest.raises(ValidationError):
            fuse(unit(0), -unit(0), True)

    def test_prenormalize_variant_direction(self):
        torch.manual_seed(3)
        v, a = torch.randn(512) * 3, torch.randn(512) * 0.1
        out = fuse(v, a, True, prenormalize=True)
        expected = l2_normalize(l2_normalize(v) + l2_normalize(a))
        torch.testing.assert_close(out, expected)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_output_norm_is_one(self, seed):
        g = torch.Generator().manual_seed(seed)
        v = torch.randn(512, generator=g)
        a = torch.randn(512, generator=g)
        out = fuse(v, a, True)
        assert abs(float(out.norm()) - 1.0) < 1e-6


class TestSimilarityLogits:
    def test_identical_unit_vectors(self):
        f = unit(3).unsqueeze(0)
        sim = similarity_logits(f, f, 14.0)
        assert float(sim.logits[0, 0]) == pytest.approx(14.0, abs=1e-5)

    def test_orthogonal_pair(self):
        sim = similarity_logits(unit(0).unsqueeze(0), unit(1).unsqueeze(0), 10.0)
        assert float(sim.logits[0, 0]) == pytest.approx(0.0, abs=1e-6)

    def test_matches_brute_force_dot_oracle(self):
        torch.manual_seed(4)
        fused = l2_normalize(torch.randn(3, 512))
        text = l2_normalize(torch.randn(2, 512))
        sim = similarity_logits(fused, text, 10.0)
        for i in range(3):
            for j in range(2):
                dot = float(sum(fused[i, k] * text[j, k] for k in range(512)))
                assert float(sim.logits[i, j]) == pytest.approx(10.0 * dot, abs=1e-5)

    def test_bound_by_scale(self):
        torch.manual_seed(5)
        sim = similarity_logits(l2_normalize(torch.randn(4, 512)), l2_normalize(torch.randn(3, 512)), 25.0)
        assert float(sim.logits.abs().max()) <= 25.0 + 1e-4

    def test_rejects_unnormalized(self):
        with pytest.raises(ValidationError):
            similarity_logits(torch.full((1, 512), 0.5), l2_normalize(torch.randn(1, 512)), 1.0)


class TestContrastiveLoss:
    def test_uniform_softmax_is_ln2(self):
        sim = SimilarityMatrix(logits=torch.zeros(5, 2, dtype=torch.float64), logit_scale=1.0)
        loss = contrastive_loss(sim, torch.zeros(5, dtype=torch.long))
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_saturation(self):
        sim = SimilarityMatrix(logits=torch.tensor([[100.0, 0.0]]), logit_scale=1.0)
        assert float(contrastive_loss(sim, torch.tensor([0]))) < 1e-6

    def test_matches_softmax_nll_oracle(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 2))
        labels = rng.integers(0, 2, size=4)
        sim = SimilarityMatrix(logits=torch.from_numpy(logits), logit_scale=1.0)
        got = float(contrastive_loss(sim, torch.from_numpy(labels)))
        total = 0.0
        for i in range(4):
            e = np.exp(logits[i] - logits[i].max())
            p = e / e.sum()
            total += -np.log(p[labels[i]])
        assert got == pytest.approx(total / 4, abs=1e-9)

    def test_nonnegative_and_lnC_at_equal_logits(self):
        for c in (2, 3, 7):
            sim = SimilarityMatrix(logits=torch.full((3, c), 1.23, dtype=torch.float64), logit_scale=1.0)
            loss = float(contrastive_loss(sim, torch.zeros(3, dtype=torch.long)))
            assert loss == pytest.approx(math.log(c), abs=1e-12)
        torch.manual_seed(7)
        sim = SimilarityMatrix(logits=torch.randn(8, 2), logit_scale=1.0)
        assert float(contrastive_loss(sim, torch.randint(0, 2, (8,)))) >= 0

    def test_gradient_is_softmax_minus_onehot(self):
        torch.manual_seed(8)
        logits = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 2, 1, 1, 0])
        loss = contrastive_loss(SimilarityMatrix(logits=logits, logit_scale=1.0), labels)
        loss.backward()
        p = torch.softmax(logits.detach(), dim=1)
        onehot = torch.zeros_like(p)
        onehot[torch.arange(5), labels] = 1.0
        torch.testing.assert_close(logits.grad, (p - onehot) / 5, atol=1e-12, rtol=0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        base = rng.normal(size=(3, 2))
        labels = torch.tensor([0, 1, 0])

        def loss_at(arr):
            sim = SimilarityMatrix(logits=torch.from_numpy(arr), logit_scale=1.0)
            return float(contrastive_loss(sim, labels))

        logits = torch.from_numpy(base).clone().requires_grad_(True)
        loss = contrastive_loss(SimilarityMatrix(logits=logits, logit_scale=1.0), labels)
        loss.backward()
        eps = 1e-6
        for i in range(3):
            for j in range(2):
                up, down = base.copy(), base.copy()
                up[i, j] += eps
                down[i, j] -= eps
                fd = (loss_at(up) - loss_at(down)) / (2 * eps)
                assert float(logits.grad[i, j]) == pytest.approx(fd, abs=1e-6)


class TestPredict:
    def test_argmax(self):
        sim = SimilarityMatrix(logits=torch.tensor([[0.2, 0.9]]), logit_scale=1.0)
        assert predict(sim).tolist() == [1]

    def test_tie_breaks_low(self):
        sim = SimilarityMatrix(logits=torch.tensor([[0.5, 0.5]]), logit_scale=1.0)
        assert predict(sim).tolist() == [0]

    def test_positive_scaling_invariance(self):
        torch.manual_seed(10)
        logits = torch.randn(6, 3)
        base = predict(SimilarityMatrix(logits=logits, logit_scale=1.0))
        for c in (0.1, 2.0, 77.0):
            scaled = predict(SimilarityMatrix(logits=logits * c, logit_scale=1.0))
            assert torch.equal(base, scaled)
