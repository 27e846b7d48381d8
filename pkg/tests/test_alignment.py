import math

import numpy as np
import pytest
import torch

from goalign.alignment import (
    BatchOutputs,
    LocalSlot,
    LossWeights,
    Projection,
    cosine_sim_matrix,
    contrastive_loss,
    pool_mean,
    pool_masked,
    select_patch_indices,
    select_token_indices,
    total_loss,
    tsl_loss,
)
from goalign.encoders import Tokenizer, tokenize
from goalign.errors import NumericError, TruncationError

# --- independent numpy oracles --------------------------------------------------------


def cos_oracle(a, b):
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = a[i] @ b[j] / (math.sqrt(a[i] @ a[i]) * math.sqrt(b[j] @ b[j]))
    return out


def info_nce_oracle(v, t, tau):
    s = cos_oracle(v, t) / tau
    n = len(s)
    rows = cols = 0.0
    for i in range(n):
        rows -= s[i, i] - math.log(sum(math.exp(s[i, j]) for j in range(n)))
        cols -= s[i, i] - math.log(sum(math.exp(s[j, i]) for j in range(n)))
    return 0.5 * (rows / n + cols / n)


def mse_identity_oracle(a, b):
    s = cos_oracle(a, b)
    n = len(s)
    return sum((s[i, j] - (i == j)) ** 2 for i in range(n) for j in range(n)) / (n * n)


def tsl_oracle(p, v, s, t):
    return mse_identity_oracle(p, v) + mse_identity_oracle(s, t)


def _t(x):
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def _orthonormal(rng, n, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, n)))
    return q.T


# --- index sets -----------------------------------------------------------------------


class TestPatchIndices:
    def test_quadrant(self):
        assert select_patch_indices((0, 0, 32, 32), 64, 16).indices == (0, 1, 4, 5)

    def test_full_image(self):
        assert select_patch_indices((0, 0, 64, 64), 64, 16).indices == tuple(range(16))

    def test_fallback(self):
        res = select_patch_indices((30, 30, 34, 34), 64, 16)
        assert res.indices == (10,) and res.fallback

    @pytest.mark.parametrize("image,patch", [(64, 16), (64, 8), (32, 8), (96, 16), (64, 32)])
    def test_quadrants_partition_grid(self, image, patch):
        h = image // 2
        quads = [(0, 0, h, h), (h, 0, image, h), (0, h, h, image), (h, h, image, image)]
        sets = [set(select_patch_indices(q, image, patch).indices) for q in quads]
        n = (image // patch) ** 2
        assert sum(len(s) for s in sets) == n
        assert set().union(*sets) == set(range(n))

    def test_overlap_rule_superset(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x1, y1 = rng.integers(0, 60, size=2)
            x2, y2 = x1 + rng.integers(2, 64 - x1 + 1), y1 + rng.integers(2, 64 - y1 + 1)
            c = select_patch_indices((x1, y1, x2, y2), 64, 16, "center")
            o = select_patch_indices((x1, y1, x2, y2), 64, 16, "overlap")
            assert set(c.indices) <= set(o.indices)

    def test_mask(self):
        m = select_patch_indices((0, 0, 32, 32), 64, 16).mask()
        assert m.shape == (16,) and m.sum() == 4 and m[[0, 1, 4, 5]].all()

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            select_patch_indices((0, 0, 8, 8), 64, 16, "nearest")


class TestTokenIndices:
    @pytest.fixture
    def tok(self):
        return Tokenizer.from_texts(["w0 w1 w2 w3 w4 w5 w6 w7 w8 w9"], max_len=128)

    def test_middle_words(self, tok):
        text = "w0 w1 w2 w3 w4 w5 w6"
        t = tokenize(text, tok)
        # the third through fifth words occupy characters [6, 14)
        assert select_token_indices((6, 14), t).indices == (3, 4, 5)

    def test_first_sentence_starts_after_bos(self, tok):
        text = "w0 w1. w2 w3."
        t = tokenize(text, tok)
        assert select_token_indices((0, 6), t).indices == (1, 2)

    def test_truncated_span(self):
        words = [f"w{i}" for i in range(250)]
        text = " ".join(words)
        tok = Tokenizer(words, max_len=128)
        t = tokenize(text, tok)
        start = text.index("w200")
        with pytest.raises(TruncationError):
            select_token_indices((start, start + 4), t)

    def test_span_outside_text(self, tok):
        t = tokenize("w0 w1", tok)
        with pytest.raises(ValueError):
            select_token_indices((3, 99), t)


# --- pooling and projection ---------------------------------------------------------------


class TestPooling:
    def test_single_index(self):
        x = torch.randn(5, 3, dtype=torch.float64)
        assert torch.equal(pool_mean(x, [2]), x[2])

    def test_opposite_rows_cancel(self):
        u = torch.randn(4, dtype=torch.float64)
        assert torch.equal(pool_mean(torch.stack([u, -u]), [0, 1]), torch.zeros(4, dtype=torch.float64))

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 5))
        expect = np.zeros(5)
        for i in (1, 3, 4):
            for j in range(5):
                expect[j] += x[i, j]
        np.testing.assert_allclose(pool_mean(_t(x), [1, 3, 4]).numpy(), expect / 3, rtol=0, atol=1e-12)

    def test_masked_matches_indexed(self):
        x = torch.randn(3, 6, 4, dtype=torch.float64)
        sets = [[0], [1, 2, 5], [3, 4]]
        mask = torch.zeros(3, 6)
        for b, s in enumerate(sets):
            mask[b, s] = 1
        pooled = pool_masked(x, mask)
        for b, s in enumerate(sets):
            torch.testing.assert_close(pooled[b], pool_mean(x[b], s), rtol=0, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            pool_mean(torch.zeros(3, 2), [])
        with pytest.raises(ValueError):
            pool_masked(torch.zeros(1, 3, 2), torch.zeros(1, 3))


class TestProjection:
    def test_identity_after_reset(self):
        p = Projection(6).double()
        p.reset_identity()
        v = torch.randn(4, 6, dtype=torch.float64)
        assert torch.equal(p(v), v)
        assert torch.equal(p(torch.zeros(6, dtype=torch.float64)), torch.zeros(6, dtype=torch.float64))

    def test_mlp_variant(self):
        p = Projection(6, hidden_layers=1)
        assert p(torch.randn(2, 6)).shape == (2, 6)
        with pytest.raises(ValueError):
            Projection(6, hidden_layers=2)

    def test_weight_gradient_finite_differences(self):
        torch.manual_seed(0)
        p = Projection(5).double()
        v = torch.randn(5, dtype=torch.float64)
        p(v).pow(2).sum().backward()
        analytic = p.net.weight.grad.clone()
        h = 1e-5
        numeric = torch.zeros_like(analytic)
        with torch.no_grad():
            for i in range(5):
                for j in range(5):
                    old = p.net.weight[i, j].item()
                    p.net.weight[i, j] = old + h
                    up = p(v).pow(2).sum().item()
                    p.net.weight[i, j] = old - h
                    down = p(v).pow(2).sum().item()
                    p.net.weight[i, j] = old
                    numeric[i, j] = (up - down) / (2 * h)
        rel = (analytic - numeric).abs() / torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-6)
        assert rel.max() < 1e-4


# --- similarities and losses -----------------------------------------------------------------


class TestCosine:
    def test_orthonormal_identity(self):
        a = _orthonormal(np.random.default_rng(0), 4, 6)
        np.testing.assert_allclose(cosine_sim_matrix(_t(a), _t(a)).numpy(), np.eye(4), atol=1e-12)

    def test_transpose_symmetry(self):
        a, b = torch.randn(3, 5, dtype=torch.float64), torch.randn(4, 5, dtype=torch.float64)
        torch.testing.assert_close(cosine_sim_matrix(a, b), cosine_sim_matrix(b, a).T, rtol=0, atol=1e-15)

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
        np.testing.assert_allclose(cosine_sim_matrix(_t(a), _t(b)).numpy(), cos_oracle(a, b), rtol=0, atol=1e-12)

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            cosine_sim_matrix(torch.zeros(2, 3), torch.ones(2, 3))


class TestContrastive:
    def test_two_identity_closed_form(self):
        e = torch.eye(2, dtype=torch.float64)
        expect = math.log1p(math.exp(-1 / 0.07))
        assert contrastive_loss(e, e, 0.07).item() == pytest.approx(expect, rel=0, abs=1e-12)
        assert expect == pytest.approx(6.24e-7, rel=1e-2)

    def test_uniform_rows_give_log_n(self):
        v = torch.ones(5, 3, dtype=torch.float64)
        assert contrastive_loss(v, v, 0.07).item() == pytest.approx(math.log(5), rel=0, abs=1e-12)

    def test_monotone_in_temperature(self):
        rng = np.random.default_rng(2)
        a = _orthonormal(rng, 4, 8)
        b = a + 0.3 * rng.normal(size=a.shape)
        vals = [contrastive_loss(_t(a), _t(b), tau).item() for tau in (1.0, 0.1, 0.01)]
        assert vals[0] > vals[1] > vals[2]

    def test_random_batches_match_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n, d = rng.integers(1, 9), rng.integers(2, 12)
            v, t = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            tau = rng.uniform(0.02, 1.0)
            got = contrastive_loss(_t(v), _t(t), tau).item()
            assert abs(got - info_nce_oracle(v, t, tau)) <= 1e-12

    def test_tensor_temperature_keeps_graph(self):
        tau = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
        v = torch.randn(3, 4, dtype=torch.float64)
        contrastive_loss(v, v.flip(0), tau).backward()
        assert tau.grad is not None and tau.grad != 0

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            contrastive_loss(torch.eye(2), torch.eye(2), 0.0)


class TestTSL:
    def test_zero_on_aligned_orthonormal(self):
        rng = np.random.default_rng(5)
        v, t = _orthonormal(rng, 4, 8), _orthonormal(rng, 4, 8)
        assert tsl_loss(_t(v), _t(v), _t(t), _t(t)).item() == pytest.approx(0.0, abs=1e-15)

    def test_zero_exactly_on_basis_vectors(self):
        e = torch.eye(4, dtype=torch.float64)
        assert tsl_loss(e, e, e, e).item() == 0.0

    def test_single_flipped(self):
        v = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
        t = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert tsl_loss(-v, v, t, t).item() == pytest.approx(4.0, abs=1e-12)

    def test_random_batches_match_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n, d = rng.integers(1, 9), rng.integers(2, 12)
            p, v, s, t = (rng.normal(size=(n, d)) for _ in range(4))
            got = tsl_loss(_t(p), _t(v), _t(s), _t(t)).item()
            assert abs(got - tsl_oracle(p, v, s, t)) <= 1e-12

    def test_diagonal_reduction(self):
        rng = np.random.default_rng(7)
        p, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        c = cos_oracle(p, v)
        expect = np.mean((np.diag(c) - 1) ** 2)
        got = tsl_loss(_t(p), _t(v), _t(v), _t(v), reduction="diagonal").item()
        assert got == pytest.approx(expect, abs=1e-12)

    def test_stop_grad(self):
        p = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        v = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        tsl_loss(p, v, p, v).backward()
        assert v.grad is None and p.grad is not None
        v2 = v.detach().clone().requires_grad_()
        tsl_loss(p, v2, p, v2, stop_grad=False).backward()
        assert v2.grad is not None and v2.grad.abs().sum() > 0


# --- total loss -----------------------------------------------------------------------------


def _outputs(rng, n=4, d=6, slots=1, weights=None, requires_grad=False):
    def r():
        return torch.tensor(rng.normal(size=(n, d)), requires_grad=requires_grad)

    out = BatchOutputs(v_global=r(), t_global=r())
    for k in range(slots):
        w = torch.ones(n, dtype=torch.float64) if weights is None else torch.as_tensor(weights[k])
        out.slots.append(LocalSlot(v_cls=r(), t_cls=r(), p_hat=r(), s_hat=r(), weights=w))
    return out


class TestTotalLoss:
    def test_defaults_equal_hand_sum(self):
        rng = np.random.default_rng(8)
        out = _outputs(rng)
        tau = 0.07
        res = total_loss(out, LossWeights(), tau)
        g = info_nce_oracle(out.v_global.numpy(), out.t_global.numpy(), tau)
        s = out.slots[0]
        loc = info_nce_oracle(s.v_cls.numpy(), s.t_cls.numpy(), tau)
        tsl = tsl_oracle(s.p_hat.numpy(), s.v_cls.numpy(), s.s_hat.numpy(), s.t_cls.numpy())
        assert abs(res.total.item() - (1.0 * g + 0.5 * loc + 1.0 * tsl)) <= 1e-12
        assert res.global_ == pytest.approx(g, abs=1e-12)
        assert res.local == pytest.approx(loc, abs=1e-12)
        assert res.tsl == pytest.approx(tsl, abs=1e-12)

    def test_global_only(self):
        rng = np.random.default_rng(9)
        out = _outputs(rng)
        res = total_loss(out, LossWeights(2.0, 0.0, 0.0), 0.1)
        g = contrastive_loss(out.v_global, out.t_global, 0.1)
        assert res.total.item() == pytest.approx(2.0 * g.item(), abs=1e-12)
        assert math.isfinite(res.local) and math.isfinite(res.tsl)

    def test_all_zero_weights(self):
        rng = np.random.default_rng(10)
        out = _outputs(rng, requires_grad=True)
        res = total_loss(out, LossWeights(0.0, 0.0, 0.0), 0.1)
        assert res.total.item() == 0.0
        assert not res.total.requires_grad

    def test_zero_weight_term_has_no_graph(self):
        rng = np.random.default_rng(11)
        out = _outputs(rng, requires_grad=True)
        total_loss(out, LossWeights(1.0, 0.5, 0.0), 0.1).total.backward()
        assert out.slots[0].p_hat.grad is None and out.slots[0].s_hat.grad is None

    def test_top_k_slot_weighting(self):
        rng = np.random.default_rng(12)
        w = [np.full(4, 0.5), np.full(4, 0.3), np.full(4, 0.2)]
        out = _outputs(rng, slots=3, weights=w)
        tau = 0.2
        res = total_loss(out, LossWeights(0.0, 1.0, 0.0), tau)
        expect = sum(
            wk.mean() * info_nce_oracle(s.v_cls.numpy(), s.t_cls.numpy(), tau) for wk, s in zip(w, out.slots)
        )
        assert res.total.item() == pytest.approx(expect, abs=1e-12)

    def test_no_slots_reports_nan(self):
        rng = np.random.default_rng(13)
        out = _outputs(rng, slots=0)
        res = total_loss(out, LossWeights(), 0.1)
        assert math.isnan(res.local) and math.isnan(res.tsl)
        assert res.total.item() == pytest.approx(res.global_, abs=1e-12)

    @pytest.mark.parametrize("kw", [dict(global_=-1.0), dict(local=float("nan")), dict(temperature=0.0)])
    def test_weight_validation(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)
