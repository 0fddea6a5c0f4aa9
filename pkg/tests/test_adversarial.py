import math

import numpy as np
import pytest
import torch

from openkws.adversarial import (
    ModalityClassifier,
    adv_loss_phn,
    adv_loss_utt,
    classify_modality,
    fit_modality_probe,
    grl,
    modality_accuracy,
    total_adv_loss,
)
from openkws.batching import FlatEmbeddings
from oracles import adv_loss_oracle, grad_relative_error

TWO_LN2 = 2 * math.log(2)


def _gen(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def _clf(dim=6, hidden=8, seed=0, zero=False):
    clf = ModalityClassifier(dim=dim, hidden=hidden)
    if zero:
        with torch.no_grad():
            for p in clf.parameters():
                p.zero_()
    else:
        clf.reset_parameters(_gen(seed))
    return clf


def _rows(rng, n, d=6):
    return torch.tensor(rng.standard_normal((n, d)))


class TestGradientReversal:
    def test_forward_identity_bit_exact(self):
        x = torch.tensor([3.5, -2.0], dtype=torch.float64)
        y = grl(x)
        assert torch.equal(y, x)

    def test_backward_negates(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        grl(x).sum().backward()
        assert torch.equal(x.grad, torch.tensor([-1.0, -1.0], dtype=torch.float64))

    def test_scale(self):
        x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        grl(x, scale=0.3).sum().backward()
        assert torch.allclose(x.grad, torch.tensor([-0.3], dtype=torch.float64))

    def test_composed_derivative_sign_flip(self):
        """d/dx f(grl(x)) == -f'(x), checked against finite differences of f."""
        x0 = torch.tensor([0.37], dtype=torch.float64)

        def f(x):
            return (x ** 3 + 2.0 * x).sum()

        x = x0.clone().requires_grad_(True)
        f(grl(x)).backward()
        h = 1e-6
        fd = (float(f(x0 + h)) - float(f(x0 - h))) / (2 * h)
        assert float(x.grad) == pytest.approx(-fd, rel=1e-6)

    def test_descent_through_grl_increases_downstream_loss(self):
        """One gradient step on x through grl moves against the quadratic."""
        x = torch.tensor([0.5, -0.25], dtype=torch.float64, requires_grad=True)
        loss = (grl(x) ** 2).sum()
        loss.backward()
        with torch.no_grad():
            stepped = x - 0.01 * x.grad
        assert float((stepped ** 2).sum()) > float((x.detach() ** 2).sum())


class TestModalityClassifier:
    def test_zero_weights_uniform(self):
        clf = _clf(zero=True)
        probs = classify_modality(clf, torch.tensor(np.random.default_rng(0)
                                                    .standard_normal(6)))
        assert torch.allclose(probs, torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_probabilities_sum_to_one(self):
        clf = _clf(seed=1)
        rng = np.random.default_rng(1)
        for _ in range(20):
            probs = classify_modality(clf, torch.tensor(rng.standard_normal(6)))
            assert float(probs.sum().detach()) == pytest.approx(1.0, abs=1e-9)
            assert torch.all(probs > 0)

    def test_matches_two_layer_oracle(self):
        clf = _clf(seed=2)
        rng = np.random.default_rng(2)
        x = rng.standard_normal(6)
        got = torch.log(classify_modality(clf, torch.tensor(x)))
        want = adv_loss_oracle  # noqa: F841  (oracle module provides log-probs)
        from oracles import two_layer_log_probs
        ref = two_layer_log_probs(
            clf.fc1.weight.detach().numpy(), clf.fc1.bias.detach().numpy(),
            clf.fc2.weight.detach().numpy(), clf.fc2.bias.detach().numpy(), x)
        np.testing.assert_allclose(got.detach().numpy(), ref, atol=1e-12)


class TestAdvLosses:
    def test_uniform_classifier_anchor_phn(self):
        clf = _clf(zero=True)
        rng = np.random.default_rng(3)
        loss = adv_loss_phn(clf, _rows(rng, 5), _rows(rng, 5))
        assert float(loss.detach()) == pytest.approx(TWO_LN2, abs=1e-12)

    def test_uniform_classifier_anchor_utt(self):
        clf = _clf(zero=True)
        rng = np.random.default_rng(4)
        loss = adv_loss_utt(clf, _rows(rng, 3), _rows(rng, 3))
        assert float(loss.detach()) == pytest.approx(TWO_LN2, abs=1e-12)

    def test_perfect_classifier_approaches_zero(self):
        clf = _clf(zero=True)
        with torch.no_grad():
            clf.fc1.weight[0, 0] = 1.0   # relu passes +x[0]
            clf.fc1.weight[1, 0] = -1.0  # relu passes -x[0]
            clf.fc2.weight[0, 0] = 25.0
            clf.fc2.weight[1, 1] = 25.0
        audio = torch.tensor([[1.0, 0, 0, 0, 0, 0]], dtype=torch.float64)
        text = torch.tensor([[-1.0, 0, 0, 0, 0, 0]], dtype=torch.float64)
        loss = adv_loss_utt(clf, audio, text)
        assert 0.0 < float(loss.detach()) < 1e-9

    def test_single_pair_expansion(self):
        clf = _clf(seed=5)
        rng = np.random.default_rng(5)
        audio, text = _rows(rng, 1), _rows(rng, 1)
        p_a = float(classify_modality(clf, audio[0])[0].detach())
        p_t = float(classify_modality(clf, text[0])[1].detach())
        got = float(adv_loss_utt(clf, audio, text).detach())
        assert got == pytest.approx(-(math.log(p_a) + math.log(p_t)), rel=1e-9)

    def test_matches_row_loop_oracle(self):
        clf = _clf(seed=6)
        rng = np.random.default_rng(6)
        audio, text = _rows(rng, 3), _rows(rng, 3)
        got = float(adv_loss_phn(clf, FlatEmbeddings(audio, torch.zeros(3,
                    dtype=torch.long)), FlatEmbeddings(text, torch.zeros(3,
                    dtype=torch.long))).detach())
        want = adv_loss_oracle(
            clf.fc1.weight.detach().numpy(), clf.fc1.bias.detach().numpy(),
            clf.fc2.weight.detach().numpy(), clf.fc2.bias.detach().numpy(),
            audio.numpy(), text.numpy())
        assert got == pytest.approx(want, abs=1e-10)

    def test_total_is_sum_and_maskable(self):
        clf = _clf(seed=7)
        rng = np.random.default_rng(7)
        fa, ft = _rows(rng, 4), _rows(rng, 4)
        ua, ut = _rows(rng, 2), _rows(rng, 2)
        full = total_adv_loss(clf, fa, ft, ua, ut)
        phn = adv_loss_phn(clf, fa, ft)
        utt = adv_loss_utt(clf, ua, ut)
        assert float(full.detach()) == pytest.approx(
            float(phn.detach()) + float(utt.detach()), abs=1e-12)
        only_utt = total_adv_loss(clf, fa, ft, ua, ut, enabled_phn=False)
        assert float(only_utt.detach()) == pytest.approx(float(utt.detach()),
                                                         abs=1e-15)

    def test_both_disabled_warns_and_zero(self):
        clf = _clf(seed=8)
        with pytest.warns(UserWarning, match="disabled"):
            loss = total_adv_loss(clf, None, None, None, None,
                                  enabled_phn=False, enabled_utt=False)
        assert float(loss) == 0.0

    def test_empty_batch_rejected(self):
        clf = _clf(seed=9)
        empty = torch.zeros(0, 6, dtype=torch.float64)
        with pytest.raises(ValueError, match="empty"):
            adv_loss_utt(clf, empty, empty)

    def test_bounded_below_by_zero(self):
        rng = np.random.default_rng(10)
        for seed in range(5):
            clf = _clf(seed=20 + seed)
            loss = adv_loss_utt(clf, _rows(rng, 4), _rows(rng, 4))
            assert float(loss.detach()) >= 0.0

    def test_gradients(self):
        rng = np.random.default_rng(11)
        clf = _clf(seed=30)
        wrapper = _AdvCall(clf)
        names = [f"clf.{n}" for n, _ in clf.named_parameters()]
        for _ in range(5):
            audio, text = _rows(rng, 3), _rows(rng, 3)

            def fn(a, t, *params):
                return torch.func.functional_call(
                    wrapper, dict(zip(names, params)), (a, t))

            err = grad_relative_error(
                fn, [audio, text] + [p for _, p in clf.named_parameters()])
            assert err < 1e-4


class _AdvCall(torch.nn.Module):
    def __init__(self, clf):
        super().__init__()
        self.clf = clf

    def forward(self, audio, text):
        return adv_loss_utt(self.clf, audio, text)


class TestProbe:
    def test_separable_embeddings_high_accuracy(self):
        rng = np.random.default_rng(12)
        audio = torch.tensor(rng.standard_normal((60, 6)) + 4.0)
        text = torch.tensor(rng.standard_normal((60, 6)) - 4.0)
        acc = fit_modality_probe(audio, text, seed=0, hidden=16, steps=200)
        assert acc > 0.95

    def test_identical_distributions_near_chance(self):
        rng = np.random.default_rng(13)
        pool = rng.standard_normal((120, 6))
        audio = torch.tensor(pool[:60])
        text = torch.tensor(pool[60:])
        acc = fit_modality_probe(audio, text, seed=0, hidden=16, steps=200)
        assert abs(acc - 0.5) < 0.2

    def test_accuracy_helper(self):
        clf = _clf(zero=True)
        with torch.no_grad():
            clf.fc1.weight[0, 0] = 1.0   # fires on positive x[0] (audio)
            clf.fc1.weight[1, 0] = -1.0  # fires on negative x[0] (text)
            clf.fc2.weight[0, 0] = 5.0
            clf.fc2.weight[1, 1] = 5.0
        audio = torch.tensor([[2.0, 0, 0, 0, 0, 0]] * 3, dtype=torch.float64)
        text = torch.tensor([[-2.0, 0, 0, 0, 0, 0]] * 3, dtype=torch.float64)
        assert modality_accuracy(clf, audio, text) == 1.0
