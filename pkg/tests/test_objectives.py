"""Loss identities, decompositions, and hand-computed oracles."""

import numpy as np
import pytest

import eegmoe.tensor as T
from eegmoe.model import BackboneConfig, Reconstructor
from eegmoe.objectives import (LossWeights, base_loss, mse_loss, rmse_loss,
                               spectral_loss, total_loss,
                               weighted_cross_entropy)
from eegmoe.signal import stft


def rand_sig(c, n, seed=0):
    return np.random.default_rng(seed).normal(size=(c, n))


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(w_spec=-0.1)


def test_all_losses_zero_on_perfect_prediction():
    y = rand_sig(2, 512, 1)
    assert float(mse_loss(T.constant(y), y).values) == 0.0
    assert float(spectral_loss(T.constant(y), y).values) == 0.0
    assert float(base_loss(T.constant(y), y).values) == 0.0
    assert float(rmse_loss(T.constant(y[0]), y[0]).values) == 0.0


def test_spectral_loss_sign_flip_invariance():
    y = rand_sig(2, 512, 2)
    assert float(spectral_loss(T.neg(T.constant(y)), y).values) == 0.0
    a = rand_sig(2, 512, 3)
    l1 = float(spectral_loss(T.constant(a), y).values)
    l2 = float(spectral_loss(T.neg(T.constant(a)), y).values)
    assert l1 == pytest.approx(l2, rel=1e-12)


def test_spectral_loss_matches_composition_oracle():
    p, y = rand_sig(2, 600, 4), rand_sig(2, 600, 5)
    got = float(spectral_loss(T.constant(p), y).values)
    want = np.mean((np.abs(stft(p).coeffs) - np.abs(stft(y).coeffs)) ** 2)
    assert got == pytest.approx(want, rel=1e-9)


def test_base_loss_constant_offset_mse_term():
    y = rand_sig(1, 512, 6)
    delta = 0.37
    w = LossWeights()
    total = float(base_loss(T.constant(y + delta), y, w).values)
    spec = float(spectral_loss(T.constant(y + delta), y).values)
    # MSE term is exactly delta^2; the spectral remainder concentrates in
    # the DC mainlobe (bins 0..2 under the 3-bin-wide Hann lobe)
    assert total - w.w_spec * spec == pytest.approx(delta ** 2, rel=1e-9)
    diff = np.abs(stft(y + delta).coeffs) - np.abs(stft(y).coeffs)
    energy = (diff ** 2)
    assert energy[0, :3].sum() / energy.sum() > 0.99


def test_base_loss_zero_weight_reduces_to_mse():
    p, y = rand_sig(2, 512, 7), rand_sig(2, 512, 8)
    w = LossWeights(w_spec=0.0)
    got = float(base_loss(T.constant(p), y, w).values)
    assert got == pytest.approx(np.mean((p - y) ** 2), rel=1e-12)


def test_total_loss_zero_on_perfect_outputs():
    from eegmoe.model import BackboneOutput
    x = rand_sig(2, 512, 9)
    down1 = T.linear_resample(T.constant(x), 32).values
    down2 = T.linear_resample(T.constant(x), 128).values
    out = BackboneOutput(final_short=T.constant(x), final_long=T.constant(x),
                         interm1=T.constant(down1), interm2=T.constant(down2),
                         latent=T.constant(np.zeros((2, 8, 8))))
    assert float(total_loss(out, x).values) == 0.0


def test_total_loss_equals_four_term_decomposition():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    x = rand_sig(2, 256, 10)
    out = toy.forward(x)
    w = LossWeights()
    total = float(total_loss(out, x, w).values)
    l1 = float(base_loss(out.final_short, x, w).values)
    l2 = float(base_loss(out.final_long, x, w).values)
    d1 = T.linear_resample(T.constant(x), out.interm1.shape[-1])
    d2 = T.linear_resample(T.constant(x), out.interm2.shape[-1])
    l3 = float(base_loss(out.interm1, d1, w).values)
    l4 = float(base_loss(out.interm2, d2, w).values)
    assert abs(total - (l1 + l2 + w.alpha1 * l3 + w.alpha2 * l4)) < 1e-12


def test_total_loss_symmetric_in_final_heads():
    from eegmoe.model import BackboneOutput
    toy = Reconstructor(BackboneConfig.toy(), seed=1)
    x = rand_sig(2, 256, 11)
    out = toy.forward(x)
    swapped = BackboneOutput(final_short=out.final_long,
                             final_long=out.final_short,
                             interm1=out.interm1, interm2=out.interm2,
                             latent=out.latent)
    a = float(total_loss(out, x).values)
    b = float(total_loss(swapped, x).values)
    assert a == pytest.approx(b, rel=1e-12)


def test_spectral_term_order_of_magnitude():
    # with w_spec = 0.02 and unit-variance signals the weighted spectral
    # term sits within one order of magnitude of the MSE term
    w = LossWeights()
    ratios = []
    for seed in range(100):
        p, y = rand_sig(1, 512, 2 * seed), rand_sig(1, 512, 2 * seed + 1)
        m = float(mse_loss(T.constant(p), y).values)
        s = float(spectral_loss(T.constant(p), y).values)
        ratios.append(w.w_spec * s / m)
    mean_ratio = np.mean(ratios)
    assert 0.1 <= mean_ratio <= 10.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mse_loss(T.constant(rand_sig(2, 100)), rand_sig(2, 101))
    with pytest.raises(ValueError):
        spectral_loss(T.constant(rand_sig(2, 300)), rand_sig(1, 300))


# ---------------------------------------------------------------------------
# classification / regression losses
# ---------------------------------------------------------------------------

def test_ce_perfect_logits_vanish():
    logits = np.zeros((4, 3))
    labels = [0, 1, 2, 1]
    for i, lab in enumerate(labels):
        logits[i, lab] = 50.0
    loss = float(weighted_cross_entropy(T.constant(logits), labels).values)
    assert loss < 1e-12


def test_ce_uniform_coin_is_ln2():
    loss = weighted_cross_entropy(T.constant(np.zeros((6, 2))),
                                  [0, 1, 0, 1, 0, 1])
    assert float(loss.values) == pytest.approx(np.log(2.0), rel=1e-12)


def test_ce_weighted_hand_oracle():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(4, 2))
    labels = np.array([0, 1, 1, 0])
    weights = np.array([2.0, 1.0])
    got = float(weighted_cross_entropy(T.constant(logits), labels,
                                       weights).values)
    # scalar hand computation
    num = den = 0.0
    for i, lab in enumerate(labels):
        z = logits[i] - logits[i].max()
        logp = z[lab] - np.log(np.exp(z).sum())
        num += -weights[lab] * logp
        den += weights[lab]
    assert got == pytest.approx(num / den, rel=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        weighted_cross_entropy(T.constant(np.zeros((2, 2))), [0, 2])


def test_ce_nonpositive_weight_rejected():
    with pytest.raises(ValueError):
        weighted_cross_entropy(T.constant(np.zeros((2, 2))), [0, 1],
                               [1.0, 0.0])


def test_ce_gradient():
    labels = np.array([0, 2, 1])
    err = T.grad_check(
        lambda z: weighted_cross_entropy(z, labels, [1.0, 2.0, 0.5]),
        T.constant(np.random.default_rng(13).normal(size=(3, 3))))
    assert err < 1e-4


def test_rmse_hand_value():
    pred = T.constant(np.array([1.0, 2.0, 3.0]))
    target = np.array([0.0, 2.0, 5.0])
    got = float(rmse_loss(pred, target).values)
    assert got == pytest.approx(np.sqrt((1 + 0 + 4) / 3), rel=1e-12)


def test_pretraining_loss_gradient_toy_backbone():
    # end-to-end finite differences on a subsample of parameter coordinates
    toy = Reconstructor(BackboneConfig.toy(), seed=3)
    x = rand_sig(2, 256, 14)
    xc = rand_sig(2, 256, 15)
    start = toy.down2.w_large.values.copy()

    def f(p):
        toy.down2.w_large = p
        out = toy.forward(xc)
        return total_loss(out, x)

    err = T.grad_check(f, T.constant(start), step=1e-5,
                       max_entries=60, rng=np.random.default_rng(0))
    assert err < 1e-3
