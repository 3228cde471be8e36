import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from latentstain.autodiff import InvalidShapeError, Tensor
from latentstain.losses import (InconsistentVariantError, InvalidLabelError,
                                LossBreakdown, LossWeights, cosine_distill,
                                cross_entropy, membrane_dice, nuclei_mse,
                                total_loss)
from latentstain.model import VariantFlags

from oracles import (cosine64, cross_entropy64, dice_loss64, fd_gradient,
                     max_rel_error, mse64)


def t(arr, grad=False, dtype=np.float32):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=grad, dtype=dtype)


# -- cross entropy -----------------------------------------------------------------

def test_ce_uniform_logits_is_ln4():
    logits = t(np.zeros((3, 4)))
    out = cross_entropy(logits, np.array([0, 1, 3]))
    assert out.item() == pytest.approx(math.log(4.0), rel=1e-6)


def test_ce_large_margin_tends_to_zero():
    logits = t([[50.0, 0.0, 0.0, 0.0]])
    assert cross_entropy(logits, np.array([0])).item() < 1e-6


def test_ce_matches_high_precision_oracle():
    logits = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = cross_entropy(t(logits), np.array([0]))
    assert abs(out.item() - cross_entropy64(logits, [0])) < 1e-6


def test_ce_random_matches_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(1, 9))
        logits = rng.standard_normal((n, 4)) * 3
        labels = rng.integers(0, 4, n)
        out = cross_entropy(t(logits), labels)
        assert abs(out.item() - cross_entropy64(logits, labels)) < 1e-6


def test_ce_label_out_of_range():
    with pytest.raises(InvalidLabelError):
        cross_entropy(t(np.zeros((1, 4))), np.array([4]))
    with pytest.raises(InvalidLabelError):
        cross_entropy(t(np.zeros((1, 4))), np.array([-1]))


def test_ce_nonnegative_property(rng):
    for _ in range(30):
        logits = rng.standard_normal((4, 4)) * 10
        labels = rng.integers(0, 4, 4)
        assert cross_entropy(t(logits), labels).item() >= 0.0


# -- cosine distillation -------------------------------------------------------------

def test_cosine_identical_vectors_zero(rng):
    z = rng.standard_normal((3, 8, 2, 2))
    assert cosine_distill(t(z), t(z)).item() == pytest.approx(0.0, abs=1e-6)


def test_cosine_orthogonal_pooled_vectors_one():
    a = np.zeros((1, 2, 1, 1))
    b = np.zeros((1, 2, 1, 1))
    a[0, 0] = 1.0
    b[0, 1] = 1.0
    assert cosine_distill(t(a), t(b)).item() == pytest.approx(1.0, abs=1e-6)


def test_cosine_antipodal_two():
    z = np.random.default_rng(5).standard_normal((2, 8, 2, 2))
    assert cosine_distill(t(z), t(-z)).item() == pytest.approx(2.0, abs=1e-6)


def test_cosine_matches_oracle_on_pooled_vectors(rng):
    for _ in range(50):
        a = rng.standard_normal((3, 6, 2, 2))
        b = rng.standard_normal((3, 6, 2, 2))
        out = cosine_distill(t(a), t(b)).item()
        expected = cosine64(a.mean(axis=(2, 3)), b.mean(axis=(2, 3)))
        assert abs(out - expected) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 2 ** 31))
def test_cosine_scale_invariance(sa, sb, seed):
    z = np.random.default_rng(seed).standard_normal((2, 4, 2, 2))
    w = np.random.default_rng(seed + 1).standard_normal((2, 4, 2, 2))
    base = cosine_distill(t(z, dtype=np.float64), t(w, dtype=np.float64)).item()
    scaled = cosine_distill(t(z * sa, dtype=np.float64),
                            t(w * sb, dtype=np.float64)).item()
    assert abs(base - scaled) < 1e-5


def test_cosine_range_zero_to_two(rng):
    for _ in range(30):
        a, b = rng.standard_normal((2, 2, 5, 2, 2))
        v = cosine_distill(t(a), t(b)).item()
        assert -1e-6 <= v <= 2.0 + 1e-6


def test_cosine_spatial_flag(rng):
    a = rng.standard_normal((2, 4, 2, 2))
    pooled = cosine_distill(t(a), t(a * 2.0), spatial=False).item()
    spatial = cosine_distill(t(a), t(a * 2.0), spatial=True).item()
    assert pooled == pytest.approx(0.0, abs=1e-6)
    assert spatial == pytest.approx(0.0, abs=1e-6)


def test_cosine_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        cosine_distill(t(np.zeros((1, 2, 2, 2))), t(np.zeros((1, 3, 2, 2))))


# -- nuclei mse -----------------------------------------------------------------------

def test_mse_zero_when_equal(rng):
    k = rng.random((2, 1, 4, 4))
    assert nuclei_mse(t(k), t(k)).item() == 0.0


def test_mse_constant_offset():
    k = np.zeros((2, 1, 3, 3))
    assert nuclei_mse(t(k + 0.5), t(k)).item() == pytest.approx(0.25, rel=1e-6)


def test_mse_matches_oracle(rng):
    for _ in range(50):
        a = rng.random((2, 1, 4, 4))
        b = rng.random((2, 1, 4, 4))
        assert abs(nuclei_mse(t(a), t(b)).item() - mse64(a, b)) < 1e-6


def test_mse_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        nuclei_mse(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))))


# -- membrane dice --------------------------------------------------------------------

def test_dice_equal_binary_masks_near_zero(rng):
    m = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
    loss = membrane_dice(t(m), t(m)).item()
    total = m.sum()
    assert loss == pytest.approx(1.0 - (2 * total + 1) / (2 * total + 1), abs=1e-7)
    assert loss < 0.01


def test_dice_disjoint_masks_near_one():
    a = np.zeros((1, 1, 4, 4))
    b = np.zeros((1, 1, 4, 4))
    a[..., :2] = 1.0
    b[..., 2:] = 1.0
    assert membrane_dice(t(a), t(b)).item() == pytest.approx(1.0 - 1.0 / 17.0,
                                                             abs=1e-6)


def test_dice_half_overlap_case():
    # 4 positive target cells; prediction hits 2 of them plus 2 negatives
    gt = np.zeros((1, 1, 4, 4))
    gt[0, 0, 0, :4] = 1.0
    pred = np.zeros((1, 1, 4, 4))
    pred[0, 0, 0, :2] = 1.0
    pred[0, 0, 1, :2] = 1.0
    loss = membrane_dice(t(pred), t(gt)).item()
    expected = dice_loss64(pred, gt)          # = 1 - (2*2+1)/(4+4+1)
    assert loss == pytest.approx(expected, abs=1e-7)
    ignoring_eps = 1.0 - 2 * 2 / (4 + 4)
    assert ignoring_eps == 0.5


def test_dice_matches_oracle(rng):
    for _ in range(50):
        pred = rng.random((2, 1, 4, 4))
        gt = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        assert abs(membrane_dice(t(pred), t(gt)).item()
                   - dice_loss64(pred, gt)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_dice_bounded_and_symmetric_for_binary(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    b = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    ab = membrane_dice(t(a, dtype=np.float64), t(b, dtype=np.float64)).item()
    ba = membrane_dice(t(b, dtype=np.float64), t(a, dtype=np.float64)).item()
    assert 0.0 - 1e-9 <= ab <= 1.0 + 1e-9
    assert ab == pytest.approx(ba, abs=1e-9)


# -- gradients through every loss ------------------------------------------------------

def test_loss_gradients_pass_finite_differences(rng):
    logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
    labels = np.array([0, 2, 1])
    zh = Tensor(rng.standard_normal((2, 4, 2, 2)), requires_grad=True, dtype=np.float64)
    zr = Tensor(rng.standard_normal((2, 4, 2, 2)), dtype=np.float64)
    kh = Tensor(rng.random((2, 1, 3, 3)), requires_grad=True, dtype=np.float64)
    kg = Tensor(rng.random((2, 1, 3, 3)), dtype=np.float64)
    mh = Tensor(rng.random((2, 1, 3, 3)) * 0.8 + 0.1, requires_grad=True,
                dtype=np.float64)
    mg = Tensor((rng.random((2, 1, 3, 3)) > 0.5).astype(np.float64), dtype=np.float64)
    cases = [(lambda: cross_entropy(logits, labels), logits),
             (lambda: cosine_distill(zh, zr), zh),
             (lambda: nuclei_mse(kh, kg), kh),
             (lambda: membrane_dice(mh, mg), mh)]
    for build, tensor in cases:
        build().backward()
        numeric = fd_gradient(lambda: build().item(), tensor)
        assert max_rel_error(tensor.grad, numeric) < 1e-3
        tensor.grad = None


# -- composite -------------------------------------------------------------------------

def _scalar(v):
    return Tensor(np.asarray(v, dtype=np.float64), dtype=np.float64)


def test_total_variant_a_is_classification_only():
    total, bd = total_loss(_scalar(1.25), LossWeights(), VariantFlags())
    assert total.item() == 1.25
    assert bd == LossBreakdown(1.25, 0.0, 0.0, 0.0, 1.25)


def test_total_all_zero_components():
    flags = VariantFlags(True, True, True, True)
    total, bd = total_loss(_scalar(0.0), LossWeights(), flags, dist=_scalar(0.0),
                           nuc=_scalar(0.0), mem=_scalar(0.0))
    assert total.item() == 0.0


def test_total_published_weight_arithmetic():
    flags = VariantFlags(True, True, True, True)
    total, bd = total_loss(_scalar(1.0), LossWeights(), flags, dist=_scalar(0.5),
                           nuc=_scalar(0.1), mem=_scalar(0.2))
    assert total.item() == pytest.approx(7.5, rel=1e-9)
    assert bd.total == pytest.approx(bd.cls + 10 * bd.dist + 5 * bd.nuc + 5 * bd.mem,
                                     abs=1e-6)


def test_total_doubling_lambda_n_doubles_contribution():
    flags = VariantFlags(True, True, True, True)
    args = dict(dist=_scalar(0.0), nuc=_scalar(0.3), mem=_scalar(0.0))
    base, _ = total_loss(_scalar(0.0), LossWeights(), flags, **args)
    doubled, _ = total_loss(_scalar(0.0), LossWeights(lambda_n=10.0), flags, **args)
    assert doubled.item() == pytest.approx(2 * base.item(), rel=1e-9)


def test_total_inconsistent_flags_rejected():
    with pytest.raises(InconsistentVariantError):
        total_loss(_scalar(1.0), LossWeights(), VariantFlags(hallucination=True))
    with pytest.raises(InconsistentVariantError):
        total_loss(_scalar(1.0), LossWeights(), VariantFlags(), dist=_scalar(0.1))


def test_weights_validation():
    with pytest.raises(InvalidLabelError):
        LossWeights(lambda_d=-1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 5), st.floats(0, 2), st.floats(0, 3), st.floats(0, 1))
def test_breakdown_identity_invariant(cls, dist, nuc, mem):
    flags = VariantFlags(True, True, True, True)
    w = LossWeights()
    _, bd = total_loss(_scalar(cls), w, flags, dist=_scalar(dist),
                       nuc=_scalar(nuc), mem=_scalar(mem))
    assert abs(bd.total - (bd.cls + w.lambda_d * bd.dist + w.lambda_n * bd.nuc
                           + w.lambda_m * bd.mem)) < 1e-6
