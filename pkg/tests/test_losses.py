import numpy as np
import pytest

from dqkit.errors import (AlignmentError, ConfigurationError, DimensionError,
                          ParameterError)
from dqkit.losses import (LossBreakdown, LossWeights, cross_entropy,
                          hidden_loss, pred_loss, total_loss, zero_scalar)
from dqkit.matching import MatchingPlan
from dqkit.tensor import Tensor

from conftest import fd_gradcheck


def ref_kl(z_t, z_s, t):
    """Independent KL oracle using plain numpy on probabilities."""
    def sm(z):
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    p = sm(np.asarray(z_t, float) / t)
    q = sm(np.asarray(z_s, float))
    kl = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return float(np.mean(kl))


def test_pred_loss_identical_logits_zero():
    z = np.array([[1.0, -2.0, 0.3]])
    assert abs(pred_loss(z, Tensor(z), 1.0).item()) < 1e-15


def test_pred_loss_two_class_hand_case():
    got = pred_loss(np.array([[1.0, 0.0]]), Tensor(np.array([[0.0, 0.0]])), 1.0)
    assert np.isclose(got.item(), ref_kl([[1.0, 0.0]], [[0.0, 0.0]], 1.0))
    # closed form: ln 2 - H(sigmoid(1))
    p = 1.0 / (1.0 + np.exp(-1.0))
    expect = np.log(2) + p * np.log(p) + (1 - p) * np.log(1 - p)
    assert np.isclose(got.item(), expect)


def test_pred_loss_vanishes_at_high_temperature():
    z_t = np.array([[3.0, -1.0, 0.5]])
    z_s = Tensor(np.zeros((1, 3)))
    assert pred_loss(z_t, z_s, 1e9).item() < 1e-15


def test_pred_loss_matches_oracle_on_random_logits(rng):
    for _ in range(20):
        z_t = rng.standard_normal((4, 6))
        z_s = rng.standard_normal((4, 6))
        for t in (0.5, 1.0, 3.0):
            assert np.isclose(pred_loss(z_t, Tensor(z_s), t).item(),
                              ref_kl(z_t, z_s, t))


def test_pred_loss_nonnegative_and_zero_iff_match(rng):
    for _ in range(50):
        z_t = rng.standard_normal((2, 5))
        z_s = rng.standard_normal((2, 5))
        val = pred_loss(z_t, Tensor(z_s), 1.0).item()
        assert val >= 0.0
        if val < 1e-12:
            def sm(z):
                e = np.exp(z - z.max(axis=-1, keepdims=True))
                return e / e.sum(axis=-1, keepdims=True)
            assert np.allclose(sm(z_t), sm(z_s), atol=1e-9)


def test_pred_loss_rejects_bad_temperature():
    with pytest.raises(ParameterError):
        pred_loss(np.zeros((1, 2)), Tensor(np.zeros((1, 2))), 0.0)


def test_pred_loss_rejects_shape_mismatch():
    with pytest.raises(DimensionError):
        pred_loss(np.zeros((1, 3)), Tensor(np.zeros((1, 2))), 1.0)


@pytest.mark.parametrize("trial", range(10))
def test_pred_loss_gradcheck(trial):
    rng = np.random.default_rng(trial)
    z_t = rng.standard_normal((3, 5))
    z_s = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    assert fd_gradcheck(lambda xs: pred_loss(z_t, xs[0], 2.0), [z_s]) < 1e-4
    assert fd_gradcheck(lambda xs: pred_loss(z_t, xs[0], 2.0, symmetric=True),
                        [z_s]) < 1e-4


# -- hidden loss ---------------------------------------------------------------

def _plan(f, n):
    return MatchingPlan(f=f, strategy="STATIC", cost_matrix=np.zeros((len(f), n)))


def test_hidden_loss_zero_when_matched(rng):
    w_a = Tensor(rng.standard_normal((4, 3)))
    teacher = [rng.standard_normal((5, 4)) for _ in range(3)]
    student = [Tensor(teacher[1] @ w_a.data), Tensor(teacher[2] @ w_a.data)]
    assert hidden_loss(student, teacher, _plan((2, 3), 3), w_a).item() < 1e-28


def test_hidden_loss_zero_lambda_annihilates(rng):
    w_a = Tensor(rng.standard_normal((4, 3)))
    teacher = [rng.standard_normal((5, 4)) for _ in range(2)]
    student = [Tensor(rng.standard_normal((5, 3))) for _ in range(2)]
    assert hidden_loss(student, teacher, _plan((1, 2), 2), w_a,
                       lam=(0.0, 0.0)).item() == 0.0


def test_hidden_loss_scalar_hand_case():
    # scalar "hiddens": student (3, 5), projected teacher (1, 2), lambda (2, 1)
    w_a = Tensor(np.array([[1.0]]))
    teacher = [np.array([[1.0]]), np.array([[2.0]])]
    student = [Tensor(np.array([[3.0]])), Tensor(np.array([[5.0]]))]
    got = hidden_loss(student, teacher, _plan((1, 2), 2), w_a, lam=(2.0, 1.0))
    # (1/2) * (2*(3-1)^2 + 1*(5-2)^2) = (8 + 9) / 2
    assert np.isclose(got.item(), 8.5)


def test_hidden_loss_plan_depth_mismatch(rng):
    w_a = Tensor(np.eye(2))
    teacher = [np.zeros((2, 2))] * 2
    student = [Tensor(np.zeros((2, 2)))] * 2
    with pytest.raises(ConfigurationError):
        hidden_loss(student, teacher, _plan((1,), 2), w_a)


def test_hidden_loss_permutation_invariant(rng):
    w_a = Tensor(rng.standard_normal((3, 3)))
    teacher = [rng.standard_normal((4, 3)) for _ in range(4)]
    student = [Tensor(rng.standard_normal((4, 3))) for _ in range(3)]
    lam = (0.3, 1.5, 0.7)
    f = (2, 1, 4)
    base = hidden_loss(student, teacher, _plan(f, 4), w_a, lam).item()
    perm = [2, 0, 1]
    got = hidden_loss([student[i] for i in perm], teacher,
                      _plan(tuple(f[i] for i in perm), 4), w_a,
                      tuple(lam[i] for i in perm)).item()
    assert np.isclose(base, got)


@pytest.mark.parametrize("trial", range(10))
def test_hidden_loss_gradcheck(trial):
    rng = np.random.default_rng(trial)
    teacher = [rng.standard_normal((3, 4)) for _ in range(3)]
    student = [Tensor(rng.standard_normal((3, 2)), requires_grad=True)
               for _ in range(2)]
    w_a = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    f = lambda xs: hidden_loss(xs[:2], teacher, _plan((1, 3), 3), xs[2], (1.0, 2.0))
    assert fd_gradcheck(f, student + [w_a]) < 1e-4


# -- cross entropy and total loss -----------------------------------------------

def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 4)))
    assert np.isclose(cross_entropy(logits, [0, 3]).item(), np.log(4))


def test_cross_entropy_masks_padding(rng):
    logits = Tensor(rng.standard_normal((4, 5)))
    full = cross_entropy(logits, [1, 2, 0, 0], pad_id=0).item()
    sub = cross_entropy(Tensor(logits.data[:2]), [1, 2]).item()
    assert np.isclose(full, sub)


def test_cross_entropy_alignment_error():
    with pytest.raises(AlignmentError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 1, 2])


def test_total_loss_weight_annihilation():
    ce = Tensor(4.0)
    kd_pred, kd_hidn, quan = Tensor(1.5), Tensor(0.5), Tensor(3.0)
    _, b = total_loss(kd_pred, kd_hidn, quan, ce, LossWeights(alpha=0.0, gamma=0.0))
    assert b.l_model == b.l_ce == 4.0
    _, b = total_loss(kd_pred, kd_hidn, quan, ce, LossWeights(alpha=1.0, gamma=0.0))
    assert b.l_model == b.l_kd == 2.0


def test_total_loss_hand_case_with_defaults():
    # l_kd = 2, l_quan = 3, l_ce = 4 at alpha 0.5, gamma 1.0
    _, b = total_loss(Tensor(2.0), zero_scalar(), Tensor(3.0), Tensor(4.0),
                      LossWeights())
    assert b.l_model == 0.5 * 2 + 1.0 * 3 + 0.5 * 4 == 6.0
    b.check_identities(LossWeights())


def test_identities_hold_on_random_components(rng):
    for _ in range(50):
        w = LossWeights(alpha=float(rng.random()), gamma=float(rng.random() * 3))
        parts = [Tensor(float(rng.random() * 10)) for _ in range(4)]
        _, b = total_loss(*parts, w)
        b.check_identities(w, tol=1e-12)


def test_loss_weights_defaults_match_training_recipe():
    w = LossWeights()
    assert w.alpha == 0.5 and w.gamma == 1.0 and w.temperature == 1.0
    assert w.lam_for(3) == (1.0, 1.0, 1.0)


def test_loss_weights_validation():
    with pytest.raises(ParameterError):
        LossWeights(alpha=1.5)
    with pytest.raises(ParameterError):
        LossWeights(gamma=-0.1)
    with pytest.raises(ParameterError):
        LossWeights(temperature=0.0)
    with pytest.raises(ConfigurationError):
        LossWeights(lam=(1.0,)).lam_for(2)
