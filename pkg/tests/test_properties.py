import numpy as np
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lfrclab.analysis import pearson, grouping_order
from lfrclab.attacks import AttackConfig, UNBOUNDED, pgd, project_linf
from lfrclab.checkpoint import checkpoint_from_model, from_bytes, to_bytes
from lfrclab.data import augment
from lfrclab.errors import UndefinedCorrelationError
from lfrclab.lfrc import feature_similarity, lfrc_loss
from lfrclab.models import init_model, mini_resnet_spec, mlp_spec
from lfrclab.tensor import Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
MLP = init_model(mlp_spec([3, 6, 3]), 0, np.float64)
CNN = init_model(mini_resnet_spec((1, 5, 5), 3, channels=(2,)), 0, np.float64)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), eps=st.floats(0, 0.3), step=st.floats(1e-3, 0.2),
       iters=st.integers(1, 4), start=st.booleans())
def test_pgd_stays_in_ball_and_range(seed, eps, step, iters, start):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 1, 5, 5))
    y = rng.integers(0, 3, size=3)
    adv = pgd(CNN, x, y, AttackConfig(eps, step, iters, start), rng)
    assert np.max(np.abs(adv - x)) <= eps + 1e-9
    assert adv.min() >= 0 and adv.max() <= 1


@settings(max_examples=60, deadline=None)
@given(x=arrays(np.float64, (4, 3), elements=finite), seed=st.integers(0, 1000), eps=st.floats(0, 2))
def test_pgd_unbounded_ball(x, seed, eps):
    y = np.arange(4) % 3
    adv = pgd(MLP, x, y, AttackConfig(eps, eps / 2 + 1e-3, 3, True, data_range=UNBOUNDED), seed)
    assert np.max(np.abs(adv - x)) <= eps + 1e-9


@given(x=arrays(np.float64, 6, elements=st.floats(0, 1)), d=arrays(np.float64, 6, elements=finite),
       eps=st.floats(0, 1))
def test_projection_is_idempotent(x, d, eps):
    once = project_linf(x + d, x, eps)
    assert np.array_equal(project_linf(once, x, eps), once)


features = arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 6)), elements=st.floats(-5, 5))


@settings(max_examples=100)
@given(a=features)
def test_similarity_matrix_invariants(a):
    m = feature_similarity(Tensor(a))
    v = m.numpy()
    assert np.max(np.abs(v - v.T)) <= 1e-12
    assert np.all(np.abs(v) <= 1 + 1e-12)
    nonzero = np.linalg.norm(a, axis=1) > 1e-12
    np.testing.assert_allclose(np.diag(v)[nonzero], 1.0, atol=1e-12)


@given(a=features, data=st.data())
def test_loss_minimum_reached_only_on_identical_matrices(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(-5, 5)))
    ma, mb = feature_similarity(Tensor(a)), feature_similarity(Tensor(b))
    loss = lfrc_loss(ma, mb, "exp").item()
    assert loss >= 1.0
    gap = np.max(np.abs(ma.numpy() - mb.numpy()))
    # exp(|d|) rounds to 1.0 once |d| drops below machine precision
    if gap == 0.0:
        assert loss == 1.0
        assert lfrc_loss(ma, mb, "l1").item() == 0.0 and lfrc_loss(ma, mb, "l2").item() == 0.0
    elif gap > 1e-6:
        assert loss > 1.0
        assert lfrc_loss(ma, mb, "l1").item() > 0.0 and lfrc_loss(ma, mb, "l2").item() > 0.0


@given(a=features, s=st.floats(0.01, 100))
def test_loss_is_invariant_to_positive_row_scale(a, s):
    b = np.flip(a, axis=0).copy()
    l1 = lfrc_loss(feature_similarity(Tensor(a)), feature_similarity(Tensor(b))).item()
    l2 = lfrc_loss(feature_similarity(Tensor(a * s)), feature_similarity(Tensor(b * s))).item()
    if np.all(np.linalg.norm(a * min(s, 1), axis=1) > 1e-6):
        assert abs(l1 - l2) < 1e-9


@given(x=arrays(np.float64, (2, 1, 6, 6), elements=st.floats(0, 1)), seed=st.integers(0, 1000))
def test_augment_preserves_shape_and_range(x, seed):
    out = augment(x, seed)
    assert out.shape == x.shape
    assert out.min() >= x.min() and out.max() <= x.max()


@given(xs=arrays(np.float64, st.integers(2, 30), elements=finite), a=st.floats(0.1, 10), b=finite)
def test_pearson_bounded_and_affine_invariant(xs, a, b):
    ys = np.sin(xs) + 0.1 * xs
    assume(np.ptp(xs) > 1e-3 and np.ptp(ys) > 1e-3)
    try:
        r = pearson(xs, ys)
        r2 = pearson(a * xs + b, ys)
    except UndefinedCorrelationError:
        return
    assert -1.0 <= r <= 1.0
    assert abs(r - r2) < 1e-6


@given(labels=st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_grouping_order_sorts_stably(labels):
    order = grouping_order(labels)
    grouped = [labels[i] for i in order]
    assert grouped == sorted(labels)
    for lab in set(labels):
        idx = [i for i in order if labels[i] == lab]
        assert idx == sorted(idx)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6), epoch=st.integers(0, 1000), metric=finite)
def test_checkpoint_round_trip(seed, epoch, metric):
    model = init_model(mlp_spec([2, 3, 2]), seed)
    ck = checkpoint_from_model(model, epoch, "last", metric, "0" * 64, seed)
    back = from_bytes(to_bytes(ck))
    assert back.epoch == epoch and back.metric == metric
    for name, v in ck.parameters.items():
        assert np.array_equal(back.parameters[name], v)
