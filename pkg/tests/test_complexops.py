"""Stacked-complex ops: values vs scalar-loop oracles, gradients vs finite differences."""

import numpy as np
import pytest

from cadunet import autodiff as ad
from cadunet import complexops as cx
from cadunet import oracles


def t(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64))


def p(name, arr):
    return ad.Parameter(name, np.asarray(arr, dtype=np.float64))


def rand_complex(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_stack_unstack_round_trip():
    rng = np.random.default_rng(0)
    z = rand_complex(rng, (4, 3, 5))
    assert np.array_equal(cx.unstack_complex(cx.stack_complex(z)), z)
    with pytest.raises(ValueError, match="even"):
        cx.unstack_complex(np.zeros((2, 3)))


def test_stacked_tensor_rejects_odd_channels():
    with pytest.raises(ValueError, match="even"):
        cx.StackedComplexTensor(t(np.zeros((2, 2, 3))))


def test_cmul_matches_scalar_loops():
    rng = np.random.default_rng(1)
    for _ in range(50):
        shape = (3, 2, 4)
        a, b = rand_complex(rng, shape), rand_complex(rng, shape)
        got = cx.unstack_complex(cx.cmul(t(cx.stack_complex(a)), t(cx.stack_complex(b))).data)
        want = oracles.cmul_loops(a, b)
        assert np.max(np.abs(got - want)) < 1e-12


def test_cmul_shape_mismatch_reports_shapes():
    with pytest.raises(ValueError, match=r"\(2, 4\).*\(2, 6\)"):
        cx.cmul(t(np.zeros((2, 4))), t(np.zeros((2, 6))))


def test_noise_mask_identity():
    # speech mask plus noise mask applied to y must reconstruct y exactly:
    # M_noise = (1 - Mr) - j Mi, so M + M_noise = 1
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = t(rng.normal(size=(5, 4, 6)))
        y = t(rng.normal(size=(5, 4, 6)))
        s_hat = cx.cmul(y, m)
        n_hat = cx.cmul(y, cx.noise_mask(m))
        resid = np.abs(s_hat.data + n_hat.data - y.data)
        assert np.max(resid) < 1e-9


def test_cmag_values():
    z = np.array([[3.0 + 4.0j, 0.0 + 0.0j, -1.0 + 0.0j]])
    got = cx.cmag(t(cx.stack_complex(z))).data
    assert np.allclose(got, [[5.0, 0.0, 1.0]])


def test_cmatmul_matches_triple_loops_all_small_shapes():
    rng = np.random.default_rng(3)
    for m in range(1, 6):
        for k in range(1, 6):
            for n in range(1, 6):
                A = rand_complex(rng, (2, m, k))
                B = rand_complex(rng, (2, k, n))
                pa = cx.ComplexMatrixBatch(t(A.real), t(A.imag))
                pb = cx.ComplexMatrixBatch(t(B.real), t(B.imag))
                for conj in (False, True):
                    got = cx.cmatmul(pa, pb, conjugate_a=conj).to_complex()
                    want = oracles.cmatmul_loops(A, B, conj)
                    assert np.max(np.abs(got - want)) < 1e-12


def test_cmatmul_identity_associativity():
    rng = np.random.default_rng(4)
    A = rand_complex(rng, (3, 4, 4))
    I = np.broadcast_to(np.eye(4), (3, 4, 4)).copy()
    pa = cx.ComplexMatrixBatch(t(A.real), t(A.imag))
    pi = cx.ComplexMatrixBatch(t(I), t(np.zeros_like(I)))
    got = cx.cmatmul(pa, pi).to_complex()
    assert np.max(np.abs(got - A)) < 1e-12
    B = rand_complex(rng, (3, 4, 4))
    C = rand_complex(rng, (3, 4, 4))
    pb = cx.ComplexMatrixBatch(t(B.real), t(B.imag))
    pc = cx.ComplexMatrixBatch(t(C.real), t(C.imag))
    left = cx.cmatmul(cx.cmatmul(pa, pb), pc).to_complex()
    right = cx.cmatmul(pa, cx.cmatmul(pb, pc)).to_complex()
    assert np.max(np.abs(left - right)) < 1e-10


def test_mag_softmax_columns_sum_to_one_and_keep_phase():
    rng = np.random.default_rng(5)
    P = rand_complex(rng, (4, 5, 5))
    batch = cx.ComplexMatrixBatch(t(P.real), t(P.imag))
    W = cx.mag_softmax_phase_keep(batch).to_complex()
    col_mag = np.abs(W).sum(axis=1)
    assert np.max(np.abs(col_mag - 1.0)) < 1e-9
    # phases preserved: sign patterns exact, angles to atan2 rounding
    assert np.array_equal(np.sign(W.real), np.sign(P.real))
    assert np.array_equal(np.sign(W.imag), np.sign(P.imag))
    dphase = np.angle(W) - np.angle(P)
    dphase = (dphase + np.pi) % (2 * np.pi) - np.pi
    assert np.max(np.abs(dphase)) < 1e-12


def test_mag_softmax_zero_input_gives_uniform_real_weights():
    C = 5
    batch = cx.ComplexMatrixBatch(t(np.zeros((2, C, C))), t(np.zeros((2, C, C))))
    W = cx.mag_softmax_phase_keep(batch).to_complex()
    assert np.max(np.abs(W - 1.0 / C)) < 1e-12
    assert np.max(np.abs(W.imag)) == 0.0


def test_mag_softmax_matches_literal_loops():
    rng = np.random.default_rng(6)
    for _ in range(20):
        P = rand_complex(rng, (2, 4, 4))
        batch = cx.ComplexMatrixBatch(t(P.real), t(P.imag))
        got = cx.mag_softmax_phase_keep(batch).to_complex()
        want = oracles.attention_weights_loops(P)
        assert np.max(np.abs(got - want)) < 1e-12


# ---------------------------------------------------------------------------
# gradients of the hand-derived backward closures


@pytest.mark.parametrize("seed", range(20))
def test_grad_cmul_chain(seed):
    rng = np.random.default_rng(30 + seed)
    a = p("a", rng.normal(size=(3, 4, 6)))
    b = p("b", rng.normal(size=(3, 4, 6)))

    def loss():
        prod = cx.cmul(a, b)
        return ad.reduce_mean(ad.mul(prod, prod))

    assert ad.grad_check(loss, [a, b]) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_grad_complex_abs(seed):
    # keep magnitudes away from the non-differentiable origin
    rng = np.random.default_rng(60 + seed)
    raw_r, raw_i = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    r = p("r", np.sign(raw_r) * (0.2 + np.abs(raw_r)))
    i = p("i", np.sign(raw_i) * (0.2 + np.abs(raw_i)))

    def loss():
        m = cx.complex_abs(r, i)
        return ad.reduce_mean(ad.mul(m, m))

    assert ad.grad_check(loss, [r, i]) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_grad_phase_ops(seed):
    rng = np.random.default_rng(90 + seed)
    raw_r, raw_i = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    r = p("r", np.sign(raw_r) * (0.3 + np.abs(raw_r)))
    i = p("i", np.sign(raw_i) * (0.3 + np.abs(raw_i)))
    wc = ad.Tensor(rng.normal(size=(3, 4)))
    ws = ad.Tensor(rng.normal(size=(3, 4)))

    def loss():
        c = ad.mul(cx.phase_cos(r, i), wc)
        s = ad.mul(cx.phase_sin(r, i), ws)
        return ad.reduce_sum(ad.add(c, s))

    assert ad.grad_check(loss, [r, i]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_mag_softmax_full(seed):
    rng = np.random.default_rng(120 + seed)
    raw_r, raw_i = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    r = p("r", np.sign(raw_r) * (0.3 + np.abs(raw_r)))
    i = p("i", np.sign(raw_i) * (0.3 + np.abs(raw_i)))
    tr = ad.Tensor(rng.normal(size=(2, 3, 3)))
    ti = ad.Tensor(rng.normal(size=(2, 3, 3)))

    def loss():
        w = cx.mag_softmax_phase_keep(cx.ComplexMatrixBatch(r, i))
        return ad.reduce_sum(ad.add(ad.mul(w.re, tr), ad.mul(w.im, ti)))

    assert ad.grad_check(loss, [r, i]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_cmatmul(seed):
    rng = np.random.default_rng(150 + seed)
    ar = p("ar", rng.normal(size=(2, 3, 4)))
    ai = p("ai", rng.normal(size=(2, 3, 4)))
    br = p("br", rng.normal(size=(2, 4, 5)))
    bi = p("bi", rng.normal(size=(2, 4, 5)))
    tr = ad.Tensor(rng.normal(size=(2, 3, 5)))
    ti = ad.Tensor(rng.normal(size=(2, 3, 5)))

    def loss():
        out = cx.cmatmul(cx.ComplexMatrixBatch(ar, ai), cx.ComplexMatrixBatch(br, bi),
                         conjugate_a=bool(seed % 2))
        return ad.reduce_sum(ad.add(ad.mul(out.re, tr), ad.mul(out.im, ti)))

    assert ad.grad_check(loss, [ar, ai, br, bi]) < 1e-4


def test_oracle_scope_complex_passes():
    results = oracles.run_oracle_suite("complex")
    assert results and all(r.passed for r in results)


def test_oracle_scope_attention_passes():
    results = oracles.run_oracle_suite("attention")
    assert results and all(r.passed for r in results)
