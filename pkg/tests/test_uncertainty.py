"""Estimator statistics against closed forms on shared perturbation draws.

The linear families admit exact covariance identities, so most tolerances
here are float-level; Monte-Carlo noise only enters where a fresh noise
stream is genuinely involved.
"""

import json

import numpy as np
import pytest

from regcert.geometry import TranslationTransform, grid_points
from regcert.perturb import PerturbSpec, sample_perturbation
from regcert.register import AffineSsdBackend, ErrorModel, OracleBackend
from regcert.uncertainty import (
    LEMMA_KINDS,
    REGIME_STRENGTH_MAX,
    closed_form_cov_affine,
    decompose_cov,
    estimate_uncertainty,
    mc_relative_bound,
    relative_frobenius,
    tri_to_matrices,
    verify_lemma,
)
from regcert.uncertainty import _linearized_cov
from regcert.volume import Volume3, make_phantom, warp

PHI = TranslationTransform((1.5, -0.75, 0.5))


def blank(shape):
    return Volume3(np.zeros(shape, dtype=np.float32))


def spec_for(family, shape=(8, 8, 8), count=20, **kw):
    return PerturbSpec(family=family, shape=shape, seed=0, count=count, **kw)


# ---------------------------------------------------------------------------
# packed symmetric components


def test_tri_to_matrices_round_trip():
    tri = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    m = tri_to_matrices(tri)
    assert m.shape == (3, 3)
    assert np.array_equal(m, [[1, 2, 3], [2, 4, 5], [3, 5, 6]])
    assert np.array_equal(m, m.T)


# ---------------------------------------------------------------------------
# estimator determinism and reductions


def test_estimate_bitwise_deterministic_and_thread_invariant():
    shape = (8, 8, 8)
    backend = OracleBackend(PHI, ErrorModel.isotropic(0.2, seed=4))
    spec = spec_for("translation", shape)
    a = estimate_uncertainty(backend, blank(shape), blank(shape), spec)
    b = estimate_uncertainty(backend, blank(shape), blank(shape), spec)
    c = estimate_uncertainty(backend, blank(shape), blank(shape), spec, threads=3)
    assert np.array_equal(a.cov, b.cov)
    assert np.array_equal(a.cov, c.cov)
    assert np.array_equal(a.uncertainty.data, c.uncertainty.data)
    assert np.array_equal(a.mean.displacement, c.mean.displacement)
    assert a.n_samples == spec.count
    assert a.divisor == "n"
    assert a.backend_name == "oracle"
    assert a.wall_time_s > 0


def test_unbiased_divisor_rescales_covariance():
    shape = (6, 6, 6)
    backend = OracleBackend(PHI, ErrorModel.isotropic(0.3, seed=1))
    spec = spec_for("translation", shape, count=10)
    biased = estimate_uncertainty(backend, blank(shape), blank(shape), spec)
    unbiased = estimate_uncertainty(backend, blank(shape), blank(shape), spec, unbiased=True)
    assert unbiased.divisor == "n-1"
    assert np.allclose(unbiased.cov, biased.cov * (10.0 / 9.0), rtol=1e-12, atol=1e-300)


def test_translation_perturbations_only_shift_mean():
    # For the oracle with zero noise the back-mapped samples all equal
    # phi + dust from one add/subtract cancellation; the spread stays at
    # float-dust scale and the mean recovers phi.
    shape = (8, 8, 8)
    backend = OracleBackend(PHI, ErrorModel())
    est = estimate_uncertainty(backend, blank(shape), blank(shape), spec_for("translation", shape))
    assert float(est.uncertainty.data.max()) < 1e-12
    assert np.max(np.abs(est.mean.displacement - PHI.offset)) < 1e-12


def test_collapsed_ranges_give_exactly_zero_uncertainty():
    shape = (8, 8, 8)
    collapsed = dict(translation_fraction=0.0, scale_range=(1.0, 1.0), shear_max=0.0)
    spec = spec_for("translation", shape, count=5, **collapsed)
    backend = OracleBackend(PHI, ErrorModel())
    est = estimate_uncertainty(backend, blank(shape), blank(shape), spec)
    assert np.array_equal(est.uncertainty.data, np.zeros(shape + (1,), dtype=np.float32))
    assert np.array_equal(est.cov, np.zeros(shape + (6,)))


def test_collapsed_ranges_zero_even_for_real_solver():
    # Identical perturbed sources -> identical registrations -> zero spread,
    # without any assumption about solver quality.
    shape = (16, 16, 16)
    src = make_phantom(shape, "blobs", seed=0)
    tgt = warp(src, TranslationTransform((1.0, 0.0, 0.0)))
    spec = PerturbSpec(family="translation", shape=shape, seed=0, count=4,
                       translation_fraction=0.0)
    est = estimate_uncertainty(AffineSsdBackend(levels=2, iters=4, step=0.5), src, tgt, spec)
    assert float(np.abs(est.uncertainty.data).max()) == 0.0


def test_covariance_is_positive_semidefinite():
    shape = (8, 8, 8)
    backend = OracleBackend(PHI, ErrorModel.isotropic(0.25, mu=(0.3, 0.1, 0.0), seed=2))
    est = estimate_uncertainty(backend, blank(shape), blank(shape), spec_for("affine", shape, count=40))
    w = np.linalg.eigvalsh(est.cov_matrices().reshape(-1, 3, 3))
    assert w.min() >= -1e-9 * max(w.max(), 1.0)


def test_backend_failure_reports_sample_index():
    class Failing(AffineSsdBackend):
        def register(self, source, target, perturbation=None, nonce=0):
            if nonce == 3:
                raise ValueError("synthetic failure")
            return super().register(source, target)

    shape = (16, 16, 16)
    src = make_phantom(shape, "blobs", seed=0)
    spec = PerturbSpec(family="translation", shape=shape, seed=0, count=6)
    with pytest.raises(ValueError, match="sample 3"):
        estimate_uncertainty(Failing(levels=1, iters=2, step=0.5), src, src, spec)


def test_threads_validation():
    shape = (6, 6, 6)
    with pytest.raises(ValueError, match="threads"):
        estimate_uncertainty(OracleBackend(PHI, ErrorModel()), blank(shape), blank(shape),
                             spec_for("translation", shape), threads=0)


# ---------------------------------------------------------------------------
# closed-form decomposition


def test_decompose_requires_oracle():
    with pytest.raises(TypeError, match="analytic error model"):
        decompose_cov(AffineSsdBackend(), spec_for("translation"), 5)


def test_decompose_sample_count_validation():
    backend = OracleBackend(PHI, ErrorModel())
    with pytest.raises(ValueError):
        decompose_cov(backend, spec_for("translation", count=5), 0)
    with pytest.raises(ValueError, match="exceeds"):
        decompose_cov(backend, spec_for("translation", count=5), 6)


def test_translation_intrinsic_is_model_covariance():
    # J = I for translations, so the intrinsic term is Sigma at every voxel
    # and a constant mu contributes no jitter at all.
    sigma = np.diag([0.04, 0.09, 0.16])
    backend = OracleBackend(PHI, ErrorModel(mu=(1.0, 0.0, 0.0), sigma=sigma))
    dec = decompose_cov(backend, spec_for("translation", (6, 6, 6), count=12), 12)
    want = np.array([0.04, 0.0, 0.0, 0.09, 0.0, 0.16])
    assert np.max(np.abs(dec.intrinsic - want)) < 1e-15
    assert np.array_equal(dec.jitter, np.zeros((6, 6, 6, 6)))
    assert dec.max_inversion_residual == 0.0


def test_scaled_mean_jitter_matches_hand_computation():
    shape = (6, 6, 6)
    spec = spec_for("translation", shape, count=30)
    model = ErrorModel(mu=(1.0, 0.0, 0.0), sigma=0.0, mu_scale="offset_norm")
    backend = OracleBackend(PHI, model)
    dec = decompose_cov(backend, spec, 30)
    norms = np.array([
        np.linalg.norm(sample_perturbation(spec, m).offset) for m in range(30)
    ])
    var = norms.var()  # divisor K, same convention
    assert np.max(np.abs(dec.jitter[..., 0] - var)) < 1e-12
    assert np.max(np.abs(dec.jitter[..., 1:])) < 1e-12
    assert np.array_equal(dec.intrinsic, np.zeros(shape + (6,)))


def test_estimator_matches_decomposition_without_noise():
    # Sigma = 0 makes the estimator's spread purely the jitter of the
    # Jacobian-mapped bias; both sides see the same draws, so agreement is
    # float-exact, not statistical.
    shape = (8, 8, 8)
    spec = spec_for("scale", shape, count=25)
    model = ErrorModel(mu=(1.0, 0.0, 0.0), sigma=0.0, mu_scale="mean_diag")
    backend = OracleBackend(PHI, model)
    est = estimate_uncertainty(backend, blank(shape), blank(shape), spec)
    dec = decompose_cov(backend, spec, 25)
    assert np.array_equal(dec.intrinsic, np.zeros(shape + (6,)))
    assert np.max(np.abs(est.cov - dec.total)) < 1e-12


def test_closed_form_affine_worked_example():
    from regcert.geometry import AffineTransform

    samples = [
        AffineTransform(np.eye(3), (0.0, 0.0, 0.0)),
        AffineTransform(np.diag([2.0, 1.0, 1.0]), (0.0, 0.0, 0.0)),
    ]
    model = ErrorModel(mu=(1.0, 0.0, 0.0), sigma=1.0)
    intr, jit = closed_form_cov_affine(samples, model, (3.0, 3.0, 3.0))
    assert np.allclose(intr, np.diag([2.5, 1.0, 1.0]), atol=1e-15)
    assert np.allclose(jit, np.diag([0.25, 0.0, 0.0]), atol=1e-15)


def test_closed_form_matches_decomposition_at_a_voxel():
    shape = (8, 8, 8)
    spec = spec_for("affine", shape, count=15)
    model = ErrorModel(mu=(0.5, 0.2, 0.0), sigma=0.3)
    backend = OracleBackend(PHI, model)
    dec = decompose_cov(backend, spec, 15)
    samples = [sample_perturbation(spec, m) for m in range(15)]
    y = (6.0, 6.0, 6.0)
    intr, jit = closed_form_cov_affine(samples, model, y)
    vox = (6, 6, 6)
    assert np.max(np.abs(tri_to_matrices(dec.intrinsic[vox]) - intr)) < 1e-12
    assert np.max(np.abs(tri_to_matrices(dec.jitter[vox]) - jit)) < 1e-12


def test_linearized_model_is_exact_for_translations():
    # Common-random-numbers check: for translations the first-order model
    # is the identity map of the noise, so it reproduces the empirical
    # covariance to float precision on shared draws.
    shape = (6, 6, 6)
    spec = spec_for("translation", shape, count=40)
    backend = OracleBackend(PHI, ErrorModel.isotropic(0.2, mu=(0.3, 0.0, 0.0), seed=7))
    est = estimate_uncertainty(backend, blank(shape), blank(shape), spec)
    lin, residual = _linearized_cov(backend, spec)
    assert residual == 0.0
    assert np.max(np.abs(est.cov - lin)) < 1e-12


# ---------------------------------------------------------------------------
# relative error helpers


def test_mc_relative_bound_values():
    assert mc_relative_bound(400) == pytest.approx(0.125)
    assert mc_relative_bound(2000) == pytest.approx(2.5 / np.sqrt(2000.0))


def test_relative_frobenius_counts_off_diagonals_twice():
    emp = np.array([[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]])
    closed = np.array([[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]])
    rel = relative_frobenius(emp, closed)
    assert rel[0] == pytest.approx(np.sqrt(2.0 / 3.0))


def test_relative_frobenius_zero_where_both_vanish():
    z = np.zeros((4, 6))
    z[0, 0] = 1.0
    rel = relative_frobenius(z.copy(), z.copy())
    assert np.array_equal(rel, np.zeros(4))


# ---------------------------------------------------------------------------
# lemma verification harness


def test_verify_lemma_translation_is_exact_comparison():
    rep = verify_lemma(
        "translation",
        ErrorModel(mu=(0.5, 0.0, 0.0), sigma=0.5, seed=0),
        PHI,
        (8, 8, 8),
        n_mc=150,
    )
    assert rep.passed
    assert rep.within_tolerance
    assert not rep.regime_violation
    assert rep.note == "exact (no linearization)"
    assert rep.strength is None
    assert rep.mc_bound == pytest.approx(2.5 / np.sqrt(150.0))
    assert rep.median_rel_error <= rep.tolerance


def test_verify_lemma_deform_within_regime():
    rep = verify_lemma(
        "deform",
        ErrorModel.isotropic(0.2, mu=(0.3, 0.0, 0.0), seed=7),
        PHI,
        (10, 10, 10),
        n_mc=60,
        strength=0.02,
    )
    assert rep.passed and not rep.regime_violation
    assert rep.note == "first-order comparison within regime"
    # Shared noise streams cancel the Monte-Carlo error; what is left is the
    # Taylor remainder, far below the fresh-draw noise floor.
    assert rep.median_rel_error < 0.05
    assert rep.max_inversion_residual < 1e-2


def test_verify_lemma_reports_regime_violation():
    rep = verify_lemma(
        "deform",
        ErrorModel.isotropic(0.2, mu=(0.3, 0.0, 0.0), seed=7),
        PHI,
        (10, 10, 10),
        n_mc=40,
        strength=0.3,
    )
    assert rep.regime_violation
    assert rep.passed
    assert "regime violation" in rep.note
    assert rep.strength == 0.3
    assert REGIME_STRENGTH_MAX < 0.3


def test_verify_lemma_unknown_kind():
    with pytest.raises(ValueError, match="unknown lemma kind"):
        verify_lemma("spline", ErrorModel(), PHI, (8, 8, 8))
    assert set(LEMMA_KINDS) == {"translation", "scale", "shear", "affine", "deform"}


def test_lemma_report_serializes_to_json():
    rep = verify_lemma("translation", ErrorModel(mu=(0.5, 0.0, 0.0), sigma=0.5), PHI,
                       (6, 6, 6), n_mc=50)
    d = rep.to_dict()
    text = json.dumps(d)
    assert "rel_error" not in d
    for key in ("kind", "median_rel_error", "mc_bound", "tolerance", "passed", "note"):
        assert key in d
    assert json.loads(text)["kind"] == "translation"
