import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import stpsm.psm_opt as psm
from stpsm.core import Cohort, EnsembleMatrix, generalized_procrustes
from stpsm.errors import DegenerateConfiguration, InvalidSpec
from stpsm.psm_opt import (Mode, OptimizerConfig, anneal_alpha, correspondence_gradient,
                           initialize_particles, optimize, parzen_entropy,
                           propagate_by_projection, sampling_entropy, sampling_gradient,
                           shape_entropy, split_particles, write_trace_csv)
from stpsm.surfaces import (EllipsoidDomain, PlaneDomain, SynthSpec, fibonacci_sphere,
                            generate_synthetic_cohort)

SMALL = dict(target_particles=16, iterations_per_split=30)


def nn_cv(points):
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    return nn.std() / nn.mean()


# ---------------------------------------------------------------------------
# Entropy and its gradient

def test_entropy_of_identical_shapes_is_floor():
    y = np.zeros((12, 4))
    assert shape_entropy(y, 0.1) == pytest.approx(0.5 * 3 * math.log(0.1), rel=1e-14)


def test_entropy_of_two_member_ensemble():
    v = np.random.default_rng(0).normal(size=9)
    v /= np.linalg.norm(v)
    ens = EnsembleMatrix.from_members(np.stack([v, -v]))
    assert shape_entropy(ens, 1e-12) == pytest.approx(0.5 * math.log(2.0), abs=1e-10)
    y = np.stack([v, -v], axis=1)
    assert shape_entropy(y, 1e-12) == pytest.approx(0.5 * math.log(2.0), abs=1e-10)


def test_gradient_closed_form_for_orthogonal_columns():
    y = np.zeros((6, 3))
    y[0, 0] = y[2, 1] = y[5, 2] = 2.0
    np.testing.assert_allclose(correspondence_gradient(y, 0.1), y / (4.0 + 0.1), rtol=1e-14)


def _fd_gradient(members, alpha, h=1e-6):
    def entropy(m):
        return shape_entropy(EnsembleMatrix.from_members(m), alpha)

    grad = np.zeros_like(members)
    for idx in np.ndindex(*members.shape):
        up, down = members.copy(), members.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (entropy(up) - entropy(down)) / (2 * h)
    return grad


@given(st.integers(0, 2**31 - 1), st.sampled_from([3, 5]))
def test_gradient_matches_finite_differences(seed, k):
    rng = np.random.default_rng(seed)
    members = rng.normal(size=(k, 30))
    analytic = correspondence_gradient(EnsembleMatrix.from_members(members), 0.1).T
    numeric = _fd_gradient(members, 0.1)
    assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(numeric)


def test_random_12x3_gradient():
    rng = np.random.default_rng(42)
    members = rng.normal(size=(3, 12))
    analytic = correspondence_gradient(EnsembleMatrix.from_members(members), 0.1).T
    numeric = _fd_gradient(members, 0.1)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------------------
# Sampling term

def test_two_particles_on_a_plane_repel_symmetrically():
    pts = np.array([[0.0, 0.0, 0.0], [0.3, 0.4, 0.0]])
    normals = np.tile([0.0, 0.0, 1.0], (2, 1))
    up = sampling_gradient(pts, normals=normals, diag=2.0)
    np.testing.assert_allclose(up[0], -up[1], atol=1e-15)
    joint = (pts[1] - pts[0]) / 0.5
    assert up[1] @ joint > 0
    np.testing.assert_allclose(np.cross(up[1], joint), 0.0, atol=1e-15)


def test_regular_simplex_is_a_fixed_point():
    tetra = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)
    assert np.abs(sampling_gradient(tetra, normals=tetra)).max() < 1e-10


def test_perturbed_particle_escapes_its_neighbour():
    pts = fibonacci_sphere(8)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    j = int(d[0].argmin())
    pts[0] = pts[0] + 0.6 * (pts[j] - pts[0])
    pts[0] /= np.linalg.norm(pts[0])
    up, sigma = sampling_gradient(pts, normals=pts, diag=2 * math.sqrt(3), return_sigma=True)
    escape = pts[0] - pts[j]
    assert up[0] @ escape > 0
    assert np.all(np.linalg.norm(up, axis=1) <= sigma + 1e-15)
    # Brute-force entropy differences along the update agree in sign.
    h = 1e-5
    for entropy in (lambda p: sampling_entropy(p, sigma=sigma),
                    lambda p: parzen_entropy(p, diag=2 * math.sqrt(3))):
        moved = pts.copy()
        moved[0] += h * up[0]
        back = pts.copy()
        back[0] -= h * up[0]
        assert entropy(moved) > entropy(back)


@given(st.integers(0, 2**31 - 1))
def test_repulsion_gradient_is_exact(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(7, 3))
    sigma = rng.uniform(0.5, 1.5, size=7)
    _, grad, _ = psm._repulsion(pts[None], sigma[None])
    h = 1e-6
    num = np.zeros_like(pts)
    for idx in np.ndindex(*pts.shape):
        up, down = pts.copy(), pts.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (sampling_entropy(up, sigma=sigma) - sampling_entropy(down, sigma=sigma)) / (2 * h)
    np.testing.assert_allclose(grad[0], num, atol=1e-7)


def test_sampling_degenerate():
    with pytest.raises(DegenerateConfiguration):
        sampling_gradient(np.zeros((3, 3)))
    with pytest.raises(DegenerateConfiguration):
        sampling_gradient(np.zeros((1, 3)))


# ---------------------------------------------------------------------------
# Annealing, splitting, configuration

def test_anneal_alpha_endpoints_and_midpoint():
    cfg = OptimizerConfig()
    assert anneal_alpha(cfg, 0, 1000) == 100.0
    assert anneal_alpha(cfg, 1000, 1000) == 0.1
    assert anneal_alpha(cfg, 500, 1000) == pytest.approx(math.sqrt(10.0), rel=1e-12)
    lin = OptimizerConfig(alpha_schedule="linear")
    assert anneal_alpha(lin, 500, 1000) == pytest.approx(50.05)


def test_config_defaults_and_validation():
    cfg = OptimizerConfig()
    assert (cfg.target_particles, cfg.alpha_start, cfg.alpha_end) == (256, 100.0, 0.1)
    assert cfg.n_levels == 9
    with pytest.raises(InvalidSpec):
        OptimizerConfig(target_particles=100)
    with pytest.raises(InvalidSpec):
        OptimizerConfig(alpha_start=0.01)
    with pytest.raises(InvalidSpec):
        OptimizerConfig(step_decay=0.0)


def test_split_from_one_particle():
    dom = EllipsoidDomain.sphere(1.0)
    pdm = Cohort(initialize_particles([[dom]]))
    out = split_particles(pdm, 0.01, seed=4, domains=[[dom]])
    assert out.n_points == 2
    dist = np.linalg.norm(out.points[0, 0] - pdm.points[0, 0, 0], axis=1)
    assert np.all(dist <= 0.01 + dom.surface_tol)
    again = split_particles(pdm, 0.01, seed=4, domains=[[dom]])
    np.testing.assert_array_equal(out.points, again.points)


def test_split_to_256_stays_on_surface():
    spec = SynthSpec(n_subjects=2, n_timepoints=2, n_points=128, radii_mean=(30.0, 22.0, 15.0),
                     radii_std=(2.0, 1.5, 1.0))
    syn = generate_synthetic_cohort(spec)
    out = split_particles(Cohort(syn.truth), 0.3, seed=1, domains=syn.domains)
    assert out.n_points == 256
    for n in range(2):
        for t in range(2):
            dom = syn.domains[n][t]
            assert np.abs(dom.evaluate(out.points[n, t])[0]).max() <= dom.surface_tol


def test_split_preserves_correspondence_at_birth():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2, 3, 4, 3))
    out = split_particles(Cohort(pts), 0.05, seed=8)
    delta = out.points[:, :, 0::2] - pts
    np.testing.assert_allclose(delta, np.broadcast_to(delta[:1, :1], delta.shape), atol=1e-15)
    np.testing.assert_allclose(out.points[:, :, 1::2], pts - delta, atol=1e-15)
    with pytest.raises(InvalidSpec):
        split_particles(Cohort(pts[:, :, :3]), 0.05, seed=8)


# ---------------------------------------------------------------------------
# Optimizer behaviour

def test_single_sphere_is_sampled_uniformly():
    cfg = OptimizerConfig(target_particles=64, iterations_per_split=100, mode="cross_sectional")
    res = optimize([[EllipsoidDomain.sphere(1.0)]], cfg)
    assert res.pdm.points.shape == (1, 1, 64, 3)
    assert nn_cv(res.pdm.points[0, 0]) < 0.15
    assert res.trace[-1].inter_subject_entropy_sum == 0.0


def test_identical_static_subjects_agree():
    syn = generate_synthetic_cohort(SynthSpec(n_subjects=3, n_timepoints=2, radii_std=(0, 0, 0),
                                              amplitude=(0, 0, 0), n_points=8))
    res = optimize(syn.domains, OptimizerConfig(**SMALL))
    pts = res.pdm.points.reshape(6, 16, 3)
    aligned = generalized_procrustes(pts).aligned
    diag = syn.domains[0][0].extent_diagonal
    spread = np.linalg.norm(aligned - aligned.mean(axis=0), axis=-1).max()
    assert spread <= 0.02 * diag


def _small_cohort(**kw):
    spec = dict(n_subjects=3, n_timepoints=4, n_points=8, seed=2)
    spec.update(kw)
    return generate_synthetic_cohort(SynthSpec(**spec))


def test_trace_property_and_surface_adherence(monkeypatch):
    syn = _small_cohort()
    grid = psm._DomainGrid(psm._flat_domains(syn.domains))
    worst = []
    original = psm._iterate

    def checked(problem, state, config, dump_dir):
        original(problem, state, config, dump_dir)
        n, t, m, d = state.x.shape
        v, _ = grid.evaluate(state.x.reshape(n * t, m, d))
        worst.append(float((np.abs(v) / grid.tol[:, None]).max()))

    monkeypatch.setattr(psm, "_iterate", checked)
    cfg = OptimizerConfig(**SMALL)
    res = optimize(syn.domains, cfg)
    assert max(worst) <= 1.0
    last = [r for r in res.trace if r.alpha == cfg.alpha_end]
    tail = last[-len(last) // 4:]
    for prev, cur in zip(tail, tail[1:]):
        assert cur.total <= prev.total or cur.halved
    for r in res.trace:
        assert r.total == pytest.approx(r.alpha * (r.inter_subject_entropy_sum + r.intra_subject_entropy_sum)
                                        - r.sampling_entropy_sum, rel=1e-12, abs=1e-9)


def test_mode_reduction_with_one_time_point():
    syn = _small_cohort(n_timepoints=1)
    a = optimize(syn.domains, OptimizerConfig(**SMALL, mode="spatiotemporal"))
    b = optimize(syn.domains, OptimizerConfig(**SMALL, mode="cross_sectional"))
    np.testing.assert_array_equal(a.pdm.points, b.pdm.points)
    for ra, rb in zip(a.trace, b.trace):
        # Single-member intra-subject ensembles contribute zero entropy here.
        assert ra.intra_subject_entropy_sum == 0.0
        assert ra.total == pytest.approx(rb.total, abs=1e-12)


def test_cross_sectional_uses_first_frame_only():
    syn = _small_cohort()
    res = optimize(syn.domains, OptimizerConfig(**SMALL, mode=Mode.CROSS_SECTIONAL))
    assert res.pdm.n_times == 1
    for n in range(3):
        dom = syn.domains[n][0]
        assert np.abs(dom.evaluate(res.pdm.points[n, 0])[0]).max() <= dom.surface_tol


def test_disentanglement_with_identical_subjects():
    syn = _small_cohort(radii_std=(0, 0, 0))
    cfg = OptimizerConfig(**SMALL)
    res = optimize(syn.domains, cfg)
    last = res.trace[-1]
    n, t = 3, 4
    floor = t * 0.5 * (n - 1) * math.log(cfg.alpha_end)
    assert last.inter_subject_entropy_sum == pytest.approx(floor, abs=1e-9)
    assert last.intra_subject_entropy_sum > n * 0.5 * (t - 1) * math.log(cfg.alpha_end) + 1.0


def test_resume_matches_uninterrupted_run(tmp_path):
    syn = _small_cohort()
    cfg = OptimizerConfig(target_particles=8, iterations_per_split=20, rng_seed=3)
    full = optimize(syn.domains, cfg)
    ck = tmp_path / "ck.npz"
    part = optimize(syn.domains, cfg, checkpoint_path=ck, checkpoint_every=5, stop_after=37)
    assert not part.completed
    done = optimize(syn.domains, cfg, checkpoint_path=ck, checkpoint_every=5, resume=True)
    assert done.completed
    np.testing.assert_array_equal(done.pdm.points, full.pdm.points)
    assert [r.total for r in done.trace] == [r.total for r in full.trace]


def test_deterministic_given_seed():
    syn = _small_cohort()
    cfg = OptimizerConfig(target_particles=8, iterations_per_split=10, rng_seed=5)
    a = optimize(syn.domains, cfg)
    b = optimize(syn.domains, cfg)
    np.testing.assert_array_equal(a.pdm.points, b.pdm.points)


def test_optimizer_on_grid_domains():
    from stpsm.surfaces import GridDomain
    dom = GridDomain.from_domain(EllipsoidDomain((1.0, 0.8, 0.6)), 0.1)
    res = optimize([[dom, dom]], OptimizerConfig(target_particles=8, iterations_per_split=10))
    assert np.abs(dom.evaluate(res.pdm.points.reshape(-1, 3))[0]).max() <= dom.surface_tol


def test_propagation_follows_each_subject():
    syn = _small_cohort(amplitude=(0, 0, 0))
    first = optimize(syn.domains, OptimizerConfig(target_particles=8, iterations_per_split=10,
                                                  mode="cross_sectional")).pdm
    prop = propagate_by_projection(first, syn.domains)
    assert prop.n_times == 4
    np.testing.assert_allclose(prop.points, np.broadcast_to(prop.points[:, :1], prop.points.shape),
                               atol=1e-12)


def test_trace_csv(tmp_path):
    syn = _small_cohort(n_subjects=2, n_timepoints=2)
    res = optimize(syn.domains, OptimizerConfig(target_particles=2, iterations_per_split=3))
    write_trace_csv(tmp_path / "trace.csv", res.trace)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,alpha,total,inter_entropy,intra_entropy,sampling_entropy,step"
    assert len(lines) == 1 + len(res.trace) == 7
