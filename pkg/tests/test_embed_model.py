import math

import numpy as np
import pytest

from core import ClassCatalog, Instance, InstanceMap, LabelMap, ValidationError, extract_instances
from embed_model import (
    LossConfig, PixelFields, SemanticState, ae_baseline_loss, embedding_views, ins_var_loss,
    instance_loss, instance_scores, load_fields, load_state, p_kernel, phi_kernel, pixel_positions,
    psi_scores, save_fields, save_state, seed_loss, seg_mean_loss, semantic_cross_entropy_loss, semantic_loss,
    spatial_kernel, total_loss,
)
from lovasz import lovasz_binary, lovasz_softmax
from synth import generate, standard_catalog, suite_scene
from trainer import ideal_fields


def unit(*v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)

def random_fields(rng, h=4, w=5, d=6) -> PixelFields:
    e = rng.standard_normal((h, w, d))
    e /= np.linalg.norm(e, axis=2, keepdims=True)
    return PixelFields(e=e, sigma=rng.uniform(0.3, 0.8, (h, w)), sigma_spatial=rng.uniform(0.2, 0.5, (h, w)),
                       seed=rng.uniform(0, 1, (h, w)))

def random_state(rng, c=5, d=6) -> SemanticState:
    mu = rng.standard_normal((c, d))
    return SemanticState(mu / np.linalg.norm(mu, axis=1, keepdims=True), rng.uniform(0.3, 0.8, c))

@pytest.fixture
def small_scene():
    labels = LabelMap(np.array([[0, 0, 3, 3, 1],
                                [2, 3, 3, 4, 4],
                                [2, 2, 255, 4, 4],
                                [2, 2, 3, 0, 0]]))
    instances = InstanceMap(np.array([[0, 0, 1, 1, 0],
                                      [0, 1, 1, 2, 2],
                                      [0, 0, 0, 2, 2],
                                      [0, 0, 0, 0, 0]]))
    return labels, instances


def test_p_kernel_examples():
    mu = unit(1, 0, 0)
    assert p_kernel(mu, mu, 0.3) == pytest.approx(1.0)
    assert p_kernel(unit(0, 1, 0), mu, math.sqrt(0.5)) == pytest.approx(math.exp(-1))
    assert p_kernel(-mu, mu, 1.0) == pytest.approx(math.exp(-1))
    with pytest.raises(ValidationError):
        p_kernel(mu, mu, 0.0)

def test_phi_kernel_examples():
    mu = unit(0, 1)
    center = np.array([0.5, 0.5])
    assert phi_kernel(mu, center, mu, center, 0.4, 0.1) == pytest.approx(1.0)
    rho = center + np.array([0.1 * math.sqrt(2), 0.0])
    assert phi_kernel(mu, rho, mu, center, 0.4, 0.1) == pytest.approx(math.exp(-1))
    rng = np.random.default_rng(0)
    e, m = unit(*rng.standard_normal(4)), unit(*rng.standard_normal(4))
    r, c = rng.random(2), rng.random(2)
    assert phi_kernel(e, r, m, c, 0.5, 0.3) == pytest.approx(p_kernel(e, m, 0.5) * spatial_kernel(r, c, 0.3))

def test_pixel_positions_are_normalized_centers():
    rho = pixel_positions(2, 4)
    np.testing.assert_allclose(rho[0], [0.125, 0.25])
    np.testing.assert_allclose(rho[7], [0.875, 0.75])
    assert not rho.flags.writeable

def test_psi_scores():
    e = unit(1, 0)
    state = SemanticState(np.array([[1.0, 0.0], [0.0, 1.0]]), np.full(2, math.sqrt(0.5)))
    np.testing.assert_allclose(psi_scores(e, state), [math.e / (math.e + 1), 1 / (math.e + 1)])
    symmetric = SemanticState(np.array([[0.0, 1.0], [0.0, -1.0]]), np.full(2, 0.4))
    np.testing.assert_allclose(psi_scores(e, symmetric), [0.5, 0.5])
    rng = np.random.default_rng(1)
    psi = psi_scores(random_fields(rng).flat_e(), random_state(rng))
    np.testing.assert_allclose(psi.sum(axis=1), 1.0)
    assert np.all(psi > 0)

def test_instance_loss_trivial_cases():
    rng = np.random.default_rng(2)
    fields = random_fields(rng)
    assert instance_loss(fields, [])[0] == 0.0
    e = np.tile(unit(1, 0, 0, 0, 0, 0), (4, 5, 1))
    everything = Instance(1, 3, np.arange(20))
    uniform = PixelFields(e, np.full((4, 5), 0.5), np.full((4, 5), 1e3), fields.seed)
    assert instance_loss(uniform, [everything])[0] == pytest.approx(0.0, abs=1e-6)

def replace_e(fields: PixelFields, e: np.ndarray) -> PixelFields:
    return PixelFields(e, fields.sigma, fields.sigma_spatial, fields.seed)

def test_instance_loss_is_lovasz_of_phi(small_scene):
    labels, instances = small_scene
    rng = np.random.default_rng(3)
    fields = random_fields(rng)
    found = extract_instances(labels, instances)
    valid = labels.data.reshape(-1) != 255
    expected = 0.0
    for inst in found:
        support = np.flatnonzero(valid)
        phi = instance_scores(fields, inst, support)
        expected += lovasz_binary(phi, np.isin(support, inst.pixels))[0]
    assert instance_loss(fields, found, labels)[0] == pytest.approx(expected / len(found))

def test_instance_loss_two_pixel_value():
    # the 1x2 example: phi (0.9, 0.2) against membership (1, 0)
    assert lovasz_binary(np.array([0.9, 0.2]), np.array([1, 0]))[0] == pytest.approx(0.15)

def test_semantic_loss_prefers_class_means():
    rng = np.random.default_rng(4)
    state = random_state(rng, c=3, d=4)
    state = SemanticState(state.mu_hat, np.full(3, 0.3))
    labels = LabelMap(np.array([[0, 1, 2], [2, 1, 0]]))
    e = state.mu_hat[labels.data]
    fields = PixelFields(e, np.ones((2, 3)), np.ones((2, 3)), np.zeros((2, 3)))
    loss, _ = semantic_loss(fields, labels, state)
    uniform, _ = lovasz_softmax(np.full((6, 3), 1 / 3), labels.data.reshape(-1))
    assert loss < uniform

def test_semantic_loss_degenerate_cases():
    rng = np.random.default_rng(5)
    fields = random_fields(rng, 2, 2, 3)
    state = random_state(rng, c=2, d=3)
    assert semantic_loss(fields, LabelMap(np.full((2, 2), 255)), state)[0] == 0.0
    single = SemanticState(state.mu_hat[:1], state.sigma_sem[:1])
    assert semantic_loss(fields, LabelMap(np.zeros((2, 2))), single)[0] == pytest.approx(0.0)

def test_semantic_loss_keeps_means_fixed_by_default():
    rng = np.random.default_rng(6)
    _, grads = semantic_loss(random_fields(rng, 2, 3, 4), LabelMap(np.array([[0, 1, 2], [2, 1, 0]])),
                             random_state(rng, 3, 4))
    assert 'mu_hat' not in grads

def test_seed_loss_values():
    catalog = ClassCatalog.of(('road', 'stuff'), ('car', 'thing'))
    fields = PixelFields(np.tile(unit(1, 0), (1, 1, 1)), np.ones((1, 1)), np.ones((1, 1)), np.full((1, 1), 0.5))
    assert seed_loss(fields, [], LabelMap(np.zeros((1, 1))), catalog)[0] == pytest.approx(0.25)

    rng = np.random.default_rng(7)
    fields = random_fields(rng, 1, 3, 2)
    labels = LabelMap(np.array([[1, 1, 1]]))
    inst = Instance(1, 1, np.array([0, 1]))
    phi = instance_scores(fields, inst, inst.pixels)
    expected = np.mean(np.square(fields.seed[0, :2] - phi))
    # pixel 2 is a crowd car: excluded
    assert seed_loss(fields, [inst], labels, catalog)[0] == pytest.approx(expected)

def test_seed_loss_stops_gradient_into_embeddings():
    catalog = ClassCatalog.of(('road', 'stuff'), ('car', 'thing'))
    rng = np.random.default_rng(8)
    fields = random_fields(rng, 2, 2, 3)
    labels = LabelMap(np.array([[1, 1], [0, 1]]))
    inst = Instance(1, 1, np.array([0, 1, 3]))
    before, grads = seed_loss(fields, [inst], labels, catalog)
    assert set(grads) == {'seed'}
    e = fields.e.copy()
    e[0, 1] = unit(1.0, -2.0, 0.5)
    moved = replace_e(fields, e)
    assert seed_loss(moved, [inst], labels, catalog)[0] != pytest.approx(before)

def test_ins_var_loss():
    fields = PixelFields(np.tile(unit(1, 0), (1, 2, 1)), np.array([[0.2, 0.4]]), np.full((1, 2), 0.3), np.zeros((1, 2)))
    inst = Instance(1, 1, np.array([0, 1]))
    assert ins_var_loss(fields, [inst])[0] == pytest.approx(0.1)
    assert ins_var_loss(fields, [inst], gamma=20.0)[0] == pytest.approx(0.2)
    assert ins_var_loss(fields, [])[0] == 0.0
    flat = PixelFields(fields.e, np.full((1, 2), 0.3), fields.sigma_spatial, fields.seed)
    assert ins_var_loss(flat, [inst])[0] == pytest.approx(0.0)

def test_seg_mean_loss():
    fields = PixelFields(np.array([[[0.0, 1.0]]]), np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 1)))
    state = SemanticState(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2))
    loss, grads = seg_mean_loss(fields, LabelMap(np.zeros((1, 1))), state)
    assert loss == pytest.approx(2.0)
    assert set(grads) == {'mu_hat'}
    assert not np.any(grads['mu_hat'][1])
    assert seg_mean_loss(fields, LabelMap(np.ones((1, 1))), state)[0] == pytest.approx(0.0)

def test_ae_baseline_loss():
    fields = PixelFields(np.array([[[0.6, 0.8], [0.8, 0.6]]]), np.ones((1, 2)), np.ones((1, 2)), np.zeros((1, 2)))
    inst = Instance(1, 1, np.array([0, 1]))
    assert ae_baseline_loss(fields, [inst], 0.0, 1.5)[0] == pytest.approx(0.04)
    assert ae_baseline_loss(fields, [inst], 0.2, 1.5)[0] == pytest.approx(0.0)
    far = [Instance(1, 1, np.array([0])), Instance(2, 1, np.array([1]))]
    assert ae_baseline_loss(fields, far, 0.1, 0.4)[0] == pytest.approx(0.0)
    with pytest.raises(ValidationError):
        ae_baseline_loss(fields, [inst], -1.0, 1.0)

def test_total_loss_bookkeeping(small_scene):
    labels, instances = small_scene
    rng = np.random.default_rng(9)
    fields, state = random_fields(rng), random_state(rng)
    report, grads = total_loss(fields, labels, instances, state, standard_catalog())
    assert report.total == report.seg + report.seg_mean + report.ins + report.ins_var + report.seed
    assert report.counts['instances'] == 2
    assert grads.e.shape == fields.e.shape and grads.mu_hat.shape == state.mu_hat.shape
    doubled, _ = total_loss(fields, labels, instances, state, standard_catalog(), LossConfig(gamma=20.0))
    assert doubled.ins_var == pytest.approx(2 * report.ins_var)
    for term in ('seg', 'seg_mean', 'ins', 'seed'):
        assert getattr(doubled, term) == pytest.approx(getattr(report, term))

def stepped(fields: PixelFields, state: SemanticState, grads, step: float) -> tuple[PixelFields, SemanticState]:
    """ one gradient step, projected back onto unit embeddings, positive bandwidths and [0, 1] seeds """
    e = fields.e - step * grads.e
    mu = state.mu_hat - step * grads.mu_hat
    moved = PixelFields(e=e / np.linalg.norm(e, axis=2, keepdims=True),
                        sigma=np.maximum(fields.sigma - step * grads.sigma, 1e-3),
                        sigma_spatial=np.maximum(fields.sigma_spatial - step * grads.sigma_spatial, 1e-3),
                        seed=np.clip(fields.seed - step * grads.seed, 0.0, 1.0))
    return moved, SemanticState(mu / np.linalg.norm(mu, axis=1, keepdims=True),
                                np.maximum(state.sigma_sem - step * grads.sigma_sem, 1e-3))

def test_backtracking_descent_lowers_the_total_loss(small_scene):
    labels, instances = small_scene
    catalog = standard_catalog()
    rng = np.random.default_rng(5)
    fields, state = random_fields(rng), random_state(rng)
    report, grads = total_loss(fields, labels, instances, state, catalog)
    losses = [report.total]
    step = 1.0
    for _ in range(10):
        while step > 1e-10:
            candidate = stepped(fields, state, grads, step)
            trial, trial_grads = total_loss(candidate[0], labels, instances, candidate[1], catalog)
            if trial.total <= losses[-1]:
                fields, state, grads = *candidate, trial_grads
                losses.append(trial.total)
                break
            step /= 2
    assert len(losses) > 1
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]

def test_total_loss_vq_style_switch(small_scene):
    labels, instances = small_scene
    rng = np.random.default_rng(10)
    fields, state = random_fields(rng), random_state(rng)
    report, grads = total_loss(fields, labels, instances, state, standard_catalog(), LossConfig(vq_style=False))
    assert report.seg_mean == 0.0
    assert np.any(grads.mu_hat)

def test_total_loss_rotation_invariance(small_scene):
    labels, instances = small_scene
    rng = np.random.default_rng(11)
    fields, state = random_fields(rng), random_state(rng)
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    rotated = replace_e(fields, fields.e @ q)
    rotated_state = SemanticState(state.mu_hat @ q, state.sigma_sem)
    a, _ = total_loss(fields, labels, instances, state, standard_catalog())
    b, _ = total_loss(rotated, labels, instances, rotated_state, standard_catalog())
    for term in ('seg', 'seg_mean', 'ins', 'ins_var', 'seed'):
        assert getattr(b, term) == pytest.approx(getattr(a, term), abs=1e-9)

def test_total_loss_variants_run(small_scene):
    labels, instances = small_scene
    rng = np.random.default_rng(12)
    fields = random_fields(rng)
    for variant in ('hierarchical', 'ae', 'cross_entropy'):
        report, _ = total_loss(fields, labels, instances, random_state(rng), standard_catalog(), LossConfig(variant=variant))
        assert np.isfinite(report.total) and report.total >= 0
    half = random_state(rng, c=5, d=3)
    report, grads = total_loss(fields, labels, instances, half, standard_catalog(), LossConfig(variant='split'))
    assert np.isfinite(report.total)
    assert np.any(grads.e[..., :3]) and np.any(grads.e[..., 3:])

def test_perfect_fields_have_low_loss():
    catalog = standard_catalog()
    labels, instances = generate(suite_scene('tiny'), catalog)
    fields, state = ideal_fields(labels, instances, catalog)
    report, _ = total_loss(fields, labels, instances, state, catalog)
    assert report.ins_var == pytest.approx(0.0, abs=1e-12)
    assert report.ins < 0.05

def test_embedding_views():
    rng = np.random.default_rng(14)
    fields = random_fields(rng, 2, 2, 6)
    assert embedding_views(fields, random_state(rng, 3, 6)) == (slice(None), slice(None))
    assert embedding_views(fields, random_state(rng, 3, 3)) == (slice(0, 3), slice(3, 6))
    with pytest.raises(ValidationError):
        embedding_views(fields, random_state(rng, 3, 4))

def test_fields_validation():
    rng = np.random.default_rng(15)
    fields = random_fields(rng)
    assert fields.validate() == []
    bad = PixelFields(fields.e * 2, fields.sigma, fields.sigma_spatial, fields.seed)
    assert bad.validate()
    negative = PixelFields(fields.e, -fields.sigma, fields.sigma_spatial, fields.seed)
    assert any("bandwidth" in p for p in negative.validate())

def test_fields_and_state_files(tmp_path):
    rng = np.random.default_rng(16)
    fields, state = random_fields(rng), random_state(rng)
    save_fields(tmp_path / 'f.hle', fields)
    save_state(tmp_path / 's.hle', state)
    loaded = load_fields(tmp_path / 'f.hle')
    np.testing.assert_allclose(loaded.e, fields.e, atol=1e-6)
    np.testing.assert_allclose(loaded.seed, fields.seed, atol=1e-6)
    loaded_state = load_state(tmp_path / 's.hle')
    np.testing.assert_allclose(loaded_state.mu_hat, state.mu_hat, atol=1e-6)
    np.testing.assert_allclose(loaded_state.sigma_sem, state.sigma_sem, atol=1e-6)
    assert loaded_state.validate(tol=1e-9) == []

def test_cross_entropy_matches_log_psi():
    rng = np.random.default_rng(3)
    fields = random_fields(rng, h=2, w=3)
    state = random_state(rng)
    labels = LabelMap(np.array([[0, 1, 255], [4, 4, 2]]))
    loss, grads = semantic_cross_entropy_loss(fields, labels, state)
    psi = psi_scores(fields.flat_e(), state)
    flat = labels.data.reshape(-1)
    kept = np.flatnonzero(flat != 255)
    assert loss == pytest.approx(-np.mean(np.log(psi[kept, flat[kept]])))
    np.testing.assert_array_equal(grads['e'][0, 2], 0.0)
    assert 'mu_hat' not in grads
