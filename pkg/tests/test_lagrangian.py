import numpy as np
import pytest

from neckwave.lagrangian import (BranchBudgetExceeded, Word, branch_completeness, build_cover,
                                 gradient_separation, incoming_lagrangian, propagate_all,
                                 propagate_step)
from neckwave.rays import winding_class

# frozen from the first full N = 40 propagation of the default model
GOLDEN_FIRST_STEP = {0: 9, 1: 15, -1: 15, 2: 21, -2: 21, 3: 27, -3: 27, 4: 33, -4: 33}
GOLDEN_SUP_A = {0: 0.968, 1: 0.110, 2: 4.73e-3, 3: 2.06e-4, 4: 9.0e-6}


def test_word_tau():
    assert Word((0,)).tau == 0
    assert Word((0, 5, 0, 7, 7)).tau == 2
    assert Word((0, 3, 4)).tau == 0
    assert Word((0, 1, 2)).n == 3
    assert str(Word((0, 12))) == "0.12"


def test_incoming_branch(model, spec):
    b = incoming_lagrangian(model, spec)
    assert b.m == 0 and b.n == 0
    np.testing.assert_allclose(b.J, 1.0, atol=1e-12)
    np.testing.assert_allclose(b.a, 1.0, atol=1e-12)
    ch = b.checks
    assert ch.forward_error < 1e-9 and ch.backward_error < 1e-9
    assert ch.eikonal_error < 1e-12
    assert ch.expansion_ratio_max <= 1.0 + 1e-6
    assert ch.n_pairs == 1000
    assert b.rows().shape[1] == 7


def test_cover_contraction(model):
    cover = build_cover(model, 0.05, pairs=100, seed=0)
    rep = cover.contraction
    assert rep.worst_distance < rep.threshold
    assert rep.threshold == pytest.approx(np.exp(-1.0) * np.pi)
    sets = cover.sets()
    assert len(sets) == len(cover)
    assert [s.id for s in sets] == list(range(len(cover)))
    assert sets[0].kind == "infinity"


def test_cover_letters(model):
    cover = build_cover(model, 0.05, pairs=50, seed=0)
    far = np.array([[50.0, 0.0, 1.0, 0.0]])
    assert cover.letters(model, far)[0] == 0
    neck = np.array([[0.0, 0.1, 0.0, 1.0], [0.0, 0.1, 0.0, -1.0]])
    ids = cover.letters(model, neck)
    assert np.all(cover.kind_of(ids) == "near_trapped")
    assert ids[0] != ids[1]
    rng = np.random.default_rng(0)
    r = rng.uniform(-8, 8, 2000)
    psi = rng.uniform(0, 2 * np.pi, 2000)
    y = np.stack([r, rng.uniform(0, 2 * np.pi, 2000), np.cos(psi), model.f(r) * np.sin(psi)], -1)
    ids = cover.letters(model, y)
    assert ids.min() >= 0 and ids.max() < len(cover)


def test_cover_rejects_bad_gamma(model):
    with pytest.raises(ValueError):
        build_cover(model, gamma_uns=0.5)


def test_propagate_step_transport(model, spec):
    b = incoming_lagrangian(model, spec, n_s=21, n_sigma=5, check=False)
    cover = build_cover(model, 0.05, pairs=50, seed=0)
    out = propagate_step(model, b, cover, spec)
    assert sum(len(o.phi) for o in out) == len(b.phi)
    for o in out:
        assert o.n == 1 and o.word.letters[0] == 0
        np.testing.assert_allclose(o.a, o.J ** -0.5, rtol=1e-12)
        # unit-speed rays gain one unit of phase per unit time
        assert np.all(np.isin(o.phi, b.phi + 1.0))
        assert np.all(winding_class(spec, o.states[:, 1]) == o.m)


def test_propagation_validates_inputs(model, spec):
    with pytest.raises(ValueError):
        propagate_all(model, spec, N=100)
    with pytest.raises(ValueError):
        propagate_all(model, spec, N=5, amp_floor=0.0)


def test_branch_budget(model, spec):
    with pytest.raises(BranchBudgetExceeded, match="budget"):
        propagate_all(model, spec, N=20, branch_budget=50, nonexpansion_pairs=0)


def test_inventory_first_steps_golden(inventory):
    for m, n in GOLDEN_FIRST_STEP.items():
        assert inventory.class_first_step[m] == n
    cls = inventory.classes()
    assert cls[0] == 0
    nt = [inventory.class_first_step[m] for m in cls]
    assert nt == sorted(nt)


def test_inventory_sup_amplitudes_golden(inventory):
    for m, a in GOLDEN_SUP_A.items():
        assert inventory.class_sup_amplitude[m] == pytest.approx(a, rel=0.02)
        assert inventory.class_sup_amplitude[-m] == pytest.approx(a, rel=0.02)


def test_mirror_symmetry(inventory):
    # the default wave is symmetric under theta -> -theta
    for m in inventory.class_first_step:
        if -m in inventory.class_first_step:
            assert inventory.class_sup_amplitude[m] == pytest.approx(
                inventory.class_sup_amplitude[-m], rel=1e-6)


def test_caustic_free(inventory):
    d = inventory.diagnostics
    assert d.c_det > 0
    assert d.graph_failures == 0
    assert d.eikonal_max < 1e-9
    assert d.curl_max < 1e-6
    assert d.n_uns <= 10


def test_nonexpansion_in_the_past(inventory):
    d = inventory.diagnostics
    assert d.nonexpansion_pairs > 0
    assert d.nonexpansion_worst <= 1.0 + 1e-6


def test_mass_decay(inventory):
    rate = inventory.mass_decay_rate()
    assert rate <= -0.4
    assert rate == pytest.approx(-0.468, abs=0.01)


def test_manifest_rows(inventory):
    rows = inventory.manifest()
    assert len(rows) == inventory.n_branches()
    assert all(len(r) == 9 for r in rows)
    words = [r[3] for r in rows]
    assert all(w.startswith("0") for w in words)


def test_branch_words_consistent(inventory):
    st = inventory.steps[12]
    for b in range(min(len(st.letter), 20)):
        br = inventory.branch(12, b)
        assert br.word.n == 13
        assert br.word.letters[-1] == st.letter[b]
        assert br.word.tau <= 12


def test_completeness_at_neck(model, spec, inventory):
    found = inventory.coverage((0.0, 0.0), 3)
    assert found == [-3, -2, -1, 0, 1, 2, 3]
    assert branch_completeness(model, spec, (0.0, 0.0), 3, inventory=inventory) >= 7


def test_gradient_separation(model, sheets, inventory):
    nt = {s.m: inventory.class_first_step[s.m] for s in sheets}
    rep = gradient_separation(model, sheets, nt)
    assert rep.distinct_positive()
    assert rep.C1 > 0
    assert rep.exponent <= np.sqrt(model.curvature_floor)
    assert rep.exponent == pytest.approx(0.972, abs=0.02)


def test_flat_end_branch_translates(model, spec):
    b = incoming_lagrangian(model, spec, n_s=41, n_sigma=5, check=False)
    far = b.states[:, 0] > model.interaction_radius + 2.0
    b.states, b.tangents, b.phi = b.states[far], b.tangents[far], b.phi[far]
    b.J, b.a = b.J[far], b.a[far]
    cover = build_cover(model, 0.05, pairs=50, seed=0)
    out = propagate_step(model, b, cover, spec)
    assert len(out) == 1 and out[0].word.letters == (0, 0)
    np.testing.assert_allclose(out[0].J, 1.0, atol=1e-9)
    np.testing.assert_allclose(out[0].phi, b.phi + 1.0)


def test_short_propagation_has_direct_branch_only(model, spec):
    inv = propagate_all(model, spec, N=5, nonexpansion_pairs=0)
    for st in inv.steps:
        assert np.all(st.m == 0)
    assert inv.diagnostics.tube_first_age == -1
    assert set(inv.class_first_step) <= {0}


def test_successive_winding_amplitude_ratio(inventory):
    # one extra neck period multiplies the amplitude by about exp(-pi)
    sup = inventory.class_sup_amplitude
    for k in range(1, 4):
        ratio = sup[k + 1] / sup[k]
        assert 0.02 <= ratio <= 0.10
        assert ratio == pytest.approx(np.exp(-np.pi), rel=0.1)


def test_class_count_linear_in_n(inventory):
    nt = np.array(list(inventory.class_first_step.values()))
    for n in range(10, 41, 5):
        assert np.sum(nt <= n) <= 0.5 * n


def test_coverage_nondecreasing_in_n(inventory):
    counts = [len(inventory.coverage((0.0, 0.0), 3, n_max=n)) for n in (10, 20, 30, 40)]
    assert counts == sorted(counts)
    assert counts[-1] == 7


def test_transversality_in_tube(inventory):
    assert inventory.diagnostics.transversality_min_deg >= 5.0
