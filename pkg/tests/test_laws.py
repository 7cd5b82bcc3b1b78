import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brwtail.errors import (
    DegenerateExtinction,
    DomainError,
    ModelError,
    NoTiltExists,
    NotAProbabilityVector,
    NotLattice,
    NotSubcritical,
)
from brwtail.laws import (
    StepLaw,
    big_h,
    load_model,
    parse_model,
    psi,
    solve_gamma,
    tilt,
    validate_offspring,
)


@st.composite
def offspring_vectors(draw):
    k = draw(st.integers(1, 5))
    w = draw(st.lists(st.floats(0.01, 1.0), min_size=k + 1, max_size=k + 1))
    p = np.array(w) / sum(w)
    mean = float(np.dot(np.arange(k + 1), p))
    if mean >= 0.95:
        # move mass to 0 children until the law is subcritical
        shrink = 0.9 / mean
        p = p * shrink
        p[0] += 1.0 - p.sum()
    p[0] += 1.0 - math.fsum(p)
    return [float(x) for x in p]


def test_reference_psi_is_quadratic(ref):
    s = np.linspace(0, 1, 101)
    np.testing.assert_allclose(ref.offspring.psi(s), 0.4 * s * s, rtol=1e-14, atol=1e-17)


def test_psi_small_argument_has_no_cancellation(ref):
    s = 1e-9
    assert psi(ref.offspring, s) == pytest.approx(0.4e-18, rel=1e-12)


def test_psi_endpoints_and_h(ref):
    off = ref.offspring
    assert psi(off, 0.0) == 0.0
    assert psi(off, 1.0) == pytest.approx(off.p0 + off.mean_m - 1.0, abs=1e-15)
    assert big_h(off, 0.0) == 0.0
    assert big_h(off, 1.0) == pytest.approx(psi(off, 1.0) / off.mean_m)
    with pytest.raises(DomainError):
        psi(off, 1.5)
    with pytest.raises(DomainError):
        big_h(off, -0.1)


@settings(max_examples=60, deadline=None)
@given(offspring_vectors(), st.floats(0.0, 1.0))
def test_psi_properties(probs, s):
    off = validate_offspring(probs)
    v = float(off.psi(s))
    assert v >= 0.0
    assert v <= off.mean_m * s + 1e-15  # phi = m s - psi >= 0
    # phi is the probability that some child of a Binomial thinning survives
    assert float(off.phi(s)) == pytest.approx(1.0 - float(off.pgf(1.0 - s)), abs=1e-14)
    # psi is nondecreasing
    assert float(off.psi(min(1.0, s + 0.01))) >= v - 1e-15


def test_validate_offspring_errors():
    with pytest.raises(NotAProbabilityVector):
        validate_offspring([0.5, 0.4])
    with pytest.raises(NotAProbabilityVector):
        validate_offspring([0.5, -0.1, 0.6])
    with pytest.raises(NotSubcritical):
        validate_offspring([0.2, 0.0, 0.8])
    with pytest.raises(DegenerateExtinction):
        validate_offspring([1.0])
    assert isinstance(NotSubcritical("x"), ModelError)


def test_offspring_dict_and_vector_agree():
    a = validate_offspring({0: 0.6, 2: 0.4})
    b = validate_offspring([0.6, 0.0, 0.4])
    assert a.probs == b.probs and a.mean_m == pytest.approx(0.8)


def test_offspring_sampling_frequencies():
    off = validate_offspring([0.5, 0.2, 0.3])
    rng = np.random.default_rng(3)
    draws = off.sample(rng, 200_000)
    freq = np.bincount(draws, minlength=3) / draws.size
    np.testing.assert_allclose(freq, [0.5, 0.2, 0.3], atol=0.005)


def test_step_law_span_detection():
    assert StepLaw.atoms([(-1, 0.5), (1, 0.5)]).span == 1.0
    assert StepLaw.atoms([(-0.5, 0.5), (1.5, 0.5)]).span == pytest.approx(0.5)
    assert StepLaw.atoms([(-1, 0.5), (math.sqrt(2), 0.5)]).span is None
    assert StepLaw.gaussian(0, 1).span is None
    with pytest.raises(NotLattice):
        StepLaw.gaussian(0, 1).lattice_offsets()


def test_step_law_needs_positive_atom():
    with pytest.raises(NoTiltExists):
        StepLaw.atoms([(-1, 0.5), (0, 0.5)])


def test_gamma_closed_forms(ref):
    assert solve_gamma(ref.step, 0.8) == math.log(2)
    m = 0.7
    step = StepLaw.atoms([(-1, 0.5), (1, 0.5)])
    assert solve_gamma(step, m) == pytest.approx(math.acosh(1 / m), abs=1e-12)
    assert solve_gamma(StepLaw.gaussian(0, 1), math.exp(-0.5)) == pytest.approx(1.0, abs=1e-15)
    mu, sigma = -0.3, 1.7
    g = solve_gamma(StepLaw.gaussian(mu, sigma), 0.6)
    assert mu * g + 0.5 * g * g * sigma**2 == pytest.approx(-math.log(0.6), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(offspring_vectors(), st.lists(st.tuples(st.integers(-4, 4), st.floats(0.05, 1.0)), min_size=2, max_size=5))
def test_gamma_root_and_tilt(probs, atoms):
    if max(a for a, _ in atoms) <= 0:
        atoms = atoms + [(1, 0.3)]
    tot = sum(p for _, p in atoms)
    step = StepLaw.atoms([(a, p / tot) for a, p in atoms])
    off = validate_offspring(probs)
    g = solve_gamma(step, off.mean_m)
    assert g > 0
    assert abs(step.mgf(g) - 1.0 / off.mean_m) <= 1e-12 * max(1.0, 1.0 / off.mean_m)
    tl = tilt(step, off.mean_m, g)
    assert math.fsum(tl.tilted.probs) == pytest.approx(1.0, abs=1e-11)
    assert tl.drift == pytest.approx(tl.tilted.mean(), rel=1e-11, abs=1e-12)
    assert tl.drift > 0


def test_reference_tilt(ref):
    tl = ref.tilted()
    assert tl.drift == 0.6
    assert tl.tilted.probs == pytest.approx((0.2, 0.8), abs=1e-15)


def test_parse_model_accepts_decimal_strings(tmp_path):
    obj = {"offspring": {"0": "0.6", "2": "0.4"}, "step": {"kind": "atoms", "atoms": [["-1", "0.5"], [1, "0.5"]]}}
    m = parse_model(obj)
    assert m.m == pytest.approx(0.8)
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"offspring": {"0": 0.6, "1": 0.2, "2": 0.2},
                                "step": {"kind": "gaussian", "mu": 0, "sigma": 1}}))
    g = load_model(path)
    assert g.step.kind == "gaussian" and g.m == pytest.approx(0.6)
    # the serialized form parses back to the same model
    assert parse_model(g.to_dict()).to_dict() == g.to_dict()


def test_parse_model_errors(tmp_path):
    with pytest.raises(ModelError):
        parse_model({"offspring": {"0": 1}})
    with pytest.raises(ModelError):
        parse_model({"offspring": {"0": 0.6, "2": 0.4}, "step": {"kind": "cauchy"}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ModelError):
        load_model(bad)
