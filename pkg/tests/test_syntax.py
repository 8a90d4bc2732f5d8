import pytest
from hypothesis import given, settings, strategies as st

from fepa import (
    AtomDefinition,
    Choice,
    Const,
    Leaf,
    ModelError,
    Par,
    ParseError,
    Prefix,
    apply_rates,
    format_model,
    is_well_posed,
    parse_model,
    validate,
)
from fepa.syntax import rate_occurrences

from helpers import models, p_tilde_text, rates, sys_text


def test_parse_study_model_has_one_leaf_per_atom():
    m = parse_model(sys_text(4))
    assert m.atoms == ["P1", "P2", "P3", "P4", "Q"]
    assert m.rho == "product"
    assert m.initial_populations["P3"] == 200
    assert m.actions == ["alpha", "beta", "gamma"]


def test_single_atom():
    m = parse_model("A = (a, 1.0).A; system = A;")
    assert m.system == Leaf("A")
    assert m.rho == "min"
    assert m.definitions == (AtomDefinition("A", Prefix("a", 1.0, Const("A"))),)


def test_rho_override_and_comments():
    m = parse_model("# header\nsemantics = min;\nA = (a, 1.0).A; # tail\nsystem = A;", rho="product")
    assert m.rho == "product"


def test_choice_and_nested_composition():
    m = parse_model("A = (a, 1).A + (b, 2e-1).B; B = (c, 3).A; C = (a, 1).C; D = (d, 1).D;\nsystem = (A <a> C) <> D;")
    assert m.system == Par(Par(Leaf("A"), Leaf("C"), frozenset({"a"})), Leaf("D"), frozenset())
    assert m.environment["A"] == Choice(Prefix("a", 1.0, Const("A")), Prefix("b", 0.2, Const("B")))


@pytest.mark.parametrize(
    "text, fragment, line, column",
    [
        ("A = (a, 0).A; system = A;", "rate must be positive", 1, 9),
        ("A = (a, -1.0).A; system = A;", "rate must be positive", 1, 9),
        ("A = (a, 1.0).B; system = A;", "undefined constant B", 1, 14),
        ("A = (a,1.0).A;\nA = (b,1.0).A; system = A;", "duplicate definition", 2, 1),
        ("A = (a, 1.0).A\nsystem = A;", "expected ';'", 2, 1),
        ("A = (a, 1.0).A;", "missing 'system", None, None),
        ("A = (a, 1.0).A; system = A; init A = -3;", "nonnegative", 1, 38),
        ("A = (a, 1.0).A; system = A; semantics = max;", "min' or 'product", 1, 41),
        ("A = (a, 1.0).A; system = A @ A;", "", 1, 28),
    ],
)
def test_parse_errors_carry_locations(text, fragment, line, column):
    with pytest.raises(ParseError) as info:
        parse_model(text)
    assert fragment in str(info.value)
    if line is not None:
        assert (info.value.line, info.value.column) == (line, column)


def test_parse_error_is_a_model_error():
    assert issubclass(ParseError, ModelError)


# --------------------------------------------------------------------------
# validation


def codes(model):
    return [(d.severity, d.code) for d in validate(model)]


def test_study_model_is_well_posed():
    m = parse_model(sys_text(3))
    assert validate(m) == []
    assert is_well_posed(m)


def test_sync_on_action_one_side_lacks_is_ill_posed():
    m = parse_model("P = (alpha, 1).P' ; P' = (beta, 0.5).P; Q = (alpha, 1).Q'; Q' = (gamma, 15).Q;\nsystem = P <beta> Q;")
    assert codes(m) == [("warning", "ill-posed")]
    assert "never performs beta" in validate(m)[0].message
    assert not is_well_posed(m)


def test_p_tilde_model_is_ill_posed_on_gamma_only():
    diags = validate(parse_model(p_tilde_text(3)))
    assert [d.code for d in diags] == ["ill-posed"]
    assert "gamma" in diags[0].message


def test_shared_constant_is_an_overlap_error():
    m = parse_model("A = (a, 1).S; B = (b, 1).S; S = (c, 1).A;\nsystem = A <> B;")
    assert ("error", "derivative-overlap") in codes(m)


def test_repeated_leaf_is_an_overlap_error():
    assert ("error", "derivative-overlap") in codes(parse_model("A = (a, 1).A; system = A <> A;"))


def test_unguarded_recursion():
    assert ("error", "unguarded-recursion") in codes(parse_model("A = B + (a, 1).A; B = A; system = A;"))


def test_init_for_unknown_state():
    assert ("error", "unknown-state") in codes(parse_model("A = (a, 1).A; system = A; init Z = 1;"))


# --------------------------------------------------------------------------
# rates


def test_rate_vector_order_is_by_definition_name_then_source_order():
    m = parse_model("Q = (a, 5).Q; P = (a, 1).P' + (b, 2).P; P' = (c, 3).P;\nsystem = P <a> Q;")
    assert rate_occurrences(m) == [("P", 0, 1.0), ("P", 1, 2.0), ("P'", 0, 3.0), ("Q", 0, 5.0)]
    assert m.rate_vector == (1.0, 2.0, 3.0, 5.0)


def test_apply_rates_identity_and_substitution():
    m = parse_model(sys_text(2))
    assert apply_rates(m, m.rate_vector) == m
    xi = list(m.rate_vector)
    xi[0] += 0.25  # the rate of P1
    m2 = apply_rates(m, xi)
    assert m2.environment["P1"] == Prefix("alpha", 1.25, Const("P1'"))
    assert m2.rate_vector == tuple(xi)
    assert m2.system == m.system and m2.init == m.init


@pytest.mark.parametrize("xi", [[1.0], [1.0] * 20, [0.0] + [1.0] * 7, [-1.0] + [1.0] * 7])
def test_apply_rates_rejects_bad_vectors(xi):
    with pytest.raises(ValueError):
        apply_rates(parse_model(sys_text(3)), xi)


# --------------------------------------------------------------------------
# round trip


@settings(max_examples=150, deadline=None)
@given(models())
def test_print_parse_round_trip(model):
    again = parse_model(format_model(model))
    assert again == model
    assert format_model(again) == format_model(model)


@settings(max_examples=60, deadline=None)
@given(models(), st.data())
def test_apply_rates_preserves_structure(model, data):
    n = len(model.rate_vector)
    xi = data.draw(st.lists(rates, min_size=n, max_size=n))
    m2 = apply_rates(model, xi)
    assert m2.rate_vector == tuple(xi)
    assert apply_rates(m2, model.rate_vector) == model
