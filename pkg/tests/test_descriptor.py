import pytest
from hypothesis import given, settings, strategies as st

from agora.descriptor import (
    ComponentDescription, ExtendsCycle, ParseError, RefKind, Reference, ReferenceCycle,
    ResolveError, UnknownPrototype, UnresolvedReference, lint, lookup, parse, parse_component,
    resolve, resolve_extends, to_text,
)
from conftest import CORPUS
from oracles import flatten_oracle, render_tree

CASES = sorted(p.stem for p in CORPUS.glob("*.sd"))


def test_corpus_size():
    assert len(CASES) >= 20
    for stem in CASES:
        assert (CORPUS / f"{stem}.expected").exists(), stem


@pytest.mark.parametrize("stem", CASES)
def test_corpus_round_trip(stem):
    doc = parse((CORPUS / f"{stem}.sd").read_text(encoding="utf-8"))
    assert parse(to_text(doc)) == doc


@pytest.mark.parametrize("stem", CASES)
def test_corpus_resolves_to_expected(stem):
    doc = parse((CORPUS / f"{stem}.sd").read_text(encoding="utf-8"))
    expected = (CORPUS / f"{stem}.expected").read_text(encoding="utf-8")
    assert to_text(resolve(doc)) == expected


# -- parse ------------------------------------------------------------------

def test_parse_examples():
    root = parse_component("sfConfig extends Compound { x 1; web { port 80; } }")
    assert root.extends == "Compound"
    assert root.attributes == {"x": 1}
    assert root.children["web"].attributes == {"port": 80}


@pytest.mark.parametrize("text, line, col", [
    ("sfConfig {\n  x 1;\n  x 2;\n}", 3, 3),
    ("sfConfig {\n  web {}\n  web {}\n}", 3, 3),
    ("sfConfig {\n  x 1\n}", 3, 1),
    ("sfConfig {\n  x bare;\n}", 2, 5),
    ("sfConfig {\n  x \"open\n}", 2, 5),
    ("sfConfig {", 1, 11),
    ("x 1;", 1, 3),
    ("sfConfig { x ATTRIB; }", 1, 20),
])
def test_parse_errors_carry_position(text, line, col):
    with pytest.raises(ParseError) as info:
        parse(text)
    assert (info.value.line, info.value.col) == (line, col)


def test_reference_forms():
    root = parse_component(
        "sfConfig { a ATTRIB x; b sfConfig:w:p; c PARENT:PARENT:q; d LAZY ATTRIB x; e REF sfConfig:w; }")
    a = root.attributes
    assert a["a"] == Reference(RefKind.ATTRIB, ("x",))
    assert a["b"] == Reference(RefKind.PATH, ("sfConfig", "w", "p"))
    assert a["c"] == Reference(RefKind.PARENT_CHAIN, ("q",), hops=2)
    assert a["d"].lazy and a["d"].kind is RefKind.ATTRIB
    assert a["e"] == Reference(RefKind.PATH, ("sfConfig", "w"))


def test_missing_root_is_a_resolve_error_only():
    doc = parse("P { a 1; }")
    with pytest.raises(ResolveError):
        resolve(doc)


# -- extension --------------------------------------------------------------

def test_unknown_prototype_names_node():
    with pytest.raises(UnknownPrototype, match="web"):
        resolve(parse("sfConfig { web extends Nope {} }"))


def test_extends_cycle_lists_cycle():
    with pytest.raises(ExtendsCycle, match="A -> B -> A"):
        resolve(parse("A extends B {}\nB extends A {}\nsfConfig extends A {}"))


def test_resolve_extends_idempotent_on_flat_tree():
    flat = resolve(parse((CORPUS / "05_diamond.sd").read_text()))
    assert resolve_extends(flat, {}) == flat


idents = st.sampled_from(["a", "b", "c", "d", "e"])
literals = st.integers(-5, 5).map(str)


@st.composite
def proto_node(draw, names, depth=2):
    attrs = draw(st.dictionaries(idents, literals, max_size=4))
    kids = {}
    if depth > 0:
        for k in draw(st.lists(st.sampled_from(["k1", "k2", "k3"]), unique=True, max_size=2)):
            kids[k] = draw(proto_node(names, depth - 1))
    ext = draw(st.sampled_from([None] + names)) if names else None
    return {"extends": ext, "attrs": list(attrs.items()), "children": list(kids.items())}


@st.composite
def proto_chains(draw):
    # P0..Pn where Pi may only extend Pj with j < i, so there is no cycle.
    n = draw(st.integers(1, 4))
    protos = {}
    for i in range(n):
        protos[f"P{i}"] = draw(proto_node([f"P{j}" for j in range(i)]))
    root = draw(proto_node(list(protos)))
    return protos, root


@settings(max_examples=300)
@given(proto_chains())
def test_extension_matches_map_merge_oracle(case):
    protos, root = case
    lines = []
    for name, node in protos.items():
        lines += render_tree(name, node)
    lines += render_tree("sfConfig", root)
    got = resolve(parse("\n".join(lines)))
    want = flatten_oracle(root, protos)
    want_text = "\n".join(render_tree("sfConfig", want)) + "\n"
    assert to_text(got) == to_text(parse_component(want_text))


# -- references -------------------------------------------------------------

@pytest.mark.parametrize("text, err", [
    ("sfConfig { w { p ATTRIB port; } }", UnresolvedReference),
    ("sfConfig { q sfConfig:web:port; web {} }", UnresolvedReference),
    ("sfConfig { q PARENT:x; }", UnresolvedReference),
    ("sfConfig { a sfConfig:b; b sfConfig:a; }", ReferenceCycle),
    ("sfConfig { a ATTRIB a; }", UnresolvedReference),
])
def test_reference_errors(text, err):
    with pytest.raises(err):
        resolve(parse(text))


def test_unresolved_error_has_full_path():
    with pytest.raises(UnresolvedReference, match="sfConfig:w:x:p"):
        resolve(parse("sfConfig { w { x { p ATTRIB port; } } }"))


def test_lazy_survives_and_resolves_against_live_tree():
    root = resolve(parse("sfConfig { web { h LAZY ATTRIB host; } }"))
    assert root.children["web"].attributes["h"].lazy
    root.attributes["host"] = "h7"
    assert lookup(root, ("web",), "h") == "h7"


def test_lint_reports_lazy_and_classes():
    doc = parse("sfConfig { web { h LAZY ATTRIB host; } }")
    problems = lint(doc, known_classes={"Compound"})
    assert any("no sfClass" in p for p in problems)
    assert any("lazy reference" in p for p in problems)
    assert lint(parse("sfConfig extends Compound {}"), known_classes={"Compound"}) == []


def test_include_path_supplies_prototypes(tmp_path):
    (tmp_path / "lib.sd").write_text("Web { port 8080; }\n")
    doc = parse("sfConfig { w extends Web {} }")
    with pytest.raises(UnknownPrototype):
        resolve(doc)
    assert resolve(doc, [tmp_path]).children["w"].attributes == {"port": 8080}


# -- printer ----------------------------------------------------------------

values = st.one_of(
    st.integers(-10**6, 10**6),
    st.floats(allow_nan=False, allow_infinity=False, width=64),
    st.booleans(),
    st.text(st.characters(blacklist_categories=("Cs", "Cc")), max_size=8),
    st.builds(lambda s, lazy: Reference(RefKind.ATTRIB, (s,), lazy), idents, st.booleans()),
    st.builds(lambda segs: Reference(RefKind.PATH, ("sfConfig",) + tuple(segs)),
              st.lists(idents, min_size=1, max_size=3)),
    st.builds(lambda h, segs: Reference(RefKind.PARENT_CHAIN, tuple(segs), hops=h),
              st.integers(1, 3), st.lists(idents, max_size=2)),
)
names = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True).filter(
    lambda s: s not in {"true", "false", "extends", "ATTRIB", "LAZY", "REF", "PARENT", "sfConfig"})


@st.composite
def trees(draw, depth=3):
    attrs = draw(st.dictionaries(names, values, max_size=4))
    kids = {}
    if depth:
        for k in draw(st.lists(names, unique=True, max_size=3)):
            if k not in attrs:
                kids[k] = draw(trees(depth - 1)).copy(k)
    ext = draw(st.one_of(st.none(), names))
    return ComponentDescription("n", attrs, kids, ext)


@given(trees())
def test_print_parse_round_trip(tree):
    assert parse_component(to_text(tree)) == tree


def test_printer_contract():
    text = to_text(parse_component("sfConfig { b 2; a 1; w { x 1; } }"))
    assert text == "sfConfig {\n  b 2;\n  a 1;\n  w {\n    x 1;\n  }\n}\n"
