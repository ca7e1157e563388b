import pytest
from hypothesis import given, strategies as st

from mrctl.names import (GraphName, MalformedName, NamespaceCtx, RemapRule,
                         apply_remaps, apply_tf_prefix, canonicalize,
                         resolve_name)

segment = st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,5}", fullmatch=True)
namespaces = st.lists(segment, min_size=0, max_size=3).map(
    lambda segs: "/" + "/".join(segs) if segs else "/")
relative_names = st.lists(segment, min_size=1, max_size=3).map("/".join)


def ctx(ns="/", node=None):
    return NamespaceCtx.of(ns, node)


def test_relative_name_gets_namespace_prefix():
    assert resolve_name("camera_publisher", ctx("/robot3")).text == "/robot3/camera_publisher"


def test_global_name_passes_through():
    assert resolve_name("/map", ctx("/tb3_0")).text == "/map"


def test_root_namespace_is_identity_prefix():
    assert resolve_name("scan", ctx("/")).text == "/scan"


def test_private_name_expands_against_node_name():
    got = resolve_name("~pose", ctx("/tb3_0", "/tb3_0/amcl"))
    assert got.text == "/tb3_0/amcl/pose"


def test_private_name_without_node_context_fails():
    with pytest.raises(MalformedName):
        resolve_name("~pose", ctx("/tb3_0"))


@pytest.mark.parametrize("bad", ["", "a//b", "/a//b", "9lives", "/a/-b", "a b"])
def test_malformed_names_rejected(bad):
    with pytest.raises(MalformedName):
        resolve_name(bad, ctx("/"))


def test_trailing_slash_stripped_on_canonicalize():
    assert canonicalize("/a/b/").text == "/a/b"
    assert canonicalize("/").text == "/"


@given(raw=relative_names, ns=namespaces)
def test_resolution_idempotent(raw, ns):
    c = ctx(ns)
    once = resolve_name(raw, c)
    assert resolve_name(once.text, c) == once


@given(raw=relative_names, ns=namespaces)
def test_relative_resolution_contained_in_namespace(raw, ns):
    got = resolve_name(raw, ctx(ns))
    assert got.starts_with(canonicalize(ns))


@given(raw=relative_names, ns1=namespaces, ns2=namespaces)
def test_distinct_namespaces_never_collide(raw, ns1, ns2):
    if ns1 == ns2:
        return
    assert resolve_name(raw, ctx(ns1)) != resolve_name(raw, ctx(ns2))


def test_remap_first_match_wins():
    rules = [RemapRule("a", "b"), RemapRule("a", "c")]
    assert apply_remaps(canonicalize("/a"), rules, ctx("/")).text == "/b"


def test_remap_reference_order_oracle():
    # brute-force evaluator: scan rules in order, apply the first hit once
    rules = [RemapRule("x", "y"), RemapRule("y", "z"), RemapRule("x", "q")]
    c = ctx("/ns")
    root = ctx("/")

    def oracle(name):
        for rule in rules:
            if resolve_name(rule.from_name, c).text == name:
                return resolve_name(rule.to_name, root).text
        return name

    for raw in ["x", "y", "z", "w"]:
        resolved = resolve_name(raw, c)
        assert apply_remaps(resolved, rules, c).text == oracle(resolved.text)


def test_remap_no_chaining():
    rules = [RemapRule("a", "b"), RemapRule("b", "c")]
    assert apply_remaps(canonicalize("/a"), rules, ctx("/")).text == "/b"


def test_remap_empty_rules_identity():
    assert apply_remaps(canonicalize("/odom"), [], ctx("/tb3_0")).text == "/odom"


def test_remap_scan_to_namespaced_scan():
    rules = [RemapRule("scan", "tb3_0/scan")]
    got = apply_remaps(canonicalize("/tb3_0/scan"), rules, ctx("/tb3_0"))
    assert got.text == "/tb3_0/scan"


def test_tf_prefix_applied():
    assert apply_tf_prefix("base_scan", "tb3_0") == "tb3_0/base_scan"
    assert apply_tf_prefix("base_footprint", "tb3_2") == "tb3_2/base_footprint"


def test_tf_prefix_empty_is_identity():
    assert apply_tf_prefix("odom", "") == "odom"


def test_tf_prefix_rejects_slashes():
    with pytest.raises(ValueError):
        apply_tf_prefix("odom", "/tb3_0")
    with pytest.raises(ValueError):
        apply_tf_prefix("odom", "tb3_0/")


def test_graph_name_parts():
    name = canonicalize("/tb3_0/amcl")
    assert name.basename == "amcl"
    assert name.parent().text == "/tb3_0"
    assert name.segments == ["tb3_0", "amcl"]
    assert GraphName("/a") < GraphName("/b")
