"""Name algebra: canonical graph names, namespace resolution, remaps, frame prefixes.

Every node, topic, service and parameter key in the system is a canonical
slash-delimited name.  Relative names resolve against a namespace, private
names (leading ``~``) against a node name.  All operations here are pure.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_SEGMENT_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")


class MalformedName(ValueError):
    """A name contains illegal characters, an empty segment, or cannot resolve."""


def _check_segments(segments, raw):
    for seg in segments:
        if not _SEGMENT_RE.match(seg):
            raise MalformedName(f"bad name segment {seg!r} in {raw!r}")


@dataclass(frozen=True, order=True)
class GraphName:
    """Canonical global name: ``/`` or slash-joined identifier segments."""

    text: str

    def __str__(self):
        return self.text

    @property
    def is_root(self):
        return self.text == "/"

    @property
    def segments(self) -> list[str]:
        return [] if self.is_root else self.text[1:].split("/")

    @property
    def basename(self) -> str:
        return "" if self.is_root else self.segments[-1]

    def parent(self) -> "GraphName":
        """Enclosing namespace (the root is its own parent)."""
        segs = self.segments
        if len(segs) <= 1:
            return ROOT
        return GraphName("/" + "/".join(segs[:-1]))

    def child(self, rel: str) -> "GraphName":
        """Join a relative name underneath this one."""
        rel = rel.rstrip("/")
        if not rel:
            return self
        segs = rel.split("/")
        _check_segments(segs, rel)
        base = "" if self.is_root else self.text
        return GraphName(base + "/" + "/".join(segs))

    def starts_with(self, prefix: "GraphName") -> bool:
        if prefix.is_root:
            return True
        return self.text == prefix.text or self.text.startswith(prefix.text + "/")


ROOT = GraphName("/")


def canonicalize(raw: str) -> GraphName:
    """Validate a global name and strip any trailing slash."""
    if not raw or not raw.startswith("/"):
        raise MalformedName(f"global name must start with '/': {raw!r}")
    if raw == "/":
        return ROOT
    raw = raw.rstrip("/")
    if raw == "":
        return ROOT
    segs = raw[1:].split("/")
    _check_segments(segs, raw)
    return GraphName(raw)


@dataclass(frozen=True)
class NamespaceCtx:
    """Resolution context: the namespace, plus the node name for ``~`` expansion."""

    ns: GraphName = ROOT
    node_name: GraphName | None = None

    @classmethod
    def of(cls, ns: str = "/", node_name: str | None = None) -> "NamespaceCtx":
        ns_name = canonicalize(ns)
        node = None
        if node_name is not None:
            node = canonicalize(node_name)
            if not node.starts_with(ns_name):
                raise MalformedName(
                    f"node name {node.text!r} not inside namespace {ns_name.text!r}"
                )
        return cls(ns=ns_name, node_name=node)


def resolve_name(raw: str, ctx: NamespaceCtx) -> GraphName:
    """Resolve a raw name to canonical form.

    Global names (``/x``) canonicalize unchanged, private names (``~x``)
    expand against the context's node name, everything else against the
    namespace.
    """
    if not raw:
        raise MalformedName("empty name")
    if raw.startswith("/"):
        return canonicalize(raw)
    if raw.startswith("~"):
        if ctx.node_name is None:
            raise MalformedName(f"private name {raw!r} needs a node name in context")
        return ctx.node_name.child(raw[1:])
    return ctx.ns.child(raw)


@dataclass(frozen=True)
class RemapRule:
    """Rewrite one resolved name to another, both sides given raw."""

    from_name: str
    to_name: str

    def __post_init__(self):
        if not self.from_name or not self.to_name:
            raise MalformedName("remap sides must be non-empty")


def apply_remaps(resolved: GraphName, rules: list[RemapRule], ctx: NamespaceCtx) -> GraphName:
    """Apply the first matching remap rule, once; no chaining through rules.

    Match sides resolve under the owning node's namespace; replacement sides
    are taken from the root namespace (unless written private), so rules can
    redirect across robot namespaces the way launch files compose them.
    """
    root_ctx = NamespaceCtx(ns=ROOT, node_name=ctx.node_name)
    for rule in rules:
        if resolve_name(rule.from_name, ctx) == resolved:
            return resolve_name(rule.to_name, root_ctx)
    return resolved


def apply_tf_prefix(frame: str, prefix: str) -> str:
    """Prefix a frame id; the empty prefix is the identity."""
    if not frame:
        raise ValueError("frame must be non-empty")
    if prefix and (prefix.startswith("/") or prefix.endswith("/")):
        raise ValueError(f"prefix must not start or end with '/': {prefix!r}")
    if not prefix:
        return frame
    return prefix + "/" + frame
