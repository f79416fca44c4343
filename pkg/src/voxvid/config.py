"""Hierarchical configuration with multi-file inheritance and a component registry.

Config files are yaml or json. A file may list parent files under the
reserved key ``configs``; parents are merged left-to-right (later parents
win) and the child's own keys override all parents. Values of the form
``${dotted.path}`` reference other values in the final merged tree, so a
reference always sees post-merge, post-override state. Command-line
overrides are ``dotted.path=value`` strings applied after file merging and
before reference resolution.
"""

from __future__ import annotations

import copy
import inspect
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

__all__ = [
    "ConfigError",
    "ConfigNode",
    "Registry",
    "load_config",
    "apply_overrides",
    "resolve_references",
    "instantiate",
]

INHERIT_KEY = "configs"
TYPE_KEY = "type"
MAX_RESOLVE_ITERS = 32

_REF_RE = re.compile(r"\$\{([^${}]+)\}")


class ConfigError(ValueError):
    """Raised for any malformed config: parse errors, cycles, bad overrides."""


@dataclass
class ConfigNode:
    """A merged configuration tree plus per-key source provenance.

    ``data`` is a plain tree of dicts/lists/scalars. ``origins`` maps dotted
    key paths to the file (or override) that last set them, for diagnostics.
    """

    data: dict = field(default_factory=dict)
    origins: dict = field(default_factory=dict)

    def get(self, path: str, default: Any = ...) -> Any:
        node = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is ...:
                    raise KeyError(path)
                return default
            node = node[part]
        return node

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def copy(self) -> "ConfigNode":
        return ConfigNode(copy.deepcopy(self.data), dict(self.origins))


# ---------------------------------------------------------------------------
# loading and inheritance


class _DupKeyLoader(yaml.SafeLoader):
    pass


def _check_dup_keys(loader, node, deep=False):
    mapping = {}
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise ConfigError(f"duplicate key {key!r} in {node.start_mark}")
        mapping[key] = True
    return loader.construct_mapping(node, deep)


_DupKeyLoader.add_constructor("tag:yaml.org,2002:map", _check_dup_keys)


def _parse_file(path: Path) -> dict:
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        elif path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.load(text, Loader=_DupKeyLoader)
        else:
            raise ConfigError(f"unsupported config extension: {path}")
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"failed to parse {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"top level of {path} must be a map, got {type(data).__name__}")
    return data


def _merge(base: dict, over: dict, origins: dict, src: str, prefix: str = "") -> dict:
    """Recursively merge ``over`` into ``base``. Maps merge; everything else replaces."""
    out = dict(base)
    for key, val in over.items():
        dotted = f"{prefix}{key}"
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val, origins, src, dotted + ".")
        else:
            out[key] = copy.deepcopy(val)
            origins[dotted] = src
            if isinstance(val, dict):
                for sub in _walk_keys(val, dotted + "."):
                    origins[sub] = src
    return out


def _walk_keys(tree: dict, prefix: str):
    for key, val in tree.items():
        dotted = f"{prefix}{key}"
        yield dotted
        if isinstance(val, dict):
            yield from _walk_keys(val, dotted + ".")


def load_config(path: str | Path) -> ConfigNode:
    """Load a config file, resolving its full inheritance chain.

    Parents listed under ``configs`` are loaded recursively and merged
    left-to-right; the child's own keys win. Raises ConfigError for missing
    files, parse errors, and inheritance cycles (the cycle path is reported).
    """
    node = ConfigNode()
    node.data = _load_merged(Path(path), [], node.origins)
    return node


def _load_merged(path: Path, stack: list, origins: dict) -> dict:
    path = path.resolve()
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path in stack:
        cycle = " -> ".join(p.name for p in stack[stack.index(path):] + [path])
        raise ConfigError(f"inheritance cycle: {cycle}")
    data = _parse_file(path)
    parents = data.pop(INHERIT_KEY, [])
    if isinstance(parents, str):
        parents = [parents]
    if not isinstance(parents, list):
        raise ConfigError(f"{INHERIT_KEY} in {path} must be a list of paths")
    merged: dict = {}
    for parent in parents:
        parent_tree = _load_merged(path.parent / parent, stack + [path], origins)
        merged = _merge(merged, parent_tree, origins, src=str(path.parent / parent))
    return _merge(merged, data, origins, src=str(path))


# ---------------------------------------------------------------------------
# command-line overrides


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(node: ConfigNode, overrides: list[str]) -> ConfigNode:
    """Apply ``dotted.path=value`` overrides; values parse as json scalars first.

    Intermediate maps are created as needed. Overriding through an existing
    scalar (``a.b=1`` when ``a`` is an int) is an error.
    """
    out = node.copy()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"malformed override {item!r}: expected dotted.path=value")
        path, raw = item.split("=", 1)
        parts = path.split(".")
        if not path or any(not p for p in parts):
            raise ConfigError(f"malformed override {item!r}: empty path segment")
        tree = out.data
        for i, part in enumerate(parts[:-1]):
            if part not in tree:
                tree[part] = {}
            tree = tree[part]
            if not isinstance(tree, dict):
                raise ConfigError(
                    f"override {item!r} traverses a scalar at {'.'.join(parts[: i + 1])!r}"
                )
        tree[parts[-1]] = _parse_override_value(raw)
        out.origins[path] = "<override>"
    return out


# ---------------------------------------------------------------------------
# reference resolution


def _lookup(tree: dict, dotted: str):
    node = tree
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(dotted)
        node = node[part]
    return node


def _resolve_pass(tree: dict, root: dict) -> tuple[Any, int]:
    """One substitution sweep; returns (new_tree, number of refs still present)."""
    pending = 0

    def visit(value):
        nonlocal pending
        if isinstance(value, dict):
            return {k: visit(v) for k, v in value.items()}
        if isinstance(value, list):
            return [visit(v) for v in value]
        if isinstance(value, str):
            refs = _REF_RE.findall(value)
            if not refs:
                return value
            full = _REF_RE.fullmatch(value)
            if full:
                target = _fetch(full.group(1))
                if isinstance(target, str) and _REF_RE.search(target):
                    pending += 1
                    return value  # target not ready yet
                return copy.deepcopy(target)
            # substring interpolation of scalar references
            out = value
            for ref in refs:
                target = _fetch(ref)
                if isinstance(target, (dict, list)):
                    raise ConfigError(
                        f"reference ${{{ref}}} interpolates a non-scalar into {value!r}"
                    )
                if isinstance(target, str) and _REF_RE.search(target):
                    pending += 1
                    continue
                rendered = json.dumps(target) if isinstance(target, bool) or target is None else str(target)
                out = out.replace("${%s}" % ref, rendered)
            if _REF_RE.search(out):
                pending += 1
            return out
        return value

    def _fetch(ref: str):
        try:
            return _lookup(root, ref)
        except KeyError:
            raise ConfigError(f"dangling reference ${{{ref}}}: no such key") from None

    return visit(tree), pending


def resolve_references(node: ConfigNode) -> ConfigNode:
    """Replace every ``${dotted.path}`` with the value at that absolute path.

    Whole-string references substitute the referenced value with its type;
    substring references interpolate scalars into the string. Iterates to a
    fixpoint; unresolved references after MAX_RESOLVE_ITERS sweeps indicate a
    reference cycle.
    """
    tree = node.to_dict()
    for _ in range(MAX_RESOLVE_ITERS):
        tree, pending = _resolve_pass(tree, tree)
        if pending == 0:
            return ConfigNode(tree, dict(node.origins))
    leftover = sorted(set(_find_refs(tree)))
    raise ConfigError(f"reference cycle: unresolved after {MAX_RESOLVE_ITERS} passes: {leftover}")


def _find_refs(value) -> list[str]:
    if isinstance(value, dict):
        return [r for v in value.values() for r in _find_refs(v)]
    if isinstance(value, list):
        return [r for v in value for r in _find_refs(v)]
    if isinstance(value, str):
        return ["${%s}" % m for m in _REF_RE.findall(value)]
    return []


def load_and_resolve(path: str | Path, overrides: list[str] | None = None) -> ConfigNode:
    """Convenience: load, apply overrides, resolve references."""
    node = load_config(path)
    if overrides:
        node = apply_overrides(node, overrides)
    return resolve_references(node)


# ---------------------------------------------------------------------------
# registry


class Registry:
    """Maps (component kind, type name) to a constructor.

    Instantiation binds config keys to constructor parameters by name and
    rejects unknown keys, so config typos fail loudly.
    """

    def __init__(self):
        self._entries: dict[tuple[str, str], Callable] = {}

    def register(self, kind: str, name: str, ctor: Callable | None = None):
        """Register a constructor; usable as a decorator."""

        def _do(fn):
            key = (kind, name)
            if key in self._entries:
                raise ConfigError(f"duplicate registration for {kind}/{name}")
            self._entries[key] = fn
            return fn

        return _do(ctor) if ctor is not None else _do

    def names(self, kind: str) -> list[str]:
        return sorted(n for k, n in self._entries if k == kind)

    def lookup(self, kind: str, name: str) -> Callable:
        try:
            return self._entries[(kind, name)]
        except KeyError:
            raise ConfigError(
                f"no {kind} named {name!r}; registered: {self.names(kind)}"
            ) from None


def instantiate(node: dict, registry: Registry, kind: str, context: dict | None = None):
    """Construct the component named by ``node['type']``.

    Remaining keys bind to constructor parameters; declared defaults fill
    absent optionals; unknown keys are an error. ``context`` supplies
    build-time parameters (dataset sizes, scene bounds) by name for
    constructors that declare them, without making them config keys.
    """
    if not isinstance(node, dict) or TYPE_KEY not in node:
        raise ConfigError(f"{kind} config must be a map with a 'type' key, got {node!r}")
    name = node[TYPE_KEY]
    ctor = registry.lookup(kind, name)
    sig = inspect.signature(ctor)
    params = sig.parameters
    accepts_kwargs = any(p.kind is inspect.Parameter.VAR_KEYWORD for p in params.values())

    kwargs = {}
    for key, val in node.items():
        if key == TYPE_KEY:
            continue
        if key not in params and not accepts_kwargs:
            raise ConfigError(
                f"unknown parameter {key!r} for {kind} {name!r}; "
                f"accepted: {sorted(k for k in params if k not in ('self',))}"
            )
        kwargs[key] = copy.deepcopy(val)
    for key, val in (context or {}).items():
        if key in params and key not in kwargs:
            kwargs[key] = val
    missing = [
        k
        for k, p in params.items()
        if p.default is inspect.Parameter.empty
        and p.kind in (inspect.Parameter.POSITIONAL_OR_KEYWORD, inspect.Parameter.KEYWORD_ONLY)
        and k not in kwargs
        and k != "self"
    ]
    if missing:
        raise ConfigError(f"missing required parameter(s) {missing} for {kind} {name!r}")
    instance = ctor(**kwargs)
    try:
        instance.config = copy.deepcopy(node)
    except (AttributeError, TypeError):
        pass
    return instance
