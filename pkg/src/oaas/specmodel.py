"""Declaration language for packages, classes, and functions.

Developers describe a package as a YAML or JSON document: classes declare
state keys and function bindings, functions are either executable tasks or
dataflow macros. This module owns parsing (strict: unknown fields are
rejected), cross-reference validation, inheritance flattening, access
checks, and the object-access expression grammar used by end users.

All types here are plain values; every operation is a pure function over
immutable inputs and is safe to call from any thread.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

import yaml

from .errors import (
    CyclicInheritance,
    OaiSyntaxError,
    PackageSyntaxError,
    SchemaError,
    UnknownBinding,
    UnknownClass,
)

IDENT_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_-]*$")
QUALIFIED_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_-]*\.[A-Za-z][A-Za-z0-9_-]*$")
OAI_NAME_RE = re.compile(r"[A-Za-z0-9_.-]+")
ARG_SUBST_RE = re.compile(r"^\$arg\[([A-Za-z0-9_-]+)\]$")
INPUT_REF_RE = re.compile(r"^\$input\[(\d+)\]$")

ACCESS_LEVELS = ("public", "internal")
STATE_FORMS = ("structured", "unstructured")
FUNCTION_KINDS = ("task", "macro")
EXECUTOR_MODES = ("builtin", "remote-http")

SELF_REF = "$self"


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class StateKeySpec:
    key: str
    form: str  # structured | unstructured
    provider: str | None = None  # bucket name; unstructured keys only


@dataclass
class FunctionBinding:
    name: str
    access: str  # public | internal
    function_ref: str  # qualified function name
    output_class: str  # qualified class name


@dataclass
class ExecutorBinding:
    mode: str  # builtin | remote-http
    target: str  # builtin name or endpoint URL


@dataclass
class MacroStep:
    """One call in a dataflow macro.

    ``target`` is the object the step's function is invoked on: "$self",
    "$input[i]", or the local name of an earlier step (meaning that step's
    output object). ``inputs`` lists additional upstream objects handed to
    the function; both target and inputs induce dependency edges.
    """

    name: str  # local name ("as" in the document)
    target: str
    function: str  # binding name on the target's class
    args: dict[str, str] = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)


@dataclass
class MacroSpec:
    steps: list[MacroStep]
    output: str  # local name of the step whose object is returned


@dataclass
class FunctionSpec:
    name: str
    kind: str  # task | macro
    executor: ExecutorBinding | None = None
    macro: MacroSpec | None = None


@dataclass
class ClassSpec:
    name: str
    parent: str | None
    state_keys: list[StateKeySpec]
    bindings: list[FunctionBinding]


@dataclass
class PackageSpec:
    name: str
    classes: list[ClassSpec]
    functions: list[FunctionSpec]


@dataclass
class ResolvedClass:
    """A class with its inheritance chain flattened.

    Entries are ordered ancestors-first; a child entry replaces (shadows)
    any same-named entry from an ancestor.
    """

    name: str  # qualified
    package: str
    state_keys: list[StateKeySpec]
    bindings: list[FunctionBinding]

    def binding(self, name: str) -> FunctionBinding:
        for b in self.bindings:
            if b.name == name:
                return b
        raise UnknownBinding(f"class {self.name} has no binding {name!r}")

    def state_key(self, key: str) -> StateKeySpec:
        for s in self.state_keys:
            if s.key == key:
                return s
        raise UnknownBinding(f"class {self.name} has no state key {key!r}")

    def unstructured_keys(self) -> list[StateKeySpec]:
        return [s for s in self.state_keys if s.form == "unstructured"]

    def has_structured_key(self) -> bool:
        return any(s.form == "structured" for s in self.state_keys)


@dataclass
class OaiRequest:
    """Parsed object-access expression: ``object[:fn(k=v,...)][/contentKey]``."""

    main_object: str
    function: str | None = None
    args: dict[str, str] = field(default_factory=dict)
    content_key: str | None = None

    def to_expr(self) -> str:
        out = self.main_object
        if self.function is not None:
            pairs = ",".join(f"{k}={_escape_oai_value(v)}" for k, v in self.args.items())
            out += f":{self.function}({pairs})"
        if self.content_key is not None:
            out += f"/{self.content_key}"
        return out


@dataclass
class ValidationReport:
    errors: list[tuple[str, str]] = field(default_factory=list)  # (path, message)

    @property
    def ok(self) -> bool:
        return not self.errors

    def add(self, path: str, message: str) -> None:
        self.errors.append((path, message))

    def messages(self) -> list[str]:
        return [f"{p}: {m}" for p, m in self.errors]


# Read view over registered specs. The metadata store provides the real one;
# tests use an in-memory dict.
class SpecRegistry:
    def get_class(self, qualified: str) -> ClassSpec | None:  # pragma: no cover - interface
        raise NotImplementedError

    def get_function(self, qualified: str) -> FunctionSpec | None:  # pragma: no cover - interface
        raise NotImplementedError


class DictRegistry(SpecRegistry):
    """In-memory registry keyed by qualified name."""

    def __init__(self) -> None:
        self.classes: dict[str, ClassSpec] = {}
        self.functions: dict[str, FunctionSpec] = {}

    def add_package(self, pkg: PackageSpec) -> None:
        for c in pkg.classes:
            self.classes[qualify(pkg.name, c.name)] = c
        for f in pkg.functions:
            self.functions[qualify(pkg.name, f.name)] = f

    def get_class(self, qualified: str) -> ClassSpec | None:
        return self.classes.get(qualified)

    def get_function(self, qualified: str) -> FunctionSpec | None:
        return self.functions.get(qualified)


def qualify(package: str, name: str) -> str:
    """Return the dotted qualified form, leaving already-qualified names alone."""
    if "." in name:
        return name
    return f"{package}.{name}"


def package_of(qualified: str) -> str:
    return qualified.split(".", 1)[0]


# ---------------------------------------------------------------------------
# Parsing


def parse_package(document: str) -> PackageSpec:
    """Parse a YAML or JSON package document into a PackageSpec.

    Strict mode: unknown fields, missing required fields, and duplicate
    names are rejected with a SchemaError carrying the document path.
    Cross-references (parent, functionRef, outputClass) are qualified with
    the package name when written bare.
    """
    try:
        raw = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise PackageSyntaxError(f"malformed document: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("$", "package document must be a mapping")
    return _parse_package_dict(raw)


def _parse_package_dict(raw: dict) -> PackageSpec:
    _check_fields(raw, "$", required=("name",), optional=("classes", "functions"))
    name = _ident(raw["name"], "$.name")
    classes_raw = _as_list(raw.get("classes", []), "$.classes")
    functions_raw = _as_list(raw.get("functions", []), "$.functions")

    classes = [_parse_class(c, f"$.classes[{i}]", name) for i, c in enumerate(classes_raw)]
    functions = [_parse_function(f, f"$.functions[{i}]", name) for i, f in enumerate(functions_raw)]

    seen: dict[str, str] = {}
    for i, c in enumerate(classes):
        if c.name in seen:
            raise SchemaError(f"$.classes[{i}].name", f"duplicate name {c.name!r}")
        seen[c.name] = "class"
    for i, f in enumerate(functions):
        if f.name in seen:
            raise SchemaError(f"$.functions[{i}].name", f"duplicate name {f.name!r}")
        seen[f.name] = "function"

    return PackageSpec(name=name, classes=classes, functions=functions)


def _parse_class(raw: Any, path: str, pkg: str) -> ClassSpec:
    if not isinstance(raw, dict):
        raise SchemaError(path, "class must be a mapping")
    _check_fields(raw, path, required=("name",), optional=("parent", "stateKeys", "bindings"))
    cname = _ident(raw["name"], f"{path}.name")
    parent = raw.get("parent")
    if parent is not None:
        parent = qualify(pkg, _name_or_qualified(parent, f"{path}.parent"))

    keys_raw = _as_list(raw.get("stateKeys", []), f"{path}.stateKeys")
    state_keys = []
    seen_keys: set[str] = set()
    for i, k in enumerate(keys_raw):
        sk = _parse_state_key(k, f"{path}.stateKeys[{i}]")
        if sk.key in seen_keys:
            raise SchemaError(f"{path}.stateKeys[{i}].key", f"duplicate state key {sk.key!r}")
        seen_keys.add(sk.key)
        state_keys.append(sk)

    bindings_raw = _as_list(raw.get("bindings", []), f"{path}.bindings")
    bindings = []
    seen_bindings: set[str] = set()
    for i, b in enumerate(bindings_raw):
        fb = _parse_binding(b, f"{path}.bindings[{i}]", pkg)
        if fb.name in seen_bindings:
            raise SchemaError(f"{path}.bindings[{i}].name", f"duplicate binding {fb.name!r}")
        seen_bindings.add(fb.name)
        bindings.append(fb)

    return ClassSpec(name=cname, parent=parent, state_keys=state_keys, bindings=bindings)


def _parse_state_key(raw: Any, path: str) -> StateKeySpec:
    if not isinstance(raw, dict):
        raise SchemaError(path, "state key must be a mapping")
    _check_fields(raw, path, required=("key", "form"), optional=("provider",))
    key = _ident(raw["key"], f"{path}.key")
    form = raw["form"]
    if form not in STATE_FORMS:
        raise SchemaError(f"{path}.form", f"must be one of {STATE_FORMS}")
    provider = raw.get("provider")
    if form == "structured" and provider is not None:
        raise SchemaError(f"{path}.provider", "structured keys carry no provider")
    if form == "unstructured":
        if provider is None:
            raise SchemaError(f"{path}.provider", "unstructured keys require a provider")
        provider = _ident(provider, f"{path}.provider")
    return StateKeySpec(key=key, form=form, provider=provider)


def _parse_binding(raw: Any, path: str, pkg: str) -> FunctionBinding:
    if not isinstance(raw, dict):
        raise SchemaError(path, "binding must be a mapping")
    _check_fields(raw, path, required=("name", "access", "functionRef", "outputClass"), optional=())
    access = raw["access"]
    if access not in ACCESS_LEVELS:
        raise SchemaError(f"{path}.access", f"must be one of {ACCESS_LEVELS}")
    return FunctionBinding(
        name=_ident(raw["name"], f"{path}.name"),
        access=access,
        function_ref=qualify(pkg, _name_or_qualified(raw["functionRef"], f"{path}.functionRef")),
        output_class=qualify(pkg, _name_or_qualified(raw["outputClass"], f"{path}.outputClass")),
    )


def _parse_function(raw: Any, path: str, pkg: str) -> FunctionSpec:
    if not isinstance(raw, dict):
        raise SchemaError(path, "function must be a mapping")
    _check_fields(raw, path, required=("name", "kind"), optional=("executor", "macro"))
    fname = _ident(raw["name"], f"{path}.name")
    kind = raw["kind"]
    if kind not in FUNCTION_KINDS:
        raise SchemaError(f"{path}.kind", f"must be one of {FUNCTION_KINDS}")

    executor = macro = None
    if kind == "task":
        if "executor" not in raw or "macro" in raw:
            raise SchemaError(path, "task functions declare exactly an executor")
        executor = _parse_executor(raw["executor"], f"{path}.executor")
    else:
        if "macro" not in raw or "executor" in raw:
            raise SchemaError(path, "macro functions declare exactly a macro body")
        macro = _parse_macro(raw["macro"], f"{path}.macro")
    return FunctionSpec(name=fname, kind=kind, executor=executor, macro=macro)


def _parse_executor(raw: Any, path: str) -> ExecutorBinding:
    if not isinstance(raw, dict):
        raise SchemaError(path, "executor must be a mapping")
    _check_fields(raw, path, required=("mode", "target"), optional=())
    mode = raw["mode"]
    if mode not in EXECUTOR_MODES:
        raise SchemaError(f"{path}.mode", f"must be one of {EXECUTOR_MODES}")
    target = raw["target"]
    if not isinstance(target, str) or not target:
        raise SchemaError(f"{path}.target", "must be a non-empty string")
    return ExecutorBinding(mode=mode, target=target)


def _parse_macro(raw: Any, path: str) -> MacroSpec:
    if not isinstance(raw, dict):
        raise SchemaError(path, "macro must be a mapping")
    _check_fields(raw, path, required=("steps", "output"), optional=())
    steps_raw = _as_list(raw["steps"], f"{path}.steps")
    if not steps_raw:
        raise SchemaError(f"{path}.steps", "macro needs at least one step")
    steps = [_parse_step(s, f"{path}.steps[{i}]") for i, s in enumerate(steps_raw)]
    output = raw["output"]
    if not isinstance(output, str):
        raise SchemaError(f"{path}.output", "must be a step name")
    return MacroSpec(steps=steps, output=output)


def _parse_step(raw: Any, path: str) -> MacroStep:
    if not isinstance(raw, dict):
        raise SchemaError(path, "step must be a mapping")
    _check_fields(raw, path, required=("as", "target", "function"), optional=("args", "inputs"))
    name = _ident(raw["as"], f"{path}.as")
    target = _step_ref(raw["target"], f"{path}.target")
    function = _ident(raw["function"], f"{path}.function")

    args_raw = raw.get("args", {})
    if not isinstance(args_raw, dict):
        raise SchemaError(f"{path}.args", "must be a mapping")
    args: dict[str, str] = {}
    for k, v in args_raw.items():
        if not isinstance(k, str) or not IDENT_RE.match(k):
            raise SchemaError(f"{path}.args", f"bad argument name {k!r}")
        args[k] = _scalar_to_str(v, f"{path}.args.{k}")

    inputs_raw = _as_list(raw.get("inputs", []), f"{path}.inputs")
    inputs = [_step_ref(r, f"{path}.inputs[{i}]") for i, r in enumerate(inputs_raw)]
    return MacroStep(name=name, target=target, function=function, args=args, inputs=inputs)


def _step_ref(raw: Any, path: str) -> str:
    if not isinstance(raw, str):
        raise SchemaError(path, "reference must be a string")
    if raw == SELF_REF or INPUT_REF_RE.match(raw) or IDENT_RE.match(raw):
        return raw
    raise SchemaError(path, f"bad reference {raw!r} (want $self, $input[i], or a step name)")


def _check_fields(raw: dict, path: str, required: tuple, optional: tuple) -> None:
    for k in raw:
        if k not in required and k not in optional:
            raise SchemaError(f"{path}.{k}", "unknown field")
    for k in required:
        if k not in raw:
            raise SchemaError(f"{path}.{k}", "missing field")


def _as_list(raw: Any, path: str) -> list:
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise SchemaError(path, "must be a list")
    return raw


def _ident(raw: Any, path: str) -> str:
    if not isinstance(raw, str) or not IDENT_RE.match(raw):
        raise SchemaError(path, f"bad identifier {raw!r}")
    return raw


def _name_or_qualified(raw: Any, path: str) -> str:
    if isinstance(raw, str) and (IDENT_RE.match(raw) or QUALIFIED_RE.match(raw)):
        return raw
    raise SchemaError(path, f"bad name {raw!r}")


def _scalar_to_str(v: Any, path: str) -> str:
    # Argument values travel as strings; YAML scalars are coerced.
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return str(v)
    raise SchemaError(path, "argument values must be scalars")


# ---------------------------------------------------------------------------
# Canonical serialization


def package_to_document(pkg: PackageSpec) -> dict:
    """Plain-dict form of a package, canonical (fully qualified refs)."""
    doc: dict[str, Any] = {"name": pkg.name, "classes": [], "functions": []}
    for c in pkg.classes:
        cd: dict[str, Any] = {"name": c.name, "stateKeys": [], "bindings": []}
        if c.parent is not None:
            cd["parent"] = c.parent
        for s in c.state_keys:
            sd: dict[str, Any] = {"key": s.key, "form": s.form}
            if s.provider is not None:
                sd["provider"] = s.provider
            cd["stateKeys"].append(sd)
        for b in c.bindings:
            cd["bindings"].append(
                {
                    "name": b.name,
                    "access": b.access,
                    "functionRef": b.function_ref,
                    "outputClass": b.output_class,
                }
            )
        doc["classes"].append(cd)
    for f in pkg.functions:
        fd: dict[str, Any] = {"name": f.name, "kind": f.kind}
        if f.executor is not None:
            fd["executor"] = {"mode": f.executor.mode, "target": f.executor.target}
        if f.macro is not None:
            fd["macro"] = {
                "steps": [
                    {
                        "as": s.name,
                        "target": s.target,
                        "function": s.function,
                        "args": dict(s.args),
                        "inputs": list(s.inputs),
                    }
                    for s in f.macro.steps
                ],
                "output": f.macro.output,
            }
        doc["functions"].append(fd)
    return doc


def serialize_package(pkg: PackageSpec) -> str:
    """Canonical JSON form: sorted keys, no whitespace. parse ∘ serialize = id."""
    return canonical_json(package_to_document(pkg))


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def class_to_document(c: ClassSpec) -> dict:
    return package_to_document(PackageSpec("x", [c], []))["classes"][0]


def class_from_document(doc: dict, pkg: str) -> ClassSpec:
    return _parse_class(doc, "$", pkg)


def function_to_document(f: FunctionSpec) -> dict:
    return package_to_document(PackageSpec("x", [], [f]))["functions"][0]


def function_from_document(doc: dict, pkg: str) -> FunctionSpec:
    return _parse_function(doc, "$", pkg)


# ---------------------------------------------------------------------------
# Validation


def validate_package(pkg: PackageSpec, registry: SpecRegistry) -> ValidationReport:
    """Check every cross-reference and structural invariant of a package.

    Errors are report entries, never exceptions: registration decides what
    to do with a failing report. ``registry`` supplies previously registered
    packages for cross-package references.
    """
    report = ValidationReport()
    local = _LocalView(pkg, registry)

    for i, c in enumerate(pkg.classes):
        path = f"$.classes[{i}]"
        _validate_parent_chain(c, pkg.name, local, report, path)
        for j, b in enumerate(c.bindings):
            bpath = f"{path}.bindings[{j}]"
            if local.get_function(b.function_ref) is None:
                report.add(bpath + ".functionRef", f"unresolved functionRef {b.function_ref!r}")
            if local.get_class(b.output_class) is None:
                report.add(bpath + ".outputClass", f"unresolved outputClass {b.output_class!r}")

    for i, f in enumerate(pkg.functions):
        if f.kind == "macro" and f.macro is not None:
            _validate_macro(f.macro, f"$.functions[{i}].macro", report)

    # Bind macro steps to classes where the target type is statically known.
    for i, c in enumerate(pkg.classes):
        for j, b in enumerate(c.bindings):
            fn = local.get_function(b.function_ref)
            if fn is None or fn.kind != "macro" or fn.macro is None:
                continue
            _validate_macro_bindings(
                fn.macro, c, pkg, local, report, f"$.classes[{i}].bindings[{j}]",
                declared_output=b.output_class,
            )
    return report


class _LocalView(SpecRegistry):
    """Registry view that overlays the package being validated."""

    def __init__(self, pkg: PackageSpec, registry: SpecRegistry):
        self.pkg = pkg
        self.registry = registry

    def get_class(self, qualified: str) -> ClassSpec | None:
        if package_of(qualified) == self.pkg.name:
            for c in self.pkg.classes:
                if qualify(self.pkg.name, c.name) == qualified:
                    return c
            # fall through: an older version of the package may be registered
        return self.registry.get_class(qualified)

    def get_function(self, qualified: str) -> FunctionSpec | None:
        if package_of(qualified) == self.pkg.name:
            for f in self.pkg.functions:
                if qualify(self.pkg.name, f.name) == qualified:
                    return f
        return self.registry.get_function(qualified)


def _validate_parent_chain(
    c: ClassSpec, pkg_name: str, view: SpecRegistry, report: ValidationReport, path: str
) -> None:
    seen = {qualify(pkg_name, c.name)}
    current = c.parent
    hops = 0
    while current is not None:
        if current in seen:
            report.add(path + ".parent", f"inheritance cycle through {current!r}")
            return
        seen.add(current)
        parent = view.get_class(current)
        if parent is None:
            report.add(path + ".parent", f"unresolved ancestor {current!r}")
            return
        current = parent.parent
        hops += 1
        if hops > 64:
            report.add(path + ".parent", "inheritance chain too deep")
            return


def _validate_macro(macro: MacroSpec, path: str, report: ValidationReport) -> None:
    names: list[str] = []
    for i, s in enumerate(macro.steps):
        spath = f"{path}.steps[{i}]"
        if s.name in names:
            report.add(spath + ".as", f"duplicate step name {s.name!r}")
        for label, ref in [("target", s.target)] + [
            (f"inputs[{k}]", r) for k, r in enumerate(s.inputs)
        ]:
            if ref == SELF_REF or INPUT_REF_RE.match(ref):
                continue
            if ref == s.name or (ref not in names and any(t.name == ref for t in macro.steps)):
                report.add(f"{spath}.{label}", f"forward reference to step {ref!r}")
            elif ref not in names:
                report.add(f"{spath}.{label}", f"unresolved reference {ref!r}")
        names.append(s.name)

    if macro.output not in names:
        report.add(f"{path}.output", f"output {macro.output!r} is not a step")

    edges = macro_edges(macro)
    if has_cycle([s.name for s in macro.steps], edges):
        report.add(path, "dependency cycle among steps")


def _validate_macro_bindings(
    macro: MacroSpec,
    cls: ClassSpec,
    pkg: PackageSpec,
    view: SpecRegistry,
    report: ValidationReport,
    path: str,
    declared_output: "str | None" = None,
) -> None:
    """Check step.function names against target classes reachable from $self.

    Steps targeting $input[i] stay untyped until invocation; their bindings
    are checked then. Steps must bind task functions (macros do not nest),
    and the output step's class must match the binding's declared output
    class when statically known.
    """
    step_class: dict[str, str | None] = {}
    for i, s in enumerate(macro.steps):
        target_class: str | None
        if s.target == SELF_REF:
            target_class = qualify(pkg.name, cls.name)
        elif INPUT_REF_RE.match(s.target):
            target_class = None
        else:
            target_class = step_class.get(s.target)
        if target_class is None:
            step_class[s.name] = None
            continue
        spec = view.get_class(target_class)
        binding = None
        if spec is not None:
            binding = _find_binding_in_chain(spec, target_class, s.function, view)
        if binding is None:
            report.add(
                f"{path} step[{i}]",
                f"class {target_class!r} has no binding {s.function!r}",
            )
            step_class[s.name] = None
            continue
        step_fn = view.get_function(binding.function_ref)
        if step_fn is not None and step_fn.kind != "task":
            report.add(
                f"{path} step[{i}]",
                f"binding {s.function!r} resolves to macro {binding.function_ref!r}; macros do not nest",
            )
        step_class[s.name] = binding.output_class

    produced = step_class.get(macro.output)
    if declared_output is not None and produced is not None and produced != declared_output:
        report.add(
            path,
            f"macro output step yields {produced!r} but the binding declares {declared_output!r}",
        )


def _find_binding_in_chain(
    spec: ClassSpec, qualified: str, binding: str, view: SpecRegistry
) -> FunctionBinding | None:
    current: ClassSpec | None = spec
    current_name = qualified
    hops = 0
    while current is not None and hops <= 64:
        for b in current.bindings:
            if b.name == binding:
                return b
        if current.parent is None:
            return None
        current_name = current.parent
        current = view.get_class(current_name)
        hops += 1
    return None


def macro_edges(macro: MacroSpec) -> list[tuple[str, str]]:
    """Dependency edges (producer, consumer) induced by step references."""
    names = {s.name for s in macro.steps}
    edges = []
    for s in macro.steps:
        for ref in [s.target] + list(s.inputs):
            if ref in names and ref != s.name:
                edges.append((ref, s.name))
    return edges


def has_cycle(nodes: Iterable[str], edges: list[tuple[str, str]]) -> bool:
    """Kahn's algorithm; true when the edge set admits no topological order."""
    nodes = list(nodes)
    indeg = {n: 0 for n in nodes}
    out: dict[str, list[str]] = {n: [] for n in nodes}
    for a, b in edges:
        if a in indeg and b in indeg:
            indeg[b] += 1
            out[a].append(b)
    frontier = [n for n in nodes if indeg[n] == 0]
    visited = 0
    while frontier:
        n = frontier.pop()
        visited += 1
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                frontier.append(m)
    return visited != len(nodes)


# ---------------------------------------------------------------------------
# Inheritance resolution and access control


def resolve_class(class_name: str, registry: SpecRegistry) -> ResolvedClass:
    """Flatten a class and its ancestors into one view.

    Child entries shadow same-named parent entries; surviving entries keep
    ancestors-first order. Idempotent: a class without a parent resolves to
    itself.
    """
    chain: list[ClassSpec] = []
    seen: set[str] = set()
    current = class_name
    while True:
        if current in seen:
            raise CyclicInheritance(f"inheritance cycle through {current!r}")
        seen.add(current)
        spec = registry.get_class(current)
        if spec is None:
            raise UnknownClass(f"class {current!r} is not registered")
        chain.append(spec)
        if spec.parent is None:
            break
        current = spec.parent

    chain.reverse()  # root ancestor first
    keys: list[StateKeySpec] = []
    bindings: list[FunctionBinding] = []
    for spec in chain:
        own_keys = {s.key for s in spec.state_keys}
        keys = [k for k in keys if k.key not in own_keys] + list(spec.state_keys)
        own_bindings = {b.name for b in spec.bindings}
        bindings = [b for b in bindings if b.name not in own_bindings] + list(spec.bindings)

    return ResolvedClass(
        name=class_name,
        package=package_of(class_name),
        state_keys=keys,
        bindings=bindings,
    )


def check_access(caller_context: str, cls: ResolvedClass, binding: str) -> bool:
    """Allow public bindings always; internal ones only to same-package callers."""
    b = cls.binding(binding)  # raises UnknownBinding
    if b.access == "public":
        return True
    return caller_context == "same-package"


def substitute_args(step_args: dict[str, str], invocation_args: dict[str, str]) -> dict[str, str]:
    """Replace ``$arg[name]`` markers in step args with invocation args."""
    out: dict[str, str] = {}
    for k, v in step_args.items():
        m = ARG_SUBST_RE.match(v)
        if m:
            name = m.group(1)
            if name not in invocation_args:
                raise KeyError(f"macro argument {name!r} not supplied")
            out[k] = invocation_args[name]
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# Object-access expression grammar


def parse_oai(expr: str) -> OaiRequest:
    """Parse ``object[:fn(k=v,...)][/contentKey]``.

    Values are percent-decoded and may contain any character except "," and
    ")". The printable form (OaiRequest.to_expr) is whitespace-free and
    round-trips through this parser.
    """
    scanner = _OaiScanner(expr)
    main = scanner.take_name("object id")
    function = None
    args: dict[str, str] = {}
    if scanner.peek() == ":":
        scanner.advance()
        function = scanner.take_name("function name")
        scanner.expect("(")
        if scanner.peek() != ")":
            while True:
                name = scanner.take_name("argument name")
                scanner.expect("=")
                value = scanner.take_value()
                if name in args:
                    raise OaiSyntaxError(scanner.pos, f"duplicate argument {name!r}")
                args[name] = value
                if scanner.peek() == ",":
                    scanner.advance()
                    continue
                break
        scanner.expect(")")
    content_key = None
    if scanner.peek() == "/":
        scanner.advance()
        content_key = scanner.take_name("content key")
    if not scanner.done():
        raise OaiSyntaxError(scanner.pos, f"unexpected character {scanner.peek()!r}")
    return OaiRequest(main_object=main, function=function, args=args, content_key=content_key)


class _OaiScanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def done(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str | None:
        return self.text[self.pos] if self.pos < len(self.text) else None

    def advance(self) -> None:
        self.pos += 1

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise OaiSyntaxError(self.pos, f"expected {ch!r}")
        self.advance()

    def take_name(self, what: str) -> str:
        m = OAI_NAME_RE.match(self.text, self.pos)
        if not m:
            raise OaiSyntaxError(self.pos, f"expected {what}")
        self.pos = m.end()
        return m.group(0)

    def take_value(self) -> str:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in ",)":
            self.pos += 1
        return _unescape_oai_value(self.text[start : self.pos], start)


def _escape_oai_value(value: str) -> str:
    out = []
    for ch in value:
        if ch in ",)%":
            out.append("%{:02X}".format(ord(ch)))
        else:
            out.append(ch)
    return "".join(out)


def _unescape_oai_value(raw: str, offset: int) -> str:
    out = []
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch == "%":
            if len(raw) - i < 3:
                raise OaiSyntaxError(offset + i, "truncated percent escape")
            try:
                out.append(chr(int(raw[i + 1 : i + 3], 16)))
            except ValueError:
                raise OaiSyntaxError(offset + i, "bad percent escape") from None
            i += 3
        else:
            out.append(ch)
            i += 1
    return "".join(out)
