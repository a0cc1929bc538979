"""UTF-8 ``key=value`` config files mapped onto dataclasses.

Blank lines and ``#`` comments are skipped.  Nested dataclass fields are
addressed with a dotted prefix, e.g. ``synth.n_speakers=400`` or
``train.lr_phase1=5`` in an experiment config.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path


def read_key_values(path) -> list[tuple[int, str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    out = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out.append((lineno, key, val))
    return out


def _coerce(kind: str, val: str):
    kind = kind.split("|")[0].strip()
    if kind.startswith("Optional["):
        if val.lower() in ("none", ""):
            return None
        kind = kind[len("Optional["):-1]
    if kind == "bool":
        if val.lower() in ("1", "true", "yes", "on"):
            return True
        if val.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if kind == "int":
        return int(val)
    if kind == "float":
        return float(val)
    if kind == "tuple":
        return tuple(int(v) for v in val.split(","))
    return val


def _field_types(cls) -> dict:
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in dataclasses.fields(cls)}


def overrides_from_pairs(cls, pairs, source="config") -> dict:
    """Turn ``(lineno, key, value)`` triples into constructor kwargs for ``cls``."""
    types = _field_types(cls)
    nested: dict = {}
    values: dict = {}
    for lineno, key, val in pairs:
        head, _, rest = key.partition(".")
        where = f"{source}:{lineno}"
        if rest:
            if head not in types:
                raise ValueError(f"{where}: unknown key {key!r}")
            nested.setdefault(head, []).append((lineno, rest, val))
            continue
        if key not in types:
            raise ValueError(f"{where}: unknown key {key!r}")
        try:
            values[key] = _coerce(types[key], val)
        except ValueError as exc:
            raise ValueError(f"{where}: bad value for {key!r}: {exc}") from None
    sub_types = {f.name: f for f in dataclasses.fields(cls)}
    for head, sub in nested.items():
        default = sub_types[head].default_factory()  # nested configs use default_factory
        kw = overrides_from_pairs(type(default), sub, source)
        values[head] = dataclasses.replace(default, **kw)
    return values


def load_config(cls, path, **overrides):
    """Build ``cls`` from a key=value file; explicit keyword overrides win."""
    values = overrides_from_pairs(cls, read_key_values(path), str(path)) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def to_text(obj, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            lines.append(to_text(v, prefix + f.name + "."))
        elif isinstance(v, tuple):
            lines.append(f"{prefix}{f.name}={','.join(str(x) for x in v)}\n")
        else:
            lines.append(f"{prefix}{f.name}={v}\n")
    return "".join(lines)
