"""Parser for the line-oriented ``key = value`` config files.

``#`` starts a comment, blank lines are ignored, there is no nesting. Unknown
keys are rejected by the callers so a typo never silently falls back to a
default.
"""

from __future__ import annotations


class ConfigError(ValueError):
    pass


def parse_lines(text: str, *, repeatable=()) -> dict:
    """Return ``{key: value}``; keys in ``repeatable`` collect a list of values."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in repeatable:
            out.setdefault(key, []).append(value)
        elif key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        else:
            out[key] = value
    return out


def check_keys(found, allowed, what="config"):
    unknown = sorted(set(found) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {', '.join(unknown)}")


def parse_float_list(value: str) -> list[float]:
    return [float(v) for v in value.replace(",", " ").split()]


def parse_int_list(value: str) -> list[int]:
    return [int(v) for v in value.replace(",", " ").split()]
