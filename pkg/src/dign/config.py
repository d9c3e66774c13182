"""Plain-text configuration: `key = value` lines, `#` comments.

A config dict maps string keys to string values; typed accessors parse on
read. Canonical form (sorted keys, single spacing, trailing newline) is
what gets digested and embedded in checkpoints, so two configs agree iff
their canonical texts agree.
"""

from __future__ import annotations

from .errors import ParseError
from .rng import fnv1a64

_KEY_OK = set("abcdefghijklmnopqrstuvwxyz0123456789_.")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key or not set(key) <= _KEY_OK:
            raise ParseError(f"{source}:{lineno}: bad key {key!r} "
                             "(lowercase letters, digits, _ and . only)")
        if key in out:
            raise ParseError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, source=path)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)  # shortest round-trip decimal
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def canonical_text(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def config_digest(cfg: dict[str, str]) -> int:
    return fnv1a64(canonical_text(cfg).encode("utf-8"))


def get_int(cfg: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in cfg:
        if default is None:
            raise ParseError(f"missing config key {key!r}")
        return default
    try:
        return int(cfg[key])
    except ValueError as e:
        raise ParseError(f"config key {key!r}: {cfg[key]!r} is not an integer") from e


def get_float(cfg: dict[str, str], key: str, default: float | None = None) -> float:
    if key not in cfg:
        if default is None:
            raise ParseError(f"missing config key {key!r}")
        return default
    try:
        return float(cfg[key])
    except ValueError as e:
        raise ParseError(f"config key {key!r}: {cfg[key]!r} is not a number") from e


def get_bool(cfg: dict[str, str], key: str, default: bool | None = None) -> bool:
    if key not in cfg:
        if default is None:
            raise ParseError(f"missing config key {key!r}")
        return default
    v = cfg[key].lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ParseError(f"config key {key!r}: {cfg[key]!r} is not a boolean")


def check_known_keys(cfg: dict[str, str], known: set[str], source: str = "config") -> None:
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ParseError(f"{source}: unrecognized keys: {', '.join(unknown)}")
