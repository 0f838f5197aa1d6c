"""Flat key=value text documents (task specs, experiment configs)."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def format_kv(pairs: dict) -> str:
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))


def write_kv_file(path: str | Path, pairs: dict) -> None:
    Path(path).write_text(format_kv(pairs), encoding="utf-8")


def reject_unknown(pairs: dict, known: set[str], what: str) -> None:
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
