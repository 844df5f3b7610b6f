"""Run manifests, content digests, and the key = value config format.

Every CLI step appends one line to ``manifest.txt`` in its output directory
recording the digests of its inputs and outputs, so a run directory is
self-describing and reruns can be checked for byte-identical artifacts.
Timestamps are deliberately kept out of the manifest.
"""

from __future__ import annotations

import hashlib
import os
from typing import Mapping, Sequence

from .errors import ConfigError


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from string/int parts via sha256.

    Used to give every pipeline stage (site, purpose, fraction, ...) its own
    reproducible stream independent of call order.
    """
    key = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


def manifest_line(command: str, inputs: Mapping[str, str], outputs: Mapping[str, str],
                  seed: int | None = None) -> str:
    def fmt(mapping: Mapping[str, str]) -> str:
        return ",".join(f"{os.path.basename(str(k))}:{v}" for k, v in sorted(mapping.items()))

    fields = [f"command={command}", f"inputs={fmt(inputs)}", f"outputs={fmt(outputs)}"]
    if seed is not None:
        fields.append(f"seed={seed}")
    return " ".join(fields)


def append_manifest(run_dir: str | os.PathLike, line: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "manifest.txt"), "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat ``key = value`` config format.

    Blank lines and lines starting with '#' are ignored. Keys may not repeat.
    Values are returned as raw strings; callers coerce types.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str | os.PathLike) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in values)


def config_get(cfg: Mapping[str, str], key: str, cast, default=None, required: bool = False):
    if key not in cfg:
        if required:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return cast(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {cfg[key]!r}") from exc


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_list(text: str, cast=str) -> list:
    text = text.strip()
    if not text:
        return []
    return [cast(part.strip()) for part in text.split(",") if part.strip()]


def verify_declared_digests(cfg: Mapping[str, str], base_dir: str | os.PathLike = ".") -> None:
    """Check any ``<key>_digest`` entries against the file named by ``<key>``.

    A declared digest that does not match the file on disk is a refusal to
    run: the config was written against different inputs.
    """
    for key, expected in cfg.items():
        if not key.endswith("_digest"):
            continue
        path_key = key[: -len("_digest")]
        if path_key not in cfg:
            continue
        path = os.path.join(base_dir, cfg[path_key])
        if not os.path.exists(path):
            raise ConfigError(f"declared input {cfg[path_key]!r} not found")
        actual = sha256_file(path)
        if actual != expected:
            raise ConfigError(
                f"digest mismatch for {cfg[path_key]!r}: declared {expected[:12]}..., "
                f"found {actual[:12]}..."
            )


def fmt_float(x: float) -> str:
    """Shortest round-trip decimal form, stable across reruns of the same numbers."""
    return repr(float(x))
