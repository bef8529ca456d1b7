"""Run configuration: plain sectioned key = value text, a typed schema, and
a stable fingerprint stamped into every artifact.

The canonical dump (sorted sections and keys, normalized values) is what
gets hashed, so two files that parse to the same configuration share a
fingerprint regardless of formatting.
"""

from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """Parse or validation failure; message carries the offending line."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float_list(s: str):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_int_list(s: str):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# (type converter, default) per section.key; unknown keys are rejected
SCHEMA = {
    "schedule": {
        "steps": (int, 1000),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
    },
    "lumpy": {
        "size": (int, 64),
        "count": (int, 256),
        "mean_lump_count": (float, 80.0),
        "lump_amplitude": (float, 0.2),
        "lump_width": (float, 4.0),
        "dc_offset": (float, 0.1),
        "seed": (int, 1000),
    },
    "measure": {
        "sigma": (float, 0.06),
        "sigma_mode": (str, "known"),  # known | estimated
        "seed": (int, 2000),
    },
    "denoiser": {
        "channels": (int, 32),
        "depth": (int, 4),
        "time_embed_dim": (int, 64),
        "init_seed": (int, 3000),
    },
    "train": {
        "lambda": (float, 0.2),
        "lr": (float, 1e-3),
        "batch": (int, 16),
        "steps": (int, 2000),
        "seed": (int, 4000),
        "log_every": (int, 25),
        "heldout": (int, 32),
    },
    "sample": {
        "num_ddim_steps": (int, 50),
        "count": (int, 256),
        "seed": (int, 5000),
        "chunk": (int, 64),
        "preview_count": (int, 8),
    },
    "ske": {
        "patch_size": (int, 32),
        "signal_width": (float, 0.3),
        "signal_amplitude": (float, 0.32),
        "width_unit": (str, "relative"),
        "train_per_class": (int, 400),
        "test_per_class": (int, 400),
        "seed": (int, 6000),
    },
    "eval": {
        "ssim_pairs": (int, 1000),
        "ssim_bins": (int, 40),
        "seed": (int, 7000),
    },
    "ablate": {
        "lambdas": (_parse_float_list, (0.0, 0.2, 0.5, 0.75)),
        "seeds": (_parse_int_list, (1, 2, 3)),
        "train_steps": (int, 800),
        "sample_count": (int, 128),
    },
    "paths": {
        "out_root": (str, "runs"),
    },
}


class RunConfig:
    """Typed {section: {key: value}} mapping with schema defaults."""

    def __init__(self, values: dict | None = None):
        self._values = {s: dict(d) for s, d in (values or {}).items()}
        for section, keys in SCHEMA.items():
            sec = self._values.setdefault(section, {})
            for key, (_, default) in keys.items():
                sec.setdefault(key, default)

    def __getitem__(self, section: str) -> dict:
        return self._values[section]

    def get(self, section: str, key: str):
        return self._values[section][key]

    def set(self, section: str, key: str, raw: str, where: str = "override"):
        conv = _lookup(section, key, where)
        try:
            self._values[section][key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from exc

    def dump(self, sections=None) -> str:
        """Canonical text form: sorted sections and keys."""
        lines = []
        for section in sorted(self._values):
            if sections is not None and section not in sections:
                continue
            lines.append(f"[{section}]")
            for key in sorted(self._values[section]):
                lines.append(f"{key} = {_fmt(self._values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def fingerprint(self, sections=None) -> str:
        """Stable digest of the configuration content. Output locations do
        not participate: the same experiment hashed anywhere is the same."""
        if sections is None:
            sections = tuple(s for s in self._values if s != "paths")
        return hashlib.sha256(self.dump(sections).encode()).hexdigest()[:16]


# sections that determine a trained checkpoint; anything else may change
# without invalidating it
TRAIN_SECTIONS = ("schedule", "lumpy", "measure", "denoiser", "train")


def _lookup(section: str, key: str, where: str):
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]")
    return SCHEMA[section][key][0]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse sectioned key = value text; errors carry the line number."""
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: unterminated section header {line!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        cfg.set(section, key.strip(), value.strip(), where=where)
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), source=path)


def apply_overrides(cfg: RunConfig, overrides: list) -> RunConfig:
    """Apply --set section.key=value pairs in order."""
    for item in overrides:
        head, sep, value = item.partition("=")
        if not sep or "." not in head:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        section, _, key = head.partition(".")
        cfg.set(section.strip(), key.strip(), value.strip(), where=f"--set {item}")
    return cfg


def default_config() -> RunConfig:
    return RunConfig()
