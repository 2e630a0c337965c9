"""JSON run configuration for ``eval`` / ``sweep``, validated before anything executes."""

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .cache import SYNTHETIC_KINDS, generate_synthetic
from .evaluate import DEFAULT_BYTES_PER_ELEMENT, gaussian_queries, tail_queries
from .linalg import derive_seed
from .policy import DEFAULT_ALPHA, DEFAULT_SINKS, CompressionConfig, Policy
from .scoring import DEFAULT_OBS_WINDOW, DEFAULT_SKETCH_DIM, Method
from .tensorfile import read_cache, read_tensor

_strict = {"type": "object", "additionalProperties": False}

SCHEMA = {
    **_strict,
    "required": ["cache", "grid"],
    "properties": {
        "cache": {
            "oneOf": [
                {**_strict, "required": ["path"], "properties": {"path": {"type": "string"}}},
                {
                    **_strict,
                    "required": ["generate"],
                    "properties": {
                        "generate": {
                            **_strict,
                            "required": ["kind", "groups", "tokens", "dim"],
                            "properties": {
                                "kind": {"enum": list(SYNTHETIC_KINDS)},
                                "groups": {"type": "integer", "minimum": 1},
                                "tokens": {"type": "integer", "minimum": 1},
                                "dim": {"type": "integer", "minimum": 1},
                                "seed": {"type": "integer"},
                                "params": {"type": "object", "additionalProperties": {"type": "number"}},
                                "vary_with_seed": {"type": "boolean"},
                            },
                        }
                    },
                },
            ]
        },
        "queries": {
            **_strict,
            "properties": {
                "source": {"enum": ["gaussian", "tail", "file"]},
                "window": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "path": {"type": "string"},
            },
        },
        "grid": {
            **_strict,
            "required": ["policies", "methods", "ratios", "seeds"],
            "properties": {
                "policies": {"type": "array", "minItems": 1, "items": {"enum": [p.value for p in Policy]}},
                "methods": {"type": "array", "minItems": 1, "items": {"enum": [m.value for m in Method]}},
                "ratios": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                },
                "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
            },
        },
        "compression": {
            **_strict,
            "properties": {
                "sketch_dim": {"type": "integer", "minimum": 1},
                "sinks": {"type": "integer", "minimum": 0},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "obs_window": {"type": "integer", "minimum": 1},
                "chunk_len": {"type": "integer", "minimum": 1},
                "adaptive_raw_scores": {"type": "boolean"},
                "knorm_retain_low": {"type": "boolean"},
            },
        },
        "bytes_per_element": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "output": {
            **_strict,
            "properties": {
                "dir": {"type": "string"},
                "per_group": {"type": "boolean"},
                "figures": {"type": "boolean"},
            },
        },
    },
}


class ConfigError(ValueError):
    """The run configuration failed validation."""


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid run config at {where}: {exc.message}") from None
        q = doc.get("queries", {})
        if q.get("source") == "file" and "path" not in q:
            raise ConfigError("queries.source 'file' needs queries.path")
        return cls(doc, Path(base_dir))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def grid(self) -> dict:
        return self.raw["grid"]

    @property
    def chunk_len(self) -> int:
        return self.raw.get("compression", {}).get("chunk_len", 32)

    @property
    def bytes_per_element(self) -> int:
        return self.raw.get("bytes_per_element", DEFAULT_BYTES_PER_ELEMENT)

    @property
    def workers(self) -> int:
        return self.raw.get("workers", 1)

    @property
    def output(self) -> dict:
        return self.raw.get("output", {})

    def compression_config(self) -> CompressionConfig:
        c = self.raw.get("compression", {})
        return CompressionConfig(
            compression_ratio=0.0,
            sketch_dim=c.get("sketch_dim", DEFAULT_SKETCH_DIM),
            sinks=c.get("sinks", DEFAULT_SINKS),
            safeguard_alpha=c.get("alpha", DEFAULT_ALPHA),
            obs_window=c.get("obs_window", DEFAULT_OBS_WINDOW),
            adaptive_raw_scores=c.get("adaptive_raw_scores", False),
            knorm_retain_low=c.get("knorm_retain_low", True),
        )

    def cache_source(self):
        """A fixed cache, or ``seed -> cache`` when a generated cache varies with the sweep seed."""
        src = self.raw["cache"]
        if "path" in src:
            cache, _, _ = read_cache(self._path(src["path"]))
            return cache
        gen = src["generate"]
        args = (gen["kind"], gen["groups"], gen["tokens"], gen["dim"])
        base_seed = gen.get("seed", 0)
        params = gen.get("params", {})
        if gen.get("vary_with_seed", False):
            return lambda seed: generate_synthetic(*args, derive_seed(base_seed, seed), **params)
        return generate_synthetic(*args, base_seed, **params)

    def queries_source(self):
        q = self.raw.get("queries", {})
        source = q.get("source", "gaussian")
        window = q.get("window", DEFAULT_OBS_WINDOW)
        if source == "file":
            arr, _ = read_tensor(self._path(q["path"]))
            if arr.ndim != 3:
                raise ConfigError(f"query file must hold a (g, w, d) tensor, got shape {arr.shape}")
            return arr
        if source == "tail":
            return lambda cache, seed: tail_queries(cache, window)
        qseed = q.get("seed", 0)
        return lambda cache, seed: gaussian_queries(cache.groups, window, cache.dim, derive_seed(qseed, seed))


def default_grid() -> dict:
    """Default grid: r=20, s=4, alpha=0.20 and four eviction ratios on a g=4, n=512, d=64 cache."""
    return {
        "cache": {"generate": {"kind": "planted_heavy", "groups": 4, "tokens": 512, "dim": 64, "seed": 0}},
        "queries": {"source": "gaussian", "window": DEFAULT_OBS_WINDOW, "seed": 0},
        "grid": {
            "policies": ["curdkv", "adacurdkv", "window_sinks", "chunked"],
            "methods": ["sketch_kv", "key_norm", "attention_sum"],
            "ratios": [0.3, 0.5, 0.7, 0.9],
            "seeds": [0],
        },
        "compression": {"sketch_dim": DEFAULT_SKETCH_DIM, "sinks": DEFAULT_SINKS, "alpha": DEFAULT_ALPHA},
    }


def ablation_grid(seeds=(0,)) -> dict:
    """{key, value, kv} x {exact, sketch} over four ratios on a g=4, n=512, d=64 cache."""
    methods = [f"{kind}_{mod}" for kind in ("exact_leverage", "sketch") for mod in ("key", "value", "kv")]
    doc = default_grid()
    doc["grid"] = {"policies": ["curdkv"], "methods": methods, "ratios": [0.3, 0.5, 0.7, 0.9], "seeds": list(seeds)}
    return doc

