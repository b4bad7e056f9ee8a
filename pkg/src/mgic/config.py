"""Experiment configuration: one JSON document validated against SCHEMA.

``docs/config.schema.json`` is a verbatim dump of :data:`SCHEMA`.
"""

import copy
import hashlib
import json

import jsonschema

from .errors import SchemaError

__all__ = ["SCHEMA", "COMMANDS", "DEFAULTS", "validate", "load_config", "resolve", "config_hash"]

COMMANDS = ("analyze", "approx", "reconstruct", "classify", "gradcheck", "ablate")


def _obj(properties, required=()):
    out = {"type": "object", "additionalProperties": False, "properties": properties}
    if required:
        out["required"] = list(required)
    return out


_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INTS = {"type": "array", "items": _INT, "minItems": 1}
_PATH = {"type": "string", "minLength": 1}

_TEMPLATE = _obj({
    "variant": {"enum": ["simple", "bottleneck", "sequence"]},
    "d": {"type": "integer", "minimum": 1},
    "expansion": _POS,
    "layers": {"type": "array", "items": {"type": "string", "pattern": "^(bn|relu|conv[0-9]*)$"}},
})

_ARCH = _obj({
    "kind": {"enum": ["mgic_block", "template", "approx_net", "classifier", "transfer_chain"]},
    "c": _INT,
    "s_g": _INT,
    "s_c": _INT,
    "group_size": _INT,
    "clamp": {"type": "boolean"},
    "template": _TEMPLATE,
    "correction_gamma": _NONNEG,
    "alpha": _POS,
    "block": {"enum": ["mgic", "grouped", "full"]},
    "expansion": _POS,
    "d": _INT,
    "head_width": _INT,
    "baseline_group_size": _INT,
    "in_channels": _INT,
    "num_classes": _INT,
    "widths": _INTS,
}, required=["kind"])

_OPTIMIZER = {
    "lr": _NONNEG,
    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "weight_decay": _NONNEG,
    "schedule": {"enum": ["constant", "step"]},
    "step_every": _INT,
    "step_factor": _POS,
    "epochs": {"type": "integer", "minimum": 0},
    "batch_size": _INT,
}

_APPROX = _obj({
    "regime": {"enum": ["desk", "full"]},
    "n": _INT,
    "n_eval": _INT,
    "alpha": _POS,
    "block": {"enum": ["mgic", "grouped", "both"]},
    "s_g": _INT,
    "s_c": _INT,
    "expansion": _POS,
    "head_width": _INT,
    "correction_gamma": _NONNEG,
    "save_checkpoint": {"type": "boolean"},
    **_OPTIMIZER,
})

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
    "analyze": _obj({
        "arch": _ARCH,
        "checkpoint": _PATH,
        "input_shape": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 4},
        "sweep": _INTS,
    }),
    "approx": _APPROX,
    "reconstruct": _obj({
        "c": _INT,
        "n": _INT,
        "height": _INT,
        "width": _INT,
        "rank": _INT,
        "smooth": _NONNEG,
        "s_c": _INT,
        "s_g_list": _INTS,
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        **_OPTIMIZER,
    }),
    "classify": _obj({
        "train_images": _PATH,
        "train_labels": _PATH,
        "test_images": _PATH,
        "test_labels": _PATH,
        "generate_digits": {"type": "boolean"},
        "digit_copies": _INT,
        "model": _obj({
            "block": {"enum": ["mgic", "full"]},
            "widths": _INTS,
            "s_g": _INT,
            "s_c": _INT,
            "template": _TEMPLATE,
            "correction_gamma": _NONNEG,
        }),
        "control": {"type": "boolean"},
        "max_train": _INT,
        **_OPTIMIZER,
    }),
    "gradcheck": _obj({
        "eps": _POS,
        "tol": _POS,
        "points": _INT,
        "block": _obj({"c": _INT, "s_g": _INT, "s_c": _INT}),
    }),
    "ablate": _obj({
        "task": {"enum": ["analyze", "approx"]},
        "c": _INT,
        "d": _INT,
        "s_g_list": _INTS,
        "s_c_list": _INTS,
        "approx": _APPROX,
    }),
})

DEFAULTS = {
    "seed": 0,
    "analyze": {},
    "approx": {
        "regime": "desk", "n": 10000, "n_eval": 2000, "alpha": 0.6, "block": "both",
        "s_g": 16, "s_c": 16, "expansion": 2.0, "head_width": 2, "correction_gamma": 0.1,
        "save_checkpoint": True,
        "lr": 1e-4, "momentum": 0.9, "weight_decay": 1e-4, "schedule": "constant",
        "step_every": 30, "step_factor": 10.0, "epochs": 200, "batch_size": 128,
    },
    "reconstruct": {
        "c": 64, "n": 256, "height": 8, "width": 8, "rank": 16, "smooth": 1.5, "s_c": 8,
        "s_g_list": [4, 8, 16, 32],
        "lr": 0.2, "momentum": 0.9, "weight_decay": 0.0, "schedule": "constant",
        "step_every": 30, "step_factor": 10.0, "epochs": 300, "batch_size": 64,
    },
    "classify": {
        "generate_digits": True, "digit_copies": 10,
        "model": {"block": "mgic", "widths": [64, 128], "s_g": 16, "s_c": 16,
                  "template": {"variant": "simple", "d": 3}, "correction_gamma": 1.0},
        "control": True,
        "lr": 0.05, "momentum": 0.9, "weight_decay": 1e-4, "schedule": "step",
        "step_every": 2, "step_factor": 10.0, "epochs": 3, "batch_size": 32,
    },
    "gradcheck": {"eps": 1e-6, "tol": 1e-4, "points": 10, "block": {"c": 16, "s_g": 4, "s_c": 4}},
    "ablate": {"task": "analyze", "c": 64, "d": 3, "s_g_list": [4, 8, 16], "s_c_list": [8, 16, 32]},
}

# full-scale function-approximation protocol
FULL_APPROX = {"n": 50000, "epochs": 1000, "batch_size": 128, "lr": 1e-4}


def _pointer(path):
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path) if path else ""


def validate(doc):
    """Raise :class:`SchemaError` (with a JSON pointer) unless ``doc`` is valid."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.path), list(map(str, e.path))))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, pointer=_pointer(err.absolute_path))
    return doc


def load_config(path):
    """Read and validate a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    return validate(doc)


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(doc, command):
    """Section for ``command`` with defaults filled in, plus the seed."""
    section = _merge(DEFAULTS.get(command, {}), doc.get(command, {}))
    if command == "approx" and section.get("regime") == "full":
        section = _merge(section, {k: v for k, v in FULL_APPROX.items()
                                   if k not in doc.get("approx", {})})
    return section, int(doc.get("seed", DEFAULTS["seed"]))


def config_hash(doc):
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
