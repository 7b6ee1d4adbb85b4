"""Run manifests: a single YAML document that pins every stage hyperparameter,
with a frozen JSON echo written next to each artifact."""

import hashlib
import json
import os

import yaml

DEFAULT_MANIFEST = {
    "run_id": "run0",
    "out_root": "runs",
    "seed": 0,
    "deterministic": True,
    "dataset": {
        "name": "mnist",
        "data_root": "data",
        "private_labels": [0, 1, 2, 3, 4],
        "public_labels": [5, 6, 7, 8, 9],
        "image_shape": None,      # dataset canonical shape when null
        "n_per_class": 64,        # synthetic dataset only
    },
    "target": {"architecture": "resnet_small", "epochs": 10, "batch_size": 128,
               "lr": 0.01, "width": None},
    "eval": {"architecture": "vgg_small", "epochs": 10, "batch_size": 128,
             "lr": 0.01, "width": None,
             "train_on_full_data": True},
    "selection": {"n": 4000, "score_kind": "probability"},
    "gan": {"latent_dim": 128, "base_ch": 64, "batch_size": 64,
            "g_lr": 2e-4, "d_lr": 2e-4, "betas": [0.0, 0.9],
            "alpha": 0.2, "inv_loss": "mm", "total_iters": 10000,
            "d_steps": 1, "checkpoint_every": 2000,
            "aug": {"crop_scale": [0.8, 1.0], "flip_prob": 0.5,
                    "rotation_degrees": 10.0, "jitter": 0.2}},
    "invert": {"restarts": 5, "iters": 300, "m": 2, "lr": 0.1,
               "betas": [0.9, 0.999], "inv_loss": "mm",
               "images_per_class": 100, "classes": None},  # null = all classes
    "analyze": {"iters": 300, "losses": ["ce", "mm", "poincare"]},
}

ENV_PREFIX = "PLG_"


def _deep_update(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(text):
    for parse in (json.loads,):
        try:
            return parse(text)
        except (ValueError, TypeError):
            pass
    return text


def apply_env_overrides(manifest, environ=None):
    """Override manifest values from PLG_-prefixed env vars.

    ``PLG_SEED=3`` sets ``seed``; nesting uses double underscores, e.g.
    ``PLG_GAN__ALPHA=0.5`` sets ``gan.alpha``.
    """
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(manifest))
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _coerce(raw)
    return out


def load_manifest(path=None, overrides=None, environ=None):
    manifest = DEFAULT_MANIFEST
    if path:
        with open(path) as f:
            manifest = _deep_update(manifest, yaml.safe_load(f) or {})
    if overrides:
        manifest = _deep_update(manifest, overrides)
    return apply_env_overrides(manifest, environ)


def config_hash(manifest):
    """Stable hash over the manifest content; changes iff any field changes."""
    canon = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def run_dir(manifest):
    return os.path.join(manifest["out_root"], str(manifest["run_id"]))


def freeze(manifest, directory):
    """Write the frozen JSON echo beside the artifacts of a stage."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "manifest.frozen.json")
    with open(path, "w") as f:
        json.dump({"config_hash": config_hash(manifest), "manifest": manifest},
                  f, indent=2, sort_keys=True)
    return path


def save_manifest(manifest, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
