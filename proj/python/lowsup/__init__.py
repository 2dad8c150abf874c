"""Python bindings for the lowsup conversational ASR pipeline."""

import json as _json

from . import _core
from ._core import (
    Error,
    InsufficientDataError,
    NgramLm,
    StageError,
    ValidationError,
    ctc_loss,
    edit_distance,
    fbank,
    kmeans_fit,
    stage_names,
)

__all__ = [
    "Error",
    "InsufficientDataError",
    "NgramLm",
    "StageError",
    "ValidationError",
    "apply_override",
    "character_error_rate",
    "ctc_loss",
    "default_config",
    "default_toy_spec",
    "edit_distance",
    "fbank",
    "kmeans_fit",
    "load_hypotheses",
    "make_toy_corpus",
    "merge_config",
    "run",
    "stage_names",
    "sweep",
    "word_error_rate",
]


def default_config():
    return _json.loads(_core.default_config())


def merge_config(user):
    """Fills defaults under a partial config; unknown keys raise ValidationError."""
    return _json.loads(_core.merge_config(_json.dumps(user)))


def apply_override(config, assignment):
    return _json.loads(_core.apply_override(_json.dumps(config), assignment))


def run(config, experiment_dir, force=False, only=(), verbose=False):
    """Runs the stage plan in `config` (a partial config is merged with defaults)."""
    cfg = merge_config(config)
    return _json.loads(_core.run_pipeline(_json.dumps(cfg), str(experiment_dir), force, list(only), verbose))


def sweep(config, hours, strategies, experiment_dir, verbose=False):
    """One pipeline per (hours, strategy); hours entries of None select the full manifest."""
    cfg = merge_config(config)
    return _json.loads(
        _core.sweep_supervision(_json.dumps(cfg), list(hours), list(strategies), str(experiment_dir), verbose)
    )


def default_toy_spec():
    return _json.loads(_core.default_toy_spec())


def make_toy_corpus(out_dir, **spec):
    full = default_toy_spec()
    full.update(spec)
    return _json.loads(_core.make_toy_corpus(_json.dumps(full), str(out_dir)))


def word_error_rate(refs, hyps):
    return _json.loads(_core.word_error_rate(dict(refs), dict(hyps)))


def character_error_rate(refs, hyps, include_spaces=True):
    return _json.loads(_core.character_error_rate(dict(refs), dict(hyps), include_spaces))


def load_hypotheses(path):
    with open(path, encoding="utf-8") as f:
        return _core.hypotheses_from_tsv(f.read())
