"""Python access to the mapseg core: synthetic scenes, losses, matching,
evaluation, training and gradient checks."""

import json as _json

from . import _mapseg
from ._mapseg import (  # noqa: F401
    CheckpointIncompatibleError,
    ConfigError,
    DegenerateGeometryError,
    DomainError,
    FormatError,
    Frame,
    FrameMismatchError,
    IoError,
    MapSegError,
    NumericError,
    OutOfRangeError,
    ShapeError,
    average_precision,
    chamfer_distance,
    dice_loss,
    equivalent_orderings,
    hungarian_match,
    resample_element,
    run_gradcheck,
    seg_ce_loss,
    seg_loss,
    solve_assignment,
    total_loss,
)


def _text(config):
    if config is None:
        return ""
    if isinstance(config, str):
        return config
    return _json.dumps(config)


def default_config():
    return _json.loads(_mapseg.default_config())


def normalize_config(config=None):
    """Defaults merged with `config`, validated. Raises ConfigError."""
    return _json.loads(_mapseg.normalize_config(_text(config)))


def config_schema():
    return _json.loads(_mapseg.config_schema())


def generate_scene(seed, config=None):
    return _mapseg.generate_scene(seed, _text(config))


def generate_dataset(config=None):
    return _mapseg.generate_dataset(_text(config))


def save_dataset(frames, directory, config=None):
    _mapseg.save_dataset(frames, _text(config), str(directory))


def load_dataset(directory):
    """Returns (scene config dict, frames)."""
    cfg, frames = _mapseg.load_dataset(str(directory))
    return _json.loads(cfg), frames


def evaluate(detections, gts, config=None):
    return _mapseg.evaluate(detections, gts, _text(config))


class Model(_mapseg.Model):
    def __init__(self, config=None):
        super().__init__(_text(config))


class Trainer:
    """Single-threaded deterministic trainer over in-memory frames."""

    def __init__(self, config=None, frames=None, _native=None):
        if _native is not None:
            self._t = _native
            return
        if frames is None:
            frames = generate_dataset(config)
        self._t = _mapseg.Trainer(_text(config), frames)

    @classmethod
    def resume(cls, checkpoint, frames):
        return cls(_native=_mapseg.Trainer.resume(str(checkpoint), frames))

    def train_step(self):
        return self._t.train_step()

    def run(self, max_steps=-1):
        return self._t.run(max_steps)

    def save(self, path):
        self._t.save(str(path))

    def evaluate(self, frames):
        return self._t.evaluate(frames)

    @property
    def step(self):
        return self._t.step

    @property
    def total_steps(self):
        return self._t.total_steps

    @property
    def done(self):
        return self._t.done

    @property
    def config(self):
        return _json.loads(self._t.config)
