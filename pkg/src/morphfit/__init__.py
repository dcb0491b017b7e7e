"""Desk-scale 3D face shape toolkit.

Submodules:
  geometry       shapes, poses, projection, Procrustes alignment
  fitting        multi-image landmark fitting with a shared identity
  synthetic      seeded model generator, pose sampling, depth rasterizer
  network        encoder/decoder/classifier with manual gradients, trainers
  evaluation     verification, identification, reconstruction metrics
  serialization  OBJ, CSV and binary container formats
  config         flat run configuration shared by all pipeline stages
  cli            command line pipeline
"""

from .errors import (CheckpointError, CorruptionError, DegenerateGeometryError,
                     InvalidArgumentError, InvariantViolationError,
                     MorphfitError, NumericalFailureError, ParseError,
                     UnderdeterminedError, VersionMismatchError)

__all__ = [
    "CheckpointError", "CorruptionError", "DegenerateGeometryError",
    "InvalidArgumentError", "InvariantViolationError", "MorphfitError",
    "NumericalFailureError", "ParseError", "UnderdeterminedError",
    "VersionMismatchError",
]

__version__ = "0.1.0"
