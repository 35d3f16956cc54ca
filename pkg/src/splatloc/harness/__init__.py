"""Synthetic worlds, COLMAP ingestion, evaluation and the command line."""

from .colmap import ColmapModel, load_colmap
from .evaluate import EvalReport, evaluate
from .synthetic import SyntheticWorld, WorldConfig, generate_world
