"""Density grids, marching-cube isosurfaces, albedo texturing, mesh files, previews.

Lattice convention: grid index (i, j, k) maps to (x, y, z) and spans the
bounds inclusively, so a grid of resolution 2R-1 contains the resolution-R
grid on its even indices. Inside the surface means density above threshold.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import tensor_core as tc
from generator import density_gradient
from renderer import RadianceField
from scene_sampling import CameraPose, LightCondition, generate_rays
from tensor_core import Tensor

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 50_000
TILE = 8
MIN_AREA = 1e-12

# cube corners in (i, j, k) order and, per edge, its lower corner and axis
CORNER_OFFSETS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                           [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
EDGE_BASE = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
                      [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
                      [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2])

# Triangle edge lists per cube configuration (bit c set when corner c is
# below the threshold), after Paul Bourke's polygonise tables.
_TRIANGLE_ROWS: tuple[tuple[int, ...], ...] = (
    (),
    (0, 8, 3),
    (0, 1, 9),
    (1, 8, 3, 9, 8, 1),
    (1, 2, 10),
    (0, 8, 3, 1, 2, 10),
    (9, 2, 10, 0, 2, 9),
    (2, 8, 3, 2, 10, 8, 10, 9, 8),
    (3, 11, 2),
    (0, 11, 2, 8, 11, 0),
    (1, 9, 0, 2, 3, 11),
    (1, 11, 2, 1, 9, 11, 9, 8, 11),
    (3, 10, 1, 11, 10, 3),
    (0, 10, 1, 0, 8, 10, 8, 11, 10),
    (3, 9, 0, 3, 11, 9, 11, 10, 9),
    (9, 8, 10, 10, 8, 11),
    (4, 7, 8),
    (4, 3, 0, 7, 3, 4),
    (0, 1, 9, 8, 4, 7),
    (4, 1, 9, 4, 7, 1, 7, 3, 1),
    (1, 2, 10, 8, 4, 7),
    (3, 4, 7, 3, 0, 4, 1, 2, 10),
    (9, 2, 10, 9, 0, 2, 8, 4, 7),
    (2, 10, 9, 2, 9, 7, 2, 7, 3, 7, 9, 4),
    (8, 4, 7, 3, 11, 2),
    (11, 4, 7, 11, 2, 4, 2, 0, 4),
    (9, 0, 1, 8, 4, 7, 2, 3, 11),
    (4, 7, 11, 9, 4, 11, 9, 11, 2, 9, 2, 1),
    (3, 10, 1, 3, 11, 10, 7, 8, 4),
    (1, 11, 10, 1, 4, 11, 1, 0, 4, 7, 11, 4),
    (4, 7, 8, 9, 0, 11, 9, 11, 10, 11, 0, 3),
    (4, 7, 11, 4, 11, 9, 9, 11, 10),
    (9, 5, 4),
    (9, 5, 4, 0, 8, 3),
    (0, 5, 4, 1, 5, 0),
    (8, 5, 4, 8, 3, 5, 3, 1, 5),
    (1, 2, 10, 9, 5, 4),
    (3, 0, 8, 1, 2, 10, 4, 9, 5),
    (5, 2, 10, 5, 4, 2, 4, 0, 2),
    (2, 10, 5, 3, 2, 5, 3, 5, 4, 3, 4, 8),
    (9, 5, 4, 2, 3, 11),
    (0, 11, 2, 0, 8, 11, 4, 9, 5),
    (0, 5, 4, 0, 1, 5, 2, 3, 11),
    (2, 1, 5, 2, 5, 8, 2, 8, 11, 4, 8, 5),
    (10, 3, 11, 10, 1, 3, 9, 5, 4),
    (4, 9, 5, 0, 8, 1, 8, 10, 1, 8, 11, 10),
    (5, 4, 0, 5, 0, 11, 5, 11, 10, 11, 0, 3),
    (5, 4, 8, 5, 8, 10, 10, 8, 11),
    (9, 7, 8, 5, 7, 9),
    (9, 3, 0, 9, 5, 3, 5, 7, 3),
    (0, 7, 8, 0, 1, 7, 1, 5, 7),
    (1, 5, 3, 3, 5, 7),
    (9, 7, 8, 9, 5, 7, 10, 1, 2),
    (10, 1, 2, 9, 5, 0, 5, 3, 0, 5, 7, 3),
    (8, 0, 2, 8, 2, 5, 8, 5, 7, 10, 5, 2),
    (2, 10, 5, 2, 5, 3, 3, 5, 7),
    (7, 9, 5, 7, 8, 9, 3, 11, 2),
    (9, 5, 7, 9, 7, 2, 9, 2, 0, 2, 7, 11),
    (2, 3, 11, 0, 1, 8, 1, 7, 8, 1, 5, 7),
    (11, 2, 1, 11, 1, 7, 7, 1, 5),
    (9, 5, 8, 8, 5, 7, 10, 1, 3, 10, 3, 11),
    (5, 7, 0, 5, 0, 9, 7, 11, 0, 1, 0, 10, 11, 10, 0),
    (11, 10, 0, 11, 0, 3, 10, 5, 0, 8, 0, 7, 5, 7, 0),
    (11, 10, 5, 7, 11, 5),
    (10, 6, 5),
    (0, 8, 3, 5, 10, 6),
    (9, 0, 1, 5, 10, 6),
    (1, 8, 3, 1, 9, 8, 5, 10, 6),
    (1, 6, 5, 2, 6, 1),
    (1, 6, 5, 1, 2, 6, 3, 0, 8),
    (9, 6, 5, 9, 0, 6, 0, 2, 6),
    (5, 9, 8, 5, 8, 2, 5, 2, 6, 3, 2, 8),
    (2, 3, 11, 10, 6, 5),
    (11, 0, 8, 11, 2, 0, 10, 6, 5),
    (0, 1, 9, 2, 3, 11, 5, 10, 6),
    (5, 10, 6, 1, 9, 2, 9, 11, 2, 9, 8, 11),
    (6, 3, 11, 6, 5, 3, 5, 1, 3),
    (0, 8, 11, 0, 11, 5, 0, 5, 1, 5, 11, 6),
    (3, 11, 6, 0, 3, 6, 0, 6, 5, 0, 5, 9),
    (6, 5, 9, 6, 9, 11, 11, 9, 8),
    (5, 10, 6, 4, 7, 8),
    (4, 3, 0, 4, 7, 3, 6, 5, 10),
    (1, 9, 0, 5, 10, 6, 8, 4, 7),
    (10, 6, 5, 1, 9, 7, 1, 7, 3, 7, 9, 4),
    (6, 1, 2, 6, 5, 1, 4, 7, 8),
    (1, 2, 5, 5, 2, 6, 3, 0, 4, 3, 4, 7),
    (8, 4, 7, 9, 0, 5, 0, 6, 5, 0, 2, 6),
    (7, 3, 9, 7, 9, 4, 3, 2, 9, 5, 9, 6, 2, 6, 9),
    (3, 11, 2, 7, 8, 4, 10, 6, 5),
    (5, 10, 6, 4, 7, 2, 4, 2, 0, 2, 7, 11),
    (0, 1, 9, 4, 7, 8, 2, 3, 11, 5, 10, 6),
    (9, 2, 1, 9, 11, 2, 9, 4, 11, 7, 11, 4, 5, 10, 6),
    (8, 4, 7, 3, 11, 5, 3, 5, 1, 5, 11, 6),
    (5, 1, 11, 5, 11, 6, 1, 0, 11, 7, 11, 4, 0, 4, 11),
    (0, 5, 9, 0, 6, 5, 0, 3, 6, 11, 6, 3, 8, 4, 7),
    (6, 5, 9, 6, 9, 11, 4, 7, 9, 7, 11, 9),
    (10, 4, 9, 6, 4, 10),
    (4, 10, 6, 4, 9, 10, 0, 8, 3),
    (10, 0, 1, 10, 6, 0, 6, 4, 0),
    (8, 3, 1, 8, 1, 6, 8, 6, 4, 6, 1, 10),
    (1, 4, 9, 1, 2, 4, 2, 6, 4),
    (3, 0, 8, 1, 2, 9, 2, 4, 9, 2, 6, 4),
    (0, 2, 4, 4, 2, 6),
    (8, 3, 2, 8, 2, 4, 4, 2, 6),
    (10, 4, 9, 10, 6, 4, 11, 2, 3),
    (0, 8, 2, 2, 8, 11, 4, 9, 10, 4, 10, 6),
    (3, 11, 2, 0, 1, 6, 0, 6, 4, 6, 1, 10),
    (6, 4, 1, 6, 1, 10, 4, 8, 1, 2, 1, 11, 8, 11, 1),
    (9, 6, 4, 9, 3, 6, 9, 1, 3, 11, 6, 3),
    (8, 11, 1, 8, 1, 0, 11, 6, 1, 9, 1, 4, 6, 4, 1),
    (3, 11, 6, 3, 6, 0, 0, 6, 4),
    (6, 4, 8, 11, 6, 8),
    (7, 10, 6, 7, 8, 10, 8, 9, 10),
    (0, 7, 3, 0, 10, 7, 0, 9, 10, 6, 7, 10),
    (10, 6, 7, 1, 10, 7, 1, 7, 8, 1, 8, 0),
    (10, 6, 7, 10, 7, 1, 1, 7, 3),
    (1, 2, 6, 1, 6, 8, 1, 8, 9, 8, 6, 7),
    (2, 6, 9, 2, 9, 1, 6, 7, 9, 0, 9, 3, 7, 3, 9),
    (7, 8, 0, 7, 0, 6, 6, 0, 2),
    (7, 3, 2, 6, 7, 2),
    (2, 3, 11, 10, 6, 8, 10, 8, 9, 8, 6, 7),
    (2, 0, 7, 2, 7, 11, 0, 9, 7, 6, 7, 10, 9, 10, 7),
    (1, 8, 0, 1, 7, 8, 1, 10, 7, 6, 7, 10, 2, 3, 11),
    (11, 2, 1, 11, 1, 7, 10, 6, 1, 6, 7, 1),
    (8, 9, 6, 8, 6, 7, 9, 1, 6, 11, 6, 3, 1, 3, 6),
    (0, 9, 1, 11, 6, 7),
    (7, 8, 0, 7, 0, 6, 3, 11, 0, 11, 6, 0),
    (7, 11, 6),
    (7, 6, 11),
    (3, 0, 8, 11, 7, 6),
    (0, 1, 9, 11, 7, 6),
    (8, 1, 9, 8, 3, 1, 11, 7, 6),
    (10, 1, 2, 6, 11, 7),
    (1, 2, 10, 3, 0, 8, 6, 11, 7),
    (2, 9, 0, 2, 10, 9, 6, 11, 7),
    (6, 11, 7, 2, 10, 3, 10, 8, 3, 10, 9, 8),
    (7, 2, 3, 6, 2, 7),
    (7, 0, 8, 7, 6, 0, 6, 2, 0),
    (2, 7, 6, 2, 3, 7, 0, 1, 9),
    (1, 6, 2, 1, 8, 6, 1, 9, 8, 8, 7, 6),
    (10, 7, 6, 10, 1, 7, 1, 3, 7),
    (10, 7, 6, 1, 7, 10, 1, 8, 7, 1, 0, 8),
    (0, 3, 7, 0, 7, 10, 0, 10, 9, 6, 10, 7),
    (7, 6, 10, 7, 10, 8, 8, 10, 9),
    (6, 8, 4, 11, 8, 6),
    (3, 6, 11, 3, 0, 6, 0, 4, 6),
    (8, 6, 11, 8, 4, 6, 9, 0, 1),
    (9, 4, 6, 9, 6, 3, 9, 3, 1, 11, 3, 6),
    (6, 8, 4, 6, 11, 8, 2, 10, 1),
    (1, 2, 10, 3, 0, 11, 0, 6, 11, 0, 4, 6),
    (4, 11, 8, 4, 6, 11, 0, 2, 9, 2, 10, 9),
    (10, 9, 3, 10, 3, 2, 9, 4, 3, 11, 3, 6, 4, 6, 3),
    (8, 2, 3, 8, 4, 2, 4, 6, 2),
    (0, 4, 2, 4, 6, 2),
    (1, 9, 0, 2, 3, 4, 2, 4, 6, 4, 3, 8),
    (1, 9, 4, 1, 4, 2, 2, 4, 6),
    (8, 1, 3, 8, 6, 1, 8, 4, 6, 6, 10, 1),
    (10, 1, 0, 10, 0, 6, 6, 0, 4),
    (4, 6, 3, 4, 3, 8, 6, 10, 3, 0, 3, 9, 10, 9, 3),
    (10, 9, 4, 6, 10, 4),
    (4, 9, 5, 7, 6, 11),
    (0, 8, 3, 4, 9, 5, 11, 7, 6),
    (5, 0, 1, 5, 4, 0, 7, 6, 11),
    (11, 7, 6, 8, 3, 4, 3, 5, 4, 3, 1, 5),
    (9, 5, 4, 10, 1, 2, 7, 6, 11),
    (6, 11, 7, 1, 2, 10, 0, 8, 3, 4, 9, 5),
    (7, 6, 11, 5, 4, 10, 4, 2, 10, 4, 0, 2),
    (3, 4, 8, 3, 5, 4, 3, 2, 5, 10, 5, 2, 11, 7, 6),
    (7, 2, 3, 7, 6, 2, 5, 4, 9),
    (9, 5, 4, 0, 8, 6, 0, 6, 2, 6, 8, 7),
    (3, 6, 2, 3, 7, 6, 1, 5, 0, 5, 4, 0),
    (6, 2, 8, 6, 8, 7, 2, 1, 8, 4, 8, 5, 1, 5, 8),
    (9, 5, 4, 10, 1, 6, 1, 7, 6, 1, 3, 7),
    (1, 6, 10, 1, 7, 6, 1, 0, 7, 8, 7, 0, 9, 5, 4),
    (4, 0, 10, 4, 10, 5, 0, 3, 10, 6, 10, 7, 3, 7, 10),
    (7, 6, 10, 7, 10, 8, 5, 4, 10, 4, 8, 10),
    (6, 9, 5, 6, 11, 9, 11, 8, 9),
    (3, 6, 11, 0, 6, 3, 0, 5, 6, 0, 9, 5),
    (0, 11, 8, 0, 5, 11, 0, 1, 5, 5, 6, 11),
    (6, 11, 3, 6, 3, 5, 5, 3, 1),
    (1, 2, 10, 9, 5, 11, 9, 11, 8, 11, 5, 6),
    (0, 11, 3, 0, 6, 11, 0, 9, 6, 5, 6, 9, 1, 2, 10),
    (11, 8, 5, 11, 5, 6, 8, 0, 5, 10, 5, 2, 0, 2, 5),
    (6, 11, 3, 6, 3, 5, 2, 10, 3, 10, 5, 3),
    (5, 8, 9, 5, 2, 8, 5, 6, 2, 3, 8, 2),
    (9, 5, 6, 9, 6, 0, 0, 6, 2),
    (1, 5, 8, 1, 8, 0, 5, 6, 8, 3, 8, 2, 6, 2, 8),
    (1, 5, 6, 2, 1, 6),
    (1, 3, 6, 1, 6, 10, 3, 8, 6, 5, 6, 9, 8, 9, 6),
    (10, 1, 0, 10, 0, 6, 9, 5, 0, 5, 6, 0),
    (0, 3, 8, 5, 6, 10),
    (10, 5, 6),
    (11, 5, 10, 7, 5, 11),
    (11, 5, 10, 11, 7, 5, 8, 3, 0),
    (5, 11, 7, 5, 10, 11, 1, 9, 0),
    (10, 7, 5, 10, 11, 7, 9, 8, 1, 8, 3, 1),
    (11, 1, 2, 11, 7, 1, 7, 5, 1),
    (0, 8, 3, 1, 2, 7, 1, 7, 5, 7, 2, 11),
    (9, 7, 5, 9, 2, 7, 9, 0, 2, 2, 11, 7),
    (7, 5, 2, 7, 2, 11, 5, 9, 2, 3, 2, 8, 9, 8, 2),
    (2, 5, 10, 2, 3, 5, 3, 7, 5),
    (8, 2, 0, 8, 5, 2, 8, 7, 5, 10, 2, 5),
    (9, 0, 1, 5, 10, 3, 5, 3, 7, 3, 10, 2),
    (9, 8, 2, 9, 2, 1, 8, 7, 2, 10, 2, 5, 7, 5, 2),
    (1, 3, 5, 3, 7, 5),
    (0, 8, 7, 0, 7, 1, 1, 7, 5),
    (9, 0, 3, 9, 3, 5, 5, 3, 7),
    (9, 8, 7, 5, 9, 7),
    (5, 8, 4, 5, 10, 8, 10, 11, 8),
    (5, 0, 4, 5, 11, 0, 5, 10, 11, 11, 3, 0),
    (0, 1, 9, 8, 4, 10, 8, 10, 11, 10, 4, 5),
    (10, 11, 4, 10, 4, 5, 11, 3, 4, 9, 4, 1, 3, 1, 4),
    (2, 5, 1, 2, 8, 5, 2, 11, 8, 4, 5, 8),
    (0, 4, 11, 0, 11, 3, 4, 5, 11, 2, 11, 1, 5, 1, 11),
    (0, 2, 5, 0, 5, 9, 2, 11, 5, 4, 5, 8, 11, 8, 5),
    (9, 4, 5, 2, 11, 3),
    (2, 5, 10, 3, 5, 2, 3, 4, 5, 3, 8, 4),
    (5, 10, 2, 5, 2, 4, 4, 2, 0),
    (3, 10, 2, 3, 5, 10, 3, 8, 5, 4, 5, 8, 0, 1, 9),
    (5, 10, 2, 5, 2, 4, 1, 9, 2, 9, 4, 2),
    (8, 4, 5, 8, 5, 3, 3, 5, 1),
    (0, 4, 5, 1, 0, 5),
    (8, 4, 5, 8, 5, 3, 9, 0, 5, 0, 3, 5),
    (9, 4, 5),
    (4, 11, 7, 4, 9, 11, 9, 10, 11),
    (0, 8, 3, 4, 9, 7, 9, 11, 7, 9, 10, 11),
    (1, 10, 11, 1, 11, 4, 1, 4, 0, 7, 4, 11),
    (3, 1, 4, 3, 4, 8, 1, 10, 4, 7, 4, 11, 10, 11, 4),
    (4, 11, 7, 9, 11, 4, 9, 2, 11, 9, 1, 2),
    (9, 7, 4, 9, 11, 7, 9, 1, 11, 2, 11, 1, 0, 8, 3),
    (11, 7, 4, 11, 4, 2, 2, 4, 0),
    (11, 7, 4, 11, 4, 2, 8, 3, 4, 3, 2, 4),
    (2, 9, 10, 2, 7, 9, 2, 3, 7, 7, 4, 9),
    (9, 10, 7, 9, 7, 4, 10, 2, 7, 8, 7, 0, 2, 0, 7),
    (3, 7, 10, 3, 10, 2, 7, 4, 10, 1, 10, 0, 4, 0, 10),
    (1, 10, 2, 8, 7, 4),
    (4, 9, 1, 4, 1, 7, 7, 1, 3),
    (4, 9, 1, 4, 1, 7, 0, 8, 1, 8, 7, 1),
    (4, 0, 3, 7, 4, 3),
    (4, 8, 7),
    (9, 10, 8, 10, 11, 8),
    (3, 0, 9, 3, 9, 11, 11, 9, 10),
    (0, 1, 10, 0, 10, 8, 8, 10, 11),
    (3, 1, 10, 11, 3, 10),
    (1, 2, 11, 1, 11, 9, 9, 11, 8),
    (3, 0, 9, 3, 9, 11, 1, 2, 9, 2, 11, 9),
    (0, 2, 11, 8, 0, 11),
    (3, 2, 11),
    (2, 3, 8, 2, 8, 10, 10, 8, 9),
    (9, 10, 2, 0, 9, 2),
    (2, 3, 8, 2, 8, 10, 0, 1, 8, 1, 10, 8),
    (1, 10, 2),
    (1, 3, 8, 9, 1, 8),
    (0, 9, 1),
    (0, 3, 8),
    (),
)


def _padded_table() -> np.ndarray:
    table = np.full((256, 16), -1, dtype=np.int64)
    for index, row in enumerate(_TRIANGLE_ROWS):
        table[index, :len(row)] = row
    return table


TRIANGLE_TABLE = _padded_table()


@dataclass(frozen=True, eq=False)
class DensityGrid:
    values: np.ndarray  # (R, R, R), index (i, j, k) -> (x, y, z)
    lower: np.ndarray   # (3,)
    upper: np.ndarray   # (3,)

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"density grid must be cubic, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("density grid contains non-finite values")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (self.resolution - 1)

    def lattice(self) -> np.ndarray:
        """(R, R, R, 3) world positions of every grid point."""
        axes = [np.linspace(lo, hi, self.resolution) for lo, hi in zip(self.lower, self.upper)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def cube(cls, values: np.ndarray, bound: float) -> DensityGrid:
        return cls(np.asarray(values, dtype=np.float64), np.full(3, -bound), np.full(3, bound))


def lattice_points(resolution: int, bound: float) -> np.ndarray:
    axis = np.linspace(-bound, bound, resolution)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)


def eval_density_grid(field: RadianceField, z, resolution: int, bound: float,
                      chunk: int = 32_768, threads: int = 1) -> DensityGrid:
    """Density of one latent code on a cubic lattice spanning [-bound, bound]^3."""
    if resolution < 8:
        raise ValueError(f"grid resolution must be >= 8, got {resolution}")
    points = lattice_points(resolution, bound).reshape(-1, 3)
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    with tc.no_grad():
        m = field.map_latent(Tensor(z))

    def run(start: int) -> np.ndarray:
        with tc.no_grad():
            block = Tensor(points[None, start:start + chunk])
            return field.density(block, m).data.reshape(-1)

    starts = range(0, len(points), chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    values = np.concatenate(parts).reshape(resolution, resolution, resolution)
    log.info("density grid %d^3: min %.3g max %.3g", resolution, values.min(), values.max())
    return DensityGrid.cube(values, bound)


@dataclass(eq=False)
class TexturedMesh:
    vertices: np.ndarray                 # (V, 3)
    faces: np.ndarray                    # (F, 3) int
    colors: np.ndarray | None = None     # (V, 3) in [0, 1]
    normals: np.ndarray | None = None    # (V, 3) unit

    @classmethod
    def empty(cls) -> TexturedMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)

    def validate(self) -> None:
        n = len(self.vertices)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face index out of range")
        if len(self.faces) and np.any(self.face_areas() <= MIN_AREA):
            raise ValueError("mesh has degenerate triangles")
        if self.colors is not None and (self.colors.shape != (n, 3)
                                        or self.colors.min(initial=0.0) < 0 or self.colors.max(initial=0.0) > 1):
            raise ValueError("vertex colors must be (V, 3) in [0, 1]")


def marching_cubes(grid: DensityGrid, threshold: float) -> TexturedMesh:
    """Isosurface at ``threshold``; vertices are shared between neighbouring cells.

    Faces wind counter-clockwise seen from outside (low density).
    """
    v = grid.values
    r = grid.resolution
    below = v < threshold
    index = np.zeros((r - 1,) * 3, dtype=np.int64)
    for bit, (di, dj, dk) in enumerate(CORNER_OFFSETS):
        index |= below[di:r - 1 + di, dj:r - 1 + dj, dk:r - 1 + dk].astype(np.int64) << bit
    active = (index != 0) & (index != 255)
    if not active.any():
        return TexturedMesh.empty()

    cells = np.argwhere(active)
    edges = TRIANGLE_TABLE[index[active], :15].reshape(-1, 5, 3)
    valid = edges[:, :, 0] >= 0
    cell_of = np.broadcast_to(np.arange(len(cells))[:, None], valid.shape)[valid]
    tri_edges = edges[valid]                                      # (T, 3)
    base = cells[cell_of][:, None, :] + EDGE_BASE[tri_edges]      # (T, 3, 3)
    axis = EDGE_AXIS[tri_edges]
    edge_ids = ((base[..., 0] * r + base[..., 1]) * r + base[..., 2]) * 3 + axis

    unique_ids, inverse = np.unique(edge_ids.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    corner = np.stack(np.unravel_index(unique_ids // 3, (r, r, r)), axis=-1)
    step = np.eye(3, dtype=np.int64)[unique_ids % 3]
    v0 = v[tuple(corner.T)]
    v1 = v[tuple((corner + step).T)]
    t = np.clip((threshold - v0) / (v1 - v0), 0.0, 1.0)
    vertices = grid.lower + (corner + t[:, None] * step) * grid.spacing

    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    keep = 0.5 * np.linalg.norm(cross, axis=-1) > MIN_AREA
    faces, cross, tri = faces[keep], cross[keep], tri[keep]

    gradient = np.stack(np.gradient(v, *grid.spacing), axis=-1)
    centroid_idx = np.rint((tri.mean(axis=1) - grid.lower) / grid.spacing).astype(np.int64)
    centroid_idx = np.clip(centroid_idx, 0, r - 1)
    outward = -gradient[tuple(centroid_idx.T)]
    flip = np.einsum("ij,ij->i", cross, outward) < 0
    faces[flip] = faces[flip][:, ::-1]

    used, remap = np.unique(faces, return_inverse=True)
    mesh = TexturedMesh(vertices[used], remap.reshape(-1, 3))
    log.info("marching cubes at %.4g: %d vertices, %d triangles", threshold, len(mesh.vertices), len(mesh.faces))
    return mesh


def threshold_sweep(grid: DensityGrid, thresholds) -> list[tuple[float, int, int]]:
    rows = []
    for thr in thresholds:
        mesh = marching_cubes(grid, float(thr))
        rows.append((float(thr), len(mesh.vertices), len(mesh.faces)))
    return rows


def write_sweep_csv(rows: list[tuple[float, int, int]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "vertices", "triangles"])
        writer.writerows(rows)


def texture_mesh(mesh: TexturedMesh, field: RadianceField, z, *, normals: bool = True,
                 fd_step: float = 1e-3, chunk: int = 16_384) -> TexturedMesh:
    """Per-vertex albedo sampled exactly at the vertex, plus -grad(sigma) normals."""
    if mesh.is_empty:
        raise ValueError("cannot texture an empty mesh")
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    colors, normal_parts = [], []
    with tc.no_grad():
        m = field.map_latent(Tensor(z))
        for start in range(0, len(mesh.vertices), chunk):
            points = Tensor(mesh.vertices[None, start:start + chunk])
            colors.append(field.query(points, m).albedo.data[0])
            if normals:
                grad = density_gradient(lambda p: field.density(p, m), points, fd_step).data[0]
                normal_parts.append(-grad)
    out = TexturedMesh(mesh.vertices, mesh.faces, np.concatenate(colors))
    if normals:
        n = np.concatenate(normal_parts)
        out.normals = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    return out


# ───────────────────────── mesh files ─────────────────────────

def export_mesh(mesh: TexturedMesh, path: Path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if fmt == "obj":
        tmp.write_text(_obj_text(mesh), encoding="utf-8")
    elif fmt == "ply":
        tmp.write_bytes(_ply_bytes(mesh))
    else:
        raise ValueError(f"unknown mesh format {fmt!r} (expected obj or ply)")
    tmp.replace(path)
    return path


def _obj_text(mesh: TexturedMesh) -> str:
    lines = ["# photometric-gan mesh", f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces"]
    for i, p in enumerate(mesh.vertices):
        if mesh.colors is not None:
            c = mesh.colors[i]
            lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
        else:
            lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}")
    if mesh.normals is not None:
        lines.extend(f"vn {n[0]:.6f} {n[1]:.6f} {n[2]:.6f}" for n in mesh.normals)
        lines.extend(f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1)
    else:
        lines.extend(f"f {a} {b} {c}" for a, b, c in mesh.faces + 1)
    return "\n".join(lines) + "\n"


def _ply_vertex_dtype(with_normals: bool) -> np.dtype:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if with_normals:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    return np.dtype(fields + [("red", "u1"), ("green", "u1"), ("blue", "u1")])


FACE_DTYPE = np.dtype([("count", "u1"), ("index", "<i4", (3,))])


def _ply_bytes(mesh: TexturedMesh) -> bytes:
    with_normals = mesh.normals is not None
    header = ["ply", "format binary_little_endian 1.0", "comment photometric-gan mesh",
              f"element vertex {len(mesh.vertices)}", "property float x", "property float y", "property float z"]
    if with_normals:
        header += ["property float nx", "property float ny", "property float nz"]
    header += ["property uchar red", "property uchar green", "property uchar blue",
               f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    verts = np.zeros(len(mesh.vertices), dtype=_ply_vertex_dtype(with_normals))
    for name, col in zip("xyz", mesh.vertices.T):
        verts[name] = col
    if with_normals:
        for name, col in zip(("nx", "ny", "nz"), mesh.normals.T):
            verts[name] = col
    colors = mesh.colors if mesh.colors is not None else np.ones((len(mesh.vertices), 3))
    rgb = np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)
    for name, col in zip(("red", "green", "blue"), rgb.T):
        verts[name] = col
    faces = np.zeros(len(mesh.faces), dtype=FACE_DTYPE)
    faces["count"] = 3
    faces["index"] = mesh.faces
    return ("\n".join(header) + "\n").encode("ascii") + verts.tobytes() + faces.tobytes()


def load_mesh(path: Path) -> TexturedMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return _load_obj(path.read_text(encoding="utf-8"))
    if path.suffix.lower() == ".ply":
        return _load_ply(path.read_bytes())
    raise ValueError(f"unknown mesh format for {path}")


def _load_obj(text: str) -> TexturedMesh:
    verts, colors, normals, faces = [], [], [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            values = [float(p) for p in parts[1:]]
            verts.append(values[:3])
            if len(values) >= 6:
                colors.append(values[3:6])
        elif parts[0] == "vn":
            normals.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TexturedMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(colors, dtype=np.float64) if colors else None,
        np.array(normals, dtype=np.float64) if normals else None,
    )


def _load_ply(data: bytes) -> TexturedMesh:
    marker = b"end_header\n"
    end = data.index(marker) + len(marker)
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    counts = {parts[1]: int(parts[2]) for parts in (h.split() for h in header) if parts[0] == "element"}
    with_normals = "property float nx" in header
    vdtype = _ply_vertex_dtype(with_normals)
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    verts = np.frombuffer(data, dtype=vdtype, count=nv, offset=end)
    faces = np.frombuffer(data, dtype=FACE_DTYPE, count=nf, offset=end + nv * vdtype.itemsize)
    normals = np.stack([verts[n] for n in ("nx", "ny", "nz")], axis=-1).astype(np.float64) if with_normals else None
    return TexturedMesh(
        np.stack([verts[a] for a in "xyz"], axis=-1).astype(np.float64),
        faces["index"].astype(np.int64).reshape(-1, 3),
        np.stack([verts[c] for c in ("red", "green", "blue")], axis=-1) / 255.0,
        normals,
    )


# ───────────────────────── relighting preview ─────────────────────────

@dataclass(frozen=True)
class RayHits:
    t: np.ndarray         # (P,) inf where missed
    triangle: np.ndarray  # (P,) -1 where missed
    u: np.ndarray
    v: np.ndarray


def intersect_triangles(origins: np.ndarray, dirs: np.ndarray, tri: np.ndarray, eps: float = 1e-12) -> RayHits:
    """Nearest hit of each ray against every triangle (Moller-Trumbore)."""
    p = len(origins)
    best_t = np.full(p, np.inf)
    best_i = np.full(p, -1, dtype=np.int64)
    best_u, best_v = np.zeros(p), np.zeros(p)
    if len(tri) == 0:
        return RayHits(best_t, best_i, best_u, best_v)
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    step = max(1, 2_000_000 // len(tri))
    for s in range(0, p, step):
        o, d = origins[s:s + step, None, :], dirs[s:s + step, None, :]
        pvec = np.cross(d, e2)
        det = np.einsum("tk,ptk->pt", e1, pvec)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0
        u = np.einsum("ptk,ptk->pt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.einsum("pk,ptk->pt", d[:, 0], qvec) * inv
        t = np.einsum("tk,ptk->pt", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        idx = np.argmin(t, axis=1)
        rows = np.arange(len(idx))
        best_t[s:s + step] = t[rows, idx]
        found = np.isfinite(best_t[s:s + step])
        best_i[s:s + step] = np.where(found, idx, -1)
        best_u[s:s + step] = u[rows, idx]
        best_v[s:s + step] = v[rows, idx]
    return RayHits(best_t, best_i, best_u, best_v)


def _tiled_hits(origins: np.ndarray, dirs: np.ndarray, pixels: np.ndarray, tri: np.ndarray,
                pose: CameraPose, width: int, height: int, fov_deg: float) -> RayHits:
    """Bin triangles by their screen-space bounding box, then test each tile's rays."""
    focal = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    local = (tri - pose.position) @ pose.rotation         # camera frame, looking down -z
    depth = -local[..., 2]
    behind = np.any(depth <= 1e-6, axis=1)
    safe = np.where(depth > 1e-6, depth, 1.0)
    u = local[..., 0] / safe * focal + width / 2.0
    v = -local[..., 1] / safe * focal + height / 2.0
    tiles_x, tiles_y = -(-width // TILE), -(-height // TILE)
    tx0 = np.where(behind, 0, np.clip(np.floor(u.min(axis=1)) // TILE, 0, tiles_x - 1)).astype(int)
    tx1 = np.where(behind, tiles_x - 1, np.clip(np.floor(u.max(axis=1)) // TILE, 0, tiles_x - 1)).astype(int)
    ty0 = np.where(behind, 0, np.clip(np.floor(v.min(axis=1)) // TILE, 0, tiles_y - 1)).astype(int)
    ty1 = np.where(behind, tiles_y - 1, np.clip(np.floor(v.max(axis=1)) // TILE, 0, tiles_y - 1)).astype(int)
    bins: dict[tuple[int, int], list[int]] = {}
    for i in range(len(tri)):
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                bins.setdefault((ty, tx), []).append(i)

    p = len(origins)
    out = RayHits(np.full(p, np.inf), np.full(p, -1, dtype=np.int64), np.zeros(p), np.zeros(p))
    ray_tile_y, ray_tile_x = pixels[:, 1] // TILE, pixels[:, 0] // TILE
    for (ty, tx), members in bins.items():
        rays = np.nonzero((ray_tile_y == ty) & (ray_tile_x == tx))[0]
        if len(rays) == 0:
            continue
        ids = np.array(members)
        hits = intersect_triangles(origins[rays], dirs[rays], tri[ids])
        found = hits.triangle >= 0
        out.t[rays] = hits.t
        out.triangle[rays] = np.where(found, ids[np.maximum(hits.triangle, 0)], -1)
        out.u[rays] = hits.u
        out.v[rays] = hits.v
    return out


def relight_preview(mesh: TexturedMesh, camera: CameraPose, light: LightCondition, width: int, height: int,
                    *, fov_deg: float = 30.0, specular: tuple[float, float] = (0.0, 1.0),
                    shininess_scale: float = 20.0, background=(1.0, 1.0, 1.0), clamp: bool = True,
                    threads: int = 1) -> np.ndarray:
    """Ray-cast the mesh and shade hits with ambient, diffuse and mirror terms; (H, W, 3)."""
    bundle = generate_rays(camera, width, height, fov_deg)
    image = np.broadcast_to(np.asarray(background, dtype=np.float64), (height * width, 3)).copy()
    if mesh.is_empty:
        return image.reshape(height, width, 3)
    tri = mesh.vertices[mesh.faces]
    if len(tri) >= BRUTE_FORCE_LIMIT:
        hits = _tiled_hits(bundle.origins, bundle.directions, bundle.pixels, tri, camera, width, height, fov_deg)
    else:
        rows = np.array_split(np.arange(len(bundle)), max(1, threads))

        def run(idx: np.ndarray) -> RayHits:
            return intersect_triangles(bundle.origins[idx], bundle.directions[idx], tri)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, rows))
        else:
            parts = [run(r) for r in rows]
        hits = RayHits(*(np.concatenate([getattr(h, f) for h in parts]) for f in ("t", "triangle", "u", "v")))

    hit = hits.triangle >= 0
    if not hit.any():
        return image.reshape(height, width, 3)
    faces = mesh.faces[hits.triangle[hit]]
    bary = np.stack([1.0 - hits.u[hit] - hits.v[hit], hits.u[hit], hits.v[hit]], axis=-1)[..., None]
    d = bundle.directions[hit]
    if mesh.normals is not None:
        n = (mesh.normals[faces] * bary).sum(axis=1)
    else:
        t = tri[hits.triangle[hit]]
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        n = np.where(np.einsum("ij,ij->i", n, d)[:, None] > 0, -n, n)
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    albedo = (mesh.colors[faces] * bary).sum(axis=1) if mesh.colors is not None else np.ones_like(n)

    ld = light.direction
    cos = n @ ld
    shade = light.ka + light.kd * np.maximum(cos, 0.0)
    reflect = 2.0 * cos[:, None] * n - ld
    s0, s1 = specular
    spec = light.kd * s0 * np.maximum(np.einsum("ij,ij->i", reflect, -d), 0.0) ** (s1 * shininess_scale + 1.0)
    color = albedo * shade[:, None] + spec[:, None]
    image[hit] = np.clip(color, 0.0, 1.0) if clamp else color
    return image.reshape(height, width, 3)
