"""Sensor record containers shared across stages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class ThermalFrame:
    """Raw digital-number raster (rows = v, columns = u)."""

    dn: np.ndarray
    timestamp: float = 0.0
    frame_id: int = 0

    @property
    def height(self) -> int:
        return self.dn.shape[0]

    @property
    def width(self) -> int:
        return self.dn.shape[1]


@dataclass
class LidarScan:
    """One sweep of range returns, each a unit direction, a depth and a time."""

    directions: np.ndarray  # (N, 3) unit vectors, LiDAR frame
    depths: np.ndarray  # (N,)
    times: np.ndarray  # (N,)
    scan_id: int = 0
    t_start: float = 0.0
    t_end: float = 0.0
    # simulator-only ground truth, never written to the sensor streams
    true_points_world: Optional[np.ndarray] = None
    plane_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.depths)

    @property
    def points(self) -> np.ndarray:
        return self.directions * self.depths[:, None]


@dataclass
class ImuSample:
    timestamp: float
    angular_rate: np.ndarray
    specific_force: np.ndarray
