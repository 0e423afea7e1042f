"""Multi-agent scene container shared by the generator, guides and converters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import AgentState, VehicleDims, wrap_angle

X, Y, V, THETA = range(4)
DEFAULT_DT = 0.5  # 2 Hz


@dataclass(frozen=True)
class Scene:
    """``states`` is ``[T, M, 4]`` with channels (x, y, v, theta); ``dims`` is ``[M, 2]`` (width, length)."""

    states: np.ndarray
    dims: np.ndarray
    valid: Optional[np.ndarray] = None
    dt: float = DEFAULT_DT
    map_ref: str = ""
    agent_ids: Optional[np.ndarray] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim != 3 or states.shape[2] != 4:
            raise ValueError(f"states must be [T, M, 4], got {states.shape}")
        T, M, _ = states.shape
        if T < 2 or M < 1:
            raise ValueError(f"scene needs T >= 2 and M >= 1, got T={T}, M={M}")
        if not np.all(np.isfinite(states)):
            raise ValueError("scene states must be finite")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        dims = np.array(self.dims, dtype=float).reshape(M, 2)
        if np.any(dims <= 0):
            raise ValueError("vehicle dims must be positive")
        valid = np.ones(M, dtype=bool) if self.valid is None else np.array(self.valid, dtype=bool).reshape(M)
        ids = np.arange(M) if self.agent_ids is None else np.array(self.agent_ids, dtype=int).reshape(M)
        states[..., THETA] = wrap_angle(states[..., THETA])
        for name, val in (("states", states), ("dims", dims), ("valid", valid), ("agent_ids", ids)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def M(self) -> int:
        return self.states.shape[1]

    def state(self, t: int, i: int) -> AgentState:
        x, y, v, th = self.states[t, i]
        return AgentState(x, y, max(v, 0.0), th)

    def vehicle_dims(self, i: int) -> VehicleDims:
        return VehicleDims(*self.dims[i])

    @property
    def radii(self) -> np.ndarray:
        return 0.5 * np.hypot(self.dims[:, 0], self.dims[:, 1])

    def positions(self, i: Optional[int] = None) -> np.ndarray:
        if i is None:
            return self.states[..., :2]
        return self.states[:, i, :2]

    def permute(self, perm: Sequence[int]) -> "Scene":
        perm = np.asarray(perm, dtype=int)
        return Scene(self.states[:, perm], self.dims[perm], self.valid[perm], self.dt,
                     self.map_ref, self.agent_ids[perm], self.seed, dict(self.meta))

    def with_states(self, states: np.ndarray) -> "Scene":
        return Scene(states, self.dims, self.valid, self.dt, self.map_ref,
                     self.agent_ids, self.seed, dict(self.meta))
