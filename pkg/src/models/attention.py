"""Attention tensor models."""

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from src.exceptions import DimensionMismatchError
from src.utils.arrays import FloatArray


@dataclass(frozen=True)
class AttentionTensors:
    """Queries, keys and values of one self-attention call.

    ``q`` is ``[n, d_k]``, ``k`` is ``[m, d_k]`` and ``v`` is ``[m, d_v]``.
    """

    q: FloatArray
    k: FloatArray
    v: FloatArray

    def __post_init__(self) -> None:
        if self.q.ndim != 2 or self.k.ndim != 2 or self.v.ndim != 2:
            raise DimensionMismatchError("attention tensors must be 2-D")
        if self.q.shape[1] != self.k.shape[1]:
            raise DimensionMismatchError(
                f"query width {self.q.shape[1]} != key width {self.k.shape[1]}"
            )
        if self.k.shape[0] != self.v.shape[0]:
            raise DimensionMismatchError(
                f"{self.k.shape[0]} keys but {self.v.shape[0]} values"
            )
        if self.q.shape[1] == 0 or self.v.shape[1] == 0:
            raise DimensionMismatchError("d_k and d_v must be positive")

    @property
    def patches(self) -> int:
        return int(self.k.shape[0])

    @classmethod
    def empty(cls, d_k: int, d_v: int) -> "AttentionTensors":
        """Tensors with no patches; sharing against them is plain self-attention."""
        return cls(
            q=np.zeros((0, d_k)), k=np.zeros((0, d_k)), v=np.zeros((0, d_v))
        )


class ScaleParam(BaseModel):
    """Scale applied to the reference subject's keys."""

    alpha: float = Field(1.0, ge=0.0, le=1.0)
