"""Raw sample batches shared by the harness and the data layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class SampleSet:
    """A split of pre-extracted raw feature pairs.

    `pair_group` links an image to its caption set; retrieval counts a
    candidate as correct when its group matches the query's group.
    """

    ids: np.ndarray         # [n] int64, unique
    image_raw: np.ndarray   # [n, d_img]
    text_raw: np.ndarray    # [n, d_txt]
    pair_group: np.ndarray  # [n] int64

    def __post_init__(self):
        n = len(self.ids)
        if len(np.unique(self.ids)) != n:
            raise ContractError("sample ids must be unique within a split")
        for name in ("image_raw", "text_raw"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ContractError(f"{name} row count {arr.shape[0]} != {n} ids")
            if not np.isfinite(arr).all():
                raise ContractError(f"{name} contains non-finite values")
        if self.pair_group.shape != (n,):
            raise ContractError("pair_group shape mismatch")

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def image_dim(self) -> int:
        return self.image_raw.shape[1]

    @property
    def text_dim(self) -> int:
        return self.text_raw.shape[1]

    def take(self, index: np.ndarray) -> "SampleSet":
        return SampleSet(ids=self.ids[index], image_raw=self.image_raw[index],
                         text_raw=self.text_raw[index], pair_group=self.pair_group[index])
