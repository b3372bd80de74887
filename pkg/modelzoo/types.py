from __future__ import annotations

from collections.abc import Callable
from typing import Literal, TypeAlias, TypedDict, Union

import numpy as np
from numpy.typing import NDArray

Array: TypeAlias = NDArray[np.float64]
Params: TypeAlias = dict[str, Array]
EnergyAndGrad: TypeAlias = Callable[[Array], tuple[Array, Array]]
LogDensity: TypeAlias = Callable[[Array], Array]
MetricsRow: TypeAlias = dict[str, float]
Metrics: TypeAlias = list[MetricsRow]

Activation: TypeAlias = Literal["identity", "relu", "sigmoid", "tanh"]
InitMode: TypeAlias = Literal["cold", "cd", "persistent", "generator-init"]
Padding: TypeAlias = Literal["same", "valid"]

ManifestValue: TypeAlias = Union[str, int, float, bool, list[float], list[list[float]]]


class DatasetManifest(TypedDict):
    """Manifest written next to a generated dataset.
    ---

    Records everything needed to regenerate the data and to score recovery
    against the ground truth, such as the true loading matrix of a factor
    analysis dataset or the mode centers of a ring mixture.
    """

    name: str
    seed: int
    params: dict[str, ManifestValue]
    files: list[str]
    ground_truth: dict[str, ManifestValue]
