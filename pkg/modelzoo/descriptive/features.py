"""Designed feature maps `h(X)` for the linear descriptive family.

Every map evaluates a batch of signals stacked along axis 0 into an `(n, d)`
matrix and can pull a weight vector back through its Jacobian, which gives the
signal gradient of `h(X)ᵀθ` needed by Langevin sampling.
"""

from __future__ import annotations

import abc
import itertools
from collections.abc import Mapping, Sequence
from typing import TYPE_CHECKING, ClassVar

import numpy as np

from modelzoo.tape import Tape, TapeBuilder, forward_arrays, vector_jacobian_product

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array


class FeatureMap(abc.ABC):
    """Base class. With `pin_constant`, coordinate 0 is the constant feature 1."""

    kind: ClassVar[str]

    def __init__(self, *, pin_constant: bool = False) -> None:
        self.pin_constant = pin_constant

    @property
    @abc.abstractmethod
    def base_dim(self) -> int: ...

    @abc.abstractmethod
    def _features(self, X: Array) -> Array: ...

    @abc.abstractmethod
    def _vjp(self, X: Array, weights: Array) -> Array: ...

    @property
    def dim(self) -> int:
        return self.base_dim + int(self.pin_constant)

    def __call__(self, X: ArrayLike) -> Array:
        x = np.asarray(X, dtype=np.float64)
        h = self._features(x)
        if self.pin_constant:
            h = np.concatenate([np.ones((len(h), 1)), h], axis=1)
        return h

    def vjp(self, X: ArrayLike, weights: ArrayLike) -> Array:
        """Gradient of `h(X_i)ᵀ weights_i` with respect to every `X_i`."""
        x = np.asarray(X, dtype=np.float64)
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(x), self.dim))
        if self.pin_constant:
            w = w[:, 1:]
        return self._vjp(x, np.ascontiguousarray(w))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, pin_constant={self.pin_constant})"


class MomentFeatures(FeatureMap):
    """Monomials `h_k(x) = Π_j x_j ** a_kj` for an integer exponent matrix `a`."""

    kind = "raw-moments"

    def __init__(self, exponents: ArrayLike, *, pin_constant: bool = False) -> None:
        super().__init__(pin_constant=pin_constant)
        a = np.array(exponents, dtype=np.int64, ndmin=2)
        if np.any(a < 0):
            raise ValueError("Monomial exponents must be nonnegative")
        self.exponents = a

    @classmethod
    def raw_moments(cls, p: int, order: int = 2, *, pin_constant: bool = False) -> MomentFeatures:
        """Powers `x_j ** r` for every coordinate `j` and `1 <= r <= order`, grouped by order."""
        rows = [np.eye(p, dtype=np.int64)[j] * r for r in range(1, order + 1) for j in range(p)]
        return cls(rows, pin_constant=pin_constant)

    @classmethod
    def pairwise(cls, p: int, *, pin_constant: bool = False) -> MomentFeatures:
        """Singletons `x_j` and products `x_i x_j`, the binary pairwise-interaction features."""
        eye = np.eye(p, dtype=np.int64)
        rows = [*eye, *(eye[i] + eye[j] for i, j in itertools.combinations(range(p), 2))]
        return cls(rows, pin_constant=pin_constant)

    @property
    def base_dim(self) -> int:
        return int(self.exponents.shape[0])

    def _flat(self, X: Array) -> Array:
        x = X.reshape(len(X), -1)
        if x.shape[1] != self.exponents.shape[1]:
            raise ValueError(
                f"Signals have {x.shape[1]} coordinates, exponents expect "
                f"{self.exponents.shape[1]}"
            )
        return x

    def _features(self, X: Array) -> Array:
        x = self._flat(X)
        return np.prod(x[:, None, :] ** self.exponents[None], axis=2)

    def _vjp(self, X: Array, weights: Array) -> Array:
        x = self._flat(X)
        a = self.exponents
        powers = x[:, None, :] ** a[None]
        grad = np.zeros_like(x)
        for j in range(x.shape[1]):
            others = np.prod(np.delete(powers, j, axis=2), axis=2)
            lowered = np.where(a[:, j] > 0, x[:, j : j + 1] ** np.maximum(a[:, j] - 1, 0), 0.0)
            grad[:, j] = np.sum(weights * a[:, j] * lowered * others, axis=1)
        return grad.reshape(X.shape)


class IndicatorFeatures(FeatureMap):
    """One indicator per listed state, for enumerated domains. Not differentiable."""

    kind = "indicators"

    def __init__(self, states: ArrayLike, *, pin_constant: bool = False) -> None:
        super().__init__(pin_constant=pin_constant)
        self.states = np.array(states, dtype=np.float64, ndmin=2)

    @property
    def base_dim(self) -> int:
        return int(self.states.shape[0])

    def _features(self, X: Array) -> Array:
        x = X.reshape(len(X), -1)
        return np.all(np.isclose(x[:, None, :], self.states[None]), axis=2).astype(np.float64)

    def _vjp(self, X: Array, weights: Array) -> Array:
        return np.zeros_like(X)


def _bin_layout(edges: ArrayLike) -> tuple[Array, Array, float]:
    e = np.asarray(edges, dtype=np.float64)
    if e.ndim != 1 or len(e) < 2 or not np.allclose(np.diff(e), e[1] - e[0]) or e[1] <= e[0]:
        raise ValueError("Histogram edges must be at least two equally spaced increasing values")
    return e, (e[:-1] + e[1:]) / 2, float(e[1] - e[0])


def _soft_bins(y: Array, centers: Array, width: float) -> tuple[Array, Array]:
    """Triangular bin memberships of `y` and their derivatives, stacked on a new last axis."""
    distance = y[..., None] - centers
    membership = np.maximum(0.0, 1.0 - np.abs(distance) / width)
    slope = np.where(membership > 0, -np.sign(distance) / width, 0.0)
    return membership, slope


def _hard_bins(y: Array, edges: Array) -> Array:
    index = np.searchsorted(edges, y, side="right") - 1
    index = np.where(y == edges[-1], len(edges) - 2, index)
    inside = (index >= 0) & (index < len(edges) - 1)
    onehot = np.zeros((*y.shape, len(edges) - 1))
    slot = np.clip(index, 0, len(edges) - 2)[..., None]
    np.put_along_axis(onehot, slot, inside[..., None], axis=-1)
    return onehot


class ProjectionHistogramFeatures(FeatureMap):
    """Binned marginals of projections `W_k x`, flattened projection by projection.
    ---

    With `soft` (the default) each projection spreads over its two nearest bin
    centers with triangular weights, which keeps the features differentiable
    for Langevin sampling. Hard bins count `edges[b] <= W_k x < edges[b+1]`
    and are used for pursuit and for checking histogram counts.
    """

    kind = "binned-marginals-of-projections"

    def __init__(
        self,
        projections: ArrayLike,
        edges: ArrayLike,
        *,
        soft: bool = True,
        pin_constant: bool = False,
    ) -> None:
        super().__init__(pin_constant=pin_constant)
        self.projections = np.array(projections, dtype=np.float64, ndmin=2)
        self.edges, self.centers, self.width = _bin_layout(edges)
        self.soft = soft

    @property
    def bins(self) -> int:
        return len(self.centers)

    @property
    def base_dim(self) -> int:
        return int(self.projections.shape[0]) * self.bins

    def with_projection(self, direction: ArrayLike) -> ProjectionHistogramFeatures:
        rows = np.vstack([self.projections, np.asarray(direction, dtype=np.float64)])
        return ProjectionHistogramFeatures(
            rows, self.edges, soft=self.soft, pin_constant=self.pin_constant
        )

    def _features(self, X: Array) -> Array:
        y = X.reshape(len(X), -1) @ self.projections.T
        if self.soft:
            bins = _soft_bins(y, self.centers, self.width)[0]
        else:
            bins = _hard_bins(y, self.edges)
        return bins.reshape(len(X), -1)

    def _vjp(self, X: Array, weights: Array) -> Array:
        if not self.soft:
            return np.zeros_like(X)
        y = X.reshape(len(X), -1) @ self.projections.T
        slope = _soft_bins(y, self.centers, self.width)[1]
        dy = np.sum(slope * weights.reshape(slope.shape), axis=2)
        return (dy @ self.projections).reshape(X.shape)


class FilterHistogramFeatures(FeatureMap):
    """Histograms of filter responses, averaged over pixel positions.

    Signals are `H×W×C` images, the filter bank is `k×k×C×M` and every filter
    contributes one soft histogram over `edges`.
    """

    kind = "filter-response-histograms"

    def __init__(
        self, filters: ArrayLike, edges: ArrayLike, *, pin_constant: bool = False
    ) -> None:
        super().__init__(pin_constant=pin_constant)
        self.filters = np.asarray(filters, dtype=np.float64)
        if self.filters.ndim != 4:
            raise ValueError(f"Expected a k×k×C×M filter bank, got {self.filters.shape}")
        self.edges, self.centers, self.width = _bin_layout(edges)
        builder = TapeBuilder()
        self._tape = builder.build(builder.conv2d(builder.input("x"), builder.param("K")))

    @property
    def base_dim(self) -> int:
        return int(self.filters.shape[3]) * len(self.centers)

    def _responses(self, X: Array) -> Array:
        return forward_arrays(self._tape, {"x": X, "K": self.filters})[self._tape.output]

    def _features(self, X: Array) -> Array:
        membership = _soft_bins(self._responses(X), self.centers, self.width)[0]
        return membership.mean(axis=(1, 2)).reshape(len(X), -1)

    def _vjp(self, X: Array, weights: Array) -> Array:
        responses = self._responses(X)
        slope = _soft_bins(responses, self.centers, self.width)[1]
        pixels = responses.shape[1] * responses.shape[2]
        w = weights.reshape(len(X), 1, 1, *slope.shape[3:])
        cotangent = np.sum(slope * w, axis=-1) / pixels
        grads = vector_jacobian_product(
            self._tape, {"x": X, "K": self.filters}, cotangent
        )
        return grads["x"]


class TapeFeatures(FeatureMap):
    """Features computed by a recorded network with output `(n, d)`."""

    kind = "custom-tape"

    def __init__(
        self,
        tape: Tape,
        params: Mapping[str, Array],
        dim: int,
        *,
        input_name: str = "x",
        pin_constant: bool = False,
    ) -> None:
        super().__init__(pin_constant=pin_constant)
        self.tape = tape
        self.params = dict(params)
        self.input_name = input_name
        self._dim = dim

    def _leaves(self, X: Array) -> dict[str, Array]:
        return {**self.params, self.input_name: X}

    @property
    def base_dim(self) -> int:
        return self._dim

    def _features(self, X: Array) -> Array:
        out = forward_arrays(self.tape, self._leaves(X))[self.tape.output].reshape(len(X), -1)
        if out.shape[1] != self._dim:
            raise ValueError(f"Tape produced {out.shape[1]} features, expected {self._dim}")
        return out

    def _vjp(self, X: Array, weights: Array) -> Array:
        leaves = self._leaves(X)
        values = forward_arrays(self.tape, leaves)
        cotangent = weights.reshape(values[self.tape.output].shape)
        return vector_jacobian_product(self.tape, leaves, cotangent, values=values)[
            self.input_name
        ]


class ConcatFeatures(FeatureMap):
    """Side-by-side concatenation of several maps."""

    kind = "concat"

    def __init__(self, maps: Sequence[FeatureMap], *, pin_constant: bool = False) -> None:
        super().__init__(pin_constant=pin_constant)
        if not maps:
            raise ValueError("Concatenation needs at least one feature map")
        self.maps = tuple(maps)

    @property
    def base_dim(self) -> int:
        return sum(m.dim for m in self.maps)

    def _features(self, X: Array) -> Array:
        return np.concatenate([m(X) for m in self.maps], axis=1)

    def _vjp(self, X: Array, weights: Array) -> Array:
        grad = np.zeros_like(X)
        start = 0
        for m in self.maps:
            grad += m.vjp(X, weights[:, start : start + m.dim])
            start += m.dim
        return grad


def feature_stats(data: Sequence[ArrayLike] | Array, feature_map: FeatureMap) -> Array:
    """Sample average of `h(X_i)` over the data."""
    if len(data) == 0:
        raise ValueError("Cannot compute feature statistics of an empty dataset")
    try:
        X = np.stack([np.asarray(x, dtype=np.float64) for x in data])
    except ValueError as e:
        raise ValueError(f"Data items must share one shape: {e}") from e
    stats = feature_map(X).mean(axis=0)
    if not np.all(np.isfinite(stats)):
        raise FloatingPointError("Feature statistics are not finite")
    return stats
