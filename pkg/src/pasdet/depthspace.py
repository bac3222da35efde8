"""Depth-range parameterizations and the ordinal bin/residual depth code.

A :class:`DepthSpace` maps a depth ``z`` in ``[z_min, z_max]`` to a
continuous bin coordinate ``l`` in ``[0, N-1]``:

* ``US``   uniform:            l = (N-1) (z - z_min) / (z_max - z_min)
* ``UIS``  uniform in 1/z:     l = (N-1) (1/z - 1/z_min) / (1/z_max - 1/z_min)
* ``LgIS`` log increments:     l = (N-1) log(z/z_min) / log(z_max/z_min)
* ``LnIS`` linear increments:  l = -0.5 + 0.5 sqrt(1 + 4 delta),
                               delta = N(N-1) (z - z_min) / (z_max - z_min)

All four hit ``l = 0`` at ``z_min`` and ``l = N-1`` at ``z_max``.  Integer
``l`` values are the bin lower edges used by :func:`encode`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("US", "UIS", "LgIS", "LnIS")


class DepthRangeError(ValueError):
    pass


@dataclass(frozen=True)
class DepthSpace:
    z_min: float
    z_max: float
    n_bins: int = 64
    strategy: str = "LnIS"

    def __post_init__(self):
        if not (0.0 < self.z_min < self.z_max):
            raise ValueError(f"need 0 < z_min < z_max, got {self.z_min}, {self.z_max}")
        if int(self.n_bins) != self.n_bins or self.n_bins < 2:
            raise ValueError("n_bins must be an integer >= 2")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    def with_strategy(self, strategy):
        return DepthSpace(self.z_min, self.z_max, self.n_bins, strategy)

    @property
    def last(self):
        return self.n_bins - 1


@dataclass(frozen=True)
class OrdinalDepthCode:
    l: np.ndarray
    l_int: np.ndarray
    z_res: np.ndarray


def _check_depth(ds, z):
    z = np.asarray(z, dtype=np.float64)
    if np.any(~np.isfinite(z)) or np.any(z < ds.z_min) or np.any(z > ds.z_max):
        raise DepthRangeError(f"depth outside [{ds.z_min}, {ds.z_max}]")
    return z


def _check_coord(ds, l):
    l = np.asarray(l, dtype=np.float64)
    if np.any(~np.isfinite(l)) or np.any(l < 0.0) or np.any(l > ds.last):
        raise DepthRangeError(f"bin coordinate outside [0, {ds.last}]")
    return l


def bin_coordinate(ds, z):
    z = _check_depth(ds, z)
    n1 = ds.n_bins - 1
    frac = (z - ds.z_min) / (ds.z_max - ds.z_min)
    if ds.strategy == "US":
        l = n1 * frac
    elif ds.strategy == "UIS":
        l = n1 * (1.0 / z - 1.0 / ds.z_min) / (1.0 / ds.z_max - 1.0 / ds.z_min)
    elif ds.strategy == "LgIS":
        l = n1 * np.log(z / ds.z_min) / np.log(ds.z_max / ds.z_min)
    else:
        delta = ds.n_bins * n1 * frac
        l = -0.5 + 0.5 * np.sqrt(1.0 + 4.0 * delta)
    return np.clip(l, 0.0, n1)


def bin_edge_depth(ds, l):
    """Inverse of :func:`bin_coordinate`."""
    l = _check_coord(ds, l)
    n1 = ds.n_bins - 1
    span = ds.z_max - ds.z_min
    if ds.strategy == "US":
        z = ds.z_min + span * l / n1
    elif ds.strategy == "UIS":
        z = 1.0 / (1.0 / ds.z_min + (l / n1) * (1.0 / ds.z_max - 1.0 / ds.z_min))
    elif ds.strategy == "LgIS":
        z = ds.z_min * (ds.z_max / ds.z_min) ** (l / n1)
    else:
        z = ds.z_min + span * l * (l + 1.0) / (ds.n_bins * n1)
    z = np.clip(z, ds.z_min, ds.z_max)
    # pin the endpoints exactly; the closed forms can be one ulp off
    z = np.where(l == 0.0, ds.z_min, np.where(l == n1, ds.z_max, z))
    return z


def bin_widths(ds):
    """Depth width of each of the N-1 intervals between integer edges."""
    edges = bin_edge_depth(ds, np.arange(ds.n_bins, dtype=np.float64))
    return np.diff(edges)


def encode(ds, z):
    """Split depth into (bin index, residual) with ``z = edge(l_int) + z_res``."""
    z = _check_depth(ds, z)
    l = bin_coordinate(ds, z)
    l_int = np.minimum(np.floor(l), ds.last).astype(np.int64)
    # floor of a rounded l can land one bin off right at an edge
    up = np.minimum(l_int + 1, ds.last)
    l_int = np.where((l_int < ds.last) & (bin_edge_depth(ds, up) <= z), up, l_int)
    down = np.maximum(l_int - 1, 0)
    l_int = np.where(bin_edge_depth(ds, l_int) > z, down, l_int)
    z_res = z - bin_edge_depth(ds, l_int)
    return OrdinalDepthCode(l=l, l_int=l_int, z_res=z_res)


def decode(ds, code):
    l_int = np.asarray(code.l_int)
    z_res = np.asarray(code.z_res, dtype=np.float64)
    if np.any(l_int < 0) or np.any(l_int > ds.last) or np.any(l_int != np.floor(l_int)):
        raise ValueError("l_int must be an integer in [0, N-1]")
    if np.any(z_res < 0):
        raise ValueError("z_res must be non-negative")
    base = bin_edge_depth(ds, l_int.astype(np.float64))
    top = np.where(l_int < ds.last,
                   bin_edge_depth(ds, np.minimum(l_int + 1, ds.last).astype(np.float64)),
                   ds.z_max)
    if np.any((z_res > 0) & (base + z_res > top + 1e-9 * ds.z_max)):
        raise ValueError("z_res exceeds the width of its bin")
    return base + z_res


def sample_depths(ds, count, rng=None, n_rays=None):
    """One depth per stratum of l-space, strictly increasing.

    Stratum k spans l in [k, k+1) * (N-1)/count.  Without ``rng`` each sample
    sits at its stratum midpoint; with ``rng`` it is uniform inside the
    stratum.  ``n_rays`` draws an independent row per ray.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    width = (ds.n_bins - 1) / count
    k = np.arange(count, dtype=np.float64)
    shape = (count,) if n_rays is None else (n_rays, count)
    if rng is None:
        u = np.full(shape, 0.5)
    else:
        u = rng.uniform(0.0, 1.0, size=shape)
    l = np.clip((k + u) * width, 0.0, ds.last)
    return bin_edge_depth(ds, l)


def normalize_depth(ds, z):
    z = _check_depth(ds, z)
    return z / ds.z_max


def denormalize_depth(ds, z_rel):
    return np.asarray(z_rel, dtype=np.float64) * ds.z_max
