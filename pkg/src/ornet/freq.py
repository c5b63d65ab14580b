"""Orthonormal Haar wavelet analysis of images and feature maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .metrics import luma
from .tensor import Tensor

DETAIL_BANDS = ("LH", "HL", "HH")


@dataclass
class HaarPyramid:
    """``details[0]`` is the finest level; each entry holds (LH, HL, HH)."""

    ll: np.ndarray
    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]]

    @property
    def levels(self) -> int:
        return len(self.details)

    def bands(self):
        """Yield ``(level, name, coefficients)`` finest first, LL last."""
        for lvl, trio in enumerate(self.details, 1):
            for name, coef in zip(DETAIL_BANDS, trio):
                yield lvl, name, coef
        yield self.levels, "LL", self.ll


def _plane(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise DimensionError(f"expected a 1 x H x W or H x W plane, got {a.shape}")
    return a


def haar_dwt2(x, levels: int) -> HaarPyramid:
    """Multi-level 2-D orthonormal Haar analysis."""
    a = _plane(x)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    div = 2 ** levels
    if a.shape[0] % div or a.shape[1] % div:
        raise ValueError(f"image {a.shape} not divisible by 2^{levels}")
    details = []
    for _ in range(levels):
        tl, tr = a[0::2, 0::2], a[0::2, 1::2]
        bl, br = a[1::2, 0::2], a[1::2, 1::2]
        ll = (tl + tr + bl + br) / 2.0
        lh = (tl + tr - bl - br) / 2.0
        hl = (tl - tr + bl - br) / 2.0
        hh = (tl - tr - bl + br) / 2.0
        details.append((lh, hl, hh))
        a = ll
    return HaarPyramid(ll=a, details=details)


def haar_idwt2(p: HaarPyramid) -> np.ndarray:
    a = p.ll
    for lh, hl, hh in reversed(p.details):
        out = np.empty((a.shape[0] * 2, a.shape[1] * 2))
        out[0::2, 0::2] = (a + lh + hl + hh) / 2.0
        out[0::2, 1::2] = (a + lh - hl - hh) / 2.0
        out[1::2, 0::2] = (a - lh + hl - hh) / 2.0
        out[1::2, 1::2] = (a - lh - hl + hh) / 2.0
        a = out
    return a


@dataclass
class BandEnergyProfile:
    """Normalized energy per (level, band); LL belongs to the coarsest level.

    When the total energy is zero the shares are uniform and
    ``zero_total`` is set.
    """

    levels: int
    bands: list[tuple[int, str]]
    energy: np.ndarray
    total: float
    source: str = ""
    zero_total: bool = False
    meta: dict = field(default_factory=dict)

    def share(self, level: int, band: str) -> float:
        return float(self.energy[self.bands.index((level, band))])

    def level_shares(self) -> np.ndarray:
        """Share per detail level 1..L followed by the LL share."""
        out = np.zeros(self.levels + 1)
        for (lvl, name), e in zip(self.bands, self.energy):
            out[self.levels if name == "LL" else lvl - 1] += e
        return out

    def fine_share(self) -> float:
        """Energy in the level-1 detail bands."""
        return float(self.level_shares()[0])

    def coarse_share(self) -> float:
        """Energy outside the level-1 detail bands."""
        return float(self.level_shares()[1:].sum())

    def mean_level(self) -> float:
        """Energy-weighted mean scale; LL counts as level L + 1. Larger is coarser."""
        weights = np.arange(1, self.levels + 2, dtype=np.float64)
        return float(self.level_shares() @ weights)

    def rows(self):
        for (lvl, name), e in zip(self.bands, self.energy):
            yield self.source, lvl, name, float(e)


def _profile(pyramid: HaarPyramid, source: str) -> BandEnergyProfile:
    names, energy = [], []
    for lvl, name, coef in pyramid.bands():
        names.append((lvl, name))
        energy.append(float(np.sum(coef * coef)))
    e = np.array(energy)
    total = float(e.sum())
    if total > 0:
        shares, zero = e / total, False
    else:
        shares, zero = np.full(e.shape, 1.0 / e.size), True
    return BandEnergyProfile(levels=pyramid.levels, bands=names, energy=shares, total=total,
                             source=source, zero_total=zero)


def _crop(a: np.ndarray, region):
    if region is None:
        return a
    y0, x0, h, w = region
    if y0 < 0 or x0 < 0 or y0 + h > a.shape[-2] or x0 + w > a.shape[-1]:
        raise ValueError(f"region {region} outside image {a.shape[-2:]}")
    return a[..., y0:y0 + h, x0:x0 + w]


def degradation_profile(lr_up, hr, levels: int = 4, source: str = "", region=None) -> BandEnergyProfile:
    """Band shares of the squared Haar-coefficient difference between HR and upsampled LR.

    Colour inputs are reduced to luma; ``region`` is ``(y0, x0, h, w)``.
    """
    a, b = luma(lr_up), luma(hr)
    if a.shape != b.shape:
        raise DimensionError(f"degradation_profile: {a.shape} vs {b.shape}")
    a, b = _crop(a, region), _crop(b, region)
    pa, pb = haar_dwt2(a, levels), haar_dwt2(b, levels)
    diff = HaarPyramid(
        ll=pb.ll - pa.ll,
        details=[tuple(hb - ha for ha, hb in zip(da, db)) for da, db in zip(pa.details, pb.details)],
    )
    return _profile(diff, source)


def image_profile(x, levels: int = 4, source: str = "") -> BandEnergyProfile:
    return _profile(haar_dwt2(luma(x), levels), source)


def feature_band_profile(f, levels: int = 4, source: str = "", reduce: str = "magnitude") -> BandEnergyProfile:
    """Profile of a C x H x W (or 1 x C x H x W) feature map collapsed over channels.

    ``reduce="magnitude"`` analyzes the channel mean of ``|f|``; ``"mean"``
    the signed channel mean, which keeps zero-mean inputs zero-mean.
    """
    a = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    if a.ndim == 4 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 3:
        raise DimensionError(f"feature_band_profile: expected C x H x W, got {a.shape}")
    if reduce == "magnitude":
        plane = np.abs(a).mean(axis=0)
    elif reduce == "mean":
        plane = a.mean(axis=0)
    else:
        raise ValueError(f"reduce must be 'magnitude' or 'mean', got {reduce!r}")
    return _profile(haar_dwt2(plane, levels), source)


def write_profiles_csv(profiles, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tag", "level", "band", "energy_share"])
        for p in profiles:
            for tag, lvl, band, share in p.rows():
                w.writerow([tag, lvl, band, f"{share:.12g}"])
