"""Shear and temporal-crop augmentations producing positive pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChannelError, InvalidSequence, ParameterError


@dataclass
class AugmentationParams:
    shear_amplitude: float = 0.5
    padding_ratio: int = 6
    order: str = "crop_shear"
    seed: int = 0

    def __post_init__(self):
        if self.shear_amplitude < 0:
            raise ParameterError("shear_amplitude must be >= 0")
        if int(self.padding_ratio) != self.padding_ratio or self.padding_ratio < 1:
            raise ParameterError("padding_ratio must be a positive integer")
        if self.order not in ("crop_shear", "shear_crop"):
            raise ParameterError(f"unknown augmentation order {self.order!r}")


def shear_matrix(amplitude, rng):
    """3x3 matrix with unit diagonal and off-diagonals ~ U[-amplitude, amplitude]."""
    A = np.eye(3)
    off = ~np.eye(3, dtype=bool)
    A[off] = rng.uniform(-amplitude, amplitude, 6)
    return A


def apply_shear(data, A):
    """Left-multiply every xyz vector of a (..., C, M) array by A."""
    if data.shape[-2] != 3:
        raise ChannelError(f"shear needs C=3, got C={data.shape[-2]}")
    return np.einsum("ij,...jm->...im", A, data).astype(data.dtype)


def shear(seq, amplitude, rng):
    data = seq.data
    if data.shape[2] != 3:
        raise ChannelError(f"shear needs C=3, got C={data.shape[2]}")
    if amplitude == 0:
        return seq.replace(data.copy())
    return seq.replace(apply_shear(data, shear_matrix(amplitude, rng)))


def pad_length(T, padding_ratio):
    return T // padding_ratio


def crop_indices(T, padding_ratio, offset):
    """Source frame index of each output frame for a given crop offset."""
    P = pad_length(T, padding_ratio)
    if not 0 <= offset <= 2 * P:
        raise ParameterError(f"offset {offset} outside [0, {2 * P}]")
    padded = np.concatenate([np.arange(P)[::-1], np.arange(T), np.arange(T - P, T)[::-1]])
    return padded[offset:offset + T]


def temporal_crop_array(data, padding_ratio, rng):
    T = data.shape[0]
    if T < 2:
        raise InvalidSequence("temporal crop needs at least two frames")
    P = pad_length(T, padding_ratio)
    if P == 0:
        return data.copy()
    offset = int(rng.integers(0, 2 * P + 1))
    return data[crop_indices(T, padding_ratio, offset)]


def temporal_crop(seq, padding_ratio, rng):
    return seq.replace(temporal_crop_array(seq.data, padding_ratio, rng))


def augment_array(data, params, rng):
    """One random view of a (T, V, C, M) array."""
    if params.order == "crop_shear":
        out = temporal_crop_array(data, params.padding_ratio, rng)
        if params.shear_amplitude > 0:
            out = apply_shear(out, shear_matrix(params.shear_amplitude, rng))
    else:
        out = data
        if params.shear_amplitude > 0:
            out = apply_shear(out, shear_matrix(params.shear_amplitude, rng))
        out = temporal_crop_array(out, params.padding_ratio, rng)
    return out


def augment_pair(seq, params, rng):
    x = seq.replace(augment_array(seq.data, params, rng))
    xp = seq.replace(augment_array(seq.data, params, rng))
    return x, xp


def augment_batch(batch, params, rng):
    """Independent augmentation of every sample in an (N, T, V, C, M) batch."""
    return np.stack([augment_array(sample, params, rng) for sample in batch])

