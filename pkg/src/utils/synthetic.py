# src/utils/synthetic.py
"""Seeded synthetic inputs with controlled channel powers and inter-channel correlation."""

from typing import Optional, Tuple

import numpy as np

from src.schemas.experiment import SyntheticSpec
from src.utils.mnist_reader import Dataset, PADDED_SIZE
from src.utils.tensor_ops import DTYPE, ConvGeometry, UnrolledInput


def channel_geometry(spec: SyntheticSpec) -> ConvGeometry:
    """A 1 x Z "kernel" so each channel owns Z contiguous rows."""
    return ConvGeometry(spec.channels, 1, 1, spec.block_size)


def _latent_cholesky(channels: int, rho: float) -> np.ndarray:
    corr = np.full((channels, channels), rho, dtype=DTYPE)
    np.fill_diagonal(corr, 1.0)
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ValueError(f"rho={rho} is not a valid equicorrelation for {channels} channels")


def synth_channels(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> UnrolledInput:
    """
    Gaussian channel blocks: entry (i, z) of every column is sqrt(power_i) times a
    latent factor whose channels share pairwise correlation rho.
    """
    rng = rng or np.random.default_rng(spec.seed)
    c, z, n = spec.channels, spec.block_size, spec.samples
    latent = rng.standard_normal((z, n, c)) @ _latent_cholesky(c, spec.rho).T
    scaled = latent * np.sqrt(np.asarray(spec.powers, dtype=DTYPE))
    data = scaled.transpose(2, 0, 1).reshape(c * z, n)
    return UnrolledInput(data[None], channel_geometry(spec), (1, n))


def synth_system(spec: SyntheticSpec) -> Tuple[UnrolledInput, np.ndarray, np.ndarray]:
    """Input, desired response d = w_t^T x + noise, and the true weights w_t."""
    rng = np.random.default_rng(spec.seed)
    unrolled = synth_channels(spec, rng)
    k = spec.channels * spec.block_size
    true_w = np.asarray(spec.true_weights, dtype=DTYPE) if spec.true_weights is not None \
        else rng.standard_normal(k)
    desired = true_w @ unrolled.columns()
    if spec.noise_std > 0:
        desired = desired + spec.noise_std * rng.standard_normal(desired.shape)
    return unrolled, desired, true_w


def synth_image_dataset(samples: int, seed: int, split: str, classes: int = 10,
                        template_seed: int = 0, noise_std: float = 1.0,
                        stats: Optional[Tuple[float, float]] = None) -> Dataset:
    """
    Class-template images on the padded MNIST canvas, for runs without MNIST files.

    Templates depend only on template_seed, so train and val splits share classes.
    """
    templates = np.random.default_rng(template_seed).standard_normal((classes, 1, PADDED_SIZE, PADDED_SIZE))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=samples)
    images = templates[labels] + noise_std * rng.standard_normal((samples, 1, PADDED_SIZE, PADDED_SIZE))
    mean, std = stats if stats is not None else (float(images.mean()), float(images.std()))
    return Dataset((images - mean) / std, labels.astype(np.int64), split, mean, std)
