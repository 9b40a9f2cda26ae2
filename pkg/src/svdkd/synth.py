"""Synthetic teacher embedding sets with a controlled power-law spectrum.

Each identity owns a latent prototype; a teacher row is
``(prototype + modality_offset + noise)``, rescaled per latent coordinate to unit
RMS, weighted by ``k ** -gamma`` and mapped into ``d`` dimensions through a
random orthonormal basis. The basis is a random permutation of small rotation
blocks, so every principal direction loads on only a few original dimensions.
Optional isotropic ambient noise is added afterwards and fills the spectral tail.
Student inputs are the prototype seen through a per-modality random map plus
independent input noise that the teacher never sees; optionally a low-rank
per-sample nuisance (pose/illumination stand-in) is mixed into the inputs, to
which the teacher is invariant.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.stats import ortho_group

from svdkd.data_model import EmbeddingSet, Modality, SampleMeta
from svdkd.errors import ArgumentError


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 128
    samples_per_modality: int = 4
    d: int = 256
    d_in: int = 64
    latent_rank: int = 256
    gamma: float = 1.2
    modality_gap: float = 0.1
    noise_sigma: float = 0.3
    input_noise_sigma: float = 0.1
    ambient_noise_sigma: float = 0.0
    nuisance_rank: int = 0
    nuisance_sigma: float = 0.0
    basis_block: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.latent_rank < 1 or self.latent_rank > self.d:
            raise ArgumentError(f"latent_rank must lie in [1, d={self.d}], got {self.latent_rank}")
        if self.gamma <= 0:
            raise ArgumentError(f"gamma must be > 0, got {self.gamma}")
        for name in (
            "modality_gap",
            "noise_sigma",
            "input_noise_sigma",
            "ambient_noise_sigma",
            "nuisance_sigma",
        ):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be >= 0")
        if self.n_identities < 1 or self.samples_per_modality < 1 or self.d_in < 1:
            raise ArgumentError("n_identities, samples_per_modality and d_in must be positive")
        if self.nuisance_rank < 0:
            raise ArgumentError("nuisance_rank must be >= 0")
        if self.basis_block < 1:
            raise ArgumentError("basis_block must be >= 1")

    @property
    def n(self) -> int:
        return self.n_identities * len(Modality) * self.samples_per_modality

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthDataset:
    embeddings: EmbeddingSet
    prototypes: np.ndarray  # n_identities x d, noiseless zero-offset teacher rows
    basis: np.ndarray  # d x latent_rank
    spectrum: np.ndarray  # latent_rank, k ** -gamma


def power_law_spectrum(rank: int, gamma: float) -> np.ndarray:
    return np.arange(1, rank + 1, dtype=np.float64) ** -gamma


def analytic_cumulative(rank: int, gamma: float) -> np.ndarray:
    """Cumulative explained variance of an exact ``k ** -gamma`` spectrum."""
    energy = power_law_spectrum(rank, gamma) ** 2
    return np.cumsum(energy) / energy.sum()


def localized_basis(d: int, rank: int, block: int, rng: np.random.Generator) -> np.ndarray:
    """d x rank orthonormal columns, each supported on one ``block``-sized set of dimensions."""
    Q = np.zeros((d, d))
    start = 0
    while start < d:
        size = min(block, d - start)
        R = ortho_group.rvs(size, random_state=rng) if size > 1 else np.array([[rng.choice([-1.0, 1.0])]])
        Q[start : start + size, start : start + size] = R
        start += size
    Q = Q[rng.permutation(d)][:, rng.permutation(d)]
    return Q[:, :rank]


def generate(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    r = cfg.latent_rank
    n_mod = len(Modality)
    prototypes = rng.standard_normal((cfg.n_identities, r))
    offsets = cfg.modality_gap * rng.standard_normal((n_mod, r))
    basis = localized_basis(cfg.d, r, cfg.basis_block, rng)
    input_maps = rng.standard_normal((n_mod, cfg.d_in, r)) / np.sqrt(r)
    sigma = power_law_spectrum(r, cfg.gamma)

    ids = np.repeat(np.arange(cfg.n_identities), n_mod * cfg.samples_per_modality)
    mods = np.tile(np.repeat(np.arange(n_mod), cfg.samples_per_modality), cfg.n_identities)
    n = ids.size
    latent = prototypes[ids] + offsets[mods] + cfg.noise_sigma * rng.standard_normal((n, r))
    rms = np.sqrt(np.mean(latent**2, axis=0))
    scale = np.where(rms > 0, 1.0 / np.where(rms > 0, rms, 1.0), 1.0) * sigma
    teacher = (latent * scale) @ basis.T
    if cfg.ambient_noise_sigma > 0:
        teacher += cfg.ambient_noise_sigma * rng.standard_normal(teacher.shape)

    raw = np.einsum("nij,nj->ni", input_maps[mods], prototypes[ids])
    raw += cfg.input_noise_sigma * rng.standard_normal((n, cfg.d_in))
    if cfg.nuisance_rank > 0 and cfg.nuisance_sigma > 0:
        nuisance_maps = rng.standard_normal((n_mod, cfg.d_in, cfg.nuisance_rank)) / np.sqrt(cfg.nuisance_rank)
        nuisance = cfg.nuisance_sigma * rng.standard_normal((n, cfg.nuisance_rank))
        raw += np.einsum("nij,nj->ni", nuisance_maps[mods], nuisance)

    meta = tuple(SampleMeta(int(i), Modality(int(m)), s) for s, (i, m) in enumerate(zip(ids, mods)))
    es = EmbeddingSet(teacher, meta, raw, "synthetic")
    return SynthDataset(es, (prototypes * scale) @ basis.T, basis, sigma)


def generate_dataset(cfg: SynthConfig) -> EmbeddingSet:
    return generate(cfg).embeddings
