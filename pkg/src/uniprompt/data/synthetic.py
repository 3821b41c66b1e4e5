"""Synthetic few-shot datasets with tunable visual and textual spread.

Each class owns a random prototype image; samples add Gaussian pixel noise
of scale ``sigma_v``, which drives intra-class visual variance.  Class names
are drawn from the shipped word list, and each class copies a fraction
``rho`` of its name tokens from the previous class, which pulls text
embeddings together and lowers inter-class text variance.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from uniprompt.encoder.tokenizer import shipped_words
from uniprompt.errors import ConfigurationError, DataError

_SPLIT_CODES = {"train": 0, "test": 1}


def philox(*key):
    """Counter-based generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    name: str = "synthetic"
    k: int = 5
    train_per_class: int = 20
    test_per_class: int = 20
    image_size: int = 32
    channels: int = 1
    prototype_scale: float = 1.0
    sigma_v: float = 0.3
    rho: float = 0.0
    name_length: int = 5
    seed: int = 0

    def validate(self):
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if self.sigma_v < 0:
            raise ConfigurationError(f"sigma_v must be >= 0, got {self.sigma_v}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.name_length < 1 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("name_length and per-class sample counts must be positive")
        fresh = self.name_length - self.shared_tokens
        if self.name_length + (self.k - 1) * fresh > len(shipped_words()):
            raise ConfigurationError("not enough vocabulary words for the requested class names")
        return self

    @property
    def shared_tokens(self):
        return int(round(self.rho * self.name_length))


@dataclasses.dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Split(self.images[indices], self.labels[indices])


@dataclasses.dataclass
class Dataset:
    name: str
    class_names: list
    splits: dict
    generator: dict | None = None

    @property
    def k(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return tuple(self.splits["train"].images.shape[1:])


def class_names_for(spec):
    rng = philox(spec.seed, 0xC1A55)
    pool = list(rng.permutation(shipped_words()))
    shared = spec.shared_tokens
    names = []
    for c in range(spec.k):
        if c == 0:
            tokens = [pool.pop() for _ in range(spec.name_length)]
        else:
            tokens = names[-1][:shared] + [pool.pop() for _ in range(spec.name_length - shared)]
        names.append(tokens)
    return [" ".join(t) for t in names]


def prototypes_for(spec):
    shape = (spec.image_size, spec.image_size, spec.channels)
    return np.stack(
        [spec.prototype_scale * philox(spec.seed, c, 0xB0B).standard_normal(shape) for c in range(spec.k)]
    )


def _draw(spec, protos, split, per_class, sigma, salt=0):
    images, labels = [], []
    for c in range(spec.k):
        rng = philox(spec.seed, c, _SPLIT_CODES[split], salt)
        noise = rng.standard_normal((per_class, *protos.shape[1:]))
        images.append(protos[c] + sigma * noise)
        labels.append(np.full(per_class, c, dtype=np.int64))
    return Split(np.concatenate(images).astype(np.float32), np.concatenate(labels))


def make_synthetic(spec):
    """Build the dataset in memory; identical specs give identical arrays."""
    spec.validate()
    protos = prototypes_for(spec)
    splits = {
        "train": _draw(spec, protos, "train", spec.train_per_class, spec.sigma_v),
        "test": _draw(spec, protos, "test", spec.test_per_class, spec.sigma_v),
    }
    return Dataset(spec.name, class_names_for(spec), splits, dataclasses.asdict(spec))


def shifted_split(split, kind="noise", magnitude=0.5, seed=0, spec=None):
    """Derive a distribution-shifted copy of a split.

    ``noise`` adds i.i.d. Gaussian pixel noise of scale ``magnitude`` to
    every image.  ``prototype`` redraws test samples around prototypes
    perturbed by ``magnitude`` times a fixed random image (requires ``spec``).
    """
    if magnitude < 0:
        raise ConfigurationError("shift magnitude must be >= 0")
    if kind == "noise":
        rng = philox(seed, 0x5F1F7)
        noisy = split.images + magnitude * rng.standard_normal(split.images.shape)
        return Split(noisy.astype(np.float32), split.labels.copy())
    if kind == "prototype":
        if spec is None:
            raise ConfigurationError("prototype shift needs the generating SyntheticSpec")
        protos = prototypes_for(spec)
        protos = protos + magnitude * philox(seed, 0x9E57).standard_normal(protos.shape)
        return _draw(spec, protos, "test", spec.test_per_class, spec.sigma_v, salt=seed + 1)
    raise ConfigurationError(f"unknown shift kind {kind!r}; expected 'noise' or 'prototype'")


def check_class_lists(source, target_names):
    if list(source) != list(target_names):
        raise DataError(f"class lists differ: {list(source)} vs {list(target_names)}")
