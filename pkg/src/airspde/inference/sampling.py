"""Joint posterior draws of the latent vector and the binary sample archive.

Draw ``i`` uses its own random stream ``SeedSequence(seed, spawn_key=(i,))``,
so the innovations of a draw do not depend on batching or on the number of
workers.

Archive layout (little-endian)::

    8 bytes   magic b"PMSAMP01"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (dims, seed, offsets), space padded to 8-byte alignment
    ...       float64 latent draws, row-major (n_samples, n_latent)
    ...       float64 hyperparameters per draw, row-major (n_samples, 5)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from airspde.inference.model import ModelAssembly
from airspde.inference.params import NAMES, HyperParameters

MAGIC = b"PMSAMP01"
DEFAULT_N_SAMPLES = 1000


def draw_stream(seed: int, i: int, purpose: int = 0) -> np.random.Generator:
    """Independent generator for draw ``i``; ``purpose`` separates latent and noise streams."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, purpose)))


@dataclass
class PosteriorSampleSet:
    """Latent draws ordered (u day-major, z, mu, beta) plus the hyperparameters behind each draw."""

    latent: np.ndarray  # (n_samples, n_latent)
    hyper: np.ndarray  # (n_samples, 5) natural scale, columns NAMES
    T: int
    n_mesh: int
    n_station: int
    n_fixed: int
    seed: int

    @property
    def n_samples(self) -> int:
        return self.latent.shape[0]

    @property
    def n_latent(self) -> int:
        return self.latent.shape[1]

    @property
    def sigma_epsilon(self) -> np.ndarray:
        return self.hyper[:, NAMES.index("sigma_epsilon")]

    def u_day(self, t: int) -> np.ndarray:
        """(n_samples, n_mesh) draws of the field on day ``t``."""
        return self.latent[:, t * self.n_mesh : (t + 1) * self.n_mesh]

    @property
    def z(self) -> np.ndarray:
        s = self.T * self.n_mesh
        return self.latent[:, s : s + self.n_station]

    @property
    def fixed(self) -> np.ndarray:
        s = self.T * self.n_mesh + self.n_station
        return self.latent[:, s : s + self.n_fixed]

    def linear_predictor(self, rows: sp.spmatrix) -> np.ndarray:
        """Noise-free linear predictor draws (n_samples, n_rows) for full design rows."""
        rows = sp.csr_matrix(rows)
        return np.asarray((rows @ np.asarray(self.latent).T).T)

    def predictive(self, rows: sp.spmatrix, noise_seed: int | None = None) -> np.ndarray:
        """Linear predictor draws plus observation noise at each draw's sigma_epsilon."""
        eta = self.linear_predictor(rows)
        seed = self.seed if noise_seed is None else noise_seed
        for i in range(self.n_samples):
            eta[i] += self.sigma_epsilon[i] * draw_stream(seed, i, 1).standard_normal(eta.shape[1])
        return eta

    def summary(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-component mean and sd of the latent draws."""
        lat = np.asarray(self.latent)
        return lat.mean(axis=0), lat.std(axis=0, ddof=1) if self.n_samples > 1 else np.zeros(self.n_latent)

    # ------------------------------------------------------------------ archive
    def write(self, path) -> None:
        header = {
            "format": "PMSAMP01",
            "n_samples": self.n_samples,
            "n_latent": self.n_latent,
            "T": self.T,
            "n_mesh": self.n_mesh,
            "n_station": self.n_station,
            "n_fixed": self.n_fixed,
            "seed": int(self.seed),
            "hyper_names": list(NAMES),
            "dtype": "<f8",
            "order": "C",
        }
        body = json.dumps(header, sort_keys=True).encode()
        body += b" " * ((-(len(MAGIC) + 8 + len(body))) % 8)
        parent = os.path.dirname(os.fspath(path))
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(body)))
            fh.write(body)
            fh.write(np.ascontiguousarray(self.latent, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.hyper, dtype="<f8").tobytes())

    @classmethod
    def read(cls, path, mmap: bool = True) -> "PosteriorSampleSet":
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise ValueError(f"{path}: not a sample archive")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode())
        offset = len(MAGIC) + 8 + hlen
        ns, nl = header["n_samples"], header["n_latent"]
        if mmap:
            latent = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=(ns, nl))
        else:
            latent = np.fromfile(path, dtype="<f8", count=ns * nl, offset=offset).reshape(ns, nl)
        hyper = np.fromfile(path, dtype="<f8", count=ns * 5, offset=offset + 8 * ns * nl).reshape(ns, 5)
        return cls(
            latent=latent,
            hyper=hyper,
            T=header["T"],
            n_mesh=header["n_mesh"],
            n_station=header["n_station"],
            n_fixed=header["n_fixed"],
            seed=header["seed"],
        )


def _normalize_points(hyper_points):
    if isinstance(hyper_points, HyperParameters):
        return [hyper_points], np.array([1.0])
    pts, w = zip(*list(hyper_points))
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("hyperparameter weights must be non-negative with a positive sum")
    return list(pts), w / w.sum()


def sample_posterior(
    assembly: ModelAssembly,
    hyper_points,
    n_samples: int = DEFAULT_N_SAMPLES,
    seed: int = 0,
    priors=None,
    batch: int = 64,
) -> PosteriorSampleSet:
    """Joint draws from the latent posterior mixed over weighted hyperparameter points.

    ``hyper_points`` is a single :class:`HyperParameters` or an iterable of
    ``(theta, weight)`` pairs. Each draw picks a point by weight, then maps
    standard normals through the transposed Cholesky factor of the
    conditional precision. Draws are bit-identical for equal
    ``(seed, n_samples, batch)``; other batch sizes only change the
    floating-point summation order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    points, weights = _normalize_points(hyper_points)
    cum = np.cumsum(weights)
    model = assembly.model(priors)
    n = assembly.n_latent

    which = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        u = draw_stream(seed, i).random()
        which[i] = min(int(np.searchsorted(cum, u * cum[-1], side="right")), len(points) - 1)

    latent = np.empty((n_samples, n))
    hyper = np.empty((n_samples, 5))
    for k in np.unique(which):
        post = model.conditional(points[k])
        idx = np.flatnonzero(which == k)
        hyper[idx] = points[k].as_array()
        for start in range(0, len(idx), batch):
            chunk = idx[start : start + batch]
            Z = np.empty((n, len(chunk)))
            for c, i in enumerate(chunk):
                rng = draw_stream(seed, i)
                rng.random()  # the mixture pick
                Z[:, c] = rng.standard_normal(n)
            latent[chunk] = post.draw(Z).T
    return PosteriorSampleSet(
        latent=latent,
        hyper=hyper,
        T=assembly.T,
        n_mesh=assembly.n_mesh,
        n_station=assembly.n_station,
        n_fixed=assembly.X.shape[1],
        seed=int(seed),
    )
