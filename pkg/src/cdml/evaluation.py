"""Single-shot re-identification evaluation.

The gallery holds one image per identity from one camera; every image of
the other camera is a probe. Each probe's true match is ranked by ascending
distance, with ties against the true match counted as losses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, ImageSample
from .extractor import extract_many
from .metric import pairwise_distances


class EvaluationError(ValueError):
    pass


@dataclass
class EvalSplit:
    gallery: list[ImageSample]
    probes: list[ImageSample]

    def __post_init__(self):
        gids = [g.identity for g in self.gallery]
        if len(set(gids)) != len(gids):
            raise EvaluationError("gallery identities must be unique")
        missing = {p.identity for p in self.probes} - set(gids)
        if missing:
            raise EvaluationError(f"probe identities absent from gallery: {sorted(missing)}")

    @property
    def gallery_ids(self) -> np.ndarray:
        return np.array([g.identity for g in self.gallery])

    @property
    def probe_ids(self) -> np.ndarray:
        return np.array([p.identity for p in self.probes])


@dataclass
class CmcCurve:
    rates: np.ndarray

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rates)

    def __getitem__(self, k: int) -> float:
        """Rate at rank ``k`` (1-based)."""
        if k < 1:
            raise IndexError("ranks start at 1")
        return float(self.rates[k - 1])

    @property
    def rank1(self) -> float:
        return rank1(self)


def make_single_shot_split(
    dataset: Dataset,
    rng: np.random.Generator,
    probe_camera: int | None = None,
    gallery_camera: int | None = None,
) -> EvalSplit:
    """One random gallery image per identity from the gallery camera."""
    cams = dataset.cameras()
    if probe_camera is None or gallery_camera is None:
        if len(cams) < 2:
            raise EvaluationError(f"need two cameras, dataset has {cams}")
        probe_camera, gallery_camera = cams[0], cams[1]
    by_id: dict[int, dict[int, list[ImageSample]]] = {}
    for s in dataset.samples:
        by_id.setdefault(s.identity, {}).setdefault(s.camera, []).append(s)
    offenders = sorted(
        i for i, per_cam in by_id.items() if not per_cam.get(probe_camera) or not per_cam.get(gallery_camera)
    )
    if offenders:
        raise EvaluationError(f"identities missing camera {probe_camera} or {gallery_camera}: {offenders}")
    gallery = []
    for ident in sorted(by_id):
        options = by_id[ident][gallery_camera]
        gallery.append(options[int(rng.integers(len(options)))])
    probes = [s for s in dataset.samples if s.camera == probe_camera]
    return EvalSplit(gallery, probes)


def distance_matrix(split: EvalSplit, model) -> np.ndarray:
    """``probes x gallery`` metric distances under ``model``."""
    fp = extract_many([p.pixels for p in split.probes], model.extractor)
    fg = extract_many([g.pixels for g in split.gallery], model.extractor)
    return pairwise_distances(fp, fg, model.metric)


def match_ranks(matrix: np.ndarray, probe_ids: Sequence[int], gallery_ids: Sequence[int]) -> np.ndarray:
    """1-based rank of each probe's true match; equal distances rank it last."""
    matrix = np.asarray(matrix, dtype=np.float64)
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if matrix.shape != (len(probe_ids), len(gallery_ids)):
        raise EvaluationError(f"matrix shape {matrix.shape} does not fit {len(probe_ids)} probes x {len(gallery_ids)} gallery")
    hits = probe_ids[:, None] == gallery_ids[None, :]
    counts = hits.sum(axis=1)
    if np.any(counts != 1):
        bad = probe_ids[counts != 1]
        raise EvaluationError(f"probe identities without exactly one gallery match: {sorted(set(bad.tolist()))}")
    true_d = matrix[hits]
    # every gallery entry at or below the true distance ranks ahead of or level with it
    return np.sum(matrix <= true_d[:, None], axis=1)


def cmc(matrix: np.ndarray, probe_ids: Sequence[int], gallery_ids: Sequence[int]) -> CmcCurve:
    ranks = match_ranks(matrix, probe_ids, gallery_ids)
    k = len(gallery_ids)
    counts = np.bincount(ranks, minlength=k + 1)[1:]
    return CmcCurve(np.cumsum(counts) / len(ranks))


def rank1(curve: CmcCurve) -> float:
    if len(curve) == 0:
        raise EvaluationError("empty CMC curve")
    return float(curve.rates[0])


@dataclass
class EvalResult:
    curve: CmcCurve
    matrix: np.ndarray
    split: EvalSplit

    @property
    def rank1(self) -> float:
        return rank1(self.curve)


def evaluate(dataset: Dataset, model, seed: int = 0) -> EvalResult:
    split = make_single_shot_split(dataset, np.random.default_rng(seed))
    matrix = distance_matrix(split, model)
    return EvalResult(cmc(matrix, split.probe_ids, split.gallery_ids), matrix, split)


def write_cmc_csv(curve: CmcCurve, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "identification_rate"])
        for k, r in enumerate(curve.rates, start=1):
            w.writerow([k, repr(float(r))])
