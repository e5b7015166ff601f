"""Bounded policy archive with two fitness niches.

Below capacity every incoming policy is appended.  At capacity the archived
fitnesses are split in two by 1-D k-means and each incoming policy replaces
a uniformly chosen member of the cluster whose centroid is nearest to its
own fitness, so low- and high-fitness niches both survive.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .policy import PolicySnapshot

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class ArchiveEntry:
    snapshot: PolicySnapshot
    fitness: float

    def __post_init__(self):
        if not math.isfinite(self.fitness):
            raise ValueError(f"archive fitness must be finite, got {self.fitness}")


def two_means(fitnesses, max_iter: int = 100):
    """Lloyd's algorithm on scalars, started from ``(min, max)``.

    Returns ``(centroid_lo, centroid_hi, assignment)`` where ``assignment[i]``
    is 0 (lo) or 1 (hi); ties go to lo.  An empty cluster keeps its
    previous centroid.
    """
    x = np.asarray(fitnesses, dtype=np.float64)
    if x.size < 2:
        raise ValueError("two_means needs at least two values")
    lo, hi = float(x.min()), float(x.max())
    assign = None
    for _ in range(max_iter):
        new = (np.abs(x - hi) < np.abs(x - lo)).astype(int)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        if np.any(assign == 0):
            lo = float(x[assign == 0].mean())
        if np.any(assign == 1):
            hi = float(x[assign == 1].mean())
    if lo > hi:
        lo, hi = hi, lo
        assign = 1 - assign
    return lo, hi, assign


class Archive:
    """At most ``capacity`` entries; size is constant once full."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("archive capacity must be positive")
        self.capacity = int(capacity)
        self.entries: list[ArchiveEntry] = []
        # (agent index, evicted slot, cluster label) from the last update
        self.last_replacements: list[tuple] = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def fitnesses(self) -> list:
        return [e.fitness for e in self.entries]

    def update(self, population, rng: np.random.Generator) -> "Archive":
        """Insert ``(snapshot, fitness)`` pairs from one generation."""
        population = list(population)
        if not population:
            raise ValueError("empty population")
        self.last_replacements = []
        if len(self.entries) < self.capacity:
            for snap, fit in population:
                if len(self.entries) >= self.capacity:
                    break
                self.entries.append(ArchiveEntry(snap, float(fit)))
            return self
        lo, hi, assign = two_means(self.fitnesses)
        members = {0: np.flatnonzero(assign == 0), 1: np.flatnonzero(assign == 1)}
        for m, (snap, fit) in enumerate(population):
            label = 1 if abs(fit - hi) < abs(fit - lo) else 0
            pool = members[label]
            if pool.size == 0:
                j = int(rng.integers(len(self.entries)))
            else:
                j = int(pool[rng.integers(pool.size)])
            self.entries[j] = ArchiveEntry(snap, float(fit))
            self.last_replacements.append((m, j, label))
        return self

    def sample(self, n: int, rng: np.random.Generator) -> list:
        """``n`` uniform draws with replacement as ``(snapshot, fitness)``."""
        if not self.entries or n <= 0:
            return []
        idx = rng.integers(len(self.entries), size=n)
        return [(self.entries[i].snapshot, self.entries[i].fitness) for i in idx]

    # persistence --------------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"capacity": self.capacity, "entries": []}
        for i, entry in enumerate(self.entries):
            name = f"entry_{i}.snap"
            (directory / name).write_text(entry.snapshot.dumps())
            manifest["entries"].append({"id": i, "file": name, "fitness": entry.fitness})
        tmp = directory / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1))
        os.replace(tmp, directory / MANIFEST)

    @classmethod
    def load(cls, directory) -> "Archive":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST).read_text())
        archive = cls(manifest["capacity"])
        for item in manifest["entries"]:
            snap = PolicySnapshot.loads((directory / item["file"]).read_text())
            archive.entries.append(ArchiveEntry(snap, float(item["fitness"])))
        return archive


def update_archive(archive: Archive, population, rng: np.random.Generator) -> Archive:
    return archive.update(population, rng)
