"""Co-authorship influence matrix between studies.

``raw_w[h, k] = 1`` when study ``h`` receives influence from study ``k``:
they share an author and ``k`` is earlier, or they are within one
calendar year of each other (then the link goes both ways).
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .domain import StudyRecord

MAX_LAG = 1


@dataclass(frozen=True)
class CoauthorNetwork:
    study_order: tuple[str, ...]
    raw_w: np.ndarray
    row_std_w: np.ndarray

    @property
    def J(self) -> int:
        return len(self.study_order)

    def reorder(self, order: Sequence[str]) -> "CoauthorNetwork":
        idx = [self.study_order.index(s) for s in order]
        raw = self.raw_w[np.ix_(idx, idx)]
        return CoauthorNetwork(tuple(order), raw, row_standardize(raw))

    @classmethod
    def from_raw(cls, study_order: Sequence[str], raw_w: np.ndarray) -> "CoauthorNetwork":
        raw = np.asarray(raw_w, dtype=float)
        if raw.shape != (len(study_order), len(study_order)):
            raise ValueError("matrix shape does not match study order")
        if np.any(np.diag(raw) != 0):
            raise ValueError("influence matrix must have a zero diagonal")
        return cls(tuple(study_order), raw, row_standardize(raw))


def row_standardize(raw_w: np.ndarray) -> np.ndarray:
    w = np.asarray(raw_w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {w.shape}")
    sums = w.sum(axis=1, keepdims=True)
    return np.divide(w, sums, out=np.zeros_like(w), where=sums != 0)


def build_adjacency(studies: Mapping[str, StudyRecord]) -> CoauthorNetwork:
    order = list(studies)
    recs = [studies[s] for s in order]
    for r in recs:
        if not r.authors:
            raise ValueError(f"study {r.study_id} has no authors")
    J = len(order)
    w = np.zeros((J, J))
    for h in range(J):
        for k in range(h + 1, J):
            if not recs[h].authors & recs[k].authors:
                continue
            lag = recs[h].year - recs[k].year
            if abs(lag) <= MAX_LAG:
                w[h, k] = w[k, h] = 1.0
            elif lag > 0:
                w[h, k] = 1.0
            else:
                w[k, h] = 1.0
    return CoauthorNetwork(tuple(order), w, row_standardize(w))


@dataclass(frozen=True)
class NetworkSummary:
    n_authors: int
    studies_per_author: dict[str, int]
    n_edges: int
    n_no_influence: int
    multi_study_authors: int


def network_summary(net: CoauthorNetwork, studies: Mapping[str, StudyRecord]) -> NetworkSummary:
    counts = Counter(a for sid in net.study_order for a in studies[sid].authors)
    in_degree = net.raw_w.sum(axis=1)
    return NetworkSummary(
        n_authors=len(counts),
        studies_per_author=dict(sorted(counts.items())),
        n_edges=int(net.raw_w.sum()),
        n_no_influence=int(np.sum(in_degree == 0)),
        multi_study_authors=sum(1 for c in counts.values() if c > 1),
    )


def _comment(fh, header: str | None) -> None:
    if header:
        fh.write("".join(f"# {line}\n" for line in header.splitlines()))


def _data_lines(fh):
    return (line for line in fh if not line.startswith("#"))


def write_edge_list(net: CoauthorNetwork, path: str | Path, header: str | None = None) -> None:
    """One ``from_study,to_study`` row per link; influence flows from -> to."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _comment(fh, header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from_study", "to_study"])
        for h, k in zip(*np.nonzero(net.raw_w)):
            w.writerow([net.study_order[k], net.study_order[h]])


def read_edge_list(path: str | Path, study_order: Sequence[str]) -> CoauthorNetwork:
    index = {s: i for i, s in enumerate(study_order)}
    raw = np.zeros((len(study_order), len(study_order)))
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(_data_lines(fh)):
            raw[index[row["to_study"]], index[row["from_study"]]] = 1.0
    return CoauthorNetwork.from_raw(study_order, raw)


def write_matrix(net: CoauthorNetwork, path: str | Path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _comment(fh, header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study_id", *net.study_order])
        for sid, row in zip(net.study_order, net.raw_w):
            w.writerow([sid, *(int(v) for v in row)])


def read_matrix(path: str | Path) -> CoauthorNetwork:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(_data_lines(fh)))
    order = rows[0][1:]
    if [r[0] for r in rows[1:]] != order:
        raise ValueError("row labels do not match column labels")
    raw = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return CoauthorNetwork.from_raw(order, raw)
