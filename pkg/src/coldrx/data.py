"""Patient records, introduction-time splits, and episode sampling.

Record files are line-delimited: ``record_id|year|c1,c2,...|m1,m2,...``.
Episode sampling follows the episodic few-shot protocol: pick a drug, draw
disjoint support and query sets of patients using / not using it. During
training, negative sampling can be guided by the drug-disease knowledge
base so that no sampled negative is actually indicated for the drug; at
evaluation time negatives are always uniform so no knowledge leaks into
testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    InsufficientNegativesError,
    InsufficientPositivesError,
    MissingYearError,
    ParseError,
    UnknownCodeError,
)
from .knowledge import DrugDiseaseKB, Vocabulary, resolve_asset_path


@dataclass(frozen=True)
class PatientRecord:
    """One admission: ordered condition codes plus the prescribed drug set."""

    record_id: str
    year: int
    codes: tuple[str, ...]
    drugs: frozenset[str]

    def __post_init__(self):
        if len(self.codes) < 1:
            raise ParseError(f"record {self.record_id!r} has no condition codes")
        if len(self.drugs) < 1:
            raise ParseError(f"record {self.record_id!r} has no drugs")


def parse_record(line: str, vocabulary: Optional[Vocabulary] = None) -> PatientRecord:
    parts = line.split("|")
    if len(parts) != 4:
        raise ParseError(f"expected 4 '|'-separated fields, got {line!r}")
    rid, year_s, codes_s, drugs_s = parts
    if not rid:
        raise ParseError(f"empty record id in {line!r}")
    try:
        year = int(year_s)
    except ValueError:
        raise ParseError(f"non-integer year in {line!r}") from None
    codes = tuple(c for c in codes_s.split(",") if c)
    drugs = frozenset(d for d in drugs_s.split(",") if d)
    if vocabulary is not None:
        for c in codes:
            if c not in vocabulary:
                raise UnknownCodeError(f"record {rid!r}: unknown code {c!r}")
        for d in drugs:
            if d not in vocabulary:
                raise UnknownCodeError(f"record {rid!r}: unknown drug {d!r}")
    return PatientRecord(rid, year, codes, drugs)


def format_record(record: PatientRecord) -> str:
    return "|".join([
        record.record_id,
        str(record.year),
        ",".join(record.codes),
        ",".join(sorted(record.drugs)),
    ])


def load_records(path: str | Path,
                 vocabulary: Optional[Vocabulary] = None) -> list[PatientRecord]:
    """Load records in file order, optionally validating codes against a
    vocabulary."""
    path = resolve_asset_path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            try:
                records.append(parse_record(line, vocabulary))
            except ParseError as exc:
                raise ParseError(f"{path}:{ln}: {exc}") from None
    return records


def save_records(records: Iterable[PatientRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(format_record(rec) + "\n")


def first_prescription_years(records: Iterable[PatientRecord]) -> dict[str, int]:
    """Earliest record year in which each drug appears."""
    first: dict[str, int] = {}
    for rec in records:
        for drug in rec.drugs:
            if drug not in first or rec.year < first[drug]:
                first[drug] = rec.year
    return first


@dataclass(frozen=True)
class DatasetSplit:
    train_drugs: frozenset[str]
    valid_drugs: frozenset[str]
    test_drugs: frozenset[str]
    train_records: tuple[PatientRecord, ...]
    valid_records: tuple[PatientRecord, ...]
    test_records: tuple[PatientRecord, ...]

    def records_for(self, part: str) -> tuple[PatientRecord, ...]:
        return {"train": self.train_records,
                "valid": self.valid_records,
                "test": self.test_records}[part]

    def drugs_for(self, part: str) -> frozenset[str]:
        return {"train": self.train_drugs,
                "valid": self.valid_drugs,
                "test": self.test_drugs}[part]


def split_by_introduction(records: Sequence[PatientRecord],
                          first_year_of: Mapping[str, int],
                          cutoffs: tuple[int, int]) -> DatasetSplit:
    """Partition drugs by first-prescription year, then assign records.

    Drugs first seen up to ``cutoffs[0]`` are training drugs, up to
    ``cutoffs[1]`` validation drugs, later ones test drugs. A record holding
    drugs from more than one part goes to the highest-priority part:
    test > validation > train. Each record is assigned exactly once.
    """
    train_until, valid_until = cutoffs
    if train_until > valid_until:
        raise ValueError(f"cutoffs out of order: {cutoffs}")
    all_drugs = set()
    for rec in records:
        all_drugs.update(rec.drugs)
    missing = sorted(d for d in all_drugs if d not in first_year_of)
    if missing:
        raise MissingYearError(f"no first year for drugs: {missing[:5]}")
    train_d, valid_d, test_d = set(), set(), set()
    for drug in all_drugs:
        year = first_year_of[drug]
        if year <= train_until:
            train_d.add(drug)
        elif year <= valid_until:
            valid_d.add(drug)
        else:
            test_d.add(drug)
    train_r, valid_r, test_r = [], [], []
    for rec in records:
        if rec.drugs & test_d:
            test_r.append(rec)
        elif rec.drugs & valid_d:
            valid_r.append(rec)
        else:
            train_r.append(rec)
    return DatasetSplit(frozenset(train_d), frozenset(valid_d), frozenset(test_d),
                        tuple(train_r), tuple(valid_r), tuple(test_r))


@dataclass(frozen=True)
class Episode:
    """One sampled few-shot task for a single target drug."""

    drug: str
    support_pos: tuple[PatientRecord, ...]
    support_neg: tuple[PatientRecord, ...]
    query_pos: tuple[PatientRecord, ...]
    query_neg: tuple[PatientRecord, ...]
    mode: str = "train"

    def fingerprint(self) -> str:
        ids = [r.record_id for part in (self.support_pos, self.support_neg,
                                        self.query_pos, self.query_neg)
               for r in part]
        return f"{self.drug}:{self.mode}:" + ",".join(ids)


class EpisodeSampler:
    """Samples training or evaluation episodes from a fixed record pool.

    Owns its RNG state: a sampler is not shareable across threads, but
    several samplers with distinct seeds can run in parallel. The emitted
    episode stream is a pure function of the construction arguments.

    In ``train`` mode with a knowledge base, negatives are drawn only from
    records whose codes do not overlap the drug's listed target diseases.
    Drugs absent from the KB fall back to uniform negative sampling. In
    ``eval`` mode the KB is never consulted.
    """

    def __init__(self, records: Sequence[PatientRecord], drugs: Iterable[str], *,
                 n_pos: int, n_neg_support: int, n_query_pos: int, n_neg_query: int,
                 kb: Optional[DrugDiseaseKB] = None, mode: str = "train",
                 seed: int = 0):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.records = tuple(records)
        self.mode = mode
        self.kb = kb if mode == "train" else None
        self.n_pos = n_pos
        self.n_neg_support = n_neg_support
        self.n_query_pos = n_query_pos
        self.n_neg_query = n_neg_query
        self.rng = np.random.default_rng(seed)
        self.kb_violations = 0  # audit counter, re-checked on every sample

        self._pos_idx: dict[str, np.ndarray] = {}
        for drug in sorted(set(drugs)):
            idx = np.array([i for i, r in enumerate(self.records) if drug in r.drugs],
                           dtype=np.int64)
            self._pos_idx[drug] = idx
        self._neg_idx_cache: dict[str, np.ndarray] = {}
        self.drugs = tuple(d for d in sorted(self._pos_idx)
                           if len(self._pos_idx[d]) >= n_pos + n_query_pos)

    def _neg_indices(self, drug: str) -> np.ndarray:
        cached = self._neg_idx_cache.get(drug)
        if cached is not None:
            return cached
        pos = set(self._pos_idx[drug].tolist())
        if self.kb is not None and drug in self.kb:
            ind = self.kb.indications_for(drug)
            idx = np.array([i for i, r in enumerate(self.records)
                            if i not in pos and ind.isdisjoint(r.codes)],
                           dtype=np.int64)
        else:
            idx = np.array([i for i in range(len(self.records)) if i not in pos],
                           dtype=np.int64)
        self._neg_idx_cache[drug] = idx
        return idx

    def sample_drug(self) -> str:
        if not self.drugs:
            raise InsufficientPositivesError(
                f"no drug has {self.n_pos + self.n_query_pos} positive records")
        return self.drugs[int(self.rng.integers(len(self.drugs)))]

    def sample_episode(self, drug: Optional[str] = None) -> Episode:
        if drug is None:
            drug = self.sample_drug()
        pos_idx = self._pos_idx.get(drug)
        if pos_idx is None:
            pos_idx = np.array([i for i, r in enumerate(self.records)
                                if drug in r.drugs], dtype=np.int64)
            self._pos_idx[drug] = pos_idx
        need_pos = self.n_pos + self.n_query_pos
        if len(pos_idx) < need_pos:
            raise InsufficientPositivesError(
                f"drug {drug!r}: {len(pos_idx)} positives, need {need_pos}")
        neg_idx = self._neg_indices(drug)
        need_neg = self.n_neg_support + self.n_neg_query
        if len(neg_idx) < need_neg:
            raise InsufficientNegativesError(
                f"drug {drug!r}: {len(neg_idx)} negatives after filtering, need {need_neg}")

        pos_pick = self.rng.choice(pos_idx, size=need_pos, replace=False)
        neg_pick = self.rng.choice(neg_idx, size=need_neg, replace=False)
        sup_pos = tuple(self.records[i] for i in pos_pick[:self.n_pos])
        qry_pos = tuple(self.records[i] for i in pos_pick[self.n_pos:])
        sup_neg = tuple(self.records[i] for i in neg_pick[:self.n_neg_support])
        qry_neg = tuple(self.records[i] for i in neg_pick[self.n_neg_support:])

        if self.kb is not None and drug in self.kb:
            ind = self.kb.indications_for(drug)
            for rec in sup_neg + qry_neg:
                if not ind.isdisjoint(rec.codes):
                    self.kb_violations += 1
        return Episode(drug, sup_pos, sup_neg, qry_pos, qry_neg, mode=self.mode)


def sample_episode(split_records: Sequence[PatientRecord], drug: str, *,
                   n_pos: int, n_neg_support: int, n_query_pos: int,
                   n_neg_query: int, kb: Optional[DrugDiseaseKB] = None,
                   mode: str = "train", rng_seed: int = 0) -> Episode:
    """One-shot convenience wrapper around :class:`EpisodeSampler`."""
    sampler = EpisodeSampler(split_records, [drug], n_pos=n_pos,
                             n_neg_support=n_neg_support, n_query_pos=n_query_pos,
                             n_neg_query=n_neg_query, kb=kb, mode=mode, seed=rng_seed)
    return sampler.sample_episode(drug)


def eligible_eval_drugs(records: Sequence[PatientRecord], drugs: Iterable[str],
                        n_pos: int, n_neg: int) -> tuple[str, ...]:
    """Drugs with enough users for a support set plus at least one positive
    query, and enough non-users for the negative support set."""
    counts: dict[str, int] = {d: 0 for d in drugs}
    for rec in records:
        for d in rec.drugs:
            if d in counts:
                counts[d] += 1
    n = len(records)
    return tuple(d for d in sorted(counts)
                 if counts[d] >= n_pos + 1 and n - counts[d] >= n_neg + 1)


def make_eval_episodes(records: Sequence[PatientRecord], drugs: Iterable[str],
                       n_episodes: int, *, n_pos: int = 5, n_neg: int = 25,
                       seed: int = 0) -> list[Episode]:
    """Evaluation episodes: random drug, small uniform support set, and a
    query set holding every remaining record labeled by drug usage.

    No knowledge-base filtering is applied anywhere on this path.
    """
    records = tuple(records)
    pool = eligible_eval_drugs(records, drugs, n_pos, n_neg)
    if n_episodes > 0 and not pool:
        raise InsufficientPositivesError(
            f"no drug has {n_pos + 1} positive and {n_neg + 1} negative records")
    rng = np.random.default_rng(seed)
    episodes = []
    by_drug: dict[str, np.ndarray] = {}
    for drug in pool:
        by_drug[drug] = np.array([i for i, r in enumerate(records) if drug in r.drugs],
                                 dtype=np.int64)
    for _ in range(n_episodes):
        drug = pool[int(rng.integers(len(pool)))]
        pos_idx = by_drug[drug]
        neg_idx = np.setdiff1d(np.arange(len(records)), pos_idx, assume_unique=True)
        sup_pos = rng.choice(pos_idx, size=n_pos, replace=False)
        sup_neg = rng.choice(neg_idx, size=n_neg, replace=False)
        support = set(sup_pos.tolist()) | set(sup_neg.tolist())
        qry_pos, qry_neg = [], []
        for i, rec in enumerate(records):
            if i in support:
                continue
            (qry_pos if drug in rec.drugs else qry_neg).append(rec)
        episodes.append(Episode(
            drug,
            tuple(records[i] for i in sup_pos),
            tuple(records[i] for i in sup_neg),
            tuple(qry_pos), tuple(qry_neg), mode="eval"))
    return episodes


# -- episode dumps for reproducibility audits -----------------------------

_SECTIONS = ("support_pos", "support_neg", "query_pos", "query_neg")


def dump_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    """Serialize episodes to the record line format plus episode headers."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(f"#episode drug={ep.drug} mode={ep.mode}\n")
            for section in _SECTIONS:
                fh.write(f"#{section}\n")
                for rec in getattr(ep, section):
                    fh.write(format_record(rec) + "\n")
            fh.write("#end\n")


def load_episode_dump(path: str | Path) -> list[Episode]:
    episodes = []
    drug = mode = None
    parts: dict[str, list[PatientRecord]] = {}
    section = None
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#episode "):
                fields = dict(kv.split("=", 1) for kv in line[len("#episode "):].split())
                drug, mode = fields["drug"], fields["mode"]
                parts = {s: [] for s in _SECTIONS}
                section = None
            elif line == "#end":
                episodes.append(Episode(drug, *(tuple(parts[s]) for s in _SECTIONS),
                                        mode=mode))
                drug = None
            elif line.startswith("#"):
                section = line[1:]
                if section not in _SECTIONS:
                    raise ParseError(f"{path}:{ln}: unknown section {section!r}")
            else:
                if section is None:
                    raise ParseError(f"{path}:{ln}: record line outside a section")
                parts[section].append(parse_record(line))
    return episodes
