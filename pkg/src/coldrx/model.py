"""Learnable model and forward scoring path.

The recommender decides whether to prescribe a drug to a query patient by
comparing the patient against prototypes built from a handful of support
patients:

* the drug is encoded by attending over itself and its ontology ancestors,
  so an unseen drug borrows representation from trained categories;
* each patient is encoded as one vector per phenotype present in the
  record (a bidirectional GRU contextualizes the code sequence, a linear
  head projects each code to the phenotype space, codes sharing a
  phenotype are averaged); phenotypes absent from a record fall back to
  the pooled sequence representation;
* per-phenotype distances between query and prototype are masked to the
  phenotypes active on either side and aggregated with drug-dependent
  importance weights predicted from the drug representation;
* the recommendation probability is a two-way softmax over the aggregated
  distances to the positive and negative prototypes.

Ablation switches independently revert each piece to its plain variant,
down to a classic single-vector prototypical network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from .data import Episode, PatientRecord
from .errors import (
    CheckpointError,
    DimensionMismatchError,
    EmptyRecordError,
    EmptySupportError,
    NonFiniteError,
    UnknownCodeError,
    UnknownDrugError,
)
from .knowledge import KnowledgeAssets

# Distances below sqrt(_DIST_EPS) are clamped so the euclidean gradient
# stays finite when two representations coincide exactly.
_DIST_EPS = 1e-24
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    """Model sizes. Defaults are the full-scale configuration; tests and
    the synthetic benchmark shrink them."""

    embed_dim: int = 768        # code embedding size, also the drug-path width
    encoder_dim: int = 512      # sequence-encoder output (two directions concatenated)
    phenotype_dim: int = 64     # per-phenotype vector size
    n_phenotypes: int = 511     # phenotype vocabulary size
    attn_hidden: int = 128      # hidden width of the ancestor-attention net
    dropout: float = 0.5
    distance: str = "euclidean"  # or "cosine"
    max_closure_len: Optional[int] = None  # cap on [drug..root] length; None = full

    def __post_init__(self):
        if self.encoder_dim % 2 != 0:
            raise DimensionMismatchError("encoder_dim must be even (two directions)")
        if not self.phenotype_dim < self.embed_dim:
            raise DimensionMismatchError("phenotype_dim must be smaller than embed_dim")
        if self.distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class AblationFlags:
    """Independent switches for the model's three learnable components.
    Knowledge-guided negative sampling is a data-side switch and lives in
    the training configuration."""

    ontology_attention: bool = True   # off: use the drug's own embedding directly
    multi_phenotype: bool = True      # off: single-vector prototypes
    drug_importance: bool = True      # off: importance weights fixed to 1

    @classmethod
    def protonet(cls) -> "AblationFlags":
        """All model components removed: a plain prototypical network."""
        return cls(ontology_attention=False, multi_phenotype=False,
                   drug_importance=False)


@dataclass
class PhenotypeSet:
    """Multi-phenotype representation of one patient or prototype."""

    vectors: dict[int, torch.Tensor]      # phenotype index -> (g,) vector
    active: frozenset[int]
    pooled_fallback: torch.Tensor         # (g,) substitute for absent phenotypes
    n_phenotypes: int

    def vector_or_fallback(self, l: int) -> torch.Tensor:
        return self.vectors.get(l, self.pooled_fallback)


@dataclass
class _BatchPhenotypes:
    """Dense multi-phenotype encodings of a batch of records, restricted to
    the phenotypes actually present in the batch (fallback-filled)."""

    vectors: torch.Tensor      # (N, U, g)
    active: torch.Tensor       # (N, U) bool
    pooled: torch.Tensor       # (N, g)
    pheno_ids: torch.Tensor    # (U,) global phenotype indices of the columns


def _pair_distance(x: torch.Tensor, y: torch.Tensor, metric: str) -> torch.Tensor:
    """Distance along the last axis with broadcasting."""
    if metric == "euclidean":
        sumsq = ((x - y) ** 2).sum(-1)
        return torch.sqrt(torch.clamp(sumsq, min=_DIST_EPS))
    if metric == "cosine":
        dot = (x * y).sum(-1)
        nx = torch.clamp(torch.linalg.vector_norm(x, dim=-1), min=_NORM_EPS)
        ny = torch.clamp(torch.linalg.vector_norm(y, dim=-1), min=_NORM_EPS)
        return 1.0 - dot / (nx * ny)
    raise ValueError(f"unknown distance {metric!r}")


class FewShotRecommender(nn.Module):
    """All learnable tensors plus the end-to-end scoring path.

    Forward scoring with frozen parameters is pure; training mutates the
    parameters and must be serialized externally (single writer).
    """

    def __init__(self, hparams: Hyperparams, assets: KnowledgeAssets,
                 flags: AblationFlags = AblationFlags(),
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.hparams = hparams
        self.flags = flags
        self.assets = assets
        if hparams.n_phenotypes < assets.phenotypes.n_phenotypes:
            raise DimensionMismatchError(
                f"model has {hparams.n_phenotypes} phenotypes but the map declares "
                f"{assets.phenotypes.n_phenotypes}")

        vocab = assets.vocabulary
        self.code_index: dict[str, int] = {c: i for i, c in enumerate(sorted(vocab.codes))}
        n_codes = len(self.code_index)
        e, h, g = hparams.embed_dim, hparams.encoder_dim, hparams.phenotype_dim

        self.code_emb = nn.Embedding(n_codes, e)
        self.encoder = nn.GRU(e, h // 2, batch_first=True, bidirectional=True)
        self.attn = nn.Sequential(
            nn.Linear(2 * e, hparams.attn_hidden),
            nn.Tanh(),
            nn.Linear(hparams.attn_hidden, 1),
        )
        self.pheno_proj = nn.Linear(h, g)
        self.importance = nn.Linear(e, hparams.n_phenotypes)
        self.dropout = nn.Dropout(hparams.dropout)

        with torch.no_grad():
            init = np.stack([assets.embeddings.lookup(c)
                             for c in sorted(self.code_index)])
            self.code_emb.weight.copy_(torch.from_numpy(init))

        pheno_of = torch.full((n_codes,), -1, dtype=torch.long)
        for code, l in assets.phenotypes.phenotype_of.items():
            pheno_of[self.code_index[code]] = l
        self.register_buffer("pheno_of", pheno_of)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.code_emb.weight.dtype

    # -- drug path ---------------------------------------------------------

    def _code_idx(self, code: str) -> int:
        try:
            return self.code_index[code]
        except KeyError:
            raise UnknownDrugError(f"code {code!r} not in vocabulary") from None

    def drug_attention(self, drug: str) -> tuple[list[str], torch.Tensor]:
        """Ancestor chain of the drug and the attention weights over it."""
        closure = self.assets.ontology.ancestor_closure(
            drug, max_len=self.hparams.max_closure_len)
        idx = torch.tensor([self._code_idx(c) for c in closure], dtype=torch.long)
        m = self.code_emb(idx)                             # (A, e)
        pairs = torch.cat([m[0].expand_as(m), m], dim=-1)  # (A, 2e)
        logits = self.attn(pairs).squeeze(-1)              # (A,)
        alpha = torch.softmax(logits, dim=0)
        return closure, alpha

    def encode_drug(self, drug: str) -> torch.Tensor:
        """Ontology-enriched drug representation (attention-weighted sum of
        the drug and its ancestors), or the raw embedding when ablated."""
        if not self.flags.ontology_attention:
            if drug not in self.assets.ontology:
                raise UnknownDrugError(f"drug {drug!r} not in ontology")
            return self.code_emb(torch.tensor(self._code_idx(drug)))
        closure, alpha = self.drug_attention(drug)
        idx = torch.tensor([self._code_idx(c) for c in closure], dtype=torch.long)
        m = self.code_emb(idx)
        return (alpha.unsqueeze(-1) * m).sum(0)

    def drug_importance(self, h: torch.Tensor) -> torch.Tensor:
        """Per-phenotype importance weights in (0, 1), predicted from the
        drug representation."""
        if h.shape[-1] != self.hparams.embed_dim:
            raise DimensionMismatchError(
                f"drug representation has size {h.shape[-1]}, "
                f"expected {self.hparams.embed_dim}")
        return torch.sigmoid(self.importance(h))

    # -- patient path --------------------------------------------------------

    def _record_indices(self, record: PatientRecord) -> torch.Tensor:
        if len(record.codes) == 0:
            raise EmptyRecordError(f"record {record.record_id!r} has no codes")
        idx = []
        for c in record.codes:
            i = self.code_index.get(c)
            if i is None or int(self.pheno_of[i]) < 0:
                raise UnknownCodeError(
                    f"record {record.record_id!r}: code {c!r} has no phenotype")
            idx.append(i)
        return torch.tensor(idx, dtype=torch.long)

    def _encode_batch(self, records: Sequence[PatientRecord]) -> _BatchPhenotypes:
        """Encode records into fallback-filled per-phenotype vectors over the
        union of phenotypes present in the batch."""
        n = len(records)
        idx_lists = [self._record_indices(r) for r in records]
        lengths = torch.tensor([len(ix) for ix in idx_lists], dtype=torch.long)
        vmax = int(lengths.max())
        code_idx = torch.zeros((n, vmax), dtype=torch.long)
        valid = torch.zeros((n, vmax), dtype=torch.bool)
        for i, ix in enumerate(idx_lists):
            code_idx[i, :len(ix)] = ix
            valid[i, :len(ix)] = True

        emb = self.code_emb(code_idx)                               # (N, V, e)
        packed = nn.utils.rnn.pack_padded_sequence(
            emb, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.encoder(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
        out = self.dropout(out)                                     # (N, V, h)

        validf = valid.unsqueeze(-1).to(out.dtype)
        mean_rep = (out * validf).sum(1) / lengths.unsqueeze(-1).to(out.dtype)
        pooled = self.pheno_proj(mean_rep)                          # (N, g)
        proj = self.pheno_proj(out)                                 # (N, V, g)

        pheno = self.pheno_of[code_idx]                             # (N, V)
        pheno = torch.where(valid, pheno, torch.full_like(pheno, -1))
        present = torch.unique(pheno[pheno >= 0])
        if present.numel() == 0:
            raise EmptyRecordError("no phenotypes present in batch")
        remap = torch.full((self.hparams.n_phenotypes,), -1, dtype=torch.long)
        remap[present] = torch.arange(present.numel())
        u = present.numel()
        compact = torch.where(pheno >= 0, remap[pheno.clamp(min=0)],
                              torch.full_like(pheno, 0))

        g = self.hparams.phenotype_dim
        sums = proj.new_zeros((n, u, g))
        counts = proj.new_zeros((n, u))
        flat = compact.unsqueeze(-1).expand(-1, -1, g)
        sums.scatter_add_(1, flat, proj * validf)
        counts.scatter_add_(1, compact, valid.to(proj.dtype))
        active = counts > 0
        means = sums / counts.clamp(min=1.0).unsqueeze(-1)
        vectors = torch.where(active.unsqueeze(-1), means,
                              pooled.unsqueeze(1).expand(-1, u, -1))
        return _BatchPhenotypes(vectors, active, pooled, present)

    def encode_patient(self, record: PatientRecord) -> PhenotypeSet:
        """Multi-phenotype representation of one record."""
        batch = self._encode_batch([record])
        vectors = {}
        active = []
        for col, l in enumerate(batch.pheno_ids.tolist()):
            if bool(batch.active[0, col]):
                vectors[l] = batch.vectors[0, col]
                active.append(l)
        return PhenotypeSet(vectors, frozenset(active), batch.pooled[0],
                            self.hparams.n_phenotypes)

    # -- scoring -------------------------------------------------------------

    def _proto(self, batch: _BatchPhenotypes, rows: slice):
        vec = batch.vectors[rows].mean(0)         # (U, g)
        active = batch.active[rows].any(0)        # (U,)
        pooled = batch.pooled[rows].mean(0)       # (g,)
        return vec, active, pooled

    def episode_logits(self, episode: Episode) -> tuple[torch.Tensor, torch.Tensor]:
        """Recommendation logits for all queries of an episode.

        The probability of recommending the drug is sigmoid(logit); the
        logit is the importance-weighted distance to the negative prototype
        minus the distance to the positive prototype.
        """
        if not episode.support_pos:
            raise EmptySupportError("episode has no positive supports")
        if not episode.support_neg:
            raise EmptySupportError("episode has no negative supports")
        records = (episode.support_pos + episode.support_neg
                   + episode.query_pos + episode.query_neg)
        n_sp, n_sn = len(episode.support_pos), len(episode.support_neg)
        n_qp = len(episode.query_pos)
        batch = self._encode_batch(records)
        sp = slice(0, n_sp)
        sn = slice(n_sp, n_sp + n_sn)
        q = slice(n_sp + n_sn, len(records))

        if not self.flags.multi_phenotype:
            u = batch.pooled                                  # (N, g)
            proto_p = u[sp].mean(0)
            proto_n = u[sn].mean(0)
            d_p = _pair_distance(u[q], proto_p, self.hparams.distance)
            d_n = _pair_distance(u[q], proto_n, self.hparams.distance)
            logits = d_n - d_p
        else:
            vec_p, act_p, _ = self._proto(batch, sp)
            vec_n, act_n, _ = self._proto(batch, sn)
            qv, qa = batch.vectors[q], batch.active[q]        # (Nq, U, g), (Nq, U)
            metric = self.hparams.distance
            zero = qv.new_zeros(())
            mask_p = qa | act_p.unsqueeze(0)
            mask_n = qa | act_n.unsqueeze(0)
            z_p = torch.where(mask_p, _pair_distance(qv, vec_p.unsqueeze(0), metric), zero)
            z_n = torch.where(mask_n, _pair_distance(qv, vec_n.unsqueeze(0), metric), zero)
            if self.flags.drug_importance:
                h = self.encode_drug(episode.drug)
                beta = self.drug_importance(h)[batch.pheno_ids]   # (U,)
            else:
                beta = qv.new_ones(batch.pheno_ids.numel())
            logits = (beta * z_n).sum(-1) - (beta * z_p).sum(-1)
        return logits[:n_qp], logits[n_qp:]

    def episode_probabilities(self, episode: Episode) -> tuple[torch.Tensor, torch.Tensor]:
        lp, ln = self.episode_logits(episode)
        return torch.sigmoid(lp), torch.sigmoid(ln)

    def score_query(self, drug: str, support_pos: Sequence[PatientRecord],
                    support_neg: Sequence[PatientRecord],
                    query: PatientRecord) -> float:
        """End-to-end probability of recommending the drug to one query."""
        ep = Episode(drug, tuple(support_pos), tuple(support_neg),
                     (query,), (), mode="eval")
        p_pos, _ = self.episode_probabilities(ep)
        return float(p_pos[0])

    @torch.no_grad()
    def score_queries(self, drug: str, support_pos: Sequence[PatientRecord],
                      support_neg: Sequence[PatientRecord],
                      queries: Sequence[PatientRecord],
                      chunk_size: int = 1024) -> np.ndarray:
        """Probabilities for many queries against one support set."""
        probs = []
        for start in range(0, len(queries), chunk_size):
            part = tuple(queries[start:start + chunk_size])
            ep = Episode(drug, tuple(support_pos), tuple(support_neg),
                         part, (), mode="eval")
            p_pos, _ = self.episode_probabilities(ep)
            probs.append(p_pos.detach().cpu().numpy())
        if not probs:
            return np.zeros(0)
        return np.concatenate(probs)


def build_model(hparams: Hyperparams, assets: KnowledgeAssets,
                flags: AblationFlags = AblationFlags(), *,
                dtype: torch.dtype = torch.float32,
                seed: Optional[int] = None) -> FewShotRecommender:
    """Construct a model with optionally seeded parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return FewShotRecommender(hparams, assets, flags, dtype=dtype)


# -- standalone contract functions ----------------------------------------

def compute_prototypes(phenosets: Sequence[PhenotypeSet]) -> PhenotypeSet:
    """Per-phenotype mean over support patients; a patient missing a
    phenotype contributes its pooled fallback."""
    if len(phenosets) == 0:
        raise EmptySupportError("cannot build a prototype from an empty support set")
    n_ph = phenosets[0].n_phenotypes
    active: set[int] = set()
    for ps in phenosets:
        if ps.n_phenotypes != n_ph:
            raise DimensionMismatchError("phenotype counts disagree across supports")
        active |= ps.active
    vectors = {}
    for l in sorted(active):
        vectors[l] = torch.stack([ps.vector_or_fallback(l) for ps in phenosets]).mean(0)
    pooled = torch.stack([ps.pooled_fallback for ps in phenosets]).mean(0)
    return PhenotypeSet(vectors, frozenset(active), pooled, n_ph)


def phenotype_distances(query: PhenotypeSet, proto: PhenotypeSet,
                        metric: str = "euclidean") -> torch.Tensor:
    """Dense distance vector over all phenotypes: real distances on the
    union of active phenotypes, exact zeros everywhere else."""
    if query.n_phenotypes != proto.n_phenotypes:
        raise DimensionMismatchError("phenotype counts disagree")
    if query.pooled_fallback.shape != proto.pooled_fallback.shape:
        raise DimensionMismatchError("phenotype vector sizes disagree")
    z = query.pooled_fallback.new_zeros(query.n_phenotypes)
    for l in sorted(query.active | proto.active):
        z[l] = _pair_distance(query.vector_or_fallback(l),
                              proto.vector_or_fallback(l), metric)
    return z


def recommend_probability(beta, z, z_prime) -> float:
    """Probability from importance-weighted distances to the positive and
    negative prototypes, computed in a shift-stable form."""
    beta = np.asarray(beta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(z_prime, dtype=np.float64)
    if beta.shape != z.shape or z.shape != zp.shape:
        raise DimensionMismatchError(
            f"shape mismatch: beta {beta.shape}, z {z.shape}, z' {zp.shape}")
    if not (np.isfinite(beta).all() and np.isfinite(z).all() and np.isfinite(zp).all()):
        raise NonFiniteError("non-finite input to recommend_probability")
    return float(expit(beta @ zp - beta @ z))


# -- persistence -----------------------------------------------------------

_CKPT_VERSION = 1


def save_checkpoint(model: FewShotRecommender, path: str | Path,
                    extra: Optional[dict] = None) -> None:
    """Write all named parameter tensors plus the size block; round-trips
    losslessly within one build."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": _CKPT_VERSION,
        "hyperparams": asdict(model.hparams),
        "flags": asdict(model.flags),
        "dtype": str(model.dtype).removeprefix("torch."),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, assets: KnowledgeAssets
                    ) -> tuple[FewShotRecommender, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    hparams = Hyperparams(**payload["hyperparams"])
    flags = AblationFlags(**payload["flags"])
    dtype = getattr(torch, payload["dtype"])
    model = FewShotRecommender(hparams, assets, flags, dtype=dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["extra"]


@torch.no_grad()
def export_drug_embeddings(model: FewShotRecommender, path: str | Path) -> None:
    """TSV of drug -> ontology-enriched representation, for visualization
    tooling."""
    was_training = model.training
    model.eval()
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#dim={model.hparams.embed_dim}\n")
            for drug in model.assets.ontology.drugs():
                h = model.encode_drug(drug).detach().cpu().numpy()
                fh.write(drug + "\t" + ",".join(f"{v:.9g}" for v in h) + "\n")
    finally:
        model.train(was_training)
