"""Static knowledge assets: vocabularies, drug ontology, phenotype map,
drug-disease indications, and base code embeddings.

All assets are immutable after load and safe to share across threads.
File formats are deliberately plain TSV so assets can be diffed and
hand-edited:

* ontology:    header ``#root=<id>``, then one ``child<TAB>parent`` edge per line
* phenotypes:  header ``#n_phenotypes=<L>``, then ``code<TAB>index`` lines
* indications: ``drug<TAB>d1,d2,...`` lines (empty disease list allowed)
* embeddings:  header ``#dim=<e>``, then ``code<TAB>v1,...,ve`` lines
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CycleError,
    OrphanError,
    ParseError,
    UnknownCodeError,
    UnknownDrugError,
)

ASSET_DIR_ENV = "COLDRX_ASSETS"

ONTOLOGY_FILE = "ontology.tsv"
PHENOTYPE_FILE = "phenotypes.tsv"
INDICATIONS_FILE = "indications.tsv"
EMBEDDINGS_FILE = "embeddings.tsv"
RECORDS_FILE = "records.txt"


class Kind(str, Enum):
    DISEASE = "disease"
    PROCEDURE = "procedure"
    DRUG = "drug"
    DRUG_CATEGORY = "drug_category"


@dataclass(frozen=True)
class Code:
    """One medical code: an ICD-style condition or an ATC-style drug node."""

    id: str
    kind: Kind
    description: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ParseError("code id must be nonempty")


def resolve_asset_path(path: str | Path) -> Path:
    """Resolve a relative asset path against the COLDRX_ASSETS env override."""
    p = Path(path)
    base = os.environ.get(ASSET_DIR_ENV)
    if base and not p.is_absolute() and not p.exists():
        return Path(base) / p
    return p


class DrugOntology:
    """Rooted drug-category tree with ancestor closure.

    Leaves are drugs; internal nodes are drug categories. The parent
    relation is validated to be acyclic with a single root and every node
    reachable from the root.
    """

    def __init__(self, root: str, parent: Mapping[str, str]):
        self.root = root
        self._parent: dict[str, Optional[str]] = {root: None}
        for child, par in parent.items():
            if child == root:
                raise ParseError(f"root {root!r} listed with a parent")
            self._parent[child] = par
        self._levels: dict[str, int] = {}
        self._children: dict[str, list[str]] = {n: [] for n in self._parent}
        for child, par in self._parent.items():
            if par is None:
                continue
            if par not in self._parent:
                raise OrphanError(f"parent {par!r} of {child!r} is not a node")
            self._children[par].append(child)
        self._validate()

    def _validate(self):
        # Walk each node's parent chain once; a revisit inside the walk is a
        # cycle, a dead end that is not the root is an orphan.
        for node in self._parent:
            if node in self._levels:
                continue
            chain = []
            seen = set()
            cur: Optional[str] = node
            while cur is not None and cur not in self._levels:
                if cur in seen:
                    raise CycleError(f"cycle through node {cur!r}")
                seen.add(cur)
                chain.append(cur)
                cur = self._parent[cur]
            base = 0 if cur is None else self._levels[cur] + 1
            if cur is None and chain[-1] != self.root:
                raise OrphanError(f"node {chain[-1]!r} has no path to root")
            for depth, n in enumerate(reversed(chain)):
                self._levels[n] = base + depth

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self._parent)

    def __contains__(self, node: str) -> bool:
        return node in self._parent

    def parent(self, node: str) -> Optional[str]:
        if node not in self._parent:
            raise UnknownDrugError(f"unknown ontology node {node!r}")
        return self._parent[node]

    def level(self, node: str) -> int:
        if node not in self._levels:
            raise UnknownDrugError(f"unknown ontology node {node!r}")
        return self._levels[node]

    def children(self, node: str) -> tuple[str, ...]:
        return tuple(sorted(self._children.get(node, ())))

    def is_leaf(self, node: str) -> bool:
        return len(self._children.get(node, ())) == 0

    def drugs(self) -> tuple[str, ...]:
        """Leaf nodes, i.e. prescribable drugs, in sorted order."""
        return tuple(sorted(n for n in self._parent if self.is_leaf(n)))

    def categories(self) -> tuple[str, ...]:
        return tuple(sorted(n for n in self._parent if not self.is_leaf(n)))

    def ancestor_closure(self, node: str, max_len: Optional[int] = None) -> list[str]:
        """[node, parent, grandparent, ..., root], optionally truncated."""
        if node not in self._parent:
            raise UnknownDrugError(f"unknown ontology node {node!r}")
        closure = [node]
        cur = self._parent[node]
        while cur is not None:
            closure.append(cur)
            cur = self._parent[cur]
        if max_len is not None:
            closure = closure[:max_len]
        return closure

    def category_ancestor(self, node: str, level: int) -> str:
        """Ancestor of `node` at the given depth; the node itself if shallower."""
        closure = self.ancestor_closure(node)
        for anc in closure:
            if self._levels[anc] == level:
                return anc
        return node


def ancestor_closure(ontology: DrugOntology, drug: str,
                     max_len: Optional[int] = None) -> list[str]:
    """Module-level alias for :meth:`DrugOntology.ancestor_closure`."""
    return ontology.ancestor_closure(drug, max_len=max_len)


def load_ontology(path: str | Path) -> DrugOntology:
    path = resolve_asset_path(path)
    root = None
    parent: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#root="):
                    root = line[len("#root="):].strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(f"{path}:{ln}: expected 'child<TAB>parent', got {line!r}")
            child, par = parts
            if child in parent and parent[child] != par:
                raise ParseError(f"{path}:{ln}: node {child!r} listed with two parents")
            parent[child] = par
    if root is None:
        raise ParseError(f"{path}: missing '#root=' header")
    return DrugOntology(root, parent)


def save_ontology(ontology: DrugOntology, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#root={ontology.root}\n")
        for node in sorted(ontology.nodes):
            par = ontology.parent(node)
            if par is not None:
                fh.write(f"{node}\t{par}\n")


@dataclass(frozen=True)
class PhenotypeMap:
    """Maps every disease/procedure code to a phenotype index in [0, L)."""

    phenotype_of: Mapping[str, int]
    n_phenotypes: int

    def __post_init__(self):
        for code, idx in self.phenotype_of.items():
            if not 0 <= idx < self.n_phenotypes:
                raise ParseError(
                    f"phenotype index {idx} of {code!r} outside [0, {self.n_phenotypes})")

    def __getitem__(self, code: str) -> int:
        try:
            return self.phenotype_of[code]
        except KeyError:
            raise UnknownCodeError(f"code {code!r} has no phenotype") from None

    def __contains__(self, code: str) -> bool:
        return code in self.phenotype_of

    def codes(self) -> tuple[str, ...]:
        return tuple(sorted(self.phenotype_of))


def load_phenotype_map(path: str | Path) -> PhenotypeMap:
    path = resolve_asset_path(path)
    n_phenotypes = None
    mapping: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#n_phenotypes="):
                    n_phenotypes = int(line[len("#n_phenotypes="):])
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{ln}: expected 'code<TAB>index', got {line!r}")
            try:
                mapping[parts[0]] = int(parts[1])
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-integer phenotype index") from None
    if n_phenotypes is None:
        raise ParseError(f"{path}: missing '#n_phenotypes=' header")
    return PhenotypeMap(mapping, n_phenotypes)


def save_phenotype_map(pmap: PhenotypeMap, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#n_phenotypes={pmap.n_phenotypes}\n")
        for code in sorted(pmap.phenotype_of):
            fh.write(f"{code}\t{pmap.phenotype_of[code]}\n")


@dataclass(frozen=True)
class DrugDiseaseKB:
    """Drug -> set of diseases it treats.

    A drug absent from the map is distinct from a drug mapped to an empty
    set: the former has no known indication list at all.
    """

    indications: Mapping[str, frozenset[str]]

    def __contains__(self, drug: str) -> bool:
        return drug in self.indications

    def indications_for(self, drug: str) -> Optional[frozenset[str]]:
        return self.indications.get(drug)

    def violates(self, drug: str, codes: Iterable[str]) -> bool:
        """True if the codes overlap the drug's listed target diseases."""
        ind = self.indications.get(drug)
        if not ind:
            return False
        return not ind.isdisjoint(codes)


def load_kb(path: str | Path) -> DrugDiseaseKB:
    path = resolve_asset_path(path)
    indications: dict[str, frozenset[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{ln}: expected 'drug<TAB>d1,d2,...', got {line!r}")
            drug, diseases = parts
            items = frozenset(d for d in diseases.split(",") if d)
            indications[drug] = items
    return DrugDiseaseKB(indications)


def save_kb(kb: DrugDiseaseKB, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for drug in sorted(kb.indications):
            fh.write(f"{drug}\t{','.join(sorted(kb.indications[drug]))}\n")


class BaseEmbeddingTable:
    """Pre-computed code embeddings with a deterministic total fallback.

    Codes missing from the file receive a pseudo-random vector with
    components i.i.d. uniform in [-1/sqrt(e), +1/sqrt(e)], derived from a
    counter-based generator keyed by (fallback_seed, code id). The fallback
    depends only on that key, never on lookup order or process state.
    """

    def __init__(self, dim: int, vectors: Mapping[str, np.ndarray],
                 fallback_seed: int = 0):
        self.dim = int(dim)
        self.fallback_seed = int(fallback_seed)
        self._vectors: dict[str, np.ndarray] = {}
        for code, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (self.dim,):
                raise ParseError(
                    f"embedding for {code!r} has length {arr.shape}, expected ({self.dim},)")
            self._vectors[code] = arr

    def __contains__(self, code: str) -> bool:
        return code in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def codes(self) -> tuple[str, ...]:
        return tuple(sorted(self._vectors))

    def _fallback(self, code: str) -> np.ndarray:
        digest = hashlib.blake2b(
            f"{self.fallback_seed}\x1f{code}".encode("utf-8"),
            digest_size=16).digest()
        key = int.from_bytes(digest, "little")
        rng = np.random.Generator(np.random.Philox(key=key))
        bound = 1.0 / np.sqrt(self.dim)
        return rng.uniform(-bound, bound, size=self.dim)

    def lookup(self, code: str) -> np.ndarray:
        """Stored vector if present, deterministic fallback otherwise."""
        vec = self._vectors.get(code)
        if vec is None:
            vec = self._fallback(code)
        return vec.copy()


def load_embeddings(path: str | Path, fallback_seed: int = 0) -> BaseEmbeddingTable:
    path = resolve_asset_path(path)
    dim = None
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#dim="):
                    dim = int(line[len("#dim="):])
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{ln}: expected 'code<TAB>v1,...', got {line!r}")
            try:
                vec = np.array([float(x) for x in parts[1].split(",")], dtype=np.float64)
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-numeric embedding component") from None
            if dim is None:
                raise ParseError(f"{path}: missing '#dim=' header before data")
            if vec.shape != (dim,):
                raise ParseError(f"{path}:{ln}: expected {dim} components, got {vec.size}")
            vectors[parts[0]] = vec
    if dim is None:
        raise ParseError(f"{path}: missing '#dim=' header")
    return BaseEmbeddingTable(dim, vectors, fallback_seed=fallback_seed)


def save_embeddings(table: BaseEmbeddingTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim={table.dim}\n")
        for code in table.codes():
            vec = table.lookup(code)
            fh.write(code + "\t" + ",".join(f"{v:.9g}" for v in vec) + "\n")


def lookup_embedding(table: BaseEmbeddingTable, code: str) -> np.ndarray:
    """Module-level alias for :meth:`BaseEmbeddingTable.lookup`."""
    return table.lookup(code)


@dataclass(frozen=True)
class Vocabulary:
    """The full code universe: conditions from the phenotype map plus drug
    and category nodes from the ontology."""

    codes: Mapping[str, Code]

    def __contains__(self, code_id: str) -> bool:
        return code_id in self.codes

    def __len__(self) -> int:
        return len(self.codes)

    def kind(self, code_id: str) -> Kind:
        try:
            return self.codes[code_id].kind
        except KeyError:
            raise UnknownCodeError(f"unknown code {code_id!r}") from None

    def condition_codes(self) -> tuple[str, ...]:
        return tuple(sorted(c for c, v in self.codes.items()
                            if v.kind in (Kind.DISEASE, Kind.PROCEDURE)))

    def drug_codes(self) -> tuple[str, ...]:
        return tuple(sorted(c for c, v in self.codes.items() if v.kind == Kind.DRUG))


def build_vocabulary(ontology: DrugOntology, pmap: PhenotypeMap) -> Vocabulary:
    codes: dict[str, Code] = {}
    for code in pmap.phenotype_of:
        codes[code] = Code(code, Kind.DISEASE)
    for node in ontology.nodes:
        kind = Kind.DRUG if ontology.is_leaf(node) else Kind.DRUG_CATEGORY
        if node in codes:
            raise ParseError(f"code {node!r} is both a condition and an ontology node")
        codes[node] = Code(node, kind)
    return Vocabulary(codes)


@dataclass(frozen=True)
class KnowledgeAssets:
    """Bundle of all validated static assets."""

    ontology: DrugOntology
    phenotypes: PhenotypeMap
    kb: DrugDiseaseKB
    embeddings: BaseEmbeddingTable
    vocabulary: Vocabulary = field(init=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(
            self, "vocabulary", build_vocabulary(self.ontology, self.phenotypes))


def load_assets(asset_dir: str | Path, fallback_seed: int = 0) -> KnowledgeAssets:
    """Load the four knowledge assets from a directory of standard names."""
    base = resolve_asset_path(asset_dir)
    return KnowledgeAssets(
        ontology=load_ontology(base / ONTOLOGY_FILE),
        phenotypes=load_phenotype_map(base / PHENOTYPE_FILE),
        kb=load_kb(base / INDICATIONS_FILE),
        embeddings=load_embeddings(base / EMBEDDINGS_FILE, fallback_seed=fallback_seed),
    )
