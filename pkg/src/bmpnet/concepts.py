"""Primitive-concept features via key-query message passing with edge blocking.

Every attribute and object carries a learnable key, query, value, value
transform and bias. A concept's feature is an attention-weighted sum of the
transformed values of all concepts, normalized separately over the attribute
half and the object half so neither type dominates.

Blocked mode removes, before normalization, every cross-type edge that leads
to an unseen pair or to the current input partner, so seen and unseen pairs
are inferred through the same neighborhood information.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    batched_matvec,
    gather_rows,
    grouped_masked_softmax,
    leaky_relu,
    matmul,
    reshape,
    tanh,
    transpose,
)

LEAKY_SLOPE = 0.1

ATTRIBUTE = "attribute"
OBJECT = "object"


class UniverseError(ValueError):
    """Invalid vocabulary, pair set, or concept reference."""


@dataclass
class PairUniverse:
    """Attribute/object vocabularies plus the seen (K) and unseen (U) pair sets.

    The candidate set C is K followed by U; all ids are indices into the
    name lists. Instances are immutable after construction and safe to share.
    """

    attributes: list
    objects: list
    seen_pairs: list
    unseen_pairs: list

    candidates: list = field(init=False, repr=False)
    unseen_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.attributes or not self.objects:
            raise UniverseError("universe needs at least one attribute and one object")
        self.seen_pairs = [(int(a), int(o)) for a, o in self.seen_pairs]
        self.unseen_pairs = [(int(a), int(o)) for a, o in self.unseen_pairs]
        for a, o in self.seen_pairs + self.unseen_pairs:
            if not (0 <= a < len(self.attributes)) or not (0 <= o < len(self.objects)):
                raise UniverseError(f"pair ({a}, {o}) references an unknown concept id")
        self._seen_set = set(self.seen_pairs)
        self._unseen_set = set(self.unseen_pairs)
        if len(self._seen_set) != len(self.seen_pairs):
            raise UniverseError("duplicate pair in seen set")
        if len(self._unseen_set) != len(self.unseen_pairs):
            raise UniverseError("duplicate pair in unseen set")
        overlap = self._seen_set & self._unseen_set
        if overlap:
            raise UniverseError(f"pairs {sorted(overlap)} are both seen and unseen")
        self.candidates = self.seen_pairs + self.unseen_pairs
        self._candidate_index = {p: i for i, p in enumerate(self.candidates)}
        self.unseen_matrix = np.zeros((len(self.attributes), len(self.objects)), dtype=bool)
        for a, o in self.unseen_pairs:
            self.unseen_matrix[a, o] = True

    @property
    def n_attributes(self):
        return len(self.attributes)

    @property
    def n_objects(self):
        return len(self.objects)

    @property
    def n_concepts(self):
        return len(self.attributes) + len(self.objects)

    def is_seen(self, pair):
        return tuple(pair) in self._seen_set

    def is_unseen(self, pair):
        return tuple(pair) in self._unseen_set

    def candidate_index(self, pair):
        try:
            return self._candidate_index[tuple(pair)]
        except KeyError:
            raise UniverseError(f"pair {tuple(pair)} is not a candidate") from None

    def candidate_unseen_flags(self):
        return np.array([self.is_unseen(p) for p in self.candidates], dtype=bool)

    def cross_block_masks(self, kind, ids, partner_ids):
        """Boolean (B, n_concepts) edge-blocking masks for a batch of queries.

        For an attribute query p with input partner q, object entry i is
        blocked iff (p, i) is unseen or i == q; symmetrically for object
        queries. Same-type entries are never blocked.
        """
        ids = np.asarray(ids, dtype=np.int64)
        partner_ids = np.asarray(partner_ids, dtype=np.int64)
        n_a, n_o = self.n_attributes, self.n_objects
        masks = np.zeros((ids.size, n_a + n_o), dtype=bool)
        rows = np.arange(ids.size)
        if kind == ATTRIBUTE:
            masks[:, n_a:] = self.unseen_matrix[ids]
            masks[rows, n_a + partner_ids] = True
        elif kind == OBJECT:
            masks[:, :n_a] = self.unseen_matrix[:, ids].T
            masks[rows, partner_ids] = True
        else:
            raise UniverseError(f"unknown concept kind {kind!r}")
        return masks

    def to_dict(self):
        return {
            "attributes": list(self.attributes),
            "objects": list(self.objects),
            "seen_pairs": [list(p) for p in self.seen_pairs],
            "unseen_pairs": [list(p) for p in self.unseen_pairs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            attributes=list(d["attributes"]),
            objects=list(d["objects"]),
            seen_pairs=[tuple(p) for p in d["seen_pairs"]],
            unseen_pairs=[tuple(p) for p in d["unseen_pairs"]],
        )


@dataclass
class ConceptParams:
    """Learnable message-passing parameters.

    Per-concept rows are stacked with attributes first: global index of
    attribute a is a, of object o is n_attributes + o. ``w_attr`` / ``w_obj``
    are the shared key transforms applied when an attribute / object issues
    the query; both the naive and blocked paths use the same set.
    """

    n_attributes: int
    n_objects: int
    keys: Tensor
    queries: Tensor
    values: Tensor
    transforms: Tensor  # (M, d, d), applied to each concept's value
    biases: Tensor
    w_attr: Tensor
    w_obj: Tensor

    @property
    def dim(self):
        return self.keys.data.shape[1]

    @property
    def n_concepts(self):
        return self.n_attributes + self.n_objects

    @classmethod
    def init(cls, n_attributes, n_objects, dim, rng, dtype=np.float32):
        """Near-identity start: messages initially stay close to the raw values."""
        m = n_attributes + n_objects
        std = 1.0 / np.sqrt(dim)

        def draw(*shape, scale=std):
            return Tensor(rng.normal(0.0, scale, shape).astype(dtype), requires_grad=True)

        def near_identity(*shape):
            noise = rng.normal(0.0, 0.1, shape)
            eye = np.eye(shape[-1])
            return Tensor((eye + noise).astype(dtype), requires_grad=True)

        return cls(
            n_attributes=n_attributes,
            n_objects=n_objects,
            keys=draw(m, dim),
            queries=draw(m, dim),
            values=draw(m, dim),
            transforms=near_identity(m, dim, dim),
            biases=Tensor(np.zeros((m, dim), dtype=dtype), requires_grad=True),
            w_attr=near_identity(dim, dim),
            w_obj=near_identity(dim, dim),
        )

    def global_id(self, kind, concept_id):
        concept_id = int(concept_id)
        if kind == ATTRIBUTE:
            if not 0 <= concept_id < self.n_attributes:
                raise UniverseError(f"unknown attribute id {concept_id}")
            return concept_id
        if kind == OBJECT:
            if not 0 <= concept_id < self.n_objects:
                raise UniverseError(f"unknown object id {concept_id}")
            return self.n_attributes + concept_id
        raise UniverseError(f"unknown concept kind {kind!r}")


@dataclass
class AttentionResult:
    """Normalized attention over all concepts (attribute half, then object half).

    Each half sums to 1, or to 0 when every entry of that half was blocked.
    ``blocked`` marks the entries excluded before normalization.
    """

    beta: Tensor
    blocked: np.ndarray


def value_table(params):
    """Transformed values U_k v_k + b_k for all concepts, as an (M, d) tensor."""
    return batched_matvec(params.transforms, params.values) + params.biases


def attention_logits(kind, concept_ids, params):
    """Unnormalized scores tanh(W k_j) . tanh(q_i) for a batch of queries."""
    w = params.w_attr if kind == ATTRIBUTE else params.w_obj
    transformed_keys = tanh(matmul(params.keys, transpose(w)))
    q = tanh(gather_rows(params.queries, concept_ids))
    return matmul(q, transpose(transformed_keys))


def attention_batch(kind, concept_ids, params, masks=None):
    """Per-type normalized attention rows; ``masks`` blocks edges pre-softmax."""
    gids = np.asarray([params.global_id(kind, c) for c in np.atleast_1d(concept_ids)])
    logits = attention_logits(kind, gids, params)
    groups = (params.n_attributes, params.n_objects)
    return grouped_masked_softmax(logits, groups, masks)


def attention_naive(concept_id, kind, params):
    """Attention without any blocking; independent of the input pair."""
    beta = attention_batch(kind, [concept_id], params)
    return AttentionResult(
        beta=reshape(beta, (params.n_concepts,)),
        blocked=np.zeros(params.n_concepts, dtype=bool),
    )


def attention_blocked(concept_id, kind, partner_id, universe, params):
    """Attention with unseen-pair and input-partner cross edges blocked."""
    partner_kind = OBJECT if kind == ATTRIBUTE else ATTRIBUTE
    params.global_id(kind, concept_id)
    params.global_id(partner_kind, partner_id)
    masks = universe.cross_block_masks(kind, [concept_id], [partner_id])
    beta = attention_batch(kind, [concept_id], params, masks)
    return AttentionResult(beta=reshape(beta, (params.n_concepts,)), blocked=masks[0])


def gather_feature(attention, params, vtable=None):
    """Message aggregation: LeakyReLU of the attention-weighted value sum."""
    if vtable is None:
        vtable = value_table(params)
    beta = reshape(attention.beta, (1, params.n_concepts))
    return reshape(leaky_relu(matmul(beta, vtable), LEAKY_SLOPE), (params.dim,))


def features_batch(kind, concept_ids, params, vtable, masks=None):
    """Concept features for a batch of queries sharing one value table."""
    beta = attention_batch(kind, concept_ids, params, masks)
    return leaky_relu(matmul(beta, vtable), LEAKY_SLOPE)


def pair_concept_features(pair, universe, params, mode="blocked"):
    """Concept features (x_attr, x_obj) for one candidate pair.

    ``mode`` selects naive or blocked message passing; seen and unseen pairs
    go through the identical code path.
    """
    a, o = tuple(pair)
    universe.candidate_index((a, o))
    if mode == "naive":
        att_a = attention_naive(a, ATTRIBUTE, params)
        att_o = attention_naive(o, OBJECT, params)
    elif mode == "blocked":
        att_a = attention_blocked(a, ATTRIBUTE, o, universe, params)
        att_o = attention_blocked(o, OBJECT, a, universe, params)
    else:
        raise ValueError(f"unknown message-passing mode {mode!r}")
    vtable = value_table(params)
    return gather_feature(att_a, params, vtable), gather_feature(att_o, params, vtable)
