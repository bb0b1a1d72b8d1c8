"""Full model state: concept graph, visual encoder, auxiliary classifiers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .concepts import ConceptParams, PairUniverse
from .tensor import Tensor
from .visual import Mlp, ResidueCondition, VisualParams

DTYPES = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(name):
    try:
        return DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None


@dataclass
class ModelState:
    """Every learnable tensor plus the behavioral flags baked in at train time.

    ``blocking`` / ``use_residue`` persist through checkpoints so evaluation
    automatically honors the ablation the model was trained with.
    """

    universe: PairUniverse
    d_in: int
    dim: int
    dtype: str
    concept: ConceptParams
    visual: VisualParams
    cls_attr_w: Tensor
    cls_attr_b: Tensor
    cls_obj_w: Tensor
    cls_obj_b: Tensor
    blocking: bool = True
    use_residue: bool = True

    @classmethod
    def init(cls, universe, d_in, dim, rng, dtype="float32", blocking=True,
             use_residue=True, conditioned_residue=False):
        np_dtype = resolve_dtype(dtype)
        concept = ConceptParams.init(
            universe.n_attributes, universe.n_objects, dim, rng, np_dtype
        )
        visual = VisualParams.init(d_in, dim, rng, np_dtype, conditioned=conditioned_residue)

        def linear(fan_in, fan_out):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)).astype(np_dtype)
            return Tensor(w, requires_grad=True), Tensor(
                np.zeros(fan_out, dtype=np_dtype), requires_grad=True
            )

        cls_attr_w, cls_attr_b = linear(dim, universe.n_attributes)
        cls_obj_w, cls_obj_b = linear(dim, universe.n_objects)
        return cls(
            universe=universe,
            d_in=d_in,
            dim=dim,
            dtype=dtype,
            concept=concept,
            visual=visual,
            cls_attr_w=cls_attr_w,
            cls_attr_b=cls_attr_b,
            cls_obj_w=cls_obj_w,
            cls_obj_b=cls_obj_b,
            blocking=blocking,
            use_residue=use_residue,
        )

    def parameters(self):
        """(name, tensor) pairs in a fixed order; the checkpoint layout."""
        named = [
            ("concept.keys", self.concept.keys),
            ("concept.queries", self.concept.queries),
            ("concept.values", self.concept.values),
            ("concept.transforms", self.concept.transforms),
            ("concept.biases", self.concept.biases),
            ("concept.w_attr", self.concept.w_attr),
            ("concept.w_obj", self.concept.w_obj),
        ]
        for prefix, mlp in (
            ("visual.g", self.visual.g),
            ("visual.head_attr", self.visual.head_attr),
            ("visual.head_obj", self.visual.head_obj),
        ):
            named += [
                (f"{prefix}.w1", mlp.w1),
                (f"{prefix}.b1", mlp.b1),
                (f"{prefix}.w2", mlp.w2),
                (f"{prefix}.b2", mlp.b2),
            ]
        named += [
            ("visual.residue_mu", self.visual.residue_mu),
            ("visual.residue_logvar", self.visual.residue_logvar),
        ]
        if self.visual.condition is not None:
            cond = self.visual.condition
            named += [
                ("visual.condition.w_mu", cond.w_mu),
                ("visual.condition.b_mu", cond.b_mu),
                ("visual.condition.w_logvar", cond.w_logvar),
                ("visual.condition.b_logvar", cond.b_logvar),
            ]
        named += [
            ("classifier.attr_w", self.cls_attr_w),
            ("classifier.attr_b", self.cls_attr_b),
            ("classifier.obj_w", self.cls_obj_w),
            ("classifier.obj_b", self.cls_obj_b),
        ]
        return named

    def param_dict(self):
        return dict(self.parameters())

    def _rebuild(self, wrap):
        """Structural copy with every parameter tensor passed through ``wrap``."""
        concept = replace(
            self.concept,
            keys=wrap(self.concept.keys),
            queries=wrap(self.concept.queries),
            values=wrap(self.concept.values),
            transforms=wrap(self.concept.transforms),
            biases=wrap(self.concept.biases),
            w_attr=wrap(self.concept.w_attr),
            w_obj=wrap(self.concept.w_obj),
        )

        def wrap_mlp(mlp):
            return Mlp(w1=wrap(mlp.w1), b1=wrap(mlp.b1), w2=wrap(mlp.w2), b2=wrap(mlp.b2))

        condition = None
        if self.visual.condition is not None:
            c = self.visual.condition
            condition = ResidueCondition(
                w_mu=wrap(c.w_mu), b_mu=wrap(c.b_mu),
                w_logvar=wrap(c.w_logvar), b_logvar=wrap(c.b_logvar),
            )
        visual = VisualParams(
            g=wrap_mlp(self.visual.g),
            head_attr=wrap_mlp(self.visual.head_attr),
            head_obj=wrap_mlp(self.visual.head_obj),
            residue_mu=wrap(self.visual.residue_mu),
            residue_logvar=wrap(self.visual.residue_logvar),
            condition=condition,
        )
        return replace(
            self,
            concept=concept,
            visual=visual,
            cls_attr_w=wrap(self.cls_attr_w),
            cls_attr_b=wrap(self.cls_attr_b),
            cls_obj_w=wrap(self.cls_obj_w),
            cls_obj_b=wrap(self.cls_obj_b),
        )

    def copy(self):
        """Deep parameter copy (snapshot for best-epoch tracking)."""
        return self._rebuild(lambda t: Tensor(t.data.copy(), requires_grad=True))

    def detached(self):
        """Read-only view sharing arrays; ops on it build no gradient graph."""
        return self._rebuild(lambda t: Tensor(t.data))

    def astype(self, dtype):
        np_dtype = resolve_dtype(dtype)
        out = self._rebuild(lambda t: Tensor(t.data.astype(np_dtype), requires_grad=True))
        out.dtype = dtype
        return out

    def load_arrays(self, arrays):
        """Overwrite parameter values from a name -> array mapping, in place."""
        for name, tensor in self.parameters():
            value = arrays[name]
            if tuple(value.shape) != tensor.data.shape:
                raise ValueError(
                    f"parameter {name}: stored shape {tuple(value.shape)} != "
                    f"model shape {tensor.data.shape}"
                )
            tensor.data = value.astype(tensor.data.dtype, copy=True)
