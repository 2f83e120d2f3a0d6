"""Mixtures of adaptation modules with stochastic routing.

Each insertion point in the backbone becomes a :class:`MixtureSite` holding M
modules. During training, a per-batch random pair (up-projection from module
j, down-projection from module k) is selected at every site — a stochastic
stand-in for a learned mixture-of-experts gate, with no gate parameters. At
inference the mixture collapses: either merge the M modules into one by
elementwise weight averaging, keep routing randomly, pin the first module,
or ensemble softmax outputs over several random passes.

Only one down- and one up-projection multiply happens per site per pass, so
computational cost does not grow with M.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .adapters import AdapterModule, LoraModule, adapter_forward, init_adapter, init_lora, lora_forward
from .backbone import BackboneModel, LayerHooks, encoder_forward
from .errors import ConfigError, RoutingError
from .tensor import Tensor, softmax, transpose

Module = Union[AdapterModule, LoraModule]

# insertion points: output hooks wrap a sub-layer's result, projection
# points replace an attention projection (used by the low-rank variant)
OUTPUT_POINTS = ("ffn", "attn")
PROJECTION_POINTS = ("attn_q", "attn_v")


@dataclass
class MixtureSite:
    """One insertion point holding M interchangeable adaptation modules."""

    layer_index: int
    point: str
    modules: List[Module]
    sharing: str = "none"          # "none" | "project_up"
    variant: str = "adapter"       # "adapter" | "lora"
    index: int = 0                 # position within the sites list

    @property
    def M(self) -> int:
        return len(self.modules)

    def validate(self) -> "MixtureSite":
        if self.M < 1:
            raise ConfigError(f"site {self.index} has no modules")
        if self.point not in OUTPUT_POINTS + PROJECTION_POINTS:
            raise ConfigError(f"unknown insertion point {self.point!r}")
        if self.sharing not in ("none", "project_up"):
            raise ConfigError(f"unknown sharing mode {self.sharing!r}")
        if self.sharing == "project_up" and self.M > 1:
            first = self.modules[0]
            for m in self.modules[1:]:
                if self.variant == "adapter":
                    ok = m.w_up is first.w_up and m.b_up is first.b_up
                else:
                    ok = m.B is first.B
                if not ok:
                    raise ConfigError(
                        f"site {self.index} declares project_up sharing but "
                        f"modules hold distinct up-projection objects"
                    )
        return self


@dataclass(frozen=True)
class RoutingSelection:
    """One (up j, down k) pair per site; the whole batch shares it."""

    pairs: Tuple[Tuple[int, int], ...]

    def pair_for(self, site: MixtureSite) -> Tuple[int, int]:
        if site.index >= len(self.pairs):
            raise RoutingError(
                f"selection has {len(self.pairs)} entries, site index {site.index}"
            )
        return self.pairs[site.index]


def select_routing(sites: Sequence[MixtureSite], rng: np.random.Generator,
                   tied: bool = False) -> RoutingSelection:
    """Draw a uniform routing pair for every site.

    j (up) and k (down) are independent draws; with up-projection sharing
    there is only one up matrix, so j is pinned to 0 and only k is drawn.
    ``tied=True`` forces j == k (single draw) for the dependent-policy
    ablation.
    """
    pairs = []
    for site in sites:
        m = site.M
        if m == 1:
            pairs.append((0, 0))
            continue
        if site.sharing == "project_up":
            k = int(rng.integers(m))
            pairs.append((0, k))
        elif tied:
            j = int(rng.integers(m))
            pairs.append((j, j))
        else:
            j = int(rng.integers(m))
            k = int(rng.integers(m))
            pairs.append((j, k))
    return RoutingSelection(pairs=tuple(pairs))


def routed_view(site: MixtureSite, pair: Tuple[int, int]) -> Module:
    """Transient module combining module j's up side with module k's down side."""
    j, k = pair
    if not (0 <= j < site.M and 0 <= k < site.M):
        raise RoutingError(f"pair {pair} out of range for site with M={site.M}")
    up, down = site.modules[j], site.modules[k]
    if site.variant == "adapter":
        return AdapterModule(w_down=down.w_down, b_down=down.b_down,
                             w_up=up.w_up, b_up=up.b_up, r=down.r)
    return LoraModule(A=down.A, B=up.B, rank=down.rank, alpha=down.alpha)


def mixture_forward(site: MixtureSite, x: Tensor, sel: RoutingSelection,
                    frozen_w: Optional[Tensor] = None,
                    frozen_b: Optional[Tensor] = None) -> Tensor:
    """Apply the site's routed transformation to x.

    Exactly one down and one up matrix multiply run regardless of M. For the
    low-rank variant the frozen projection being adapted must be supplied
    (backbone convention: x @ frozen_w + frozen_b with frozen_w of shape
    (d_in, d_out)).
    """
    view = routed_view(site, sel.pair_for(site))
    if site.variant == "adapter":
        return adapter_forward(view, x)
    if frozen_w is None:
        raise ConfigError("low-rank site needs the frozen projection (frozen_w)")
    out = lora_forward(view, x, transpose(frozen_w))
    if frozen_b is not None:
        out = out + frozen_b
    return out


def routed_hooks(num_layers: int, sites: Sequence[MixtureSite],
                 sel: RoutingSelection) -> List[Optional[LayerHooks]]:
    """Materialize per-layer backbone hooks for one routing selection."""
    hooks: List[Optional[LayerHooks]] = [None] * num_layers
    for site in sites:
        if not (0 <= site.layer_index < num_layers):
            raise ConfigError(
                f"site {site.index} targets layer {site.layer_index} "
                f"of a {num_layers}-layer model"
            )
        if hooks[site.layer_index] is None:
            hooks[site.layer_index] = LayerHooks()
        bundle = hooks[site.layer_index]
        if site.point in OUTPUT_POINTS:
            fn = lambda h, s=site: mixture_forward(s, h, sel)
            if site.point == "ffn":
                bundle.ffn_out = fn
            else:
                bundle.attn_out = fn
        else:
            fn = lambda x, w, b, s=site: mixture_forward(s, x, sel, frozen_w=w, frozen_b=b)
            if site.point == "attn_q":
                bundle.q_proj = fn
            else:
                bundle.v_proj = fn
    return hooks


def routed_forward(model: BackboneModel, sites: Sequence[MixtureSite],
                   token_ids: np.ndarray, sel: RoutingSelection) -> Tensor:
    """Encoder forward with every site applying its selected pair."""
    return encoder_forward(model, token_ids,
                           adapters=routed_hooks(model.config.num_layers, sites, sel))


def fixed_route_forward(model: BackboneModel, sites: Sequence[MixtureSite],
                        token_ids: np.ndarray) -> Tensor:
    """Deterministic forward routing everything to the first module pair."""
    sel = RoutingSelection(pairs=tuple((0, 0) for _ in sites))
    return routed_forward(model, sites, token_ids, sel)


def merge_site(site: MixtureSite) -> Module:
    """Collapse M modules into one by elementwise weight averaging.

    Uniform 1/M weights over every module; matrices shared across the
    mixture are copied through unchanged. The site itself is not modified.
    """

    def mean_of(arrays):
        return np.mean(np.stack(arrays, axis=0), axis=0)

    mods = site.modules
    if site.variant == "adapter":
        if site.sharing == "project_up":
            w_up, b_up = mods[0].w_up.data.copy(), mods[0].b_up.data.copy()
        else:
            w_up = mean_of([m.w_up.data for m in mods])
            b_up = mean_of([m.b_up.data for m in mods])
        return AdapterModule(
            w_down=Tensor(mean_of([m.w_down.data for m in mods]), requires_grad=True),
            b_down=Tensor(mean_of([m.b_down.data for m in mods]), requires_grad=True),
            w_up=Tensor(w_up, requires_grad=True),
            b_up=Tensor(b_up, requires_grad=True),
            r=mods[0].r,
        )
    if site.sharing == "project_up":
        B = mods[0].B.data.copy()
    else:
        B = mean_of([m.B.data for m in mods])
    return LoraModule(
        A=Tensor(mean_of([m.A.data for m in mods]), requires_grad=True),
        B=Tensor(B, requires_grad=True),
        rank=mods[0].rank,
        alpha=mods[0].alpha,
    )


def merge_sites(sites: Sequence[MixtureSite]) -> List[MixtureSite]:
    """Merged copy of every site: same insertion points, M=1, no sharing."""
    return [
        replace(site, modules=[merge_site(site)], sharing="none")
        for site in sites
    ]


def ensemble_predict(model: BackboneModel, sites: Sequence[MixtureSite],
                     token_ids: np.ndarray, T: int,
                     rng: np.random.Generator) -> Tensor:
    """Monte-Carlo class probabilities: mean softmax over T random routings."""
    if T < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {T}")
    per_pass = []
    for _ in range(T):
        sel = select_routing(sites, rng)
        logits = routed_forward(model, sites, token_ids, sel)
        per_pass.append(softmax(logits).data)
    return Tensor(np.mean(np.stack(per_pass, axis=0), axis=0))


def build_sites(model: BackboneModel, variant: str = "adapter", M: int = 4,
                r: int = 8, sharing: str = "none", insert_attention: bool = False,
                alpha: float = 8.0, seed: int = 0) -> List[MixtureSite]:
    """Create mixture sites for every insertion point of a backbone.

    Adapter variant: one site after each layer's FFN sub-layer, optionally a
    second after attention. Low-rank variant: sites replacing each layer's
    query and value projections. Module initializations draw from seeds
    derived from (seed, site index, module index) so any single module is
    reproducible in isolation.
    """
    if variant not in ("adapter", "lora"):
        raise ConfigError(f"unknown variant {variant!r}")
    if sharing not in ("none", "project_up"):
        raise ConfigError(f"unknown sharing mode {sharing!r}")
    if M < 1:
        raise ConfigError(f"module count M must be >= 1, got {M}")
    d = model.config.model_dim

    if variant == "adapter":
        points = ["ffn", "attn"] if insert_attention else ["ffn"]
    else:
        points = ["attn_q", "attn_v"]

    sites: List[MixtureSite] = []
    idx = 0
    for layer in range(model.config.num_layers):
        for point in points:
            modules: List[Module] = []
            for j in range(M):
                child = int(np.random.SeedSequence([seed, idx, j]).generate_state(1)[0])
                if variant == "adapter":
                    modules.append(init_adapter(d, r, child))
                else:
                    modules.append(init_lora(d, d, r, alpha=alpha, seed=child))
            if sharing == "project_up":
                for m in modules[1:]:
                    if variant == "adapter":
                        m.w_up = modules[0].w_up
                        m.b_up = modules[0].b_up
                    else:
                        m.B = modules[0].B
            sites.append(MixtureSite(layer_index=layer, point=point, modules=modules,
                                     sharing=sharing, variant=variant, index=idx).validate())
            idx += 1
    return sites


def site_parameters(sites: Sequence[MixtureSite]) -> List[Tuple[str, Tensor]]:
    """Named trainable tensors across sites, shared objects listed once."""
    out: List[Tuple[str, Tensor]] = []
    seen = set()
    for site in sites:
        for j, m in enumerate(site.modules):
            for pname, p in m.named_parameters():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                shared_up = site.sharing == "project_up" and pname in ("w_up", "b_up", "B")
                owner = "shared" if shared_up else f"mod{j}"
                out.append((f"site{site.index}.{owner}.{pname}", p))
    return out


def selection_collisions(a: RoutingSelection, b: RoutingSelection) -> int:
    """How many sites drew the same pair in two independent selections."""
    if len(a.pairs) != len(b.pairs):
        raise RoutingError("selections cover different numbers of sites")
    return sum(1 for pa, pb in zip(a.pairs, b.pairs) if pa == pb)
