"""Layer-wise merging of aligned adapters.

The main method orthogonalizes each layer's low-rank factor groups, forms
full-rank task matrices, splits them into magnitudes and directions, and
merges the two components separately:

    delta = lam * (sum_i alpha_i) applied to (sum_j direction_j)

Plain task-arithmetic summation and uniform averaging are kept as baselines,
and both pipeline stages can be disabled independently so ablations are
scriptable. With both stages off the main method degenerates to exactly the
task-arithmetic code path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import AdapterSet, AlignmentError, LoraLayer
from .linalg import MAGNITUDE_MODES, Decoupled, decouple, recompose, svd_truncate
from .ortho import OrthoConfig, OrthoStats, orthogonalize_group

METHODS = ("do_merging", "task_arithmetic", "average")
OUTPUT_MODES = ("delta", "fused", "lowrank")


@dataclass(frozen=True)
class MergeConfig:
    """All merge tunables.

    lam: merging coefficient applied to the combined delta. None resolves to
        1 / n^2 at merge time, which makes the magnitude-sum convention
        equivalent to averaging both components (and reduces to 1/4 for two
        adapters). Explicit values override.
    ortho: factor-group orthogonalization settings, or None to disable.
    decouple_enabled: when False, directions and magnitudes are not split
        and the merged delta is lam * sum of task matrices.
    output_mode: "delta" emits the merged delta, "fused" adds it onto base
        weights, "lowrank" refactors it to rank lowrank_rank.
    """

    lam: float | None = None
    magnitude_mode: str = "column"
    method: str = "do_merging"
    ortho: OrthoConfig | None = field(default_factory=OrthoConfig)
    decouple_enabled: bool = True
    output_mode: str = "delta"
    lowrank_rank: int | None = None

    def __post_init__(self):
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.magnitude_mode not in MAGNITUDE_MODES:
            raise ValueError(f"unknown magnitude mode {self.magnitude_mode!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.output_mode == "lowrank" and (self.lowrank_rank is None or self.lowrank_rank < 1):
            raise ValueError("lowrank output mode needs lowrank_rank >= 1")

    def resolve_lam(self, n: int) -> float:
        return self.lam if self.lam is not None else 1.0 / (n * n)


@dataclass
class MergedLayer:
    layer_key: str
    delta: np.ndarray
    fused: np.ndarray | None = None
    lowrank: tuple[np.ndarray, np.ndarray] | None = None
    ortho_stats: dict[str, OrthoStats] | None = None


def assemble_full_rank(layer: LoraLayer) -> np.ndarray:
    """scaling * (B @ A), the layer's full-rank task matrix."""
    return layer.scaling * (layer.B @ layer.A)


def _sum_products(layers) -> np.ndarray:
    # shared accumulation for task_arithmetic and the fully ablated main
    # method, so the two are bit-identical, not merely close
    total = assemble_full_rank(layers[0])
    for layer in layers[1:]:
        total = total + assemble_full_rank(layer)
    return total


def _orthogonalized_products(layers, config: OrthoConfig):
    """Orthogonalize the B group directly and the A group transposed.

    B factors (m x r_i) share their row count, so their column-space Gram
    terms are comparable even when ranks differ. A factors (r_i x n) only
    share the column count, so the group runs on transposes: that drives the
    row spaces of the A's apart, which is the subspace each adapter actually
    spans, and it keeps mixed-rank groups well-shaped.
    """
    b_group = [layer.scaling * layer.B for layer in layers]
    a_group = [layer.A.T for layer in layers]
    b_hat, b_stats = orthogonalize_group(b_group, config)
    a_hat_t, a_stats = orthogonalize_group(a_group, config)
    products = [bh @ ah.T for bh, ah in zip(b_hat, a_hat_t)]
    return products, {"B": b_stats, "A": a_stats}


def merge_layer(layers: list[LoraLayer], config: MergeConfig) -> MergedLayer:
    """Merge one aligned layer group into a MergedLayer carrying the delta."""
    if not layers:
        raise ValueError("empty layer group")
    shapes = {layer.full_shape for layer in layers}
    if len(shapes) > 1:
        raise AlignmentError(f"layer group has conflicting shapes {sorted(shapes)}")
    n = len(layers)
    key = layers[0].layer_key
    lam = config.resolve_lam(n)

    if config.method == "task_arithmetic":
        return MergedLayer(layer_key=key, delta=lam * _sum_products(layers))
    if config.method == "average":
        return MergedLayer(layer_key=key, delta=_sum_products(layers) / n)

    if config.ortho is None and not config.decouple_enabled:
        return MergedLayer(layer_key=key, delta=lam * _sum_products(layers))

    stats = None
    if config.ortho is not None:
        products, stats = _orthogonalized_products(layers, config.ortho)
    else:
        products = [assemble_full_rank(layer) for layer in layers]

    if config.decouple_enabled:
        parts = [decouple(w, config.magnitude_mode) for w in products]
        alpha = parts[0].magnitude.copy()
        direction = parts[0].direction.copy()
        for p in parts[1:]:
            alpha += p.magnitude
            direction += p.direction
        delta = lam * recompose(Decoupled(alpha, direction, config.magnitude_mode))
    else:
        total = products[0]
        for w in products[1:]:
            total = total + w
        delta = lam * total
    return MergedLayer(layer_key=key, delta=delta, ortho_stats=stats)


def resolve_base_key(base: dict[str, np.ndarray], layer_key: str) -> str:
    """Base-checkpoint key holding this layer's pretrained weights.

    Accepts the layer key verbatim or with a trailing ".weight", matching
    how checkpoints usually name the module weight the adapter targets.
    """
    for candidate in (layer_key, layer_key + ".weight"):
        if candidate in base:
            return candidate
    raise AlignmentError(f"base checkpoint has no weights for layer {layer_key!r}")


def _resolve_base(base: dict[str, np.ndarray], layer_key: str) -> np.ndarray:
    return np.asarray(base[resolve_base_key(base, layer_key)], dtype=np.float64)


def merge_adapter_set(
    adapters: AdapterSet,
    base: dict[str, np.ndarray] | None = None,
    config: MergeConfig | None = None,
    threads: int = 1,
) -> dict[str, MergedLayer]:
    """Merge every aligned layer; returns layer_key -> MergedLayer, sorted.

    Layers are independent, so they may be processed on a thread pool; the
    result does not depend on the thread count.
    """
    if config is None:
        config = MergeConfig()
    if config.output_mode == "fused" and base is None:
        raise ValueError("fused output mode requires a base checkpoint")
    if adapters.n < 1:
        raise ValueError("need at least one adapter")
    keys = adapters.layer_keys

    def one(key: str) -> MergedLayer:
        merged = merge_layer(adapters.group(key), config)
        if config.output_mode == "fused":
            w_pre = _resolve_base(base, key)
            if w_pre.shape != merged.delta.shape:
                raise AlignmentError(
                    f"base weights for {key!r} have shape {w_pre.shape}, "
                    f"delta has {merged.delta.shape}"
                )
            merged.fused = w_pre + merged.delta
        elif config.output_mode == "lowrank":
            merged.lowrank = svd_truncate(merged.delta, config.lowrank_rank)
        return merged

    if threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, keys))
    else:
        results = [one(k) for k in keys]
    return {k: m for k, m in zip(keys, results)}
