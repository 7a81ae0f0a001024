"""Post-hoc specialization analyses over a frozen model.

Router-permutation perplexity deltas, domain/expert activation heatmaps (and
the expert-centric inverse form), ternary simplex coordinates for 3-domain
setups, and per-layer divergence reports on validation sets. All matrices
export as CSV with a one-line header.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .divergence import DivergenceReport, decompose
from .model import MoEModel, forward, perplexity


@dataclass
class PermutationResult:
    layer: int
    permutation: np.ndarray
    seed: int
    ppl_original: dict  # domain -> PPL
    ppl_shuffled: dict
    delta: dict

    def to_records(self):
        return [
            {
                "layer": self.layer,
                "domain": dom,
                "ppl_orig": self.ppl_original[dom],
                "ppl_shuf": self.ppl_shuffled[dom],
                "delta": self.delta[dom],
                "seed": self.seed,
                "permutation": self.permutation.tolist(),
            }
            for dom in self.delta
        ]


@dataclass
class HeatmapMatrix:
    rows: list[str]
    cols: list[str]
    values: np.ndarray
    flagged_rows: list[str] = field(default_factory=list)  # rows forced uniform

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("row," + ",".join(self.cols) + "\n")
        for name, row in zip(self.rows, self.values):
            buf.write(name + "," + ",".join(f"{v:.10g}" for v in row) + "\n")
        return buf.getvalue()


def _clone_model(model: MoEModel) -> MoEModel:
    out = MoEModel(copy.deepcopy(model.config), seed=0)
    for name, p in model.params.items():
        out.params[name].data = p.data.copy()
    return out


def permute_router(model: MoEModel, layer: int, seed: int,
                   reject_identity: bool = True, forced_perm=None) -> tuple:
    """Return (model copy with layer's router rows permuted, permutation).

    Only the given layer's router weight matrix changes; a uniformly random
    permutation of its row indices is drawn from ``seed``. The identity draw
    is rejected and redrawn unless explicitly forced.
    """
    if not 0 <= layer < model.config.num_layers:
        raise ValueError(f"layer {layer} out of range (model has {model.config.num_layers})")
    n = model.config.num_experts
    if forced_perm is not None:
        perm = np.asarray(forced_perm, dtype=np.intp)
    else:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        while reject_identity and np.array_equal(perm, np.arange(n)):
            perm = rng.permutation(n)
    shuffled = _clone_model(model)
    name = f"layers.{layer}.moe.router"
    shuffled.params[name].data = model.params[name].data[perm].copy()
    return shuffled, perm


def _as_batches(valset):
    arr = np.asarray(valset, dtype=np.intp)
    if arr.ndim == 1:
        arr = arr[None, :]
    return [arr]


def delta_ppl(model: MoEModel, layer: int, valsets: dict, seed: int,
              forced_perm=None) -> PermutationResult:
    """Perplexity increase per domain after permuting one layer's router rows."""
    if not valsets:
        raise ValueError("delta_ppl: empty validation sets")
    shuffled, perm = permute_router(
        model, layer, seed,
        reject_identity=forced_perm is None,
        forced_perm=forced_perm,
    )
    ppl_orig, ppl_shuf, delta = {}, {}, {}
    for dom in sorted(valsets):
        batches = _as_batches(valsets[dom])
        ppl_orig[dom] = perplexity(model, batches)
        ppl_shuf[dom] = perplexity(shuffled, batches)
        delta[dom] = ppl_shuf[dom] - ppl_orig[dom]
    return PermutationResult(
        layer=layer, permutation=perm, seed=seed,
        ppl_original=ppl_orig, ppl_shuffled=ppl_shuf, delta=delta,
    )


def delta_ppl_mean(model: MoEModel, layer: int, valsets: dict, seed: int,
                   draws: int = 3) -> dict:
    """Mean per-domain delta-PPL over ``draws`` independent permutations."""
    results = [delta_ppl(model, layer, valsets, seed + i) for i in range(draws)]
    mean = {
        dom: float(np.mean([r.delta[dom] for r in results]))
        for dom in results[0].delta
    }
    return {"mean_delta": mean, "draws": results}


def _collect_traces(model: MoEModel, valsets: dict):
    """Forward every domain valset once; return per-domain traces."""
    out = {}
    with T.no_grad():
        for dom in sorted(valsets):
            _, trace, _ = forward(model, np.asarray(valsets[dom], dtype=np.intp))
            out[dom] = trace
    return out


def activation_heatmap(model: MoEModel, valsets: dict, layer: int,
                       hard: bool = False) -> HeatmapMatrix:
    """Rows = domains, cols = experts; mean activation, rows sum to 1.

    Soft probabilities by default; ``hard=True`` uses top-K selection
    frequencies instead (used for the Bayes cross-check with the inverse
    form).
    """
    traces = _collect_traces(model, valsets)
    n = model.config.num_experts
    rows = []
    doms = sorted(valsets)
    for dom in doms:
        lt = traces[dom].layers[layer]
        if hard:
            counts = np.bincount(lt.selected.reshape(-1), minlength=n).astype(np.float64)
            row = counts
        else:
            row = lt.probs.mean(axis=0)
        rows.append(row / row.sum())
    return HeatmapMatrix(
        rows=doms, cols=[f"expert_{i}" for i in range(n)], values=np.stack(rows)
    )


def inverse_heatmap(model: MoEModel, valsets: dict, layer: int) -> HeatmapMatrix:
    """Rows = experts, cols = domains; selection frequency P(domain | expert).

    Experts never selected on any domain get a uniform row and are flagged.
    """
    traces = _collect_traces(model, valsets)
    n = model.config.num_experts
    doms = sorted(valsets)
    counts = np.zeros((n, len(doms)))
    for j, dom in enumerate(doms):
        lt = traces[dom].layers[layer]
        counts[:, j] = np.bincount(lt.selected.reshape(-1), minlength=n)
    flagged = []
    values = np.zeros_like(counts)
    for i in range(n):
        total = counts[i].sum()
        if total == 0:
            values[i] = 1.0 / len(doms)
            flagged.append(f"expert_{i}")
        else:
            values[i] = counts[i] / total
    return HeatmapMatrix(
        rows=[f"expert_{i}" for i in range(n)], cols=doms, values=values,
        flagged_rows=flagged,
    )


TERNARY_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])


def ternary_coords(inverse: HeatmapMatrix) -> np.ndarray:
    """Barycentric projection of 3-domain P(domain|expert) rows to the plane.

    Vertex order follows the matrix columns: first domain at (0,0), second at
    (1,0), third at (0.5, sqrt(3)/2). One (x, y) point per expert.
    """
    if len(inverse.cols) != 3:
        raise ValueError(f"ternary_coords needs exactly 3 domains, got {len(inverse.cols)}")
    return inverse.values @ TERNARY_VERTICES


def divergence_report(model: MoEModel, valsets: dict) -> list[DivergenceReport]:
    """Per-layer diversity decomposition over the pooled validation tokens."""
    if not valsets:
        raise ValueError("divergence_report: empty validation sets")
    traces = _collect_traces(model, valsets)
    doms = sorted(valsets)
    reports = []
    for layer in range(model.config.num_layers):
        probs = np.concatenate([traces[d].layers[layer].probs for d in doms])
        labels = [d for d in doms for _ in range(traces[d].layers[layer].probs.shape[0])]
        reports.append(decompose(probs, labels))
    return reports


def report_csv(reports) -> str:
    buf = io.StringIO()
    buf.write("layer,d_total,d_inter,d_intra\n")
    for i, rep in enumerate(reports):
        buf.write(f"{i},{rep.d_total:.10g},{rep.d_inter:.10g},{rep.d_intra:.10g}\n")
    return buf.getvalue()
