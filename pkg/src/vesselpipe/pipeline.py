"""Orchestration: training, sliding-window inference, postprocessing, evaluation.

Inference tiles the volume with a VOI grid, runs the net per patch and
combines overlapping predictions per voxel by mean (sum / coverage) or
running maximum. Postprocessing binarizes and keeps the two largest
26-connected components, one per coronary tree. Evaluation reports a
three-column Dice table per case: mean aggregation, max aggregation, and
max aggregation followed by the double largest-component step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from vesselpipe.net import (AdamState, Checkpoint, NetConfig, adam_step, init_params,
                            unet_forward, unet_loss_and_grads)
from vesselpipe.preprocess import keep_largest
from vesselpipe.sampling import (DatasetManifest, SampleCase, materialize_patch,
                                 test_grid_centers)
from vesselpipe.volume import Mask3, Volume3, WindowSpec, extract_cube, window_normalize

log = logging.getLogger(__name__)

AGGREGATION_MODES = ("mean", "max")
DEFAULT_WINDOW = WindowSpec(0.0, 1.0)


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 20
    window: WindowSpec = DEFAULT_WINDOW


def _windowed(case: SampleCase, window: WindowSpec) -> SampleCase:
    return SampleCase(
        case_id=case.case_id,
        cta=window_normalize(case.cta, window),
        vesselness=case.vesselness,
        label=case.label,
        region=case.region,
    )


def train(manifest: DatasetManifest, cases: list, cfg: TrainConfig | None = None,
          seed: int = 0):
    """Train the net over a manifest; returns (Checkpoint, per-epoch losses).

    Patches are materialized on the fly (windowed CTA + vesselness
    channels). Batch order is a seeded shuffle per epoch; the whole run is
    deterministic for a fixed seed.
    """
    if cfg is None:
        cfg = TrainConfig()
    if not manifest.entries:
        raise ValueError("manifest is empty")
    n_vessel, n_bg = manifest.counts()
    if n_vessel != n_bg:
        raise ValueError(f"manifest unbalanced: {n_vessel} vessel vs {n_bg} background")

    by_id = {c.case_id: _windowed(c, cfg.window) for c in cases}
    missing = {e.case_id for e in manifest.entries} - set(by_id)
    if missing:
        raise ValueError(f"manifest references unknown cases: {sorted(missing)}")

    params = init_params(cfg.net, seed=seed)
    state = AdamState.zeros_like(params)
    shuffle_rng = np.random.default_rng([seed, 1])
    size = manifest.voi_size

    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(manifest.entries))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [manifest.entries[i] for i in order[start:start + cfg.batch_size]]
            xs, ys = [], []
            for entry in batch:
                patch = materialize_patch(by_id[entry.case_id], entry, size)
                xs.append(patch.channels)
                ys.append(patch.label[None].astype(np.float32))
            x = np.stack(xs)
            y = np.stack(ys)
            loss, grads, _ = unet_loss_and_grads(x, y, params, cfg.net)
            params, state = adam_step(params, grads, state, lr=cfg.lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("epoch %d/%d: mean loss %.4f", epoch + 1, cfg.epochs, history[-1])
    return Checkpoint(config=cfg.net, params=params, opt=state), history


def predictor_from_checkpoint(ckpt: Checkpoint):
    """Batch patch predictor closure over checkpoint parameters."""

    def predict(channels: np.ndarray) -> np.ndarray:
        return unet_forward(channels.astype(np.float32), ckpt.params, ckpt.config)

    return predict


def _as_predictor(predictor):
    if callable(predictor):
        return predictor
    if isinstance(predictor, Checkpoint):
        return predictor_from_checkpoint(predictor)
    raise ValueError(f"predictor must be a Checkpoint or callable, got {type(predictor)}")


def _predict_buffers(cta: Volume3, vesselness: Volume3, predictor, stride: int,
                     modes, voi_size: int, window: WindowSpec | None,
                     region: Mask3 | None, batch_size: int = 8):
    """One sliding-window pass filling an aggregation buffer per mode."""
    for m in modes:
        if m not in AGGREGATION_MODES:
            raise ValueError(f"aggregation mode must be one of {AGGREGATION_MODES}, got {m!r}")
    if cta.dims != vesselness.dims:
        raise ValueError(f"dims mismatch: cta {cta.dims} vs vesselness {vesselness.dims}")
    predict = _as_predictor(predictor)
    ct = window_normalize(cta, window) if window is not None else cta
    dims = ct.dims
    half = voi_size // 2

    centers = test_grid_centers(dims, region=region, voi_size=voi_size, stride=stride)
    buffers = {}
    if "mean" in modes:
        buffers["mean"] = (np.zeros(dims, np.float32), np.zeros(dims, np.int32))
    if "max" in modes:
        buffers["max"] = np.zeros(dims, np.float32)

    for start in range(0, len(centers), batch_size):
        chunk = centers[start:start + batch_size]
        x = np.stack([
            np.stack([
                extract_cube(ct.values, c, voi_size),
                extract_cube(vesselness.values, c, voi_size),
            ]) for c in chunk
        ])
        probs = predict(x)
        for c, p in zip(chunk, probs[:, 0]):
            g_lo = [ci - half for ci in c]
            src = tuple(slice(max(-g, 0), min(voi_size, n - g))
                        for g, n in zip(g_lo, dims))
            dst = tuple(slice(max(g, 0), max(g, 0) + (s.stop - s.start))
                        for g, s in zip(g_lo, src))
            piece = p[src]
            if "mean" in buffers:
                acc, cnt = buffers["mean"]
                acc[dst] += piece
                cnt[dst] += 1
            if "max" in buffers:
                np.maximum(buffers["max"][dst], piece, out=buffers["max"][dst])

    out = {}
    if "mean" in buffers:
        acc, cnt = buffers["mean"]
        out["mean"] = Volume3(acc / np.maximum(cnt, 1), cta.spacing)
    if "max" in buffers:
        out["max"] = Volume3(buffers["max"], cta.spacing)
    return out


def sliding_window_predict(cta: Volume3, vesselness: Volume3, predictor,
                           stride: int = 16, agg: str = "max",
                           voi_size: int = 32, window: WindowSpec | None = DEFAULT_WINDOW,
                           region: Mask3 | None = None) -> Volume3:
    """Whole-volume probability map from overlapping patch predictions.

    predictor is a Checkpoint or a callable mapping a channel batch
    (B, 2, s, s, s) to probabilities (B, 1, s, s, s). The window must
    match the one used in training. Voxels never covered by the grid
    (possible only with a region-restricted grid) stay 0.
    """
    if not 1 <= stride <= voi_size:
        raise ValueError(f"stride must be in [1, {voi_size}], got {stride}")
    return _predict_buffers(cta, vesselness, predictor, stride, (agg,),
                            voi_size, window, region)[agg]


def postprocess(prob: Volume3, threshold: float = 0.5, keep: int = 2) -> Mask3:
    """Binarize at threshold, then keep the `keep` largest 26-connected
    components (the double-LCC step that drops fragmented artifacts)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return keep_largest(Mask3(prob.values > threshold), keep, 26)


def dice_3d(pred: Mask3, gt: Mask3) -> float:
    """Volumetric Dice overlap 2|P n G| / (|P| + |G|); 1.0 when both empty."""
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: pred {pred.dims} vs gt {gt.dims}")
    p, g = pred.values, gt.values
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# --- evaluation report -----------------------------------------------------


@dataclass
class EvalCase:
    case_id: str
    cta: Volume3
    vesselness: Volume3
    gt: Mask3


@dataclass
class EvalRow:
    case_id: str
    dsc_mean: float
    dsc_max: float
    dsc_max_lcc: float


@dataclass
class EvalReport:
    """Per-case Dice for the three postprocessing variants plus averages."""

    rows: list
    summary: tuple[float, float, float]

    @staticmethod
    def from_rows(rows: list) -> "EvalReport":
        if not rows:
            raise ValueError("report needs at least one case")
        for r in rows:
            for v in (r.dsc_mean, r.dsc_max, r.dsc_max_lcc):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"DSC out of range in case {r.case_id}: {v}")
        summary = (
            float(np.mean([r.dsc_mean for r in rows])),
            float(np.mean([r.dsc_max for r in rows])),
            float(np.mean([r.dsc_max_lcc for r in rows])),
        )
        return EvalReport(rows=rows, summary=summary)

    def to_json(self) -> str:
        doc = {
            "rows": [
                {"case": r.case_id, "mean": r.dsc_mean, "max": r.dsc_max,
                 "max_lcc": r.dsc_max_lcc}
                for r in self.rows
            ],
            "average": {"mean": self.summary[0], "max": self.summary[1],
                        "max_lcc": self.summary[2]},
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    def format_table(self) -> str:
        width = max([len("Case")] + [len(r.case_id) for r in self.rows])
        lines = [f"{'Case':<{width}}  {'Mean':>8}  {'Max':>8}  {'Max + LCC':>10}"]
        for r in self.rows:
            lines.append(f"{r.case_id:<{width}}  {r.dsc_mean:8.4f}  {r.dsc_max:8.4f}"
                         f"  {r.dsc_max_lcc:10.4f}")
        s = self.summary
        lines.append(f"{'Average':<{width}}  {s[0]:8.4f}  {s[1]:8.4f}  {s[2]:10.4f}")
        return "\n".join(lines)


def evaluate(cases: list, ckpt, stride: int = 16, threshold: float = 0.5,
             window: WindowSpec | None = DEFAULT_WINDOW, keep: int = 2) -> EvalReport:
    """Three-column report: mean- and max-aggregated Dice after
    thresholding, and max-aggregated Dice after threshold plus double LCC.

    One sliding-window pass per case feeds both aggregation buffers.
    """
    if not cases:
        raise ValueError("no cases to evaluate")
    rows = []
    for case in cases:
        maps = _predict_buffers(case.cta, case.vesselness, ckpt, stride,
                                ("mean", "max"), 32, window, None)
        mean_mask = Mask3(maps["mean"].values > threshold)
        max_mask = Mask3(maps["max"].values > threshold)
        lcc_mask = keep_largest(max_mask, keep, 26)
        rows.append(EvalRow(
            case_id=case.case_id,
            dsc_mean=dice_3d(mean_mask, case.gt),
            dsc_max=dice_3d(max_mask, case.gt),
            dsc_max_lcc=dice_3d(lcc_mask, case.gt),
        ))
        log.info("case %s: mean %.4f max %.4f max+lcc %.4f", case.case_id,
                 rows[-1].dsc_mean, rows[-1].dsc_max, rows[-1].dsc_max_lcc)
    return EvalReport.from_rows(rows)
