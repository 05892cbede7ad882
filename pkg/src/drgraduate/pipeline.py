"""File-level steps behind the command line: predict, explain, eval, stats."""
from __future__ import annotations

import os

import numpy as np

from . import explainer, imageio, metrics, plots, records, stats
from .backbone import GradingNet, geometry
from .config import RunConfig
from .train import load_images, to_nchw


def load_model(config: RunConfig, checkpoint: str) -> GradingNet:
    dtype = np.float32 if config.dtype == "float32" else np.float64
    net = GradingNet(config.backbone()).cast(dtype)
    return net.load(checkpoint).eval()


def predict_manifest(net: GradingNet, config: RunConfig, manifest: str):
    """Prediction records and raw lesion maps for every manifest row."""
    rows = imageio.read_manifest(manifest, require_grade=False)
    images = load_images([p for _, p, _ in rows], config.input_side)
    out = net.predict_arrays(to_nchw(images), config.eval_batch)
    recs = records.make_records([r[0] for r in rows], out["y_r"], out["sigma2"], [r[2] for r in rows])
    return recs, out["L"], rows


def write_eval(recs, out_dir: str, config: RunConfig | None = None, digest: str | None = None) -> dict:
    """Kappa summary, confusion matrices, uncertainty curve and matrix as CSV plus SVG."""
    config = config or RunConfig()
    os.makedirs(out_dir, exist_ok=True)
    comment = f"config_digest={digest}" if digest else None
    true, pred, u = records.arrays(recs)
    if len(true) < 2:
        raise imageio.DataError("evaluation needs at least two records with a true grade")
    kappa = metrics.qwk(true, pred)
    O = metrics.confusion_matrix(true, pred)
    norm = metrics.normalize_confusion(O, "true")
    thresholds = metrics.default_thresholds(config.u_thresholds, config.u_threshold_start)
    curve = metrics.uncertainty_curve(true, pred, u, thresholds)
    umat = metrics.avg_uncertainty_matrix(true, pred, u)
    t_low, k_low = curve.kappa_at_min_fraction(0.05)
    summary = {"n": len(true), "kappa": kappa, "low_u_threshold": t_low, "low_u_kappa": k_low,
               "mean_u": float(u.mean())}
    imageio.write_csv(os.path.join(out_dir, "summary.csv"), list(summary), [summary], comment)
    grid_fields = ["pred"] + [f"true{j}" for j in range(metrics.N_CLASSES)]

    def grid(path, m):
        imageio.write_csv(path, grid_fields,
                          [{"pred": i, **{f"true{j}": (None if not np.isfinite(m[i, j]) else m[i, j])
                                          for j in range(m.shape[1])}} for i in range(m.shape[0])], comment)

    grid(os.path.join(out_dir, "confusion.csv"), O.astype(np.float64))
    grid(os.path.join(out_dir, "confusion_percent.csv"), norm.percent)
    grid(os.path.join(out_dir, "uncertainty_matrix.csv"), umat.mean)
    rows = curve.rows()
    imageio.write_csv(os.path.join(out_dir, "uncertainty_curve.csv"), list(rows[0]), rows, comment)
    charts = {
        "uncertainty_curve.svg": plots.line_chart(curve.thresholds, {"kappa": curve.kappa},
                                                  "kappa below uncertainty threshold", "uncertainty threshold",
                                                  "kappa", logx=True),
        "cumulative_grades.svg": plots.line_chart(curve.thresholds,
                                                  {f"grade {c}": list(curve.cumulative[:, c])
                                                   for c in range(metrics.N_CLASSES)},
                                                  "images included per grade", "uncertainty threshold", "fraction",
                                                  logx=True, ylim=(0, 1)),
        "confusion_percent.svg": plots.heatmap(norm.percent, "confusion (% of true grade)"),
        "uncertainty_matrix.svg": plots.heatmap(umat.mean, "mean uncertainty", fmt="{:.2f}"),
    }
    for name, svg in charts.items():
        plots.save(os.path.join(out_dir, name), svg, comment)
    return summary


def write_stats(groups: dict, out_dir: str, digest: str | None = None) -> list:
    """Pairwise rows for every group against the first one."""
    names = list(groups)
    rows = [stats.compare_groups(names[k], groups[names[k]], names[0], groups[names[0]])
            for k in range(1, len(names))]
    os.makedirs(out_dir, exist_ok=True)
    imageio.write_csv(os.path.join(out_dir, "stats.csv"), stats.REPORT_FIELDS, rows,
                      comment=f"config_digest={digest}" if digest else None)
    return rows


def explain_manifest(net: GradingNet, config: RunConfig, manifest: str, out_dir: str,
                     mask_dir: str | None = None, threshold: float | None = None, save: bool = True):
    """Explanation maps per image; with ``mask_dir`` also the overlap report."""
    threshold = config.explain_threshold if threshold is None else threshold
    recs, Ls, rows = predict_manifest(net, config, manifest)
    _, stride, rf = geometry(config.backbone())
    digest = config.digest()
    explained = []
    for rec, L, (ident, _, grade) in zip(recs, Ls, rows):
        em = explainer.build_maps(L, stride, rf, config.input_side)
        if save:
            explainer.save_maps(em, os.path.join(out_dir, "maps"), ident, threshold, digest)
        if mask_dir:
            masks = explainer.load_masks(mask_dir, ident)
            explained.append(explainer.explain_image(L, stride, rf, masks, rec.y_g,
                                                     rec.true if rec.true is not None else -1, threshold))
    report = None
    if mask_dir:
        report = explainer.overlap_metrics(explained, threshold)
        report.to_csv(os.path.join(out_dir, "overlap.csv"), comment=f"config_digest={digest}")
    return recs, report
