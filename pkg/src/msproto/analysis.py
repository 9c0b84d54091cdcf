"""Model-level analyses with CSV and PNG output, used by the ``analyze`` and ``ablate`` commands."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import metrics
from .grouping import count_active_prototypes, group_edges
from .model import MultiScaleProtoNet
from .prototypes import nearest_patches

ANALYSES = ("components", "consistency", "stability", "sparsity", "overlap", "equivariance",
            "groups", "nearest")


def write_csv(path, rows: list[dict], fields=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0]) if rows else ["metric", "value"])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _bank_arrays(model: MultiScaleProtoNet):
    b = model.bank
    return b.class_of.numpy(), b.scale_of.numpy(), b.alive.numpy()


# -- evaluation ---------------------------------------------------------------------

def evaluate(model: MultiScaleProtoNet, samples, use_groups: bool | None = None):
    return metrics.evaluate_miou(lambda im: model.predict(im, use_groups), samples, model.num_classes)


def eval_rows(mean: float, per_class) -> list[dict]:
    rows = [{"metric": "iou", "class": c, "value": float(v)} for c, v in enumerate(per_class)]
    rows.append({"metric": "miou", "class": "mean", "value": mean})
    return rows


# -- individual analyses --------------------------------------------------------------

def component_stats(model, samples, percentiles=(0.8, 0.9, 0.99)):
    class_of, scale_of, alive = _bank_arrays(model)
    return metrics.activation_component_stats(model.prototype_maps, scale_of, alive, samples,
                                              percentiles)


def part_samples(samples):
    out = [metrics.part_sample(s) for s in samples if s.parts is not None]
    if not out:
        raise ValueError("consistency and stability need part annotations")
    return out


def consistency(model, samples, thresholds=(70, 80, 90)) -> float:
    class_of, _, alive = _bank_arrays(model)
    return metrics.consistency_score(model.prototype_maps, class_of, alive, part_samples(samples),
                                     thresholds)


def stability(model, samples, sigma=0.05, thresholds=(70, 80, 90), seed=0) -> float:
    class_of, _, alive = _bank_arrays(model)
    return metrics.stability_score(model.prototype_maps, class_of, alive, part_samples(samples),
                                   sigma, thresholds, seed)


def sparsity_rows(model, tau: float = 0.005) -> list[dict]:
    if model.groups is not None:
        head = model.groups.head.detach().numpy()
    else:
        # dead prototypes never contribute, whatever their column holds
        head = (model.head_proto.weight * model.bank.alive).detach().numpy()
    total, mean = metrics.sparsity_score(head, tau)
    rows = [{"metric": "sparsity", "scope": f"class{c}", "value": int((np.abs(r) > tau).sum())}
            for c, r in enumerate(head)]
    rows += [{"metric": "sparsity", "scope": "total", "value": total},
             {"metric": "sparsity", "scope": "per_class_mean", "value": mean}]
    return rows


def overlap(model, samples, percentile=95) -> float:
    if model.groups is None:
        raise ValueError("group overlap needs a stage-2 model")
    return metrics.group_overlap_miou(model.group_maps, model.groups.group_class.numpy(),
                                      samples, percentile)


def equivariance(model, samples, p_th=0.6, iou_th=0.5) -> metrics.EquivarianceReport:
    class_of, scale_of, alive = _bank_arrays(model)
    cfg = model.backbone.cfg
    return metrics.equivariance_analysis(lambda im: model.prototype_maps(im, upsample=False),
                                         class_of, scale_of, alive, samples, cfg.atrous_ratios,
                                         cfg.reduction, p_th, iou_th)


def nearest_rows(model, samples, k: int = 5) -> list[dict]:
    rows = []
    feats = list(model.iter_features(samples))
    for rho in np.flatnonzero(model.bank.alive.numpy()):
        for rank, (img, y, x, a) in enumerate(nearest_patches(model.bank, feats, int(rho), k,
                                                              model.proto_cfg.eps)):
            rows.append({"prototype": int(rho), "rank": rank, "image": img, "row": y, "col": x,
                         "activation": a})
    return rows


# -- plots ----------------------------------------------------------------------------

def plot_components(stats: metrics.ComponentStats, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    qs = sorted({q for _, q in stats.count})
    scales = sorted({s for s, _ in stats.count})
    for q in qs:
        ax.plot(scales, [stats.count[(s, q)] for s in scales], marker="o", label=f"p={q}")
    ax.set_xlabel("scale")
    ax.set_ylabel("components per map")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


def plot_overlay(model, sample, path, max_prototypes: int = 8) -> Path:
    plt = _pyplot()
    maps = model.prototype_maps(sample.image)
    alive = np.flatnonzero(model.bank.alive.numpy())[:max_prototypes]
    fig, axes = plt.subplots(1, max(len(alive), 1), figsize=(2 * max(len(alive), 1), 2), squeeze=False)
    for ax, rho in zip(axes[0], alive):
        ax.imshow(sample.image)
        ax.imshow(maps[rho], cmap="jet", alpha=0.5)
        ax.set_title(f"p{rho}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


def plot_groups(model, path) -> Path:
    plt = _pyplot()
    w = model.groups.rows().detach().numpy()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.imshow(w, cmap="viridis", aspect="auto")
    ax.set_xlabel("class prototype slot")
    ax.set_ylabel("group")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


# -- driver ---------------------------------------------------------------------------

def run_analyses(model: MultiScaleProtoNet, which, eval_samples, train_samples, out,
                 sigma: float = 0.05, seed: int = 0) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    eval_samples = list(eval_samples)
    train_samples = list(train_samples)
    for name in which:
        if name == "components":
            stats = component_stats(model, eval_samples)
            written.append(write_csv(out / "components.csv", list(stats.rows())))
            written.append(plot_components(stats, out / "components.png"))
            if eval_samples:
                written.append(plot_overlay(model, eval_samples[0], out / "overlay.png"))
        elif name == "consistency":
            v = consistency(model, eval_samples)
            written.append(write_csv(out / "consistency.csv", [
                {"metric": "consistency", "version": metrics.CONSISTENCY_VERSION,
                 "thresholds": "70/80/90", "value": v}]))
        elif name == "stability":
            v = stability(model, eval_samples, sigma, seed=seed)
            written.append(write_csv(out / "stability.csv", [
                {"metric": "stability", "version": metrics.CONSISTENCY_VERSION, "sigma": sigma,
                 "thresholds": "70/80/90", "value": v}]))
        elif name == "sparsity":
            written.append(write_csv(out / "sparsity.csv", sparsity_rows(model)))
        elif name == "overlap":
            written.append(write_csv(out / "overlap.csv", [
                {"metric": "group_overlap_miou", "percentile": 95,
                 "value": overlap(model, eval_samples)}]))
        elif name == "equivariance":
            rep = equivariance(model, train_samples)
            scale_of = model.bank.scale_of.numpy()
            rows = [{"prototype_i": i, "scale_i": int(scale_of[i]), "prototype_j": j,
                     "scale_j": int(scale_of[j]), "miou": m} for i, j, m in rep.pairs]
            written.append(write_csv(out / "equivariance_pairs.csv", rows,
                                     ["prototype_i", "scale_i", "prototype_j", "scale_j", "miou"]))
            written.append(write_csv(out / "equivariance_groups.csv", [
                {"group": g, "members": " ".join(map(str, sorted(m)))}
                for g, m in enumerate(rep.groups)], ["group", "members"]))
            written.append(write_csv(out / "equivariance_classes.csv", [
                {"class": c, "has_pair": f} for c, f in sorted(rep.class_flags.items())]))
        elif name == "groups":
            if model.groups is None:
                raise ValueError("group edges need a stage-2 model")
            written.append(write_csv(out / "group_edges.csv", [
                {"class": c, "group": g, "prototype": p, "weight": w}
                for c, g, p, w in group_edges(model.groups)], ["class", "group", "prototype", "weight"]))
            written.append(plot_groups(model, out / "groups.png"))
        elif name == "nearest":
            written.append(write_csv(out / "nearest.csv", nearest_rows(model, train_samples),
                                     ["prototype", "rank", "image", "row", "col", "activation"]))
        else:
            raise ValueError(f"unknown analysis {name!r}; expected one of {ANALYSES}")
    return written


def support_summary(model, alpha: float) -> tuple[int, float]:
    """Active prototype count and mean group support of the raw groups thresholded at alpha."""
    return count_active_prototypes(model.raw_groups, alpha)
