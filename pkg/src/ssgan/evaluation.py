"""Discriminator-as-classifier evaluation: rankings, CMC curves, reports, sample grids."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError, SSGANError
from .layers import EVAL
from .tensor import Tensor


@dataclass
class CmcCurve:
    accuracies: list  # index r-1 holds accuracy at rank r

    def at(self, r):
        """Accuracy at rank r, clamped to the last rank."""
        return self.accuracies[min(r, len(self.accuracies)) - 1]

    def check(self):
        acc = np.asarray(self.accuracies)
        if np.any(np.diff(acc) < 0) or acc[-1] != 1.0:
            raise SSGANError("CMC curve must be non-decreasing and end at 1.0", field="accuracies")
        return self


@dataclass
class EvalReport:
    top1: float
    top5: float
    top10: float
    cmc: CmcCurve
    per_class: list
    count: int
    model_id: str = ""
    class_names: list = field(default_factory=list)


def rank_classes(out):
    """Real classes (1-based) ordered by descending logit; ties by ascending index.

    Accepts a DiscriminatorOutput, a Tensor or an array of (B, k+1) logits.
    The fake column is dropped first, so it never influences the order.
    """
    logits = getattr(out, "logits", out)
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    real = logits[:, :-1]
    return np.argsort(-real, axis=1, kind="stable") + 1


def cmc_curve(rankings, labels):
    rankings = np.asarray(rankings)
    labels = np.asarray(labels).reshape(-1)
    if rankings.shape[0] != labels.shape[0]:
        raise ShapeError(f"{rankings.shape[0]} rankings but {labels.shape[0]} labels",
                         field="labels")
    if labels.size == 0:
        raise DataError("cannot build a CMC curve from zero samples", field="labels")
    k = rankings.shape[1]
    hit = rankings == labels[:, None]
    if not hit.any(axis=1).all():
        raise SSGANError("a true label is missing from its ranking", field="labels")
    position = hit.argmax(axis=1)  # 0-based rank of the true class
    counts = np.bincount(position, minlength=k)
    acc = np.cumsum(counts) / labels.size
    return CmcCurve([float(a) for a in acc])


def logits_of(d, images, batch_size=256):
    chunks = []
    for start in range(0, len(images), batch_size):
        x = Tensor(images[start:start + batch_size])
        chunks.append(d.forward(x, EVAL).logits.data)
    return np.concatenate(chunks)


def evaluate(d, test, batch_size=256, model_id="", class_names=None):
    """Top-1/5/10 (percent), CMC and per-class accuracy of ``d`` on labeled samples."""
    if not test:
        raise DataError("test split is empty", field="test")
    dtype = next(iter(d.parameters().values())).dtype
    images = np.stack([s.image for s in test]).astype(dtype)
    labels = np.array([s.class_index for s in test])
    logits = logits_of(d, images, batch_size)
    ranks = rank_classes(logits)
    curve = cmc_curve(ranks, labels).check()
    top1_hit = ranks[:, 0] == labels
    k = ranks.shape[1]
    per_class = []
    for c in range(1, k + 1):
        sel = labels == c
        per_class.append(float(top1_hit[sel].mean()) if sel.any() else float("nan"))
    pct = lambda r: round(100.0 * curve.at(r), 2)  # noqa: E731
    return EvalReport(pct(1), pct(5), pct(10), curve, per_class, len(test), model_id,
                      list(class_names or []))


# ---------------------------------------------------------------- reports

def write_report(report, path, fmt="csv", title=None):
    """Write ``report`` as csv (rank,accuracy + summary comment), json or a text table."""
    if fmt == "csv":
        text = report_to_csv(report)
    elif fmt == "json":
        text = json.dumps(_report_dict(report), indent=2) + "\n"
    elif fmt in ("table", "text", "text-table"):
        text = report_to_table(report, title)
    else:
        raise SSGANError(f"unknown report format {fmt!r}", field="format")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise SSGANError(f"cannot write report to {path!r}: {exc}", field="path") from exc
    return path


def _report_dict(report):
    d = asdict(report)
    d["cmc"] = [{"rank": r, "accuracy": a} for r, a in enumerate(report.cmc.accuracies, start=1)]
    return d


def report_to_csv(report):
    buf = io.StringIO()
    top = [repr(float(v)) for v in (report.top1, report.top5, report.top10)]
    buf.write(f"# top1={top[0]},top5={top[1]},top10={top[2]},"
              f"count={report.count},model={report.model_id}\n")
    buf.write("# per_class=" + ";".join(repr(float(a)) for a in report.per_class) + "\n")
    buf.write("# classes=" + ";".join(report.class_names) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "accuracy"])
    for r, a in enumerate(report.cmc.accuracies, start=1):
        w.writerow([r, repr(float(a))])
    return buf.getvalue()


def _split_list(text, cast):
    return [cast(v) for v in text.split(";")] if text else []


def read_report_csv(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    try:
        summary = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split(","))
        per_class = _split_list(lines[1].partition("=")[2], float)
        classes = _split_list(lines[2].partition("=")[2], str)
        rows = list(csv.reader(lines[3:]))
        if rows[0] != ["rank", "accuracy"]:
            raise DataError("report CSV missing rank,accuracy header", field="header")
        acc = [float(a) for _, a in rows[1:]]
        return EvalReport(float(summary["top1"]), float(summary["top5"]), float(summary["top10"]),
                          CmcCurve(acc), per_class, int(summary["count"]),
                          summary.get("model", ""), classes)
    except (IndexError, KeyError, ValueError) as exc:
        raise DataError(f"malformed report CSV {path!r}: {exc}", field="report") from None


def read_report_json(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    d["cmc"] = CmcCurve([row["accuracy"] for row in d["cmc"]])
    return EvalReport(**d)


def report_to_table(report, title=None):
    k = len(report.cmc.accuracies)
    head = title or f"Accuracy (%) over {k} classes"
    name = report.model_id or "SSGAN"
    width = max(len(name), len("Network/Features"))
    rows = [
        head,
        f"{'Network/Features':<{width}} | {'Top-1':>6} | {'Top-5':>6} | {'Top-10':>6}",
        f"{'-' * width}-+-{'-' * 6}-+-{'-' * 6}-+-{'-' * 6}",
        f"{name:<{width}} | {report.top1:6.2f} | {report.top5:6.2f} | {report.top10:6.2f}",
    ]
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- image grids

def tile_images(images, rows, cols):
    """(N, C, H, W) in [-1, 1] -> uint8 (rows*H, cols*W[, C]) mosaic, row-major."""
    n, c, h, w = images.shape
    if rows * cols < n:
        raise SSGANError(f"grid {rows}x{cols} cannot hold {n} images", field="grid")
    pix = np.clip(np.rint((images + 1.0) * 127.5), 0, 255).astype(np.uint8)
    canvas = np.zeros((c, rows * h, cols * w), dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, cols)
        canvas[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = pix[i]
    return canvas[0] if c == 1 else canvas.transpose(1, 2, 0)


def write_image_grid(generator, count, grid, path, rng):
    """Sample ``count`` images from ``generator`` (eval mode) and save a PNG mosaic."""
    rows, cols = grid
    if rows * cols < count:
        raise SSGANError(f"grid {rows}x{cols} cannot hold {count} images", field="grid")
    dtype = next(iter(generator.parameters().values())).dtype
    z = Tensor(rng.normal((count, generator.latent_dim), dtype=dtype))
    images = generator.forward(z, EVAL).data
    mosaic = tile_images(images, rows, cols)
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise SSGANError(f"output directory {parent!r} does not exist", field="path")
    try:
        Image.fromarray(mosaic).save(path, format="PNG")
    except OSError as exc:
        raise SSGANError(f"cannot write image grid to {path!r}: {exc}", field="path") from exc
    return path
