"""Serialization of evaluation reports (EVAL1 JSON, CSV, standalone HTML)."""

from __future__ import annotations

import csv
import html
import io
import json

from .evaluation import REPORT_FORMAT, Correlation, EvalReport

FORMATS = ("json", "csv", "html")


def report_to_dict(report: EvalReport) -> dict:
    obj = {
        "format": REPORT_FORMAT,
        "classes": report.classes,
        "mean_ap": report.mean_ap,
        "per_class_ap": report.per_class_ap,
        "mean_accuracy": report.mean_accuracy,
        "per_class_accuracy": report.per_class_accuracy,
        "thresholds": report.thresholds,
        "confusion": report.confusion,
        "prior": report.prior,
        "correlation": None,
        "seeds": report.seeds,
        "subset_sizes": report.subset_sizes,
        "meta": report.meta,
    }
    if report.correlation is not None:
        c = report.correlation
        obj["correlation"] = {
            "rows": c.rows,
            "columns": c.columns,
            "matrix": c.matrix,
            "zero_variance": c.zero_variance,
        }
    return obj


def report_from_dict(obj: dict) -> EvalReport:
    if obj.get("format") != REPORT_FORMAT:
        raise ValueError(f"not an {REPORT_FORMAT} report")
    corr = obj.get("correlation")
    return EvalReport(
        classes=obj["classes"],
        per_class_ap=obj["per_class_ap"],
        mean_ap=obj["mean_ap"],
        per_class_accuracy=obj["per_class_accuracy"],
        mean_accuracy=obj["mean_accuracy"],
        confusion=obj["confusion"],
        prior=obj["prior"],
        thresholds=obj.get("thresholds", {}),
        correlation=Correlation(**corr) if corr else None,
        seeds=obj.get("seeds", {}),
        subset_sizes=obj.get("subset_sizes", {}),
        meta=obj.get("meta", {}),
    )


def to_json(report: EvalReport) -> str:
    return json.dumps(report_to_dict(report), indent=1, sort_keys=True) + "\n"


def from_json(text: str) -> EvalReport:
    return report_from_dict(json.loads(text))


def to_csv(report: EvalReport) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "ap", "accuracy", "threshold", "prior"])
    for k, cls in enumerate(report.classes):
        w.writerow(
            [
                cls,
                repr(report.per_class_ap[cls]),
                repr(report.per_class_accuracy[cls]),
                repr(report.thresholds.get(cls, 0.0)),
                repr(report.prior[k]),
            ]
        )
    return buf.getvalue()


def _heat(v: float) -> str:
    # white -> dark blue
    level = int(round(255 * (1 - max(0.0, min(1.0, v)))))
    fg = "#fff" if v > 0.5 else "#000"
    return f"background:rgb({level},{level},255);color:{fg}"


def _signed_heat(v: float) -> str:
    level = int(round(255 * (1 - min(1.0, abs(v)))))
    return f"background:rgb(255,{level},{level})" if v > 0 else f"background:rgb({level},{level},255)"


def to_html(report: EvalReport, title: str = "Style classification report") -> str:
    e = html.escape
    out = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>{e(title)}</title>",
        "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
        "td,th{border:1px solid #ccc;padding:2px 6px;font-size:12px;text-align:right}"
        "th{background:#eee}.bar{background:#4a7;height:10px}</style>",
        "</head><body>",
        f"<h1>{e(title)}</h1>",
        f"<p>Mean AP: <b>{report.mean_ap:.4f}</b> &middot; mean balanced accuracy: "
        f"<b>{report.mean_accuracy:.4f}</b></p>",
        "<h2>Per-class results</h2>",
        "<table><tr><th>class</th><th>AP</th><th></th><th>accuracy</th><th></th></tr>",
    ]
    for cls in report.classes:
        ap, acc = report.per_class_ap[cls], report.per_class_accuracy[cls]
        out.append(
            f"<tr><th>{e(cls)}</th><td>{ap:.4f}</td>"
            f'<td style="width:200px;text-align:left"><div class="bar" style="width:{200 * ap:.0f}px"></div></td>'
            f"<td>{acc:.4f}</td>"
            f'<td style="width:200px;text-align:left"><div class="bar" style="width:{200 * acc:.0f}px"></div></td></tr>'
        )
    out.append("</table>")
    out.append("<h2>Confusion matrix</h2><p>Rows: true class; columns: predicted class.</p>")
    out.append("<table><tr><th></th>" + "".join(f"<th>{e(c)}</th>" for c in report.classes) + "<th>prior</th></tr>")
    for k, cls in enumerate(report.classes):
        cells = "".join(f'<td style="{_heat(v)}">{v:.2f}</td>' for v in report.confusion[k])
        out.append(f"<tr><th>{e(cls)}</th>{cells}<td>{report.prior[k]:.3f}</td></tr>")
    out.append("</table>")
    if report.correlation is not None:
        c = report.correlation
        out.append("<h2>Content / style correlation</h2>")
        out.append("<table><tr><th></th>" + "".join(f"<th>{e(x)}</th>" for x in c.columns) + "</tr>")
        for name, row, flags in zip(c.rows, c.matrix, c.zero_variance):
            cells = "".join(
                f'<td style="{_signed_heat(v)}">{"n/a" if f else f"{v:.2f}"}</td>' for v, f in zip(row, flags)
            )
            out.append(f"<tr><th>{e(name)}</th>{cells}</tr>")
        out.append("</table>")
    out.append("</body></html>\n")
    return "\n".join(out)


def render_report(report: EvalReport, fmt: str) -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "csv":
        return to_csv(report)
    if fmt == "html":
        return to_html(report)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
