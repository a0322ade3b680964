"""Static trace artifacts: JSON documents and self-contained HTML with inline SVG."""
from __future__ import annotations

import json
from html import escape
from importlib import resources
from typing import List

import numpy as np

from .executor import Trace

PANEL = 220  # svg side in pixels
TOP_ANSWERS = 5


def trace_schema() -> dict:
    return json.loads(resources.files("nmn").joinpath("data/trace.schema.json").read_text(encoding="utf-8"))


def trace_document(trace: Trace, boxes, question=None) -> dict:
    doc = trace.to_json()
    doc["answer_vocab"] = list(trace.answer_vocab)
    doc["boxes"] = [[round(float(c), 6) for c in b] for b in np.asarray(boxes).reshape(-1, 4)]
    doc["question"] = question
    return doc


def _label(step: dict) -> str:
    arg = f"({escape(step['arg'])})" if step["arg"] is not None else "()"
    deps = ", ".join(f"#{d}{' gt' if p == 'ground_truth' else ''}" for d, p in zip(step["deps"], step["provenance"]))
    return f"{escape(step['op'])}{arg}" + (f" &larr; {escape(deps)}" if deps else "")


def _attention_svg(values: List[float], boxes: List[List[float]]) -> str:
    top = max(values) if values else 1.0
    k = int(np.argmax(values))
    s = PANEL
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">',
             f'<rect x="0" y="0" width="{s}" height="{s}" fill="#f4f4f4" stroke="#999"/>']
    # draw weakest first so the strongest boxes sit on top
    for j in sorted(range(len(values)), key=lambda i: (values[i], i)):
        x1, y1, x2, y2 = boxes[j]
        op = values[j] / top if top > 0 else 0.0
        cls = "box argmax" if j == k else "box"
        stroke = ' stroke="#d62728" stroke-width="2.5"' if j == k else ' stroke="#1f77b4" stroke-width="0.8"'
        parts.append(
            f'<rect class="{cls}" data-box="{j}" data-attention="{values[j]:.6f}" '
            f'x="{x1 * s:.2f}" y="{y1 * s:.2f}" width="{(x2 - x1) * s:.2f}" height="{(y2 - y1) * s:.2f}" '
            f'fill="#1f77b4" fill-opacity="{0.85 * op:.4f}"{stroke}/>'
        )
    parts.append("</svg>")
    return "".join(parts)


def render_html(doc: dict) -> str:
    """One panel per step, then the predicted answer; no scripts, no external assets."""
    title = escape(f"trace {doc['id']}")
    out = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>{title}</title>",
        "<style>body{font-family:sans-serif;margin:1.5em}.steps{display:flex;flex-wrap:wrap;gap:1em}"
        ".step{border:1px solid #ccc;padding:.5em;min-width:230px}.step h3{font-size:.95em;margin:.2em 0}"
        ".prob{font-size:1.4em}.final{margin-top:1em;font-size:1.2em}</style>",
        "</head><body>",
        f"<h2>{title}</h2>",
    ]
    if doc.get("question"):
        out.append(f'<p class="question">{escape(doc["question"])}</p>')
    out.append('<div class="steps">')
    vocab = doc.get("answer_vocab") or []
    for i, step in enumerate(doc["steps"]):
        kind = step["output"]["kind"]
        vals = step["output"]["values"]
        head = f"<h3>{i}: {_label(step)}</h3>"
        if kind == "attention":
            k = int(np.argmax(vals))
            out.append(
                f'<section class="step" data-step="{i}" data-op="{escape(step["op"])}" data-kind="attention" data-argmax="{k}">'
                f"{head}{_attention_svg(vals, doc['boxes'])}<p>max attention {vals[k]:.3f} on box {k}</p></section>"
            )
        elif kind == "boolean":
            p = vals[0]
            out.append(
                f'<section class="step" data-step="{i}" data-op="{escape(step["op"])}" data-kind="boolean" data-prob="{p:.6f}">'
                f'{head}<p class="prob">p = {p:.3f}</p></section>'
            )
        else:
            order = sorted(range(len(vals)), key=lambda j: (-vals[j], j))[:TOP_ANSWERS]
            rows = "".join(
                f'<li data-answer="{escape(vocab[j] if j < len(vocab) else str(j))}">'
                f"{escape(vocab[j] if j < len(vocab) else str(j))}: {vals[j]:.3f}</li>"
                for j in order
            )
            out.append(
                f'<section class="step" data-step="{i}" data-op="{escape(step["op"])}" data-kind="answer" data-argmax="{order[0]}">'
                f"{head}<ol>{rows}</ol></section>"
            )
    out.append("</div>")
    gt = doc.get("answer")
    verdict = "" if gt is None else (" (correct)" if gt == doc["predicted"] else f" (expected {escape(gt)})")
    out.append(
        f'<div class="final" data-predicted="{escape(doc["predicted"])}">'
        f"predicted answer: <b>{escape(doc['predicted'])}</b>{verdict}</div>"
    )
    out.append("</body></html>")
    return "\n".join(out) + "\n"
