"""Artifact emission: CSV/JSON tables, self-contained SVG plots, images.

Numeric CSV cells use the shortest round-trip float representation so reruns
diff cleanly; undefined statistics render as empty cells. SVG output is plain
hand-built XML with no external assets.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib

import numpy as np

from .metrics import ASRMatrix, ComplexityRow, SimilarityReport

TOOL_VERSION = "0.1.0"


def fmt(value) -> str:
    """Shortest round-trip cell text; None (undefined) becomes an empty cell."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header: list[str], rows: list[list]):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_json(path: str, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, command: str, config_digest: str,
                   artifact_paths: list[str], seconds: float) -> str:
    artifacts = []
    for path in sorted(artifact_paths):
        artifacts.append({
            "path": os.path.relpath(path, out_dir),
            "bytes": os.path.getsize(path),
            "sha256": sha256_file(path),
        })
    payload = {
        "command": command,
        "tool_version": TOOL_VERSION,
        "config_sha256": config_digest,
        "artifacts": artifacts,
        "timings": {"total_seconds": round(seconds, 3)},
    }
    path = os.path.join(out_dir, f"{command}_manifest.json")
    write_json(path, payload)
    return path


# ---------------------------------------------------------------------------
# tables


def stage_headers(num_stages: int) -> list[str]:
    heads = [f"Stage {a}" for a in range(1, num_stages + 1)]
    heads[-1] += " (Final)"
    return heads


def write_transfer_csv(path: str, matrix: ASRMatrix):
    header = ["Attack"] + stage_headers(len(matrix.attacker_stages))
    rows = [[method] + matrix.row(method) for method in matrix.methods]
    write_csv(path, header, rows)


def transfer_payload(matrix: ASRMatrix, attack_settings: dict) -> dict:
    cells = []
    for a in matrix.attacker_stages:
        for method in matrix.methods:
            c = matrix.cells[(a, method)]
            cells.append({
                "attacker_stage": c.attacker_stage,
                "method": c.method,
                "asr": c.asr,
                "clean_correct": c.clean_correct,
                "flipped": c.flipped,
                "n": c.n,
                "dataset": c.dataset,
            })
    return {
        "target_stage": matrix.target_stage,
        "methods": matrix.methods,
        "attacker_stages": matrix.attacker_stages,
        "attack_settings": attack_settings,
        "cells": cells,
    }


def matrix_from_payload(payload: dict) -> ASRMatrix:
    from .metrics import ASRCell
    matrix = ASRMatrix(payload["target_stage"], list(payload["methods"]),
                       list(payload["attacker_stages"]))
    for c in payload["cells"]:
        matrix.cells[(c["attacker_stage"], c["method"])] = ASRCell(
            c["attacker_stage"], c["method"], c["asr"], c["clean_correct"],
            c["flipped"], c["n"], c["dataset"])
    return matrix


def write_similarity_csv(path: str, report: SimilarityReport):
    rows = [[r.stage, r.cosine, r.cka, r.asr_ratio] for r in report.rows]
    write_csv(path, ["stage", "cosine_similarity", "linear_cka", "asr_ratio"], rows)


def write_complexity_csv(path: str, rows: list[ComplexityRow]):
    table = [[r.stage, r.lipschitz, r.hessian_lmax, r.hessian_converged]
             for r in rows]
    write_csv(path, ["stage", "local_lipschitz", "hessian_spectral_norm",
                     "hessian_converged"], table)


def write_accuracy_csv(path: str, accuracy: list[float]):
    write_csv(path, ["stage", "clean_accuracy_cumulative"],
              [[t + 1, acc] for t, acc in enumerate(accuracy)])


# ---------------------------------------------------------------------------
# SVG plots (hand-built, deterministic)

_W, _H = 420, 340
_ML, _MR, _MT, _MB = 60, 20, 40, 50


def _coord(v: float, lo: float, hi: float, plo: float, phi: float) -> float:
    if hi == lo:
        return (plo + phi) / 2.0
    return plo + (v - lo) / (hi - lo) * (phi - plo)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


class _Svg:
    def __init__(self, width: int, height: int):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]

    def line(self, x1, y1, x2, y2, color="#444", width=1):
        self.parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{color}" stroke-width="{width}"/>')

    def polyline(self, pts, color, width=2, dash=None):
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{path}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{extra}/>')

    def circle(self, x, y, r, color):
        self.parts.append(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>')

    def text(self, x, y, s, size=11, anchor="middle", color="#222", rotate=None):
        transform = f' transform="rotate(-90 {x:.2f} {y:.2f})"' if rotate else ""
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" '
            f'font-size="{size}" text-anchor="{anchor}" fill="{color}"{transform}>'
            f"{_esc(s)}</text>")

    def save(self, path: str):
        self.parts.append("</svg>")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(self.parts) + "\n")


def _panel_scatter(svg: _Svg, ox: int, xs, ys, labels, xlabel, ylabel, title,
                   annotation):
    x0, x1 = ox + _ML, ox + _W - _MR
    y0, y1 = _H - _MB, _MT
    lo_x, hi_x = min(xs), max(xs)
    lo_y, hi_y = min(ys), max(ys)
    pad_x = (hi_x - lo_x) * 0.08 or 0.01
    pad_y = (hi_y - lo_y) * 0.08 or 0.01
    lo_x, hi_x = lo_x - pad_x, hi_x + pad_x
    lo_y, hi_y = lo_y - pad_y, hi_y + pad_y
    svg.line(x0, y0, x1, y0)
    svg.line(x0, y0, x0, y1)
    for t in _ticks(lo_x, hi_x):
        px = _coord(t, lo_x, hi_x, x0, x1)
        svg.line(px, y0, px, y0 + 4)
        svg.text(px, y0 + 16, f"{t:.3f}", size=9)
    for t in _ticks(lo_y, hi_y):
        py = _coord(t, lo_y, hi_y, y0, y1)
        svg.line(x0 - 4, py, x0, py)
        svg.text(x0 - 8, py + 3, f"{t:.3f}", size=9, anchor="end")
    for x, y, label in zip(xs, ys, labels):
        px = _coord(x, lo_x, hi_x, x0, x1)
        py = _coord(y, lo_y, hi_y, y0, y1)
        svg.circle(px, py, 4, "#1f77b4")
        svg.text(px + 8, py - 6, str(label), size=10, anchor="start")
    svg.text((x0 + x1) / 2, _H - 14, xlabel)
    svg.text(ox + 16, (y0 + y1) / 2, ylabel, rotate=True)
    svg.text((x0 + x1) / 2, _MT - 18, title, size=12)
    svg.text(x0 + 8, y1 + 14, annotation, size=11, anchor="start", color="#b22222")


def write_similarity_svg(path: str, report: SimilarityReport):
    """Two scatter panels (cosine, CKA) against ASR ratio, stage-labeled."""
    rows = [r for r in report.rows
            if r.cosine is not None and r.cka is not None and r.asr_ratio is not None]
    svg = _Svg(2 * _W, _H)
    ratios = [r.asr_ratio for r in rows]
    stages = [r.stage for r in rows]
    r_cos = "undefined" if report.pearson_cosine is None else f"r = {report.pearson_cosine:.3f}"
    r_cka = "undefined" if report.pearson_cka is None else f"r = {report.pearson_cka:.3f}"
    _panel_scatter(svg, 0, [r.cosine for r in rows], ratios, stages,
                   "parameter cosine similarity", "ASR ratio",
                   "Cosine similarity vs transfer", r_cos)
    _panel_scatter(svg, _W, [r.cka for r in rows], ratios, stages,
                   "linear CKA", "ASR ratio", "CKA vs transfer", r_cka)
    svg.save(path)


def write_complexity_svg(path: str, rows: list[ComplexityRow]):
    """Dual-axis line plot: input-gradient norm (left), Hessian norm (right)."""
    svg = _Svg(_W, _H)
    x0, x1 = _ML, _W - _MR
    y0, y1 = _H - _MB, _MT
    stages = [r.stage for r in rows]
    lips = [r.lipschitz for r in rows]
    lams = [r.hessian_lmax for r in rows]
    lo_s, hi_s = min(stages), max(stages)
    svg.line(x0, y0, x1, y0)
    svg.line(x0, y0, x0, y1, color="#1f77b4")
    svg.line(x1, y0, x1, y1, color="#d62728")
    for s in stages:
        px = _coord(s, lo_s, hi_s, x0, x1)
        svg.line(px, y0, px, y0 + 4)
        svg.text(px, y0 + 16, str(s), size=9)
    for series, lo_hi, axis_x, color, anchor, dash in (
            (lips, (min(lips), max(lips)), x0, "#1f77b4", "end", None),
            (lams, (min(lams), max(lams)), x1, "#d62728", "start", "4,3")):
        lo, hi = lo_hi
        pad = (hi - lo) * 0.08 or 0.01
        lo, hi = lo - pad, hi + pad
        for t in _ticks(lo, hi):
            py = _coord(t, lo, hi, y0, y1)
            if anchor == "end":
                svg.text(axis_x - 8, py + 3, f"{t:.3g}", size=9, anchor=anchor,
                         color=color)
            else:
                svg.text(axis_x + 8, py + 3, f"{t:.3g}", size=9, anchor=anchor,
                         color=color)
        pts = [(_coord(s, lo_s, hi_s, x0, x1), _coord(v, lo, hi, y0, y1))
               for s, v in zip(stages, series)]
        svg.polyline(pts, color, dash=dash)
        for px, py in pts:
            svg.circle(px, py, 3, color)
    svg.text((x0 + x1) / 2, _H - 14, "stage")
    svg.text(16, (y0 + y1) / 2, "mean input-gradient norm", rotate=True, color="#1f77b4")
    svg.text(_W - 6, (y0 + y1) / 2, "Hessian spectral norm", rotate=True, color="#d62728")
    svg.text((x0 + x1) / 2, _MT - 18, "Stage-wise model complexity", size=12)
    svg.save(path)


# ---------------------------------------------------------------------------
# images


def rescale_to_bytes(image: np.ndarray) -> np.ndarray:
    """Affine min->0, max->255 rescale; a constant image maps to mid-gray 128."""
    arr = image.astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.full(arr.shape, 128, dtype=np.uint8)
    return np.clip(np.rint((arr - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str, gray: np.ndarray):
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.astype(np.uint8).tobytes())


def write_ppm(path: str, rgb: np.ndarray):
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.astype(np.uint8).tobytes())


def write_png(path: str, image: np.ndarray):
    """Minimal PNG encoder for [h,w] grayscale or [h,w,3] RGB uint8 arrays."""
    if image.ndim == 2:
        color_type, data = 0, image[:, :, None]
    elif image.ndim == 3 and image.shape[2] == 3:
        color_type, data = 2, image
    else:
        raise ValueError(f"unsupported image shape {image.shape}")
    h, w = data.shape[:2]
    raw = b"".join(b"\x00" + data[row].astype(np.uint8).tobytes() for row in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload +
                struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))

    header = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", header))
        f.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(chunk(b"IEND", b""))


def write_image_pair(out_dir: str, stem: str, chw: np.ndarray) -> list[str]:
    """Emit PNG plus PGM (1-channel) or PPM (3-channel) for a [c,h,w] byte image."""
    paths = []
    if chw.shape[0] == 1:
        gray = chw[0]
        png = os.path.join(out_dir, f"{stem}.png")
        pgm = os.path.join(out_dir, f"{stem}.pgm")
        write_png(png, gray)
        write_pgm(pgm, gray)
        paths += [png, pgm]
    else:
        rgb = np.transpose(chw, (1, 2, 0))
        png = os.path.join(out_dir, f"{stem}.png")
        ppm = os.path.join(out_dir, f"{stem}.ppm")
        write_png(png, rgb)
        write_ppm(ppm, rgb)
        paths += [png, ppm]
    return paths


# ---------------------------------------------------------------------------
# consolidated report


def _csv_to_markdown(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    cells = [line.split(",") for line in lines]
    out = ["| " + " | ".join(cells[0]) + " |",
           "|" + "---|" * len(cells[0])]
    for row in cells[1:]:
        out.append("| " + " | ".join(cell if cell else "(undefined)" for cell in row) + " |")
    return "\n".join(out)


def write_report(out_dir: str, path: str) -> list[str]:
    """Collate known CSV artifacts into one markdown bundle, deterministically."""
    expected = ["clean_accuracy.csv", "transfer_matrix.csv", "similarity.csv",
                "complexity.csv"]
    present = [name for name in expected if os.path.isfile(os.path.join(out_dir, name))]
    if not present:
        raise FileNotFoundError(
            f"nothing to report in {out_dir!r}; expected at least one of: "
            + ", ".join(expected))
    sections = ["# Experiment report", ""]
    config_echo = os.path.join(out_dir, "config_echo.ini")
    if os.path.isfile(config_echo):
        with open(config_echo, "r", encoding="utf-8") as f:
            sections += ["## Configuration", "", "```ini", f.read().rstrip(), "```", ""]
    titles = {
        "clean_accuracy.csv": "Clean accuracy (cumulative test set)",
        "transfer_matrix.csv": "Cross-stage transfer matrix (ASR)",
        "similarity.csv": "Model similarity vs transfer",
        "complexity.csv": "Stage-wise model complexity",
    }
    for name in present:
        sections += [f"## {titles[name]}", "",
                     _csv_to_markdown(os.path.join(out_dir, name)), ""]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(sections))
    return present
