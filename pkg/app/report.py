"""Reports over a finished (or interrupted) run directory."""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import plotly.express as px

from .errors import CoEvoError
from .evaluation import score_solution
from .knowledge import KnowledgePiece, snapshot_pieces
from .run_store import RunDirectory

logger = logging.getLogger(__name__)

SNAPSHOT_COLUMNS = ["id", "definition", "cluster", "improvement", "uses", "solution_id", "iteration"]


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return value


def parse_window(text: str) -> Tuple[int, int]:
    """`START:END`, inclusive generation bounds."""
    start, separator, end = text.partition(":")
    if not separator:
        raise ValueError(f"window must look like START:END, got {text!r}")
    window = (int(start), int(end))
    if window[0] < 0 or window[1] < window[0]:
        raise ValueError(f"window {text!r} is empty")
    return window


def window_pieces(history, start: int, end: int) -> Tuple[List[KnowledgePiece], Dict[str, Tuple[int, int]]]:
    """Every piece present in the library at some generation in [start, end], latest version."""
    latest: Dict[str, KnowledgePiece] = {}
    seen: Dict[str, Tuple[int, int]] = {}
    for generation, record in history:
        if not start <= generation <= end:
            continue
        for piece in record.pieces:
            latest[piece.id] = piece
            first, _ = seen.get(piece.id, (generation, generation))
            seen[piece.id] = (first, generation)
    pieces = sorted(latest.values(), key=lambda p: p.id)
    return pieces, seen


def _projection(pieces: List[KnowledgePiece]) -> np.ndarray:
    """2-D principal-component coordinates of the piece embeddings."""
    if not pieces:
        return np.zeros((0, 2))
    matrix = np.array([p.vector.vector / p.vector.norm for p in pieces])
    centered = matrix - matrix.mean(axis=0)
    if len(pieces) < 2:
        return np.zeros((len(pieces), 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((len(pieces), 2 - coords.shape[1]))])
    return coords


def _figures(best: pd.DataFrame, valid: pd.DataFrame, offspring: pd.DataFrame,
             snapshot: pd.DataFrame, pieces: List[KnowledgePiece]) -> List:
    figures = []
    if not best.empty:
        plot = best[np.isfinite(best["best_nmse"])]
        fig = px.line(plot, x="iteration", y="best_nmse", log_y=True, markers=True,
                      title="Best NMSE by generation request",
                      labels={"iteration": "Generation requests", "best_nmse": "Best NMSE"})
        figures.append(fig)
    if not valid.empty:
        figures.append(px.bar(valid, x="generation", y="valid_ratio", title="Valid offspring ratio",
                              labels={"generation": "Generation", "valid_ratio": "Valid ratio"}))
    if not offspring.empty:
        plot = offspring[np.isfinite(offspring["score"])]
        figures.append(px.scatter(plot, x="sample", y="score", color="used_knowledge", log_y=True,
                                  hover_data=["solution_id", "operator"],
                                  title="Offspring NMSE by sample",
                                  labels={"sample": "Sample", "score": "NMSE"}))
    if pieces:
        coords = _projection(pieces)
        frame = snapshot.assign(x=coords[:, 0], y=coords[:, 1], cluster=snapshot["cluster"].astype(str))
        figures.append(px.scatter(frame, x="x", y="y", color="cluster", hover_data=["id", "definition"],
                                  title="Knowledge library (embedding projection)"))
    return figures


def write_figures(figures: List, path: Path):
    parts = ["<html><head><meta charset='utf-8'><title>CoEvo run report</title></head><body>"]
    for index, fig in enumerate(figures):
        parts.append(fig.to_html(full_html=False, include_plotlyjs="cdn" if index == 0 else False))
    parts.append("</body></html>")
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(parts))


def build_report(
    run_dir: RunDirectory,
    window: Optional[Tuple[int, int]] = None,
    figures: bool = True,
    eps: float = 0.3,
    min_pts: int = 2,
) -> Dict[str, Any]:
    """Write the series CSVs, knowledge snapshot(s), summary.json and optionally figures.html.

    Returns stats with the files written and any non-fatal errors.
    """
    state = run_dir.load_state()
    out = run_dir.path
    stats: Dict[str, Any] = {"files": [], "errors": []}

    def save(frame: pd.DataFrame, name: str):
        frame.to_csv(out / name, index=False)
        stats["files"].append(name)

    best = pd.DataFrame([p.model_dump() for p in state.best_series], columns=["iteration", "samples", "best_nmse"])
    valid = pd.DataFrame([p.model_dump() for p in state.valid_series],
                         columns=["generation", "valid_ratio", "valid", "total"])
    offspring = pd.DataFrame(
        [p.model_dump() for p in state.offspring_series],
        columns=["sample", "generation", "solution_id", "operator", "score", "used_knowledge"],
    )
    save(best, "best_nmse_by_iteration.csv")
    save(valid, "valid_ratio_by_generation.csv")
    save(offspring, "offspring_nmse_by_sample.csv")

    pieces = list(state.library.pieces)
    snapshot = snapshot_pieces(pieces, eps=eps, min_pts=min_pts)
    snapshot_frame = pd.DataFrame([r.model_dump() for r in snapshot.records], columns=SNAPSHOT_COLUMNS)
    save(snapshot_frame, "knowledge_snapshot.csv")

    if window is not None:
        windowed, seen = window_pieces(run_dir.read_library_history(), *window)
        records = snapshot_pieces(windowed, eps=eps, min_pts=min_pts).records
        frame = pd.DataFrame([r.model_dump() for r in records], columns=SNAPSHOT_COLUMNS)
        frame["first_generation"] = [seen[r.id][0] for r in records]
        frame["last_generation"] = [seen[r.id][1] for r in records]
        save(frame, "knowledge_window.csv")
        stats["window_pieces"] = len(records)

    summary: Dict[str, Any] = {
        "generations": state.generation,
        "samples": state.samples,
        "iterations": state.iteration,
        "library_size": len(pieces),
        "knowledge_clusters": snapshot.clustering.n_clusters,
        "mean_valid_ratio": float(valid["valid_ratio"].mean()) if not valid.empty else None,
        "best": None,
    }
    if state.best is not None:
        best_solution = state.best
        entry: Dict[str, Any] = {
            "id": best_solution.id,
            "equation": best_solution.canonical,
            "params": best_solution.params,
            "valid": best_solution.valid,
            "id_nmse": _finite_or_none(best_solution.score),
            "ood_nmse": None,
        }
        model = best_solution.fitted_model()
        if model is not None:
            try:
                scores = score_solution(model, run_dir.load_dataset())
                entry["id_nmse"] = _finite_or_none(scores.id_nmse)
                entry["ood_nmse"] = _finite_or_none(scores.ood_nmse)
            except CoEvoError as error:
                stats["errors"].append(f"rescoring {best_solution.id}: {error}")
        summary["best"] = entry
    with open(out / "summary.json", 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2)
    stats["files"].append("summary.json")

    if figures:
        write_figures(_figures(best, valid, offspring, snapshot_frame, pieces), out / "figures.html")
        stats["files"].append("figures.html")

    stats["summary"] = summary
    logger.info(f"Report written to {out}: {', '.join(stats['files'])}")
    return stats
