"""Weights files, group comparison tables and recovery scores."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import pearsonr, spearmanr

from .errors import ComparisonError, ConfigurationError, ScoringError
from .maxent import FitResult
from .mdp import FeatureMap
from .stats import FeatureExpectations


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def weights_document(
    result: FitResult,
    group_label: str | None,
    n_sessions: int,
    horizon: int,
) -> dict:
    return {
        "role": "fitted",
        "group_label": group_label,
        "feature_names": list(result.weights.feature_names),
        "theta": result.weights.theta.tolist(),
        "config": result.config.to_dict(),
        "converged": result.converged,
        "iterations": result.iterations,
        "message": result.message,
        "final_learning_rate": result.final_learning_rate,
        "moment_residual": result.moment_residual,
        "max_policy_row_error": result.max_policy_row_error,
        "max_visitation_error": result.max_visitation_error,
        "n_sessions": n_sessions,
        "horizon": horizon,
        "ll_trace": list(result.ll_trace),
        "grad_norm_trace": list(result.grad_norm_trace),
    }


def empirical_document(
    mu_hat: FeatureExpectations, feature_names: Sequence[str], group_label: str | None
) -> dict:
    return {
        "role": "empirical",
        "group_label": group_label,
        "feature_names": list(feature_names),
        "mu": mu_hat.mu.tolist(),
        "n_sessions": mu_hat.n_sessions,
        "discount": mu_hat.discount,
        "horizon": mu_hat.horizon,
    }


def load_weights(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"weights file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("role", "fitted") != "fitted" or "theta" not in doc:
        raise ConfigurationError(f"{path} is not a fitted weights file")
    doc.setdefault("group_label", path.stem)
    return doc


def comparison_rows(docs: Sequence[dict]) -> tuple[list[str], list[tuple[str, np.ndarray]]]:
    """Check that all weights share a feature layout; return names and rows."""
    if len(docs) < 2:
        raise ComparisonError("comparison needs at least two weights files")
    names = list(docs[0]["feature_names"])
    for doc in docs[1:]:
        other = list(doc["feature_names"])
        if other != names:
            only_a = [n for n in names if n not in other]
            only_b = [n for n in other if n not in names]
            detail = f"only in {docs[0]['group_label']}: {only_a}; only in {doc['group_label']}: {only_b}"
            if not only_a and not only_b:
                detail = "same features in a different order"
            raise ComparisonError(f"feature names differ ({detail})")
    return names, [(str(d["group_label"]), np.asarray(d["theta"], dtype=float)) for d in docs]


def fmt_weight(x: float) -> str:
    return f"{x:.4f}"


def comparison_csv(names: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["group", *names])
    for label, theta in rows:
        writer.writerow([label, *(fmt_weight(x) for x in theta)])
    return buf.getvalue()


def comparison_table(names: Sequence[str], rows) -> str:
    """Fixed-width table: one row per group, one column per feature."""
    header = ["group", *names]
    body = [[label, *(fmt_weight(x) for x in theta)] for label, theta in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def feature_ranking(names: Sequence[str], theta: np.ndarray) -> list[tuple[str, float]]:
    """Features by decreasing weight; ties keep column order."""
    order = sorted(range(len(names)), key=lambda i: (-theta[i], i))
    return [(names[i], float(theta[i])) for i in order]


def ranking_csv(names: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["group", "rank", "feature", "weight"])
    for label, theta in rows:
        for rank, (name, w) in enumerate(feature_ranking(names, theta), start=1):
            writer.writerow([label, rank, name, fmt_weight(w)])
    return buf.getvalue()


def _centered(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def centered_pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _centered(np.asarray(a, float)), _centered(np.asarray(b, float))
    if not a.any() or not b.any():
        return float("nan")
    return float(pearsonr(a, b).statistic)


def recovery_scores(
    theta_hat: np.ndarray, theta_true: np.ndarray, features: FeatureMap, moment_residual=None
) -> dict:
    """Rank agreement of state rewards plus weight-vector correlation."""
    theta_hat = np.asarray(theta_hat, float)
    theta_true = np.asarray(theta_true, float)
    if theta_hat.shape != theta_true.shape or theta_true.shape[0] != features.k:
        raise ScoringError(
            f"recovered weights {theta_hat.shape}, true weights {theta_true.shape}, "
            f"features k={features.k}"
        )
    r_hat = features.matrix @ theta_hat
    r_true = features.matrix @ theta_true
    if np.ptp(r_hat) == 0 or np.ptp(r_true) == 0:
        rho = float("nan")
    else:
        rho = float(spearmanr(r_hat, r_true).statistic)
    return {
        "spearman_state_reward": rho,
        "pearson_centered_theta": centered_pearson(theta_hat, theta_true),
        "moment_residual": None if moment_residual is None else float(moment_residual),
    }
