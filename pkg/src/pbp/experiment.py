"""Training-size sweeps comparing PBP with EM on posterior quality and training time."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import CliqueCalibrator, EMConfig, em_learn, sum_product_exact
from .errors import PBPError, ValidationError
from .evaluation import average_posterior_kl, kl_divergence
from .infer import PBPInference
from .junction_tree import BETA_CAP, build_latent_junction_tree
from .learn import RegressionConfig, learn
from .model import GraphicalModel, ancestral_sample, fig2_structure, fig4_structure, load_model, random_model

__all__ = ["ExperimentSpec", "ExperimentResult", "run_experiment", "kl_divergence", "DEFAULT_SIZES"]

log = logging.getLogger(__name__)

DEFAULT_SIZES = (2**10, 2**12, 2**14, 2**16, 2**17)
ALGORITHMS = ("pbp", "em", "exact")
CSV_COLUMNS = ("algorithm", "N", "seed", "avg_kl", "skipped", "train_seconds")
PRESETS = {"fig4": fig4_structure, "fig2": fig2_structure}


@dataclass
class ExperimentSpec:
    """One sweep: a ground-truth model, training sizes, seeds and a single query.

    ``model`` is a model-file path; alternatively ``preset`` names a built-in
    structure whose CPTs are drawn with ``model_seed``.
    """

    query: str
    evidence: list[str]
    sizes: list[int] = field(default_factory=lambda: list(DEFAULT_SIZES))
    seeds: list[int] = field(default_factory=lambda: [0])
    algorithms: list[str] = field(default_factory=lambda: ["pbp", "em"])
    model: str | None = None
    preset: str | None = None
    cardinality: int = 2
    model_seed: int = 0
    lambda1: float | None = None
    lambda2: float | None = None
    beta_cap: int = BETA_CAP
    em_restarts: int = 10
    em_max_iter: int = 500
    em_tol: float = 1e-6
    out_csv: str | None = None
    out_json: str | None = None

    def __post_init__(self):
        if not self.sizes or any(int(n) < 1 for n in self.sizes):
            raise ValidationError("training sizes must be positive")
        if list(self.sizes) != sorted(set(self.sizes)):
            raise ValidationError("training sizes must be strictly ascending")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValidationError(f"unknown algorithm(s) {bad}; choose from {list(ALGORITHMS)}")
        if (self.model is None) == (self.preset is None):
            raise ValidationError("give exactly one of 'model' and 'preset'")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}")
        if not self.seeds:
            raise ValidationError("at least one seed is required")

    @classmethod
    def from_json(cls, obj: dict, base_dir: str | Path | None = None) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown experiment field(s) {sorted(extra)}")
        if "query" not in obj or "evidence" not in obj:
            raise ValidationError("experiment spec needs 'query' and 'evidence'")
        obj = dict(obj)
        if base_dir is not None:
            for key in ("model", "out_csv", "out_json"):
                if obj.get(key) is not None and not Path(obj[key]).is_absolute():
                    obj[key] = str(Path(base_dir) / obj[key])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj, Path(path).parent)

    def ground_truth(self) -> GraphicalModel:
        if self.model is not None:
            return load_model(self.model)
        return random_model(PRESETS[self.preset](self.cardinality), self.model_seed)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[dict]

    def panels(self) -> dict:
        """Two panels: mean avg-KL and mean training time per (algorithm, N)."""
        panels = {"quality": {}, "time": {}}
        for alg in self.spec.algorithms:
            q = {"N": [], "avg_kl": []}
            t = {"N": [], "train_seconds": []}
            for n in self.spec.sizes:
                cell = [r for r in self.rows if r["algorithm"] == alg and r["N"] == n]
                kls = [r["avg_kl"] for r in cell if not math.isnan(r["avg_kl"])]
                q["N"].append(n)
                q["avg_kl"].append(float(np.mean(kls)) if kls else None)
                t["N"].append(n)
                t["train_seconds"].append(float(np.mean([r["train_seconds"] for r in cell])))
            panels["quality"][alg] = q
            panels["time"][alg] = t
        return panels

    def to_json(self) -> dict:
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
                for r in self.rows]
        return {"spec": self.spec.to_json(), "rows": rows, "panels": self.panels()}

    def write_csv(self, target) -> None:
        """Write the results table to a path or an open text stream."""
        if hasattr(target, "write"):
            w = csv.writer(target, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerows([r[c] for c in CSV_COLUMNS] for r in self.rows)
            return
        with open(target, "w", newline="") as fh:
            self.write_csv(fh)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _row(alg, n, seed, summary=None, seconds=0.0, error=None) -> dict:
    return {
        "algorithm": alg,
        "N": int(n),
        "seed": int(seed),
        "avg_kl": summary.avg_kl if summary else float("nan"),
        "skipped": summary.skipped if summary else 0,
        "train_seconds": float(seconds),
        "failed_realizations": summary.failed if summary else 0,
        "error": error,
    }


def _resolve(model: GraphicalModel, names: Sequence[str]) -> list[int]:
    st = model.structure
    ids = [st.id(n) for n in names]
    for n, i in zip(names, ids):
        if not st.is_observable(i):
            raise ValidationError(f"{n!r} is latent; query and evidence variables must be observable")
    return ids


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Train each algorithm on each (N, seed) sample and score posterior KL.

    A failure in one cell is logged and recorded in that row's ``error``; the
    sweep carries on.
    """
    truth = spec.ground_truth()
    query = _resolve(truth, [spec.query])[0]
    evidence = _resolve(truth, spec.evidence)
    if query in evidence:
        raise ValidationError("query variable is also an evidence variable")
    st = truth.structure
    tree = build_latent_junction_tree(st, spec.beta_cap) if "pbp" in spec.algorithms else None
    reg = RegressionConfig(spec.lambda1, spec.lambda2)
    cal = CliqueCalibrator(st)
    rows = []
    for seed in spec.seeds:
        for n in spec.sizes:
            data = ancestral_sample(truth, n, [seed, n])
            for alg in spec.algorithms:
                try:
                    if alg == "pbp":
                        params = learn(tree, data, reg)
                        engine = PBPInference(tree, params)
                        seconds = params.metadata["learn_seconds"]
                        summary = average_posterior_kl(
                            truth, lambda ev: engine.posterior(ev, query).posterior, query, evidence)
                    elif alg == "em":
                        fit = em_learn(st, data, EMConfig(spec.em_restarts, spec.em_max_iter, spec.em_tol, seed))
                        seconds = fit.seconds
                        summary = average_posterior_kl(
                            truth, lambda ev: sum_product_exact(fit.model, ev, query, cal), query, evidence)
                    else:
                        seconds = 0.0
                        summary = average_posterior_kl(
                            truth, lambda ev: sum_product_exact(truth, ev, query, cal), query, evidence)
                    rows.append(_row(alg, n, seed, summary, seconds))
                except (PBPError, np.linalg.LinAlgError) as exc:
                    log.error("%s at N=%d seed=%d failed: %s", alg, n, seed, exc)
                    rows.append(_row(alg, n, seed, error=f"{type(exc).__name__}: {exc}"))
    result = ExperimentResult(spec, rows)
    if spec.out_csv:
        result.write_csv(spec.out_csv)
    if spec.out_json:
        result.write_json(spec.out_json)
    return result
