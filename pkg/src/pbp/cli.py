"""Command line: ``pbp gen-model | sample | learn | infer | experiment``.

Exit status is 0 on success, 2 for invalid input and 3 for numerical failures
(zero-probability evidence, singular regressions).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import NumericalError, ValidationError
from .experiment import ExperimentSpec, run_experiment
from .infer import PBPInference
from .junction_tree import BETA_CAP, build_latent_junction_tree
from .learn import LearnedParams, RegressionConfig, learn
from .model import (
    ancestral_sample,
    fig2_structure,
    fig4_structure,
    hmm_structure,
    load_dataset,
    load_model,
    load_structure,
    random_model,
    save_dataset,
    write_dataset,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

PRESETS = {
    "fig4": lambda card: fig4_structure(card),
    "fig2": lambda card: fig2_structure(card),
    "hmm": lambda card: hmm_structure(4, card, card),
}


def dumps(obj) -> str:
    """Canonical JSON text used for every payload the CLI prints or writes."""
    return json.dumps(obj, indent=2, sort_keys=True)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def parse_evidence(items, structure) -> dict[int, int]:
    evidence = {}
    for item in items or []:
        for part in item.split(","):
            if not part:
                continue
            name, sep, value = part.partition("=")
            if not sep:
                raise ValidationError(f"evidence {part!r} must look like NAME=STATE")
            try:
                evidence[structure.id(name.strip())] = int(value)
            except ValueError:
                raise ValidationError(f"evidence state {value!r} is not an integer") from None
    return evidence


def cmd_gen_model(args) -> None:
    if args.preset and args.structure:
        raise ValidationError("give either --preset or --structure, not both")
    if args.preset:
        if args.preset not in PRESETS:
            raise ValidationError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        structure = PRESETS[args.preset](args.cardinality or 2)
    elif args.structure:
        structure = load_structure(args.structure)
        if args.cardinality is not None:
            structure = structure.with_cardinalities(args.cardinality)
    else:
        raise ValidationError("one of --preset or --structure is required")
    _emit(dumps(random_model(structure, args.seed).to_json()), args.out)


def cmd_sample(args) -> None:
    model = load_model(args.model)
    data = ancestral_sample(model, args.n, args.seed)
    if args.out:
        save_dataset(data, model.structure, args.out)
    else:
        write_dataset(data, model.structure, sys.stdout)


def learn_command(model_path, data_path, lambda1=None, lambda2=None, beta_cap=BETA_CAP, seed=None):
    structure = load_structure(model_path)
    data = load_dataset(data_path, structure)
    tree = build_latent_junction_tree(structure, beta_cap)
    params = learn(tree, data, RegressionConfig(lambda1, lambda2))
    params.metadata.update({"beta_cap": beta_cap, "seed": seed})
    return tree, params


def cmd_learn(args) -> None:
    tree, params = learn_command(args.model, args.data, args.lambda1, args.lambda2, args.beta_cap, args.seed)
    if args.dump_tree:
        Path(args.dump_tree).write_text(dumps(tree.to_json()) + "\n")
    _emit(dumps(params.to_json()), args.out)


def infer_command(params_path, model_path, evidence_items, query_name, beta_cap=None) -> dict:
    params = LearnedParams.load(params_path)
    structure = load_structure(model_path)
    cap = beta_cap if beta_cap is not None else params.metadata.get("beta_cap", BETA_CAP)
    tree = build_latent_junction_tree(structure, cap)
    engine = PBPInference(tree, params)
    evidence = parse_evidence(evidence_items, structure)
    result = engine.posterior(evidence, structure.id(query_name))
    return result.to_json(structure, {"tree_hash": tree.hash()})


def cmd_infer(args) -> None:
    _emit(dumps(infer_command(args.params, args.model, args.evidence, args.query, args.beta_cap)), args.out)


def cmd_experiment(args) -> None:
    spec = ExperimentSpec.load(args.spec)
    if args.out:
        stem = Path(args.out)
        spec.out_csv = str(stem.with_suffix(".csv"))
        spec.out_json = str(stem.with_suffix(".json"))
    if args.seed is not None:
        spec.seeds = [args.seed]
    result = run_experiment(spec)
    if not spec.out_csv:
        result.write_csv(sys.stdout)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pbp", description="Predictive belief propagation for latent-variable models.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="draw random CPTs for a structure")
    g.add_argument("--preset", help="built-in structure: " + ", ".join(sorted(PRESETS)))
    g.add_argument("--structure", help="structure or model JSON file")
    g.add_argument("--cardinality", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_model)

    s = sub.add_parser("sample", help="ancestral sampling of the observables")
    s.add_argument("--model", required=True)
    s.add_argument("-n", "--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    l = sub.add_parser("learn", help="two-stage regression learning")
    l.add_argument("--model", required=True, help="model or structure JSON")
    l.add_argument("--data", required=True, help="dataset CSV")
    l.add_argument("--lambda1", type=float, default=None)
    l.add_argument("--lambda2", type=float, default=None)
    l.add_argument("--beta-cap", type=int, default=BETA_CAP)
    l.add_argument("--dump-tree", help="write the latent junction tree JSON here")
    l.add_argument("--seed", type=int, default=None, help="recorded in the parameter metadata")
    l.add_argument("--out")
    l.set_defaults(func=cmd_learn)

    i = sub.add_parser("infer", help="posterior of one observable given evidence")
    i.add_argument("--params", required=True)
    i.add_argument("--model", required=True)
    i.add_argument("--evidence", action="append", help="NAME=STATE, repeatable or comma separated")
    i.add_argument("--query", required=True)
    i.add_argument("--beta-cap", type=int, default=None)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("experiment", help="KL-versus-N sweep")
    e.add_argument("spec")
    e.add_argument("--seed", type=int, default=None, help="override the spec's seed list")
    e.add_argument("--out", help="output stem; writes STEM.csv and STEM.json")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"pbp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"pbp: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
