"""Command-line front end: synth, perturb, calibrate, hunt, evaluate, report."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .calibration import CalibrationProfile, ConfigError, TuningCase, calibrate, weight_grid
from .evadekit import LabelTamperError, PerturbConfig, Profile, perturb, suppression_report
from .knowledge import KnowledgeBase
from .metrics import PhysicsRuleSet, actor_parents, score_result, truth_edges
from .ontology import OntologyError, ProvenanceNode
from .search import Hunter
from .synthbench import SpecError, benign_trace, kb_for, realize, scenario_suite
from .trace_store import LabelSet, ParseError, SchemaError, load_trace, read_json, save_trace, write_json

log = logging.getLogger("tracehunt")

DOMAIN_ERRORS = (
    ParseError,
    SchemaError,
    ConfigError,
    SpecError,
    OntologyError,
    LabelTamperError,
    FileNotFoundError,
    ValueError,
    KeyError,
)


class UsageError(Exception):
    pass


# --- helpers ---------------------------------------------------------------


def _node_spec(raw: str) -> ProvenanceNode:
    """Inline JSON, or ``@path`` / a path to a JSON file holding one node."""
    text = raw
    if raw.startswith("@"):
        text = Path(raw[1:]).read_text(encoding="utf-8")
    elif not raw.lstrip().startswith("{") and Path(raw).exists():
        text = Path(raw).read_text(encoding="utf-8")
    try:
        return ProvenanceNode.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"node spec is not JSON: {raw!r}") from exc


def _sidecar(path: Optional[str], key: str) -> dict:
    if not path:
        return {}
    return dict(read_json(path)[key])


def _scenario_dirs(root: Path) -> list[Path]:
    base = root / "scenarios" if (root / "scenarios").is_dir() else root
    dirs = sorted(p for p in base.iterdir() if (p / "trace.jsonl").exists())
    if not dirs:
        raise FileNotFoundError(f"no scenario directories under {root}")
    return dirs


def _load_scenario(d: Path):
    labels = d / "labels.json"
    hosts = d / "hosts.json"
    aliases = d / "aliases.json"
    trace = load_trace(d / "trace.jsonl", labels, aliases if aliases.exists() else None, hosts)
    truth = load_trace(d / "truth.jsonl", labels, aliases if aliases.exists() else None, hosts)
    anchor = ProvenanceNode.from_dict(read_json(d / "anchor.json"))
    target = ProvenanceNode.from_dict(read_json(d / "target.json"))
    return trace, truth, anchor, target


# --- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    specs = scenario_suite(args.preset, seed=args.seed, benign_events=args.benign_events)
    kb = kb_for(specs, seed=args.seed)
    kb.save(out / "kb")
    benign = benign_trace(args.seed + 1, args.calibration_events)
    save_trace(benign, out / "benign.jsonl")
    write_json({"hosts": dict(benign.hosts)}, out / "benign_hosts.json")
    manifest = []
    for spec in specs:
        sc = realize(spec)
        d = out / "scenarios" / spec.scenario_id
        d.mkdir(parents=True, exist_ok=True)
        save_trace(sc.trace, d / "trace.jsonl")
        save_trace(sc.truth, d / "truth.jsonl")
        write_json(sc.truth.labels.to_dict(), d / "labels.json")
        write_json({"hosts": dict(sc.truth.hosts)}, d / "hosts.json")
        write_json({"aliases": dict(sc.truth.alias_table)}, d / "aliases.json")
        write_json(sc.anchor.to_dict(), d / "anchor.json")
        write_json(sc.target.to_dict(), d / "target.json")
        write_json(spec.to_dict(), d / "spec.json")
        manifest.append({"scenario": spec.scenario_id, "family": spec.family, "length": spec.length,
                         "perturbation": [list(p) for p in spec.perturbation]})
    write_json({"preset": args.preset, "seed": args.seed, "scenarios": manifest}, out / "manifest.json")
    print(f"wrote {len(specs)} scenarios to {out}")
    return 0


def cmd_perturb(args) -> int:
    trace = load_trace(args.input, args.labels, hosts=args.hosts)
    profile = Profile.parse(args.profile)
    cfg = PerturbConfig(rate=args.rate, seed=args.seed, timestomp_lo_s=args.timestomp_lo, timestomp_hi_s=args.timestomp_hi)
    out = perturb(trace, profile, cfg)
    save_trace(out, args.out)
    if args.report:
        write_json(suppression_report(trace, out, profile), args.report)
    print(f"{profile.value}: kept {len(out)} of {len(trace)} events")
    return 0


def cmd_calibrate(args) -> int:
    benign = load_trace(args.benign, hosts=args.benign_hosts)
    kb = KnowledgeBase.load(args.kb)
    tuning = []
    for d in _scenario_dirs(Path(args.tune)):
        trace, truth, anchor, target = _load_scenario(d)
        tuning.append(TuningCase(trace, truth, anchor, target, trace.labels.family))
    grid = weight_grid(step=args.grid_step)
    profile = calibrate(
        benign, tuning, kb,
        test_families=args.test_family or (), channels=tuple(args.channels), seed=args.seed,
        n_edges=args.loeo_edges, grid=grid, jobs=args.jobs,
    )
    write_json(profile.to_dict(), args.out)
    w = profile.weights
    print(f"alpha={w.alpha} gamma={w.gamma} b_max={profile.b_max:.4f} rho_hat={profile.rho_hat:.3f}")
    return 0


def cmd_hunt(args) -> int:
    trace = load_trace(args.trace, args.labels, args.aliases, args.hosts)
    profile = CalibrationProfile.from_dict(read_json(args.profile)) if args.profile else CalibrationProfile()
    kb = KnowledgeBase.load(args.kb)
    anchor = _node_spec(args.anchor)
    target = _node_spec(args.target)
    hunter = Hunter(trace, kb, profile, exclude_family=args.exclude_family or None)
    res = hunter.hunt(anchor, target, beam_width=args.beam_width)
    write_json(res.to_dict(), args.out)
    print(f"status={res.status.value} paths={len(res.paths)} verified={len(res.verified_layer)} "
          f"leads={len(res.inferred_layer)}")
    return 0


def cmd_evaluate(args) -> int:
    result = read_json(args.result)
    labels = LabelSet.from_dict(read_json(args.labels))
    aliases = _sidecar(args.aliases, "aliases")
    hosts = _sidecar(args.hosts, "hosts")
    rules = PhysicsRuleSet.load(args.rules) if args.rules else PhysicsRuleSet.default()
    parents = None
    if args.truth:
        truth = load_trace(args.truth, labels, aliases, hosts or None)
        edges = truth_edges(truth, labels)
        parents = actor_parents(truth)
        hosts = hosts or dict(truth.hosts)
    else:
        raise UsageError("--truth is required to recover labelled edges")
    metrics = score_result(result, edges, aliases, rules, hosts, parents)
    write_json(metrics, args.out)
    print(" ".join(f"{k}={metrics[k]:.3f}" for k in ("precision", "recall", "f1", "phr")))
    return 0


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def render_dot(result: dict) -> str:
    lines = ["digraph hunt {", "  rankdir=LR;", '  node [shape=box, fontname="Helvetica"];']
    names: dict[str, str] = {}

    def node(actor: str, label: str) -> str:
        if actor not in names:
            names[actor] = f"n{len(names)}"
            lines.append(f'  {names[actor]} [label="{_dot_escape(label)}"];')
        return names[actor]

    for rec in result["verified_layer"]:
        s = node(rec["src_actor"], rec["src_label"])
        d = node(rec["dst_actor"], rec["dst_label"])
        lines.append(f'  {s} -> {d} [label="{rec["action"]}", style=solid];')
    for rec in result["inferred_layer"]:
        s = node(rec["src_actor"], rec["src_label"])
        d = node(rec["dst_actor"], rec["dst_label"])
        lines.append(f'  {s} -> {d} [label="{rec["action"]}\\nC_dev={rec["c_dev"]:.3f}", style=dashed];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def render_text(result: dict, timestamps: bool = True) -> str:
    out = []
    if timestamps:
        out.append(f"# generated {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}")
    out.append(f"status: {result['status']}  exhaustion: {result['exhaustion']}")
    out.append(f"verified edges ({len(result['verified_layer'])}):")
    for rec in result["verified_layer"]:
        out.append(f"  {rec['src_label']} -{rec['action']}-> {rec['dst_label']}  [{rec['via']} {rec['event_uid']}]")
    out.append(f"investigative leads ({len(result['inferred_layer'])}):")
    for rec in result["inferred_layer"]:
        out.append(
            f"  {rec['src_label']} -{rec['action']}-> {rec['dst_label']}  C_dev={rec['c_dev']:.3f} graphlet={rec['graphlet_id']}"
        )
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    result = read_json(args.result)
    text = render_text(result, timestamps=not args.no_timestamps)
    if args.out_dot:
        Path(args.out_dot).write_text(render_dot(result), encoding="utf-8")
    if args.out_text:
        Path(args.out_text).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hunter", description="Provenance trace completion under anti-forensic tampering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=0, help="single seed threaded to every random draw")
        return sp

    s = seeded(sub.add_parser("synth", help="generate a synthetic scenario suite"))
    s.add_argument("--preset", required=True, choices=["robustness", "pathlength", "caseK", "small"])
    s.add_argument("--out", required=True)
    s.add_argument("--benign-events", type=int, default=None)
    s.add_argument("--calibration-events", type=int, default=5000)
    s.set_defaults(func=cmd_synth)

    s = seeded(sub.add_parser("perturb", help="apply an anti-forensic profile"))
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--hosts")
    s.add_argument("--profile", required=True, choices=[x.value for x in Profile])
    s.add_argument("--rate", type=float, default=0.30)
    s.add_argument("--timestomp-lo", type=float, default=60.0)
    s.add_argument("--timestomp-hi", type=float, default=3600.0)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_perturb)

    s = seeded(sub.add_parser("calibrate", help="fit a calibration profile"))
    s.add_argument("--benign", required=True)
    s.add_argument("--benign-hosts")
    s.add_argument("--tune", required=True, help="directory of tuning scenarios (synth output)")
    s.add_argument("--kb", required=True)
    s.add_argument("--test-family", action="append", help="family quarantined from calibration (repeatable)")
    s.add_argument("--channels", nargs="+", default=["etw", "netflow", "vmi"])
    s.add_argument("--grid-step", type=float, default=0.1)
    s.add_argument("--loeo-edges", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = seeded(sub.add_parser("hunt", help="search for anchor-to-target paths"))
    s.add_argument("--trace", required=True)
    s.add_argument("--labels")
    s.add_argument("--aliases")
    s.add_argument("--hosts")
    s.add_argument("--profile")
    s.add_argument("--kb", required=True)
    s.add_argument("--anchor", required=True, help="node JSON, or @file")
    s.add_argument("--target", required=True, help="node JSON, or @file")
    s.add_argument("--beam-width", type=int, default=None)
    s.add_argument("--exclude-family", action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_hunt)

    s = seeded(sub.add_parser("evaluate", help="score a hunt result"))
    s.add_argument("--result", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--truth", help="unperturbed trace holding the labelled events")
    s.add_argument("--aliases")
    s.add_argument("--hosts")
    s.add_argument("--rules")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = seeded(sub.add_parser("report", help="render a hunt result as text and DOT"))
    s.add_argument("--result", required=True)
    s.add_argument("--out-dot")
    s.add_argument("--out-text")
    s.add_argument("--no-timestamps", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hunter {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"hunter {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
