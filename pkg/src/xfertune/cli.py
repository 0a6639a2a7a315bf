"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from .core import ValidationError
from .ingest import parse_log, write_log
from .kb import KBConfig, KnowledgeBase, KnowledgeBaseError, atomic_write, build, update
from .sampler import SamplerConfig, adaptive_sampling
from .simulator import (DEFAULT_COVERAGE, Coverage, SimBackend, SimScenario, dataset_from_dict,
                        generate_corpus, load_scenario, network_from_dict)

log = logging.getLogger("xfertune")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _batch_id(path: Path) -> str:
    digest = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
    return f"{path.name}:{digest}"


def _load_batches(paths, fmt=None):
    batches = []
    for p in paths:
        res = parse_log(p, fmt)
        for r in res.rejected:
            print(f"{p}: {r}", file=sys.stderr)
        batches.append((_batch_id(Path(p)), res.entries))
    return batches


def _profile(path):
    d = _read_json(path)
    net = network_from_dict(d["network"] if "network" in d else d)
    ds = dataset_from_dict(d["dataset"]) if "dataset" in d else None
    return net, ds


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(a) -> int:
    entries, rejected = [], 0
    for p in a.logs:
        res = parse_log(p, a.format)
        entries += res.entries
        rejected += len(res.rejected)
        for r in res.rejected:
            print(f"{p}: {r}", file=sys.stderr)
    if a.out:
        buf = io.StringIO()
        write_log(entries, buf)
        atomic_write(a.out, buf.getvalue())
    print(f"{len(entries)} entries accepted, {rejected} rejected")
    return EXIT_OK


def cmd_simgen(a) -> int:
    sc = load_scenario(a.scenario)
    if sc.dataset is None:
        raise ValidationError("dataset", "scenario file needs a dataset for corpus generation")
    if a.full:
        cov = Coverage.full(pp=tuple(int(v) for v in a.pp.split(",")))
    else:
        cov = DEFAULT_COVERAGE
    seed = sc.seed if a.seed is None else a.seed
    entries = generate_corpus([sc], cov, a.repeats, seed, load_spread=a.load_spread)
    buf = io.StringIO()
    n = write_log(entries, buf)
    atomic_write(a.out, buf.getvalue())
    print(f"wrote {n} entries to {a.out}")
    return EXIT_OK


def cmd_analyze(a) -> int:
    batches = _load_batches(a.logs, a.format)
    cfg = KBConfig(m_range=(a.m_min, a.m_max), method=a.method, seed=a.seed)
    kb = build(batches, cfg)
    kb.save(a.out)
    print(f"{len(kb.clusters)} clusters, "
          f"{sum(len(c.bands) for c in kb.clusters)} surfaces -> {a.out}")
    return EXIT_OK


def cmd_update(a) -> int:
    kb = KnowledgeBase.load(a.kb)
    for bid, entries in _load_batches(a.logs, a.format):
        kb = update(kb, entries, bid)
    kb.save(a.out or a.kb)
    print(f"{len(kb.clusters)} clusters after update")
    return EXIT_OK


def _query_json(kb: KnowledgeBase, net, ds) -> dict:
    q = kb.query(ds, net)
    surfaces = []
    for s in q.surfaces:
        prm, val = s.precomputed_argmax
        surfaces.append({"load_tag": round(s.load_tag, 6),
                         "argmax": {"cc": prm.cc, "p": prm.p, "pp": prm.pp},
                         "predicted_mbps": round(val, 6),
                         "low_confidence": s.low_confidence})
    return {"cluster": q.cluster_id, "distance": round(q.distance, 9), "surfaces": surfaces,
            "region": q.region.to_dict()}


def cmd_query(a) -> int:
    kb = KnowledgeBase.load(a.kb)
    net, ds = _profile(a.profile)
    if ds is None:
        raise ValidationError("dataset", "profile needs a dataset section")
    text = json.dumps(_query_json(kb, net, ds), indent=1, sort_keys=True) + "\n"
    if a.out:
        atomic_write(a.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _schedule(path):
    d = _read_json(path)
    if isinstance(d, dict):
        d = d["schedule"]
    return [(float(t), float(i)) for t, i in d]


def cmd_transfer(a) -> int:
    if a.backend != "sim":
        raise UsageError(f"unknown backend {a.backend!r}")
    kb = KnowledgeBase.load(a.kb)
    net, ds = _profile(a.profile)
    ds = dataset_from_dict(_read_json(a.dataset)) if a.dataset else ds
    if ds is None:
        raise ValidationError("dataset", "no dataset given")
    schedule = _schedule(a.sim_load) if a.sim_load else [(0.0, 0.0)]
    sc = SimScenario(net, schedule, a.noise, a.sim_seed, ds)
    q = kb.query(ds, net)
    tr = adaptive_sampling(q.surfaces, q.region, q.load_tags, ds, SimBackend(sc, ds),
                           SamplerConfig(window=a.window))
    atomic_write(a.out, tr.to_csv())
    status = "aborted" if tr.aborted else ("pinned" if tr.pinned else "ok")
    print(f"{len(tr.rows)} chunks, {tr.sample_count} samples, status {status} -> {a.out}")
    if tr.aborted:
        print(f"transfer aborted: {tr.error}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_bench(a) -> int:
    from .bench import report_csv, run_bench
    rows, setup = run_bench(a.seed, range(a.seeds))
    header = {"seed": a.seed, "split": "70/30 by profile",
              "train_profiles": " ".join(p.name for p in setup.train),
              "test_profiles": " ".join(p.name for p in setup.test)}
    atomic_write(a.out, report_csv(rows, header))
    failed = [r for r in rows if not r["pass"]]
    print(f"{len(rows)} rows, {len(failed)} failing -> {a.out}")
    return EXIT_OK


def cmd_report(a) -> int:
    from .bench import report_markdown
    md = report_markdown(Path(a.input).read_text())
    if a.out:
        atomic_write(a.out, md)
    else:
        sys.stdout.write(md)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xfertune", description="Historical-log driven transfer tuning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("ingest", help="validate log files")
    s.add_argument("--logs", nargs="+", required=True)
    s.add_argument("--format", choices=["jsonl", "csv"])
    s.add_argument("--out", help="write accepted entries as JSONL")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("simgen", help="generate a synthetic log corpus")
    s.add_argument("--scenario", required=True)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--full", action="store_true", help="full cc x p lattice")
    s.add_argument("--pp", default="1,8,16,32", help="pp values with --full")
    s.add_argument("--load-spread", type=float, default=0.0)
    s.set_defaults(func=cmd_simgen)

    s = sub.add_parser("analyze", help="build a knowledge base")
    s.add_argument("--logs", nargs="+", required=True)
    s.add_argument("--format", choices=["jsonl", "csv"])
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--m-min", type=int, default=2)
    s.add_argument("--m-max", type=int, default=8)
    s.add_argument("--method", choices=["kmeanspp", "hac"], default="kmeanspp")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("update", help="fold new logs into a knowledge base")
    s.add_argument("--kb", required=True)
    s.add_argument("--logs", nargs="+", required=True)
    s.add_argument("--format", choices=["jsonl", "csv"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_update)

    s = sub.add_parser("query", help="surfaces for a transfer profile")
    s.add_argument("--kb", required=True)
    s.add_argument("--profile", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("transfer", help="run adaptive sampling against a backend")
    s.add_argument("--kb", required=True)
    s.add_argument("--profile", required=True)
    s.add_argument("--dataset")
    s.add_argument("--backend", default="sim")
    s.add_argument("--sim-seed", type=int, default=0)
    s.add_argument("--sim-load")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--window", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("bench", help="run the benchmark matrix")
    s.add_argument("--out", default="bench_report.csv")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="render a bench CSV as Markdown")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, KnowledgeBaseError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


run_command = main

if __name__ == "__main__":
    sys.exit(main())
