"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (
    LabeledExample,
    evaluate,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
    train,
)
from .errors import DataError, FingerprintError, ValidationError
from .harness import (
    REPRESENTATIONS,
    SWEEP_LEVELS,
    ExperimentSpec,
    build_all_datasets,
    generate_population,
    run_domain_adaptation,
    run_scalability,
    separability_sweep,
)
from .impairments import save_population
from .channel import save_domains
from .signal_core import read_cf32
from .vfdt import VfdtConfig, vfdt

log = logging.getLogger("vfdt_fingerprint")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec() if args.spec is None else ExperimentSpec.from_json_file(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if getattr(args, "representation", None):
        spec = replace(spec, representations=(args.representation,))
    return spec


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def save_examples(examples, path, representation: str) -> None:
    np.savez_compressed(
        path,
        features=np.stack([ex.features for ex in examples]).astype(np.float32),
        device_label=np.array([ex.device_label for ex in examples], dtype=np.int64),
        domain_label=np.array([ex.domain_label for ex in examples]),
        representation=np.array(representation),
    )


def load_examples(path) -> tuple[list[LabeledExample], str]:
    try:
        with np.load(path, allow_pickle=False) as data:
            feats, labels, domains = data["features"], data["device_label"], data["domain_label"]
            rep = str(data["representation"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: not a dataset written by 'simulate' ({exc})") from exc
    return [LabeledExample(f, int(y), str(d)) for f, y, d in zip(feats, labels, domains)], rep


def cmd_simulate(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args)
    population = generate_population(spec.population_size, spec.seed)
    save_population(population, out / "population.json")
    save_domains(spec.domains(), out / "domains.json")
    datasets = build_all_datasets(spec, population, log.info)
    for rep, examples in datasets.items():
        save_examples(examples, out / f"dataset_{rep}.npz", rep)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wrote {len(population)} devices and {sum(len(v) for v in datasets.values())} examples to {out}")
    return 0


def cmd_vfdt(args) -> int:
    cfg = VfdtConfig() if args.spec is None else VfdtConfig.from_json(Path(args.spec).read_text())
    stream = read_cf32(args.input)
    out = _out_dir(args)
    stem = Path(args.input).stem
    for rail, values in (("i", stream.samples.real), ("q", stream.samples.imag)):
        trace = vfdt(values, cfg)
        path = out / f"{stem}_{rail}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "value"])
            w.writerows((k, repr(float(v))) for k, v in enumerate(trace.values))
        print(f"{path}: {len(trace)} values")
    return 0


def _dataset_for(args, spec: ExperimentSpec):
    if args.dataset:
        examples, rep = load_examples(args.dataset)
        if args.representation and args.representation != rep:
            raise ValidationError(f"dataset holds {rep} features, not {args.representation}")
        return examples, rep
    rep = spec.representations[0]
    return build_all_datasets(replace(spec, representations=(rep,)), log_progress=log.info)[rep], rep


def cmd_train(args) -> int:
    spec = _load_spec(args)
    examples, rep = _dataset_for(args, spec)
    examples = [ex for ex in examples if ex.domain_label in spec.train_domains]
    if not examples:
        raise ValidationError(f"no examples from train domains {list(spec.train_domains)}")
    n_classes = max(ex.device_label for ex in examples) + 1
    cnn_cfg = replace(spec.cnn_config, num_classes=n_classes)
    model, history = train(examples, cnn_cfg, spec.train_config, log=lambda r: log.info("epoch %(epoch)d loss %(loss).4f", r))
    out = _out_dir(args)
    save_checkpoint(model.model, out / "model.pt", {"representation": rep, "train_domains": list(spec.train_domains)})
    (out / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    print(f"held-out accuracy {history[-1]['test_accuracy']:.4f}; model written to {out / 'model.pt'}")
    return 0


def cmd_eval(args) -> int:
    if not args.model or not args.dataset:
        raise ValidationError("eval needs --model and --dataset")
    model, extra = load_checkpoint(args.model)
    examples, rep = load_examples(args.dataset)
    if extra.get("representation") not in (None, rep):
        raise ValidationError(f"model expects {extra['representation']} features, dataset holds {rep}")
    out = _out_dir(args)
    rows = []
    for domain in sorted({ex.domain_label for ex in examples}):
        subset = [ex for ex in examples if ex.domain_label == domain]
        accuracy, confusion = evaluate(model, subset)
        np.savetxt(out / f"confusion_{rep}_{domain}.csv", confusion, fmt="%d", delimiter=",")
        rows.append((rep, domain, len(subset), accuracy))
        print(f"{domain}: {accuracy:.4f} ({len(subset)} examples)")
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["representation", "test_domain", "n_examples", "accuracy"])
        w.writerows((r, d, n, repr(a)) for r, d, n, a in rows)
    return 0


def _print_report(report) -> None:
    for c in report.cells:
        print(f"{c.representation:7s} train={'+'.join(c.train_domains):6s} test={c.test_domain:3s} "
              f"n={c.n_devices:3d} accuracy={c.accuracy:.4f}")


def cmd_domain_adapt(args) -> int:
    report = run_domain_adaptation(_load_spec(args), log_progress=log.info)
    report.write(_out_dir(args))
    _print_report(report)
    return 0


def cmd_scale(args) -> int:
    spec = _load_spec(args)
    if spec.device_subset_sizes is None:
        sizes = tuple(n for n in (15, 20, 25, 30) if n <= spec.population_size)
        spec = replace(spec, device_subset_sizes=sizes or (spec.population_size,))
    report = run_scalability(spec, log_progress=log.info)
    report.write(_out_dir(args))
    _print_report(report)
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_check(tiny_config(seed=args.seed or 0), tolerance=args.tolerance, seed=args.seed or 0)
    print(
        f"max relative error {report.max_relative_error:.3e} (tolerance {report.tolerance:g}) over "
        f"{report.n_parameters} parameters, {report.n_kink_skipped} skipped at kinks: "
        f"{'PASS' if report.passed else 'FAIL'}"
    )
    return 0 if report.passed else 2


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    params = [args.parameter] if args.parameter else list(SWEEP_LEVELS)
    with open(out / "sweeps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "level", "mean", "std"])
        for p in params:
            r = separability_sweep(p, seed=args.seed or 0)
            w.writerows((p, lv, repr(m), repr(s)) for lv, m, s in zip(r.levels, r.means, r.stds))
            seps = ", ".join(f"{s:.2f}" for s in r.separations)
            print(f"{p}: monotone={r.strictly_monotone} separations=[{seps}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vfdt-fp", description="VFDT device fingerprinting toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default=".", representation=True):
        p.add_argument("--spec", help="experiment spec JSON (VfdtConfig JSON for 'vfdt')")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", default=out_default, help="output directory")
        if representation:
            p.add_argument("--representation", choices=REPRESENTATIONS)
        return p

    common(sub.add_parser("simulate", help="generate a population and datasets")).set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("vfdt", help="VFDT traces of a cf32 capture"), representation=False)
    p.add_argument("input", help="cf32 file with a .json sidecar")
    p.set_defaults(func=cmd_vfdt)
    p = common(sub.add_parser("train", help="train one classifier"))
    p.add_argument("--dataset", help="dataset .npz from 'simulate' (generated from --spec if omitted)")
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="score a saved model per domain"))
    p.add_argument("--model", help="model.pt from 'train'")
    p.add_argument("--dataset", help="dataset .npz from 'simulate'")
    p.set_defaults(func=cmd_eval)
    common(sub.add_parser("domain-adapt", help="cross-domain experiment")).set_defaults(func=cmd_domain_adapt)
    common(sub.add_parser("scale", help="nested device-subset experiment")).set_defaults(func=cmd_scale)
    p = common(sub.add_parser("gradcheck", help="finite-difference check of the network"), representation=False)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    p = common(sub.add_parser("sweep", help="single-impairment separability sweeps"), representation=False)
    p.add_argument("--parameter", choices=sorted(SWEEP_LEVELS))
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FingerprintError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
