"""Command-line interface: every pipeline stage and diagnostic as a subcommand.

Exit codes: 0 on success, 1 on user error (bad flags, bad files, invalid
values) with a one-line remedy, 2 on internal error. All randomness is
controlled by explicit seed flags; ``--config`` loads defaults that
individual flags override.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from .attention import (
    mask_stability_report,
    perturbation_bound_check,
    random_attention_instance,
    scale_perturbation,
)
from .checkpoint import (
    fingerprint,
    load_paramset,
    load_prototypes,
    load_sparse_delta,
    save_paramset,
    save_prototypes,
    save_sparse_delta,
)
from .config import RunConfig, build_run_config, load_config_file
from .deltas import collision_report, compute_delta, delta_cosine_matrix, mask_delta, merge_deltas
from .errors import SotuError
from .harness import evaluate_accuracy, pretrain_backbone, run_sotu, sweep_mask_rate
from .prototypes import Projection, ProjectionSpec, build_prototypes
from .report import fmt, render_matrix_svg, write_collision_csv, write_matrix_csv, write_stability_csv
from .training import Hyper, embedding_dim, load_labeled_csv, train

_CONFIG_DEFAULTS = {f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise _UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="flat key=value config file supplying defaults")
    group = parser.add_argument_group("config overrides")
    for name, default in _CONFIG_DEFAULTS.items():
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}",
                           metavar="V", help=f"config key {name} (default: {shown})")


def _config_from(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {}
    for name in _CONFIG_DEFAULTS:
        value = getattr(args, f"cfg_{name}", None)
        if value is not None:
            overrides[name] = value
    return build_run_config(file_values, overrides)


def _parse_rates(raw: str) -> list[float]:
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise _UsageError(f"--rates must be comma-separated numbers, got {raw!r}") from None


def _load_deltas(paths):
    return [load_sparse_delta(p) for p in paths]


def cmd_pretrain(args) -> int:
    cfg = _config_from(args)
    backbone = pretrain_backbone(cfg)
    save_paramset(backbone, args.out)
    print(f"wrote {args.out} (fingerprint {fingerprint(backbone).hex()[:16]})")
    return 0


def cmd_finetune(args) -> int:
    init = load_paramset(args.base)
    data = load_labeled_csv(args.data)
    hyper = Hyper(args.lr, args.epochs, args.batch_size, args.seed)
    result = train(init, data, hyper, args.activation)
    save_paramset(result.backbone, args.out)
    if args.save_head:
        save_paramset(result.head, args.save_head)
    last = f", final loss {result.epoch_losses[-1]:.6f}" if result.epoch_losses else ""
    print(f"wrote {args.out} ({hyper.epochs} epochs{last})")
    return 0


def cmd_delta(args) -> int:
    delta = compute_delta(load_paramset(args.ft), load_paramset(args.pre))
    save_paramset(delta, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_mask(args) -> int:
    delta = load_paramset(args.in_path)
    base = load_paramset(args.base)
    sparse = mask_delta(delta, args.p, args.seed, fingerprint(base))
    save_sparse_delta(sparse, args.out)
    print(f"wrote {args.out} ({sparse.kept_count()} of {sparse.total_size()} coordinates kept)")
    return 0


def cmd_merge(args) -> int:
    base = load_paramset(args.base)
    merged = merge_deltas(base, _load_deltas(args.deltas))
    save_paramset(merged, args.out)
    print(f"wrote {args.out} ({len(args.deltas)} deltas merged)")
    return 0


def cmd_similarity(args) -> int:
    deltas = _load_deltas(args.deltas)
    matrix = delta_cosine_matrix(deltas)
    labels = list(range(1, len(deltas) + 1))
    write_matrix_csv(args.out, matrix, labels)
    if args.svg:
        render_matrix_svg(args.svg, matrix, labels, "masked-delta cosine similarity")
    print(f"wrote {args.out}")
    return 0


def cmd_collisions(args) -> int:
    deltas = _load_deltas(args.deltas)
    report = collision_report(deltas)
    write_collision_csv(args.out, report, list(range(1, len(deltas) + 1)))
    print(f"wrote {args.out} (multi-collision rate {report.multi_collision_rate:.6f})")
    return 0


def _projection_for(args, backbone) -> Projection | None:
    if args.proj_dim == 0:
        return None
    embed = embedding_dim(backbone)
    out_dim = 4 * embed if args.proj_dim == -1 else args.proj_dim
    spec = ProjectionSpec(out_dim, args.proj_seed, args.proj_nonlinearity)
    return Projection.from_spec(spec, embed)


def cmd_prototypes(args) -> int:
    backbone = load_paramset(args.backbone)
    data = load_labeled_csv(args.data)
    proj = _projection_for(args, backbone)
    protos = load_prototypes(args.into) if args.into else None
    protos = build_prototypes(backbone, data, args.buffer, proj, protos, args.activation)
    save_prototypes(protos, args.out)
    print(f"wrote {args.out} ({len(protos)} classes)")
    return 0


def cmd_evaluate(args) -> int:
    backbone = load_paramset(args.backbone)
    protos = load_prototypes(args.protos)
    proj = None
    if protos.projection is not None:
        proj = Projection.from_spec(protos.projection, embedding_dim(backbone))
    datasets = [load_labeled_csv(p) for p in args.data]
    accuracy = evaluate_accuracy(backbone, protos, datasets, proj, args.activation)
    print(f"accuracy = {accuracy!r}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("accuracy\n" + fmt(accuracy) + "\n")
    return 0


def cmd_run(args) -> int:
    cfg = _config_from(args)
    record = run_sotu(cfg)
    for k, acc in enumerate(record.accuracies, 1):
        print(f"R_{k} = {acc:.4f}")
    print(f"average accuracy = {record.average:.4f}")
    print(f"final accuracy   = {record.final:.4f}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from(args)
    rows = sweep_mask_rate(cfg, _parse_rates(args.rates))
    for row in rows:
        if row.status == "ok":
            print(f"p={row.mask_rate:g}: avg={row.average:.4f} final={row.final:.4f}")
        else:
            print(f"p={row.mask_rate:g}: {row.status}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_probe_attention(args) -> int:
    inst = random_attention_instance(args.seed, args.n, args.d, args.dk, args.delta_scale)
    if args.max_score_shift:
        inst = scale_perturbation(inst, args.max_score_shift)
    check = perturbation_bound_check(inst)
    print(f"delta_min = {check.delta_min!r}")
    print(f"delta_max = {check.delta_max!r}")
    print(f"max_violation = {check.max_violation!r}")
    reports = [mask_stability_report(inst, rate, args.seed, args.trials)
               for rate in _parse_rates(args.rates)]
    write_stability_csv(args.out, reports)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="sotu", description=__doc__.splitlines()[0],
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "train the shared base checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output .sotu checkpoint path")

    p = add("finetune", cmd_finetune, "fine-tune a checkpoint on one task's CSV")
    p.add_argument("--base", required=True, help="initial .sotu checkpoint")
    p.add_argument("--data", required=True, help="training CSV (header f0..f{d-1},label)")
    p.add_argument("--lr", type=float, default=0.5, help="SGD learning rate")
    p.add_argument("--epochs", type=int, default=150, help="training epochs")
    p.add_argument("--batch-size", type=int, default=8, help="mini-batch size")
    p.add_argument("--seed", type=int, required=True, help="shuffle/head-init seed")
    p.add_argument("--activation", default="tanh", choices=("relu", "tanh"),
                   help="layer nonlinearity")
    p.add_argument("--out", required=True, help="output .sotu backbone path")
    p.add_argument("--save-head", default=None, help="optionally save the task head here")

    p = add("delta", cmd_delta, "subtract a base checkpoint from a fine-tuned one")
    p.add_argument("--ft", required=True, help="fine-tuned .sotu checkpoint")
    p.add_argument("--pre", required=True, help="base .sotu checkpoint")
    p.add_argument("--out", required=True, help="output dense-delta .sotu path")

    p = add("mask", cmd_mask, "randomly zero delta coordinates, store sparsely")
    p.add_argument("--in", dest="in_path", required=True, help="dense-delta .sotu file")
    p.add_argument("--base", required=True, help="base checkpoint the delta came from")
    p.add_argument("--p", type=float, required=True, help="masking rate (zeroing probability)")
    p.add_argument("--seed", type=int, required=True, help="mask seed")
    p.add_argument("--out", required=True, help="output .sdelta path")

    p = add("merge", cmd_merge, "add sparse deltas onto a base checkpoint")
    p.add_argument("--base", required=True, help="base .sotu checkpoint")
    p.add_argument("--deltas", nargs="+", required=True, help=".sdelta files, applied in order")
    p.add_argument("--out", required=True, help="output merged .sotu path")

    p = add("similarity", cmd_similarity, "pairwise cosine matrix of sparse deltas")
    p.add_argument("--deltas", nargs="+", required=True, help=".sdelta files")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--svg", default=None, help="optionally render a heatmap SVG here")

    p = add("collisions", cmd_collisions, "support-overlap report for sparse deltas")
    p.add_argument("--deltas", nargs="+", required=True, help=".sdelta files")
    p.add_argument("--out", required=True, help="output CSV path")

    p = add("prototypes", cmd_prototypes, "build class-mean prototypes from a CSV")
    p.add_argument("--backbone", required=True, help=".sotu checkpoint for embeddings")
    p.add_argument("--data", required=True, help="training CSV for the new classes")
    p.add_argument("--buffer", type=int, default=10, help="examples per class")
    p.add_argument("--into", default=None, help="extend this existing .protos file")
    p.add_argument("--proj-dim", type=int, default=0,
                   help="random-projection width (0 = off, -1 = 4x embedding width)")
    p.add_argument("--proj-seed", type=int, default=0, help="projection seed")
    p.add_argument("--proj-nonlinearity", default="relu", choices=("relu", "none"),
                   help="projection nonlinearity")
    p.add_argument("--activation", default="tanh", choices=("relu", "tanh"),
                   help="backbone nonlinearity")
    p.add_argument("--out", required=True, help="output .protos path")

    p = add("evaluate", cmd_evaluate, "prototype accuracy over pooled test CSVs")
    p.add_argument("--backbone", required=True, help=".sotu checkpoint for embeddings")
    p.add_argument("--protos", required=True, help=".protos prototype set")
    p.add_argument("--data", nargs="+", required=True, help="test CSVs (pooled)")
    p.add_argument("--activation", default="tanh", choices=("relu", "tanh"),
                   help="backbone nonlinearity")
    p.add_argument("--out", default=None, help="optionally write the accuracy as CSV here")

    p = add("run", cmd_run, "full pipeline over a class-incremental stream")
    _add_config_flags(p)

    p = add("sweep", cmd_sweep, "repeat the run across masking rates, plot the result")
    _add_config_flags(p)
    p.add_argument("--rates", required=True, help="comma-separated masking rates")

    p = add("probe-attention", cmd_probe_attention,
            "attention perturbation bound check and mask-stability report")
    p.add_argument("--seed", type=int, default=0, help="instance/mask seed")
    p.add_argument("--n", type=int, default=6, help="number of input rows")
    p.add_argument("--d", type=int, default=8, help="input width")
    p.add_argument("--dk", type=int, default=4, help="query/key width")
    p.add_argument("--delta-scale", type=float, default=0.05, help="perturbation scale")
    p.add_argument("--max-score-shift", type=float, default=0.0,
                   help="if > 0, rescale the perturbation to this score shift")
    p.add_argument("--rates", default="0.0,0.5,0.9", help="comma-separated masking rates")
    p.add_argument("--trials", type=int, default=20, help="mask trials per rate")
    p.add_argument("--out", required=True, help="output stability CSV path")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: run 'sotu COMMAND --help' to see every flag and its default",
              file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"hint: run 'sotu {args.command} --help' to see every flag and its default",
              file=sys.stderr)
        return 1
    except (SotuError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"hint: run 'sotu {args.command} --help' to see every flag and its default",
              file=sys.stderr)
        return 1
    except Exception as exc:  # anything unexpected is an internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
