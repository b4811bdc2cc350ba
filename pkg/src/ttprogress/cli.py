"""Command-line entry point: synth, train, eval, baseline, gradcheck,
report, sweep. Exit codes: 0 success, 1 usage, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as dataio
from .adaptation import AdaptConfig
from .autodiff import Tensor, finite_diff_grad, grad, no_grad
from .evaluation import ClipFtModel, evaluate, render_report, train_clipft
from .model import (init_meta_params, load_checkpoint, predict, save_checkpoint,
                    self_loss)
from .training import NumericalError, TrainConfig, train, window_loss

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _load_synth_spec(path) -> dataio.SynthSpec:
    known = {f.name for f in fields(dataio.SynthSpec)}
    kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'", EXIT_DATA)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise CliError(f"{path}:{lineno}: unknown synth key {key!r}", EXIT_DATA)
        if key == "len_range":
            lo, hi = (int(v) for v in value.split(","))
            kwargs[key] = (lo, hi)
        elif key in ("d", "n_tasks", "n_train", "n_eval", "seed"):
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    try:
        return dataio.SynthSpec(**kwargs)
    except ValueError as e:
        raise CliError(f"invalid synth spec: {e}", EXIT_DATA)


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory {out} is not empty (use --force)", EXIT_USAGE)
    spec = _load_synth_spec(args.spec) if args.spec else dataio.SynthSpec(seed=args.seed)
    if args.seed is not None:
        spec.seed = args.seed
    out.mkdir(parents=True, exist_ok=True)
    bundle = dataio.synth_generate(spec)
    entries = []
    for split, (records, tag) in bundle.items():
        fname = f"{split}.ttpe"
        dataio.save_container(out / fname, records)
        entries.append((split, fname, tag))
    dataio.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(entries)} splits to {out}")
    return EXIT_OK


def _load_splits(manifest, include_train=False, only=None):
    entries = dataio.read_manifest(manifest)
    splits = []
    for split, path, tag in entries:
        if split == "train" and not include_train:
            continue
        if only and split not in only:
            continue
        splits.append((split, dataio.load_container(path), tag))
    return splits


def _train_records(manifest):
    for split, path, tag in dataio.read_manifest(manifest):
        if split == "train":
            records = dataio.load_container(path)
            missing = [r.id for r in records if r.labels is None]
            if missing:
                raise CliError(f"train split records without labels: {missing[:3]}", EXIT_DATA)
            return records
    raise CliError("manifest has no 'train' split", EXIT_DATA)


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.meta_grad:
        cfg.meta_grad_mode = args.meta_grad.replace("-", "_")
    if args.seed is not None:
        cfg.seed = args.seed
    records = _train_records(args.data)
    meta, log = train(records, cfg, log_fn=lambda e: print(
        f"epoch {e['epoch']}: pred={e['pred_loss']:.6f} self={e['self_loss']:.6f} lr={e['lr']:.2e}"))
    save_checkpoint(args.out, meta)
    log_path = Path(args.out).with_suffix(".loss.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "pred_loss", "self_loss", "lr"])
        for e in log:
            w.writerow([e["epoch"], repr(e["pred_loss"]), repr(e["self_loss"]), repr(e["lr"])])
    print(f"checkpoint written to {args.out}; loss log at {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    meta = load_checkpoint(args.model)
    variant = args.variant.upper().replace("TTT-", "")
    try:
        cfg = AdaptConfig(variant=variant, eta=args.eta, k=args.k, t_ep=args.t_ep)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)
    splits = _load_splits(args.data, only=args.splits)
    rows = []

    def collect(split, rec, preds):
        for t, p in enumerate(preds):
            rows.append([split, rec.id, t + 1, repr(float(p))])

    report = evaluate(splits, f"TTT-{variant}", meta=meta, adapt_cfg=cfg,
                      collect_preds=collect)
    print(render_report([report], args.format))
    if args.preds_out:
        with open(args.preds_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "trajectory", "frame", "prediction"])
            w.writerows(rows)
    if args.report_out:
        Path(args.report_out).write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_baseline(args) -> int:
    splits = _load_splits(args.data, only=args.splits)
    method = args.method.lower()
    if method == "clip":
        report = evaluate(splits, "CLIP")
    elif method == "vlmrm":
        if not args.baseline_embedding:
            raise CliError("vlmrm requires --baseline-embedding", EXIT_USAGE)
        base = np.loadtxt(args.baseline_embedding, dtype=np.float64, ndmin=1)
        report = evaluate(splits, "VLM-RM", baseline_goal=base)
    elif method == "clipft":
        if args.checkpoint:
            model = _load_clipft(args.checkpoint)
        else:
            if not args.train:
                raise CliError("clipft requires --checkpoint or --train", EXIT_USAGE)
            cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
            if args.seed is not None:
                cfg.seed = args.seed
            model, _ = train_clipft(_train_records(args.data), cfg)
            if args.checkpoint_out:
                _save_clipft(args.checkpoint_out, model)
        report = evaluate(splits, "CLIP-FT", clipft=model)
    else:
        raise CliError(f"unknown baseline method {args.method!r}", EXIT_USAGE)
    print(render_report([report], args.format))
    if args.report_out:
        Path(args.report_out).write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _save_clipft(path, model: ClipFtModel):
    np.savez(path, P=model.P,
             **{f"head_{n}": np.asarray(t) for n, t in
                zip(model.head_meta.head.field_names(), model.head_meta.head.tensors())})


def _load_clipft(path) -> ClipFtModel:
    from .model import HeadParams, MetaParams, init_meta_params
    z = np.load(path)
    P = z["P"]
    head = HeadParams(W1=z["head_W1"], b1=z["head_b1"], w2=z["head_w2"], b2=z["head_b2"])
    dprime = P.shape[0]
    d = P.shape[1] // 2
    meta = MetaParams(init_meta_params(d, dprime, head.W1.shape[0]).theta0,
                      init_meta_params(d, dprime, head.W1.shape[0]).proj,
                      head, d, dprime, head.W1.shape[0])
    return ClipFtModel(P=P, head_meta=meta)


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    d, dprime = 4, 3
    meta = init_meta_params(d, dprime, dprime, rng)
    x = rng.normal(size=2 * d)
    worst = {}

    def check_group(name, group, loss_builder):
        tensors = group.to_tensors(requires_grad=True)
        loss = loss_builder(tensors)
        gs = grad(loss, tensors.tensors())
        arrays = [np.asarray(t) for t in group.to_arrays().tensors()]

        def fd_loss(arrs):
            with no_grad():
                return loss_builder(group.replace_tensors([Tensor(a) for a in arrs])).item()

        fds = finite_diff_grad(fd_loss, arrays)
        rel = max(
            np.max(np.abs(g.data - f) / (np.abs(f) + 1e-8))
            for g, f in zip(gs, fds)
        )
        worst[name] = float(rel)

    proj_t = meta.proj.to_tensors()
    head_t = meta.head.to_tensors()
    theta_arrays = meta.theta0.to_arrays()
    check_group("theta/self_loss", theta_arrays,
                lambda th: self_loss(Tensor(x), th, proj_t))
    check_group("proj/self_loss", meta.proj.to_arrays(),
                lambda pr: self_loss(Tensor(x), theta_arrays.to_tensors(), pr))
    check_group("theta/pred", theta_arrays,
                lambda th: predict(Tensor(x), th, proj_t, head_t))
    check_group("head/pred", meta.head.to_arrays(),
                lambda hd: predict(Tensor(x), theta_arrays.to_tensors(), proj_t, hd))
    tol = 1e-6
    ok = all(v <= tol for v in worst.values())
    if args.second_order:
        from .data import SynthSpec, synth_generate
        spec = SynthSpec(d=d, n_tasks=1, n_train=1, n_eval=1, len_range=(2, 2), seed=1)
        rec = synth_generate(spec)["train"][0][0]
        cfg = TrainConfig(dprime=dprime, d_head=dprime, w_tr=2, b=1, lambda_self=0.3,
                          eta_inner=0.05, meta_grad_mode="exact")
        from .training import candidate_windows
        window = candidate_windows(rec, 2, 1)[0]
        from .training import _flatten_meta, _meta_tensors, _rebuild_meta
        meta_t = _meta_tensors(meta)
        leaves = _flatten_meta(meta_t)
        loss = window_loss(window, meta_t, cfg)
        gs = grad(loss, leaves)
        arrays = [np.array(a) for a in meta.to_arrays().flat_arrays()]

        def fd_loss(arrs):
            rebuilt = _meta_tensors(_rebuild_meta(meta, [np.asarray(a) for a in arrs]))
            return float(window_loss(window, rebuilt, cfg).data)

        fds = finite_diff_grad(fd_loss, arrays, step=1e-5)
        rel2 = max(np.max(np.abs(g.data - f) / (np.abs(f) + 1e-6))
                   for g, f in zip(gs, fds))
        worst["meta/unrolled"] = float(rel2)
        ok = ok and rel2 <= 1e-4
    for name, val in sorted(worst.items()):
        print(f"{name}: max rel err {val:.3e}")
    if not ok:
        print("gradcheck FAILED")
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import EvalReport, SplitResult
    reports = []
    for path in args.inputs:
        payload = json.loads(Path(path).read_text())
        items = payload if isinstance(payload, list) else [payload]
        for item in items:
            r = EvalReport(estimator=item["estimator"])
            for s in item["splits"]:
                voc = [(s["mean_voc"], False)]  # aggregate-only reload
                sr = SplitResult(s["split"], s["shift"], item["estimator"], voc, s["degenerate"])
                r.add(sr)
            reports.append(r)
    print(render_report(reports, args.format))
    return EXIT_OK


def cmd_sweep(args) -> int:
    meta = load_checkpoint(args.model)
    splits = _load_splits(args.data, only=args.splits)
    etas = [float(v) for v in args.etas.split(",")]
    ks = [int(v) for v in args.ks.split(",")]
    variant = args.variant.upper().replace("TTT-", "")
    print("eta\tk\tmean_voc")
    for eta in etas:
        for k in ks:
            try:
                cfg = AdaptConfig(variant=variant, eta=eta, k=k, t_ep=args.t_ep)
            except ValueError:
                continue
            report = evaluate(splits, f"TTT-{variant}", meta=meta, adapt_cfg=cfg)
            mean = np.mean([s.mean_voc for s in report.splits])
            print(f"{eta}\t{k}\t{mean:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttprogress",
                                description="test-time-adaptive task progress estimation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic benchmark")
    s.add_argument("--spec", help="synth spec file (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="meta-train a checkpoint")
    s.add_argument("--data", required=True, help="dataset manifest")
    s.add_argument("--config", help="training config file")
    s.add_argument("--out", required=True, help="checkpoint path (.ttpm)")
    s.add_argument("--meta-grad", choices=["exact", "first-order"])
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a TTT variant")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--variant", required=True,
                   choices=["ttt-im", "ttt-ex", "ttt-tr", "ttt-rs"])
    s.add_argument("--eta", type=float, default=None)
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--t-ep", type=int, default=1)
    s.add_argument("--format", choices=["tsv", "md", "json"], default="tsv")
    s.add_argument("--splits", nargs="*", default=None)
    s.add_argument("--preds-out", help="per-frame prediction CSV")
    s.add_argument("--report-out", help="JSON report path")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("baseline", help="evaluate a non-TTT baseline")
    s.add_argument("--method", required=True, choices=["clip", "vlmrm", "clipft"])
    s.add_argument("--data", required=True)
    s.add_argument("--baseline-embedding", help="reference prompt vector (text file)")
    s.add_argument("--checkpoint", help="saved clipft regressor (.npz)")
    s.add_argument("--checkpoint-out")
    s.add_argument("--train", action="store_true", help="train clipft from the manifest")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--format", choices=["tsv", "md", "json"], default="tsv")
    s.add_argument("--splits", nargs="*", default=None)
    s.add_argument("--report-out")
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--second-order", action="store_true")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("report", help="merge JSON reports into one table")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--format", choices=["tsv", "md", "json"], default="md")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("sweep", help="grid sweep over eta and k")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--variant", default="ttt-ex")
    s.add_argument("--etas", default="0.01,0.1,1.0")
    s.add_argument("--ks", default="0,3,7")
    s.add_argument("--t-ep", type=int, default=1)
    s.add_argument("--splits", nargs="*", default=None)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except dataio.DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
