"""Command-line entry point: ``dacrl generate | train | adapt | evaluate | report | verify``.

Exit codes: 0 success, 2 validation error, 3 numerical abort. The workspace root is
taken from ``$DACRL_WORKSPACE`` (default ``./dacrl-workspace``).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adaptation import SharedSpace, shared_variables
from .checkpoint import (
    atomic_write_json,
    atomic_write_text,
    file_sha256,
    load_arrays,
    load_module,
    save_arrays,
    save_module,
)
from .config import RunConfig, RunPaths, build_config, load_config, read_config_text
from .data import CohortSplit, ValidationError, read_trajectories, split_cohort, write_trajectories
from .evaluation import (
    EvalReport,
    acc_from_flat,
    descriptive_reports,
    estimated_mortality,
    fit_calibration,
    render_figures,
    smooth_deterministic,
    train_action_risk_model,
    wis,
)
from .nn_utils import freeze
from .pipeline import (
    Datasets,
    adapt_to_target,
    build_datasets,
    embedding_for,
    fit_source_dynamics,
    policy_wis,
    prepare_target,
    target_synthetic,
)
from .resampling import RiskModel, RiskScorer
from .rewards import BehaviorClone, NumeratorModel, clone_outputs, terminal_rewards
from .synthetic import SyntheticGroundTruth, simulate_cohort
from .trainer import ABLATIONS, DACModel, NumericalAbort, PolicySnapshot, assemble_pretrained, pretrain, train_dac

log = logging.getLogger("dacrl")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3


# ---------------------------------------------------------------------------
# Run context and manifests


@dataclass
class Context:
    cfg: RunConfig
    paths: RunPaths
    force: bool = False

    @property
    def model_hash(self) -> str:
        return self.cfg.data_hash()

    def stamp(self) -> dict:
        return {"run_id": self.cfg.run_id, "config_hash": self.cfg.config_hash, "model_hash": self.model_hash}

    def data_stamp(self) -> dict:
        return {"data_id": self.paths.data_id, "data_hash": self.cfg.data_hash()}

    def report_path(self, suffix: str) -> Path:
        return self.paths.reports / f"{self.cfg.run_id}_{suffix}"


def _manifest_path(directory: Path) -> Path:
    return directory / "manifest.json"


def read_manifest(directory: Path) -> dict | None:
    p = _manifest_path(directory)
    return json.loads(p.read_text()) if p.exists() else None


def record_files(directory: Path, header: dict, files: list[Path]) -> None:
    """Merge ``files`` (with fresh sha256) into the directory's manifest."""
    manifest = read_manifest(directory) or {**header, "files": {}}
    manifest.update(header)
    for f in files:
        manifest["files"][str(Path(f).relative_to(directory))] = file_sha256(f)
    manifest["files"] = dict(sorted(manifest["files"].items()))
    atomic_write_json(_manifest_path(directory), manifest)


def _csv_text(stamp: dict, header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(stamp, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_config_snapshot(ctx: Context) -> Path:
    path = ctx.paths.run_dir / "config.cfg"
    atomic_write_text(path, "# " + json.dumps(ctx.stamp(), sort_keys=True) + "\n" + ctx.cfg.to_text())
    return path


# ---------------------------------------------------------------------------
# Data access


@dataclass
class LoadedData:
    source: list
    source_gt: SyntheticGroundTruth
    target: list
    target_gt: SyntheticGroundTruth
    split: CohortSplit


def load_data(ctx: Context) -> LoadedData:
    d = ctx.paths.data
    if read_manifest(d) is None:
        raise ValidationError(f"no data at {d}; run 'dacrl generate' with the same config first")
    src, _ = read_trajectories(d / "source.jsonl")
    tgt, _ = read_trajectories(d / "target.jsonl")
    split = CohortSplit.from_json(json.loads((d / "split.json").read_text()))
    return LoadedData(src, SyntheticGroundTruth.load(d / "source_truth.npz"), tgt, SyntheticGroundTruth.load(d / "target_truth.npz"), split)


def datasets(ctx: Context, data: LoadedData) -> Datasets:
    return build_datasets(data.source, data.source_gt, data.split, ctx.cfg.run, ctx.cfg.V, levels=ctx.cfg.synthetic.num_levels)


def load_pretrained(ctx: Context, ds: Datasets):
    emb = embedding_for(ds, ctx.cfg.k)
    ck = ctx.paths.checkpoints
    risk = RiskModel(emb)
    load_module(ck / "risk.npz", risk, ctx.model_hash, "model_hash")
    numerator = NumeratorModel()
    load_module(ck / "numerator.npz", numerator, ctx.model_hash, "model_hash")
    clone = BehaviorClone(emb, ds.n_actions)
    load_module(ck / "clone.npz", clone, ctx.model_hash, "model_hash")
    return assemble_pretrained(
        RiskScorer(freeze(risk)), freeze(numerator), freeze(clone), ds.train, ds.levels, ctx.cfg.pretrain.clip
    )


def load_policy(ctx: Context, ds: Datasets, name: str = "policy.npz") -> PolicySnapshot:
    model = DACModel(embedding_for(ds, ctx.cfg.k), ds.n_actions)
    meta = load_module(ctx.paths.checkpoints / name, model, ctx.model_hash, "model_hash")
    return PolicySnapshot(freeze(model), ctx.cfg.train, int(meta.get("epoch", 0)), float(meta.get("val_wis", float("nan"))))


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(ctx: Context) -> None:
    d = ctx.paths.data
    if read_manifest(d) is not None and not ctx.force:
        raise ValidationError(f"data {ctx.paths.data_id} already exists; pass --force to regenerate")
    stamp = ctx.data_stamp()
    trajs, gt = simulate_cohort(ctx.cfg.synthetic)
    t_trajs, t_gt = simulate_cohort(target_synthetic(ctx.cfg))
    split = split_cohort(gt.patient_ids, ctx.cfg.seed)
    files = [d / "source.jsonl", d / "source_truth.npz", d / "target.jsonl", d / "target_truth.npz", d / "split.json", d / "config.cfg"]
    write_trajectories(files[0], trajs, {**stamp, "cohort": "source"})
    gt.save(files[1], stamp)
    write_trajectories(files[2], t_trajs, {**stamp, "cohort": "target"})
    t_gt.save(files[3], stamp)
    atomic_write_json(files[4], {**stamp, **split.to_json()})
    atomic_write_text(files[5], "# " + json.dumps(stamp, sort_keys=True) + "\n" + ctx.cfg.to_text())
    record_files(d, stamp, files)
    print(f"{ctx.paths.data_id}: {len(trajs)} source patients (mortality {gt.labels.mean():.3f}), {len(t_trajs)} target patients")


def cmd_train(ctx: Context, resume: bool = False) -> None:
    run_dir, ck = ctx.paths.run_dir, ctx.paths.checkpoints
    log_path = run_dir / "train_log.jsonl"
    if (ck / "policy.npz").exists() and not (ctx.force or resume):
        raise ValidationError(f"run {ctx.cfg.run_id} is already trained; pass --force to retrain or --resume")
    data = load_data(ctx)
    ds = datasets(ctx, data)
    emb = embedding_for(ds, ctx.cfg.k)
    stamp = ctx.stamp()
    written = [_write_config_snapshot(ctx)]
    written.append(atomic_write_json(run_dir / "bins.json", {**stamp, **ds.bins.to_json()}))
    init_state, start_epoch = None, 0
    if resume:
        pre = load_pretrained(ctx, ds)
        epochs = sorted(ck.glob("dac_epoch*.npz"))
        if epochs:
            arrays, meta = load_arrays(epochs[-1])
            if meta.get("model_hash") != ctx.model_hash:
                raise ValidationError(f"{epochs[-1]}: checkpoint belongs to a different data/model config")
            init_state = {k: torch.as_tensor(v) for k, v in arrays.items()}
            start_epoch = int(meta["epoch"])
        log.info("resuming at epoch %d", start_epoch)
    else:
        for f in list(ck.glob("dac_epoch*.npz")) + [log_path]:
            if f.exists():
                f.unlink()
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path.write_text(json.dumps(stamp, sort_keys=True) + "\n", encoding="utf-8")
        pre = pretrain(ds.train, emb, ds.n_actions, ctx.cfg.pretrain, ds.levels)
        for name, module in (("risk", pre.risk.model), ("numerator", pre.numerator), ("clone", pre.clone)):
            written.append(save_module(ck / f"{name}.npz", module, {**stamp, "component": name}))
    try:
        train_dac(
            ds.train,
            pre,
            ctx.cfg.train,
            emb,
            ds.n_actions,
            ds.validation,
            clone_outputs(pre.clone, ds.validation, ds.levels).action_probs,
            checkpoint_dir=ck,
            log_path=log_path,
            init_state=init_state,
            start_epoch=start_epoch,
            checkpoint_meta=stamp,
        )
    except NumericalAbort as exc:
        atomic_write_json(run_dir / "abort.json", {**stamp, "losses": exc.args[0] if exc.args else None})
        raise
    history = [r for r in map(json.loads, log_path.read_text().splitlines()) if "epoch" in r]
    best = _best_epoch(history)
    arrays, meta = load_arrays(ck / f"dac_epoch{best:03d}.npz")
    meta.update(stamp, val_wis=next(h["val_wis"] for h in history if h["epoch"] == best))
    written.append(save_arrays(ck / "policy.npz", arrays, meta))
    written += sorted(ck.glob("dac_epoch*.npz")) + [log_path]
    written.append(atomic_write_json(run_dir / "train_summary.json", {**stamp, "best_epoch": best, "history": history}))
    record_files(run_dir, stamp, written)
    print(f"{ctx.cfg.run_id}: trained {len(history)} epochs, best epoch {best} (validation WIS {meta['val_wis']:.3f})")


def _best_epoch(history: list[dict]) -> int:
    """Highest validation WIS; earliest epoch on ties; the last epoch if none is finite."""
    finite = [h for h in history if h["val_wis"] is not None and np.isfinite(h["val_wis"])]
    if not finite:
        return history[-1]["epoch"]
    return max(finite, key=lambda h: (h["val_wis"], -h["epoch"]))["epoch"]


def cmd_adapt(ctx: Context) -> None:
    data = load_data(ctx)
    ds = datasets(ctx, data)
    source = load_policy(ctx, ds)
    stamp = ctx.stamp()
    tgt = prepare_target(ctx.cfg, ds.bins, data.target, data.target_gt)
    space = SharedSpace.fit(ds.train, shared_variables(ds.train, tgt.test))
    f_source = fit_source_dynamics(source, ds.train, space, ds.n_actions, ctx.cfg.adapt, ctx.cfg.seed)
    target_train = tgt.training(ctx.cfg.adapt.fraction)
    adapted = adapt_to_target(source, f_source, target_train, ds.train, ctx.cfg, ds.n_actions)
    ck, written = ctx.paths.checkpoints, [_write_config_snapshot(ctx)]
    written.append(save_module(ck / "dynamics_source.npz", f_source, {**stamp, "component": "dynamics_source"}))
    written.append(save_module(ck / "dynamics_target.npz", adapted.f_target, {**stamp, "component": "dynamics_target"}))

    rows = adapted.report_rows(tgt.test)
    header = ["patient_id", "t", "action"]
    src_rows = [(r["patient_id"], r["t"], r["source_action"]) for r in rows]
    ada_rows = [(r["patient_id"], r["t"], r["adapted_action"]) for r in rows]
    written.append(atomic_write_text(ctx.report_path("source_decisions.csv"), _csv_text(stamp, header, src_rows)))
    written.append(atomic_write_text(ctx.report_path("adapted_decisions.csv"), _csv_text(stamp, header, ada_rows)))
    detail = [(r["patient_id"], r["t"], r["source_action"], r["adapted_action"], f"{r['distance']:.10g}", f"{r['margin']:.10g}") for r in rows]
    written.append(
        atomic_write_text(
            ctx.report_path("adaptation.csv"),
            _csv_text(stamp, ["patient_id", "t", "source_action", "adapted_action", "distance", "margin"], detail),
        )
    )
    pi0 = tgt.behavior(tgt.test_rows)
    summary = {
        **stamp,
        "target_patients": 0 if target_train is None else len(target_train),
        "zero_shot_wis": policy_wis(source, tgt.test, pi0, ctx.cfg.train.gamma),
        "adapted_wis": policy_wis(adapted, tgt.test, pi0, ctx.cfg.train.gamma),
        "agreement": float(np.mean([a == b for (_, _, a), (_, _, b) in zip(src_rows, ada_rows)])),
    }
    written.append(atomic_write_json(ctx.report_path("adaptation.json"), summary))
    record_files(ctx.paths.run_dir, stamp, written)
    print(
        f"{ctx.cfg.run_id}: adapted with {summary['target_patients']} target patients; "
        f"target WIS zero-shot {summary['zero_shot_wis']:.3f}, adapted {summary['adapted_wis']:.3f}"
    )


def cmd_evaluate(ctx: Context, policy_kind: str = "dac") -> EvalReport:
    data = load_data(ctx)
    ds = datasets(ctx, data)
    pre = load_pretrained(ctx, ds)
    stamp = ctx.stamp()
    test = ds.test
    pi0 = clone_outputs(pre.clone, test, ds.levels).action_probs
    expected_return = None
    if policy_kind == "clinician":
        rec, pi1 = pi0.argmax(-1), pi0
    else:
        policy = load_policy(ctx, ds)
        rec = policy.recommend(test)
        pi1 = smooth_deterministic(rec, ds.n_actions)
        expected_return = policy.long_term_values(test)[:, 0].max(-1)
    rewards = terminal_rewards(test.outcome, test.step_mask)
    v = wis(test.actions, test.step_mask, rewards, pi1, pi0, ctx.cfg.train.gamma)
    emb = embedding_for(ds, ctx.cfg.k)
    risk = train_action_risk_model(ds.validation, emb, ds.n_actions, ctx.cfg.pretrain.risk_epochs, seed=ctx.cfg.seed + 5)
    curve = fit_calibration(ds.validation, risk)
    em = estimated_mortality(rec, risk.predict(test), test.step_mask, curve)
    acc3 = acc1 = None
    if ds.gt is not None:
        acc3, acc1 = acc_from_flat(rec, ds.oracle("test"), test.step_mask, ds.levels)
    report = EvalReport(
        policy_kind,
        v,
        em,
        acc3,
        acc1,
        descriptive_reports(rec, test, expected_return, ds.levels),
        curve.to_json(),
    )
    written = [_write_config_snapshot(ctx)]
    written.append(atomic_write_json(ctx.report_path(f"eval_{policy_kind}.json"), {**stamp, **report.to_json()}))
    headline = [("EM", report.em), ("WIS", report.wis), ("ACC-3", report.acc3), ("ACC-1", report.acc1)]
    written.append(atomic_write_text(ctx.report_path(f"metrics_{policy_kind}.csv"), _csv_text(stamp, ["metric", "value"], headline)))
    dose = [
        (name, o, c, "" if r is None else f"{r:.10g}")
        for name, t in report.descriptive["dose_difference"].items()
        for o, c, r in zip(t["offset"], t["count"], t["mortality"])
    ]
    written.append(
        atomic_write_text(
            ctx.report_path(f"dose_difference_{policy_kind}.csv"),
            _csv_text(stamp, ["parameter", "offset", "count", "mortality"], dose),
        )
    )
    record_files(ctx.paths.run_dir, stamp, written)
    print(report.headline())
    return report


def cmd_report(ctx: Context, policy_kind: str = "dac") -> list[Path]:
    path = ctx.report_path(f"eval_{policy_kind}.json")
    if not path.exists():
        raise ValidationError(f"no evaluation at {path}; run 'dacrl evaluate' first")
    d = json.loads(path.read_text())
    if d.get("config_hash") != ctx.cfg.config_hash:
        raise ValidationError(f"{path}: written under config {d.get('config_hash')}, not {ctx.cfg.config_hash}")
    figures = render_figures(EvalReport.from_json(d), ctx.paths.reports, ctx.cfg.run_id, tag=policy_kind)
    record_files(ctx.paths.run_dir, ctx.stamp(), figures)
    for f in figures:
        print(f)
    return figures


def _embedded_id(path: Path) -> str:
    """The run or data identifier a file carries, read in its own format."""
    if path.suffix == ".npz":
        meta = load_arrays(path)[1]
        return str(meta.get("run_id") or meta.get("data_id"))
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        return str(d.get("run_id") or d.get("data_id"))
    if path.suffix == ".jsonl":
        d = json.loads(path.read_text().splitlines()[0])
        return str(d.get("run_id") or d.get("data_id"))
    if path.suffix in (".csv", ".cfg"):
        d = json.loads(path.read_text().splitlines()[0][2:])
        return str(d.get("run_id") or d.get("data_id"))
    if path.suffix == ".png":
        blob = path.read_bytes()
        start = blob.find(b'"run_id": "')
        if start < 0:
            return ""
        start += len(b'"run_id": "')
        return blob[start : blob.index(b'"', start)].decode()
    return ""


def verify_directory(directory: Path, expected_id: str) -> list[str]:
    problems = []
    manifest = read_manifest(directory)
    if manifest is None:
        return [f"{directory}: no manifest"]
    for rel, digest in manifest["files"].items():
        f = directory / rel
        if not f.exists():
            problems.append(f"{rel}: missing")
        elif file_sha256(f) != digest:
            problems.append(f"{rel}: content hash changed")
        elif _embedded_id(f) != expected_id:
            problems.append(f"{rel}: carries id {_embedded_id(f)!r}, expected {expected_id!r}")
    return problems


def cmd_verify(ctx: Context) -> None:
    problems = verify_directory(ctx.paths.data, ctx.paths.data_id)
    run_dir = ctx.paths.run_dir
    if read_manifest(run_dir) is not None:
        problems += verify_directory(run_dir, ctx.cfg.run_id)
        snap = run_dir / "config.cfg"
        values = read_config_text(snap)
        values.pop("command", None)
        rehashed = build_config(values)
        if rehashed.config_hash != ctx.cfg.config_hash:
            problems.append(f"config.cfg re-hashes to {rehashed.config_hash[:12]}, expected {ctx.cfg.config_hash[:12]}")
    if problems:
        raise ValidationError("verification failed:\n  " + "\n  ".join(problems))
    print(f"{ctx.cfg.run_id}: verified")


# ---------------------------------------------------------------------------
# Argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "adapt", "evaluate", "report", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs of this run")
        p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[], help="drop one DAC component")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
        if name in ("evaluate", "report"):
            p.add_argument("--policy", choices=("dac", "clinician"), default="dac")
    return parser


def make_context(args: argparse.Namespace) -> Context:
    overrides: dict[str, object] = {"command": args.command}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for name in args.ablate:
        overrides[f"train.{ABLATIONS[name]}"] = True
    cfg = load_config(args.config, overrides)
    return Context(cfg, RunPaths.for_config(cfg), args.force)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        ctx = make_context(args)
        if args.command == "generate":
            cmd_generate(ctx)
        elif args.command == "train":
            cmd_train(ctx, args.resume)
        elif args.command == "adapt":
            cmd_adapt(ctx)
        elif args.command == "evaluate":
            cmd_evaluate(ctx, args.policy)
        elif args.command == "report":
            cmd_report(ctx, args.policy)
        else:
            cmd_verify(ctx)
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
