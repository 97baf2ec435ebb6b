"""Command-line surface: evaluation, dataset tools, and the simulation
harness, all reproducible from a single manifest.

Exit codes: 0 ok, 1 input error, 2 undefined result, 3 partial stage failure.
Every option can also be set through an environment variable prefixed
``BMPLOOP_`` (e.g. ``BMPLOOP_SEED``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import yaml

from . import __version__
from .coco_io import (AnnotationSet, ParseError, ReferentialIntegrityError,
                      parse_annotation_set, parse_prediction_set,
                      serialize_annotation_set)
from .dataset_tools import (apply_legacy_filter, compute_stats,
                            export_histogram, merge_annotations)
from .evaluator import EvalOptions, SimilarityKind, evaluate
from .loop_engine import PromptPolicy, StageConfig
from .model_stages import (CorruptionProfile, ExternalStage, ProtocolError,
                           StageSet, oracle_stage_set)
from .simulate import batch_digest, results_to_predictions, run_batch
from .synthetic_world import WorldConfig, make_dataset

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_UNDEFINED = 2
EXIT_PARTIAL = 3

_TASKS = {"keypoints": SimilarityKind.Oks,
          "bbox": SimilarityKind.BboxIoU,
          "segm": SimilarityKind.MaskIoU}


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """One manifest per run; its digest names the run directory, so equal
    manifests land in the same place and must produce digest-equal outputs."""

    command: str
    config: dict
    input_digests: dict
    seed: int
    version: str = __version__
    outputs: dict = field(default_factory=dict)

    def digest(self) -> str:
        body = json.dumps(
            {"command": self.command, "config": self.config,
             "inputs": self.input_digests, "seed": self.seed,
             "version": self.version},
            sort_keys=True, separators=(",", ":"))
        return hashlib.blake2b(body.encode(), digest_size=8).hexdigest()

    def write(self, path: Path) -> None:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")


def _file_digest(path: str) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_dir(ctx, manifest: RunManifest) -> Path:
    base = Path(ctx.obj["out_dir"])
    d = base / f"{manifest.command}-{manifest.digest()}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_annotations(path: str) -> AnnotationSet:
    try:
        with open(path, "rb") as f:
            return parse_annotation_set(f.read())
    except OSError as e:
        raise click.ClickException(f"cannot read {path}: {e.strerror}")


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


# ---------------------------------------------------------------------------
# Group
# ---------------------------------------------------------------------------

@click.group()
@click.option("--seed", type=int, default=0, show_default=True,
              help="Global seed; all randomness derives from it.")
@click.option("--threads", type=int, default=os.cpu_count() or 1,
              show_default="logical CPUs",
              help="Worker threads; affects wall time only, never results.")
@click.option("--out-dir", type=click.Path(), default="runs", show_default=True,
              help="Base directory for run outputs.")
@click.version_option(__version__)
@click.pass_context
def cli(ctx, seed, threads, out_dir):
    """Pose-loop evaluation, dataset tooling, and simulation."""
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, threads=max(threads, 1), out_dir=out_dir)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@cli.command("eval")
@click.argument("gt_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("pred_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--task", type=click.Choice(sorted(_TASKS)), default="keypoints",
              show_default=True)
@click.option("--max-dets", type=int, default=None,
              help="Cap on scored predictions per image (default per task).")
@click.pass_context
def cmd_eval(ctx, gt_path, pred_path, task, max_dets):
    """Evaluate a prediction file against ground truth."""
    manifest = RunManifest(
        command="eval",
        config={"task": task, "max_dets": max_dets},
        input_digests={"gt": _file_digest(gt_path),
                       "pred": _file_digest(pred_path)},
        seed=ctx.obj["seed"])
    try:
        gts = _load_annotations(gt_path)
        with open(pred_path, "rb") as f:
            preds = parse_prediction_set(f.read(),
                                         known_image_ids={im.id for im in gts.images})
    except ParseError as e:
        _fail(str(e), EXIT_INPUT)

    kind = _TASKS[task]
    if kind is SimilarityKind.Oks and not any(c.sigmas for c in gts.categories):
        _fail("keypoint evaluation needs per-keypoint sigmas in the GT "
              "categories; add a \"sigmas\" array (17 floats for COCO "
              "keypoints) to the person category", EXIT_INPUT)

    report = evaluate(preds, gts, kind, EvalOptions(max_dets=max_dets))
    run_dir = _run_dir(ctx, manifest)
    report.write(run_dir / "report.json", run_dir / "report.csv",
                 run_dir / "matching.jsonl")
    manifest.outputs = {"report": str(run_dir / "report.json"),
                        "per_threshold": str(run_dir / "report.csv"),
                        "matching_log": str(run_dir / "matching.jsonl")}
    manifest.write(run_dir / "manifest.json")

    click.echo(f"task      {task}")
    for label, value in (("ap", report.ap), ("ap50", report.ap50),
                         ("ap75", report.ap75), ("ar", report.ar)):
        click.echo(f"{label:<9} {value:.3f}")
    click.echo(f"images    {report.n_images}   gts {report.n_gts}   "
               f"preds {report.n_preds}")
    click.echo(f"outputs   {run_dir}")
    if report.undefined:
        _fail("no ground-truth instances in scope; AP is undefined",
              EXIT_UNDEFINED)


# ---------------------------------------------------------------------------
# stats / filter / merge / export-histogram
# ---------------------------------------------------------------------------

@cli.command("stats")
@click.argument("gt_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def cmd_stats(ctx, gt_path):
    """Dataset size, crowdedness, and the IoUMax histogram."""
    manifest = RunManifest(command="stats", config={},
                           input_digests={"gt": _file_digest(gt_path)},
                           seed=ctx.obj["seed"])
    try:
        stats = compute_stats(_load_annotations(gt_path))
    except (ParseError, ValueError) as e:
        _fail(str(e), EXIT_INPUT)

    run_dir = _run_dir(ctx, manifest)
    with open(run_dir / "stats.json", "w") as f:
        json.dump(dataclasses.asdict(stats), f, indent=2, sort_keys=True)
        f.write("\n")
    export_histogram(stats, run_dir / "histogram.csv")
    manifest.outputs = {"stats": str(run_dir / "stats.json"),
                        "histogram": str(run_dir / "histogram.csv")}
    manifest.write(run_dir / "manifest.json")

    click.echo(f"images              {stats.n_images}")
    click.echo(f"keypoint instances  {stats.n_keypoint_instances}")
    click.echo(f"mask instances      {stats.n_mask_instances}")
    click.echo(f"mean IoUMax         {stats.mean_ioumax:.3f}  "
               f"({stats.iou_mode})")
    click.echo(f"outputs             {run_dir}")


@cli.command("filter")
@click.argument("gt_path", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(), default=None,
              help="Filtered annotation file (default: inside the run dir).")
@click.pass_context
def cmd_filter(ctx, gt_path, output):
    """Apply the legacy overlap filter (keep IoUMax = 0 or > 0.5)."""
    manifest = RunManifest(command="filter", config={"output": output},
                           input_digests={"gt": _file_digest(gt_path)},
                           seed=ctx.obj["seed"])
    try:
        aset = _load_annotations(gt_path)
    except ParseError as e:
        _fail(str(e), EXIT_INPUT)
    filtered = apply_legacy_filter(aset)

    run_dir = _run_dir(ctx, manifest)
    out_path = Path(output) if output else run_dir / "filtered.json"
    with open(out_path, "wb") as f:
        f.write(serialize_annotation_set(filtered))
    manifest.outputs = {"filtered": str(out_path)}
    manifest.write(run_dir / "manifest.json")
    click.echo(f"instances {len(aset.instances)} -> {len(filtered.instances)}")
    click.echo(f"wrote     {out_path}")


@cli.command("merge")
@click.argument("base_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("additions_path", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(), default=None,
              help="Merged annotation file (default: inside the run dir).")
@click.option("--dedup-oks", type=float, default=0.9, show_default=True,
              help="OKS above which an addition is treated as a duplicate.")
@click.pass_context
def cmd_merge(ctx, base_path, additions_path, output, dedup_oks):
    """Merge keypoint-only additions into a base annotation set."""
    manifest = RunManifest(
        command="merge", config={"output": output, "dedup_oks": dedup_oks},
        input_digests={"base": _file_digest(base_path),
                       "additions": _file_digest(additions_path)},
        seed=ctx.obj["seed"])
    try:
        base = _load_annotations(base_path)
        additions = _load_annotations(additions_path)
        merged = merge_annotations(base, additions, dedup_oks_threshold=dedup_oks)
    except (ParseError, ReferentialIntegrityError, ValueError) as e:
        _fail(str(e), EXIT_INPUT)

    run_dir = _run_dir(ctx, manifest)
    out_path = Path(output) if output else run_dir / "merged.json"
    with open(out_path, "wb") as f:
        f.write(serialize_annotation_set(merged))
    manifest.outputs = {"merged": str(out_path)}
    manifest.write(run_dir / "manifest.json")
    rep = merged.extras["merge_report"]
    n_kp = sum(1 for i in merged.instances
               if i.keypoints is not None and i.num_keypoints > 0)
    click.echo(f"base {rep['n_base']}  additions {rep['n_additions']}  "
               f"suppressed {rep['n_suppressed']}  total {rep['n_total']}")
    click.echo(f"keypoint instances {n_kp}")
    click.echo(f"wrote     {out_path}")


@cli.command("export-histogram")
@click.argument("gt_path", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(), default=None,
              help="Histogram CSV (default: inside the run dir).")
@click.pass_context
def cmd_export_histogram(ctx, gt_path, output):
    """Write the 20-bin IoUMax histogram as CSV."""
    manifest = RunManifest(command="export-histogram",
                           config={"output": output},
                           input_digests={"gt": _file_digest(gt_path)},
                           seed=ctx.obj["seed"])
    try:
        stats = compute_stats(_load_annotations(gt_path))
    except (ParseError, ValueError) as e:
        _fail(str(e), EXIT_INPUT)
    run_dir = _run_dir(ctx, manifest)
    out_path = Path(output) if output else run_dir / "histogram.csv"
    export_histogram(stats, out_path)
    manifest.outputs = {"histogram": str(out_path)}
    manifest.write(run_dir / "manifest.json")
    click.echo(f"wrote     {out_path}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _set_by_path(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise click.BadParameter(f"{dotted}: {k} is not a section")
    node[keys[-1]] = yaml.safe_load(raw)


def _dataclass_from(cls, section: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise click.BadParameter(
            f"unknown {where} option(s): {', '.join(sorted(unknown))}")
    coerced = dict(section)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    return cls(**coerced)


_MODES = ("single", "double", "plus")


def _mode_config(loop: StageConfig, mode: str) -> StageConfig:
    if mode == "single":
        return dataclasses.replace(loop, max_detector_passes=1, plus_mode=False)
    if mode == "double":
        return dataclasses.replace(loop, max_detector_passes=2, plus_mode=False)
    return dataclasses.replace(loop, max_detector_passes=2, plus_mode=True)


@cli.command("simulate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="YAML with world / profile / loop sections.")
@click.option("--set", "overrides", multiple=True, metavar="PATH=VALUE",
              help="Override a config field by dotted path, e.g. "
                   "loop.prompt_k=5.")
@click.option("--n-scenes", type=int, default=200, show_default=True)
@click.option("--modes", default="single,double,plus", show_default=True,
              help="Comma-separated loop variants to run.")
@click.option("--sweep-policies", is_flag=True,
              help="Also run every prompt policy in plus mode.")
@click.pass_context
def cmd_simulate(ctx, config_path, overrides, n_scenes, modes, sweep_policies):
    """Run the loop over seeded synthetic scenes and report keypoint AP."""
    cfg: dict = {}
    if config_path:
        with open(config_path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            _fail(f"{config_path}: top level must be a mapping", EXIT_INPUT)
        cfg = loaded
    for ov in overrides:
        if "=" not in ov:
            _fail(f"--set needs PATH=VALUE, got {ov!r}", EXIT_INPUT)
        _set_by_path(cfg, *ov.split("=", 1))

    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    bad = [m for m in mode_list if m not in _MODES]
    if bad:
        _fail(f"unknown mode(s): {', '.join(bad)}", EXIT_INPUT)

    try:
        world = _dataclass_from(WorldConfig, cfg.get("world", {}), "world")
        profile = _dataclass_from(CorruptionProfile, cfg.get("profile", {}),
                                  "profile")
        loop_section = dict(cfg.get("loop", {}))
        if "prompt_policy" in loop_section:
            loop_section["prompt_policy"] = PromptPolicy(
                loop_section["prompt_policy"])
        loop = _dataclass_from(StageConfig, loop_section, "loop")
    except (TypeError, ValueError, click.BadParameter) as e:
        _fail(str(e), EXIT_INPUT)

    seed, threads = ctx.obj["seed"], ctx.obj["threads"]
    manifest = RunManifest(
        command="simulate",
        config={"world": dataclasses.asdict(world),
                "profile": dataclasses.asdict(profile),
                "loop": {**dataclasses.asdict(loop),
                         "prompt_policy": loop.prompt_policy.value},
                "n_scenes": n_scenes, "modes": mode_list,
                "sweep_policies": sweep_policies},
        input_digests={}, seed=seed)
    run_dir = _run_dir(ctx, manifest)

    scenes, complete, _ = make_dataset(world, n_scenes, seed)
    stages = oracle_stage_set(profile, seed=seed)
    opts = EvalOptions(keep_matching_log=False)

    rows = []  # (label, results)
    for mode in mode_list:
        rows.append((mode, _mode_config(loop, mode)))
    if sweep_policies:
        for pol in PromptPolicy:
            rows.append((f"plus/{pol.value}",
                         dataclasses.replace(_mode_config(loop, "plus"),
                                             prompt_policy=pol)))

    table = []
    worst_fail_rate = 0.0
    for label, sc in rows:
        results = run_batch(scenes, stages, sc, threads=threads)
        preds = results_to_predictions(results, SimilarityKind.Oks)
        report = evaluate(preds, complete, SimilarityKind.Oks, opts)
        n_failed = sum(1 for r in results
                       if r.instances and all(i.failed for i in r.instances))
        worst_fail_rate = max(worst_fail_rate, n_failed / max(len(scenes), 1))
        table.append({"configuration": label, "ap": round(report.ap, 6),
                      "ap50": round(report.ap50, 6), "ar": round(report.ar, 6),
                      "failed_scenes": n_failed,
                      "digest": batch_digest(results)})

    with open(run_dir / "batch.json", "w") as f:
        json.dump({"n_scenes": len(scenes), "seed": seed, "rows": table},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    manifest.outputs = {"batch": str(run_dir / "batch.json")}
    manifest.write(run_dir / "manifest.json")

    click.echo(f"{'configuration':<18} {'ap':>7} {'ap50':>7} {'ar':>7} "
               f"{'failed':>7}")
    for row in table:
        click.echo(f"{row['configuration']:<18} {row['ap']:7.3f} "
                   f"{row['ap50']:7.3f} {row['ar']:7.3f} "
                   f"{row['failed_scenes']:>7}")
    click.echo(f"outputs   {run_dir}")
    if worst_fail_rate > 0.10:
        _fail(f"{worst_fail_rate:.0%} of scenes failed in at least one "
              "configuration", EXIT_PARTIAL)


# ---------------------------------------------------------------------------
# serve-check
# ---------------------------------------------------------------------------

@cli.command("serve-check")
@click.argument("endpoint")
@click.option("--kind", type=click.Choice(["detector", "pose", "segmenter",
                                           "lifter"]), default="pose",
              show_default=True)
@click.option("--timeout", type=float, default=5.0, show_default=True)
def cmd_serve_check(endpoint, kind, timeout):
    """Handshake with an external stage server and report the result."""
    try:
        stage = ExternalStage(endpoint, kind, timeout=timeout)
        stage.close()
    except (OSError, ProtocolError, ValueError) as e:
        _fail(f"{endpoint} ({kind}): {e}", EXIT_INPUT)
    click.echo(f"{endpoint} ({kind}): ok")


def main():
    cli(auto_envvar_prefix="BMPLOOP")


if __name__ == "__main__":
    main()
