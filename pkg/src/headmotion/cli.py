"""Command-line entry point: make-data, train-vae, train-pld, sample, eval, export-curve, warp-demo.

Every command works inside one run directory::

    <run>/config.json            resolved configuration
    <run>/manifest.json          one record per command that has run
    <run>/data/{train,eval}/     Pose CSVs, f32 condition tensors, manifest.json
    <run>/checkpoints/{vae,pld}/ model checkpoints
    <run>/samples/               generated Pose CSVs, manifest.json, run.json
    <run>/metrics/               loss CSVs and report.json
    <run>/curves/                PCA motion curves
    <run>/warp/                  warp-demo outputs

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from headmotion import flow, metrics
from headmotion.config import ConfigError, RunConfig, load_config
from headmotion.core import NormStats, PoseSequence, compute_norm_stats, derive_seed, normalize, portable_rng
from headmotion.io import (
    load_dataset,
    load_pose_sequence,
    load_tensor,
    save_pose_sequence,
    save_tensor,
    write_manifest,
)
from headmotion.synthetic import (
    CLASSES,
    audio_from_envelope,
    energy_envelope,
    generate_sample,
    make_specs,
    spec_to_dict,
    text_embedding,
)

log = logging.getLogger("headmotion")


class UsageError(Exception):
    """Bad invocation or missing prerequisite (exit code 1)."""


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="ascii")


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _rel(path: Path, root: Path) -> str:
    """``path`` relative to ``root`` when inside it, else as given."""
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


def _record(run: Path, command: str, record: dict) -> None:
    path = run / "manifest.json"
    manifest = json.loads(path.read_text()) if path.is_file() else {}
    manifest[command] = record
    _dump(manifest, path)


def _write_loss_csv(history: list[float], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,loss"] + [f"{i},{format(v, '.9g')}" for i, v in enumerate(history)]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


# -- make-data ---------------------------------------------------------------


def cmd_make_data(cfg: RunConfig, run: Path, args) -> dict:
    d = cfg.data
    common = dict(
        classes=tuple(d.classes),
        amplitude=d.amplitude,
        frequency=d.frequency,
        amplitude_jitter=d.amplitude_jitter,
        frequency_jitter=d.frequency_jitter,
        coupling=d.coupling,
        noise_scale=d.noise_scale,
        T=d.T,
        fps=d.fps,
        text_dim=d.text_dim,
        audio_dim=d.audio_dim,
    )
    counts = {}
    for split, n, key in (("train", d.n_train_per_class, 1), ("eval", d.n_eval_per_class, 2)):
        out = _fresh_dir(run / "data" / split)
        specs = make_specs(n, seed=derive_seed(cfg.seed, key), **common)
        records = []
        for i, spec in enumerate(specs):
            pose, cond, label, _ = generate_sample(spec)
            stem = f"{i:04d}_{label}"
            save_pose_sequence(pose, out / f"{stem}.csv")
            save_tensor(cond.text_embedding[None], out / f"{stem}_text")
            save_tensor(cond.audio_features, out / f"{stem}_audio")
            records.append({"pose": f"{stem}.csv", "text": f"{stem}_text.f32", "audio": f"{stem}_audio.f32",
                            "label": label})
        write_manifest(records, out / "manifest.json")
        _dump([spec_to_dict(s) for s in specs], out / "specs.json")
        counts[split] = len(records)
    return {"train": counts["train"], "eval": counts["eval"], "seed": cfg.seed}


# -- training ------------------------------------------------------------------


def _load_split(run: Path, split: str = "train"):
    path = run / "data" / split / "manifest.json"
    if not path.is_file():
        raise UsageError(f"no {split} data at {path}; run `make-data` first")
    return load_dataset(path)


def _load_vae(run: Path):
    from headmotion.vae import load_vae

    ck = run / "checkpoints" / "vae"
    if not (ck / "manifest.json").is_file():
        raise UsageError(f"VAE checkpoint missing at {ck}; run `train-vae` first")
    model, stats, _ = load_vae(ck)
    return model, stats or NormStats.identity(model.cfg.D)


def _load_pld(run: Path):
    from headmotion.diffusion import load_pld

    ck = run / "checkpoints" / "pld"
    if not (ck / "manifest.json").is_file():
        raise UsageError(f"diffusion checkpoint missing at {ck}; run `train-pld` first")
    return load_pld(ck)[0]


def cmd_train_vae(cfg: RunConfig, run: Path, args) -> dict:
    from headmotion.vae import reconstruction_error, train_vae

    records = _load_split(run)
    poses = [r.pose for r in records]
    stats = compute_norm_stats(poses) if cfg.data.normalize else NormStats.identity(poses[0].D)
    seqs = [normalize(p, stats) for p in poses]
    ck = run / "checkpoints" / "vae"
    if args.resume and not (ck / "manifest.json").is_file():
        raise UsageError(f"--resume given but no checkpoint at {ck}")
    model, history = train_vae(seqs, cfg.vae, ckpt_dir=ck, resume=args.resume, stats=stats)
    _write_loss_csv(history, run / "metrics" / "vae_loss.csv")
    return {
        "checkpoint": "checkpoints/vae",
        "loss_csv": "metrics/vae_loss.csv",
        "steps": len(history),
        "final_loss": history[-1] if history else None,
        "recon_huber": reconstruction_error(model, seqs, cfg.vae.huber_delta),
        "seed": cfg.vae.seed,
    }


def cmd_train_pld(cfg: RunConfig, run: Path, args) -> dict:
    from headmotion.diffusion import train_pld

    vae, stats = _load_vae(run)
    records = _load_split(run)
    data = [(normalize(r.pose, stats), r.condition) for r in records]
    ck = run / "checkpoints" / "pld"
    if args.resume and not (ck / "manifest.json").is_file():
        raise UsageError(f"--resume given but no checkpoint at {ck}")
    _, history = train_pld(vae, data, cfg.pld, ckpt_dir=ck, resume=args.resume)
    _write_loss_csv(history, run / "metrics" / "pld_loss.csv")
    return {
        "checkpoint": "checkpoints/pld",
        "loss_csv": "metrics/pld_loss.csv",
        "steps": len(history),
        "final_loss": history[-1] if history else None,
        "seed": cfg.pld.seed,
    }


# -- sampling ------------------------------------------------------------------


def _conditions(cfg: RunConfig, run: Path, args, out: Path):
    """List of (ConditionBundle, label, text_path, audio_path, provenance) per requested condition."""
    from headmotion.core import ConditionBundle

    if args.label:
        count = args.count or cfg.sample.count
        cond_dir = out / "conditions"
        conds = []
        for i in range(count):
            rng = portable_rng(cfg.sample.seed, 0xA0D10, i)
            energy = energy_envelope(cfg.data.T, cfg.data.fps, rng, cfg.data.frequency)
            audio = audio_from_envelope(energy, cfg.data.audio_dim, rng)
            text = text_embedding(args.label, cfg.data.text_dim)
            tp = save_tensor(text[None], cond_dir / f"{i:04d}_text")
            ap = save_tensor(audio, cond_dir / f"{i:04d}_audio")
            conds.append((ConditionBundle(text, audio), args.label, tp, ap))
        return conds, 1, {"mode": "label", "label": args.label}
    if args.text:
        cond = ConditionBundle(load_tensor(args.text).reshape(-1), load_tensor(args.audio))
        tp = save_tensor(cond.text_embedding[None], out / "conditions" / "text")
        ap = save_tensor(cond.audio_features, out / "conditions" / "audio")
        label = args.label_hint or "unknown"
        return [(cond, label, tp, ap)], args.count or cfg.sample.count, {
            "mode": "paths", "text": str(args.text), "audio": str(args.audio)}
    mpath = Path(args.manifest)
    recs = load_dataset(mpath)
    conds = []
    for i, r in enumerate(recs):
        tp = save_tensor(r.condition.text_embedding[None], out / "conditions" / f"{i:04d}_text")
        ap = save_tensor(r.condition.audio_features, out / "conditions" / f"{i:04d}_audio")
        conds.append((r.condition, r.label, tp, ap))
    return conds, args.count or cfg.sample.count, {"mode": "manifest", "manifest": str(mpath)}


def _check_condition_args(args) -> None:
    modes = [m for m in ("label", "text", "manifest") if getattr(args, m)]
    if len(modes) != 1:
        raise UsageError("give exactly one of --label, --text/--audio, --manifest")
    if args.label and args.label not in CLASSES:
        raise UsageError(f"unknown class {args.label!r}; expected one of {list(CLASSES)}")
    if args.text and not args.audio:
        raise UsageError("--text needs --audio")
    for p in (args.text, args.audio):
        if p and not Path(p).with_suffix(".json").is_file():
            raise UsageError(f"condition file not found: {p}")
    if args.manifest and not Path(args.manifest).is_file():
        raise UsageError(f"condition manifest not found: {args.manifest}")


def cmd_sample(cfg: RunConfig, run: Path, args) -> dict:
    from headmotion.diffusion import SamplerConfig, generate_poses

    _check_condition_args(args)
    vae, stats = _load_vae(run)
    pld = _load_pld(run)
    smp = cfg.sampler()
    if args.guidance is not None:
        smp = SamplerConfig(args.guidance, smp.kind, smp.steps, smp.seed)
    smp.validate(pld.cfg.T_diff)
    out = _fresh_dir(run / "samples")
    conds, per_cond, provenance = _conditions(cfg, run, args, out)
    seqs = generate_poses(vae, pld, pld.cfg.schedule(), [c for c, *_ in conds], per_cond, smp, stats,
                          fps=cfg.data.fps)
    records = []
    for i, seq in enumerate(seqs):
        _, label, tp, ap = conds[i // per_cond]
        stem = f"{i:04d}_{label}"
        save_pose_sequence(seq, out / f"{stem}.csv")
        records.append({"pose": f"{stem}.csv", "text": _rel(tp, out), "audio": _rel(ap, out), "label": label,
                        "seed": derive_seed(smp.seed, i)})
    write_manifest(records, out / "manifest.json")
    run_info = {
        "seed": smp.seed,
        "guidance": smp.guidance,
        "sampler": smp.kind,
        "steps": smp.steps or pld.cfg.T_diff,
        "count": len(records),
        "per_condition": per_cond,
        "condition": provenance,
    }
    _dump(run_info, out / "run.json")
    return run_info


# -- evaluation ----------------------------------------------------------------


def cmd_eval(cfg: RunConfig, run: Path, args) -> dict:
    vae, stats = _load_vae(run)
    gen_path = Path(args.generated) if args.generated else run / "samples" / "manifest.json"
    ref_path = Path(args.reference) if args.reference else run / "data" / "train" / "manifest.json"
    for p in (gen_path, ref_path):
        if not p.is_file():
            raise UsageError(f"evaluation set not found: {p}")
    gen, ref = load_dataset(gen_path), load_dataset(ref_path)
    if len(gen) < 2 or len(ref) < 2:
        raise UsageError(f"need >= 2 sequences per set, got generated={len(gen)} reference={len(ref)}")
    m = cfg.metrics
    f_gen = metrics.extract_features(vae, [normalize(r.pose, stats) for r in gen])
    f_ref = metrics.extract_features(vae, [normalize(r.pose, stats) for r in ref])
    probe = {c: [0, 0] for c in CLASSES}
    env = []
    for r in gen:
        if r.label in probe:
            pred = metrics.classify_motion(r.pose, m.probe_frequency, m.probe_threshold, m.probe_band)
            probe[r.label][0] += pred == r.label
            probe[r.label][1] += 1
        if r.label == "nod":
            env.append(metrics.amplitude_envelope_correlation(r.pose, r.condition.energy_envelope(),
                                                              m.probe_frequency).r)
    hits = sum(v[0] for v in probe.values())
    total = sum(v[1] for v in probe.values())
    report = metrics.metrics_report(
        f_ref,
        f_gen,
        seed=m.seed,
        pairs=m.diversity_pairs,
        reference_diversity=metrics.diversity(f_ref, m.diversity_pairs, m.seed, m.diversity_mode),
        probe_accuracy=hits / total if total else None,
        per_class_accuracy={c: v[0] / v[1] for c, v in probe.items() if v[1]},
        envelope_correlation_median=float(np.median(env)) if env else None,
        generated=_rel(gen_path, run),
        reference=_rel(ref_path, run),
    )
    if m.diversity_mode != "pairwise":
        report["diversity"] = metrics.diversity(f_gen, m.diversity_pairs, m.seed, m.diversity_mode)
    report["diversity_mode"] = m.diversity_mode
    _dump(report, run / "metrics" / "report.json")
    return report


# -- curves ------------------------------------------------------------------


def cmd_export_curve(cfg: RunConfig, run: Path, args) -> dict:
    if not args.inputs:
        raise UsageError("export-curve needs at least one pose CSV")
    seqs = []
    for p in args.inputs:
        if not Path(p).is_file():
            raise UsageError(f"pose file not found: {p}")
        seqs.append(load_pose_sequence(p))
    res = metrics.pca_curve(seqs)
    out = _fresh_dir(run / "curves")
    names = []
    for p, curve in zip(args.inputs, res.curves):
        name = Path(p).stem
        while name in names:
            name += "_"
        names.append(name)
        lines = ["frame,value"] + [f"{i},{format(v, '.9g')}" for i, v in enumerate(curve)]
        (out / f"{name}.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    # shorter curves are padded with blank cells
    n = max(len(c) for c in res.curves)
    lines = ["frame," + ",".join(names)]
    for i in range(n):
        cells = [format(c[i], ".9g") if i < len(c) else "" for c in res.curves]
        lines.append(f"{i}," + ",".join(cells))
    (out / "combined.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    info = {"inputs": [str(p) for p in args.inputs], "curves": names, "degenerate": res.degenerate,
            "component": res.component.tolist()}
    _dump(info, out / "manifest.json")
    return info


# -- warp demo ---------------------------------------------------------------


def build_pyramid(spec: dict, size: tuple[int, int]):
    """(F_coarse, [dF coarsest..finest]) from a flow-spec dict for an image of ``size``."""
    H, W = size
    coarsest = int(spec.get("coarsest", flow.MIN_RES))
    shapes = []
    h, w = H, W
    while h >= coarsest and w >= coarsest:
        shapes.append((h, w))
        h, w = h // 2, w // 2
    shapes = shapes[::-1]
    flow.check_pyramid(shapes, (H, W))
    kind = spec.get("kind", "zero")
    coarse = np.broadcast_to(np.asarray(spec.get("coarse", [0.0, 0.0]), dtype=np.float64), (H, W, 2)).copy()
    if kind == "zero":
        dFs = [np.zeros((h, w, 2)) for h, w in shapes]
    elif kind == "constant":
        shift = np.asarray(spec.get("shift", [1.0, 0.0]), dtype=np.float64)
        dFs = [np.broadcast_to(shift, (h, w, 2)).copy() for h, w in shapes]
    elif kind == "random":
        rng = portable_rng(int(spec.get("seed", 0)), 0xF10)
        amp = float(spec.get("amplitude", 1.0))
        dFs = [amp * rng.standard_normal((h, w, 2)) for h, w in shapes]
    else:
        raise UsageError(f"unknown flow kind {kind!r}; expected zero, constant or random")
    return coarse, dFs


def cmd_warp_demo(cfg: RunConfig, run: Path, args) -> dict:
    from PIL import Image

    img_path = Path(args.image)
    if not img_path.is_file():
        raise UsageError(f"image not found: {img_path}")
    if args.flow_spec:
        sp = Path(args.flow_spec)
        if not sp.is_file():
            raise UsageError(f"flow spec not found: {sp}")
        spec = json.loads(sp.read_text())
    else:
        spec = {"kind": "zero"}
    with Image.open(img_path) as im:
        mode = "L" if im.mode in ("L", "1", "I", "P") and im.mode != "P" else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float64)
    try:
        coarse, dFs = build_pyramid(spec, arr.shape[:2])
    except ValueError as exc:
        raise UsageError(f"invalid pyramid for image of size {arr.shape[:2]}: {exc}") from exc
    total = flow.compose_total_flow(coarse, dFs)
    warped = flow.backward_warp(arr, total)
    out = _fresh_dir(run / "warp")
    ext = "pgm" if mode == "L" else "ppm"
    Image.fromarray(arr.astype(np.uint8), mode=mode).save(out / f"input.{ext}")
    Image.fromarray(np.clip(np.rint(warped), 0, 255).astype(np.uint8), mode=mode).save(out / f"warped.{ext}")
    save_tensor(total, out / "total_flow")
    info = {
        "image": str(img_path),
        "spec": spec,
        "levels": [list(d.shape[:2]) for d in dFs],
        "mean_displacement": total.reshape(-1, 2).mean(axis=0).tolist(),
    }
    _dump(info, out / "manifest.json")
    return info


# -- entry point -------------------------------------------------------------

COMMANDS = {
    "make-data": cmd_make_data,
    "train-vae": cmd_train_vae,
    "train-pld": cmd_train_pld,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "export-curve": cmd_export_curve,
    "warp-demo": cmd_warp_demo,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        # bad invocations are validation errors (exit 1), not runtime failures
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="run directory (default runs/<config hash>)")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override a config value, e.g. --set vae.steps=100")
    common.add_argument("--timestamp", action="store_true", default=argparse.SUPPRESS,
                        help="suffix the default run directory with a timestamp")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="headmotion", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-data", parents=[common], help="write the synthetic train/eval dataset")
    for name in ("train-vae", "train-pld"):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1].upper()} training")
        p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    p = sub.add_parser("sample", parents=[common], help="generate pose sequences")
    p.add_argument("--label", choices=None, help="class label shortcut (nod, shake, still)")
    p.add_argument("--text", help="text embedding tensor (.f32)")
    p.add_argument("--audio", help="audio feature tensor (.f32)")
    p.add_argument("--label-hint", help="label recorded for --text/--audio conditions")
    p.add_argument("--manifest", help="dataset manifest whose conditions are sampled")
    p.add_argument("--count", type=int, help="samples per condition")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale s")
    p = sub.add_parser("eval", parents=[common], help="FID, diversity and probe metrics")
    p.add_argument("--generated", help="manifest of generated sequences (default samples/manifest.json)")
    p.add_argument("--reference", help="manifest of reference sequences (default data/train/manifest.json)")
    p = sub.add_parser("export-curve", parents=[common], help="PCA motion curves as CSV")
    p.add_argument("inputs", nargs="*", help="pose CSV files")
    p = sub.add_parser("warp-demo", parents=[common], help="compose a flow pyramid and warp an image")
    p.add_argument("--image", required=True, help="8-bit PGM/PPM image")
    p.add_argument("--flow-spec", help="JSON flow pyramid spec")
    return parser


def _discard(created: Path | None) -> None:
    if created is not None and created.exists():
        shutil.rmtree(created)


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    created = None
    try:
        cfg = load_config(getattr(args, "config", None), getattr(args, "set", []) or [], getattr(args, "seed", None))
        if getattr(args, "count", None) is not None and args.count < 1:
            raise UsageError("--count must be >= 1")
        if getattr(args, "out", None):
            run = Path(args.out)
        else:
            name = cfg.digest()
            if getattr(args, "timestamp", False):
                name += time.strftime("-%Y%m%d-%H%M%S")
            run = Path("runs") / name
        if not run.exists():
            created = run
            run.mkdir(parents=True)
        record = COMMANDS[args.command](cfg, run, args)
        _dump(cfg.tree, run / "config.json")
        _record(run, args.command, record)
    except (ConfigError, UsageError, FileNotFoundError, ValueError) as exc:
        _discard(created)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit code 2
        _discard(created)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "run": str(run)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
