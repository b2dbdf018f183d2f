"""Command-line interface.

Subcommands: make-phantoms, preprocess, train-seg, train-surv, infer,
evaluate, predict-surv. A single YAML run config determines each command;
individual flags (and the TRISEG_DATA_ROOT environment variable for the
data root) override config keys, flag > env > config. The effective config
is echoed into every output directory.
"""

import argparse
import csv
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data, nifti, survival, training, triplanar
from .config import RunConfig
from .errors import TrisegError
from .phantoms import scaled_spec, write_phantom_dataset
from .preprocess import CropManifest, preprocess_case
from .triplanar import PLANES

ENV_DATA_ROOT = "TRISEG_DATA_ROOT"


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if os.environ.get(ENV_DATA_ROOT):
        cfg.data_root = os.environ[ENV_DATA_ROOT]
    if getattr(args, "data_root", None):
        cfg.data_root = args.data_root
    if getattr(args, "out_root", None):
        cfg.out_root = args.out_root
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        for plane_cfg in cfg.train_seg.values():
            plane_cfg.seed = args.seed
        cfg.survival.seed = args.seed
    return cfg


def _echo_config(cfg: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config_used.yaml")


def _preprocessed_dir(cfg):
    return Path(cfg.out_root) / "preprocessed"


def _checkpoint_dir(cfg):
    return Path(cfg.out_root) / "checkpoints"


_PP_SUFFIX = {"T1ce": "t1ce", "T2": "t2", "FLAIR": "flair"}


def save_preprocessed_case(bundle, manifest, out_dir):
    case_dir = Path(out_dir) / bundle.case_id
    for mod, suffix in _PP_SUFFIX.items():
        nifti.write(case_dir / f"{bundle.case_id}_{suffix}.nii.gz",
                    bundle.volumes[mod].voxels)
    if bundle.labels is not None:
        nifti.write(case_dir / f"{bundle.case_id}_seg.nii.gz",
                    bundle.labels.voxels.astype(np.uint8))
    manifest.save(case_dir / f"{bundle.case_id}_crop.json")
    return case_dir


def load_preprocessed_case(out_dir, case_id, clinical=None):
    """Read back a case written by save_preprocessed_case (canonical labels)."""
    case_dir = Path(out_dir) / case_id
    volumes = {}
    for mod, suffix in _PP_SUFFIX.items():
        path = case_dir / f"{case_id}_{suffix}.nii.gz"
        if not path.exists():
            raise data.MissingModality(f"{case_id}: missing preprocessed {mod}")
        arr, _ = nifti.read(path)
        volumes[mod] = data.ModalityVolume(arr.astype(np.float32), mod)
    labels = None
    seg_path = case_dir / f"{case_id}_seg.nii.gz"
    if seg_path.exists():
        arr, _ = nifti.read(seg_path)
        labels = data.LabelVolume(arr.astype(np.int16))
    manifest = CropManifest.load(case_dir / f"{case_id}_crop.json")
    age = surv = res = None
    if clinical and case_id in clinical:
        age, surv, res = clinical[case_id]
    bundle = data.CaseBundle(case_id=case_id, volumes=volumes, labels=labels,
                             age=age, survival_days=surv, resection_status=res)
    return bundle, manifest


def _preprocess_one(argv):
    root, case_id, pp_dict, out_dir = argv
    from .preprocess import PreprocessConfig
    cfg = PreprocessConfig(**pp_dict)
    bundle = data.load_case(root, case_id)
    processed, manifest = preprocess_case(bundle, cfg)
    save_preprocessed_case(processed, manifest, out_dir)
    return case_id


def _up_to_date(case_dir: Path, src_dir: Path, case_id: str) -> bool:
    outputs = [case_dir / f"{case_id}_{s}.nii.gz" for s in _PP_SUFFIX.values()]
    outputs.append(case_dir / f"{case_id}_crop.json")
    if not all(p.exists() for p in outputs):
        return False
    newest_src = max((p.stat().st_mtime for p in src_dir.glob(f"{case_id}_*")),
                    default=0.0)
    oldest_out = min(p.stat().st_mtime for p in outputs)
    return oldest_out >= newest_src


def cmd_preprocess(args):
    cfg = _load_config(args)
    out_dir = _preprocessed_dir(cfg)
    _echo_config(cfg, out_dir)
    case_ids = args.cases or data.list_cases(cfg.data_root)
    if not case_ids:
        print(f"no cases found under {cfg.data_root}", file=sys.stderr)
        return 1
    pp_dict = {
        "clip_lo_pct": cfg.preprocess.clip_lo_pct,
        "clip_hi_pct": cfg.preprocess.clip_hi_pct,
        "crop_shape": tuple(cfg.preprocess.crop_shape),
        "bias_hook": cfg.preprocess.bias_hook,
        "std_floor": cfg.preprocess.std_floor,
    }
    todo, skipped = [], 0
    for cid in case_ids:
        if _up_to_date(out_dir / cid, Path(cfg.data_root) / cid, cid):
            skipped += 1
        else:
            todo.append((cfg.data_root, cid, pp_dict, out_dir))
    failures = []
    if args.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = {pool.submit(_preprocess_one, t): t[1] for t in todo}
            for fut, cid in futures.items():
                try:
                    fut.result()
                except Exception as e:
                    failures.append((cid, e))
    else:
        for t in todo:
            try:
                _preprocess_one(t)
            except Exception as e:
                failures.append((t[1], e))
    for cid, e in sorted(failures):
        print(f"preprocess failed for {cid}: {e}", file=sys.stderr)
    print(f"preprocessed {len(todo) - len(failures)} case(s), "
          f"skipped {skipped} up-to-date, {len(failures)} failed")
    return 1 if failures else 0


def cmd_train_seg(args):
    cfg = _load_config(args)
    plane_cfg = cfg.train_seg[args.plane]
    if args.iterations is not None:
        plane_cfg.iterations = args.iterations
    ckpt_dir = _checkpoint_dir(cfg)
    _echo_config(cfg, ckpt_dir)
    pp_dir = _preprocessed_dir(cfg)
    clinical = _read_clinical(cfg)
    cases = []
    for cid in args.cases or _list_preprocessed(pp_dir):
        bundle, _ = load_preprocessed_case(pp_dir, cid, clinical)
        cases.append(bundle)
    if not cases:
        print(f"no preprocessed cases under {pp_dir}; run `triseg preprocess`",
              file=sys.stderr)
        return 1
    path = training.train_plane(cases, plane_cfg, ckpt_dir, cfg.network)
    print(f"wrote checkpoint {path}")
    return 0


def _list_preprocessed(pp_dir):
    pp_dir = Path(pp_dir)
    if not pp_dir.exists():
        return []
    return sorted(d.name for d in pp_dir.iterdir()
                  if d.is_dir() and (d / f"{d.name}_crop.json").exists())


def _read_clinical(cfg):
    csv_path = Path(cfg.data_root) / data.CLINICAL_CSV
    return data.read_clinical_csv(csv_path) if csv_path.exists() else {}


def _load_plane_models(cfg, planes):
    models = {}
    for plane in planes:
        path = _checkpoint_dir(cfg) / f"{plane}.pt"
        if not path.exists():
            raise TrisegError(f"missing checkpoint {path}; train plane {plane}")
        models[plane], _ = training.model_from_checkpoint(path)
    return models


def cmd_infer(args):
    cfg = _load_config(args)
    planes = args.planes or list(PLANES)
    pred_dir = Path(cfg.out_root) / "predictions"
    _echo_config(cfg, pred_dir)
    try:
        models = _load_plane_models(cfg, planes)
    except TrisegError as e:
        print(str(e), file=sys.stderr)
        return 1
    pp_dir = _preprocessed_dir(cfg)
    case_ids = args.cases or _list_preprocessed(pp_dir)
    if not case_ids:
        print(f"no preprocessed cases under {pp_dir}", file=sys.stderr)
        return 1
    failures = []
    for cid in case_ids:
        try:
            bundle, manifest = load_preprocessed_case(pp_dir, cid)
            volumes = []
            for plane in planes:
                if cfg.fusion == "logits":
                    volumes.append(_infer_plane_logits(bundle, plane,
                                                       models[plane]))
                else:
                    volumes.append(triplanar.infer_plane(bundle, plane,
                                                         models[plane]))
            if cfg.fusion == "logits":
                fused = _fuse_logits(volumes)
            else:
                fused = triplanar.fuse(volumes)
            labels = triplanar.finalize(fused, manifest)
            header = _raw_header(cfg, cid)
            data.save_segmentation(cid, labels, pred_dir, header=header)
            print(f"segmented {cid}")
        except Exception as e:
            failures.append((cid, e))
            print(f"inference failed for {cid}: {e}", file=sys.stderr)
    return 1 if failures else 0


def _raw_header(cfg, case_id):
    for suffix in ("t1ce", "t2", "flair"):
        path = Path(cfg.data_root) / case_id / f"{case_id}_{suffix}.nii.gz"
        if path.exists():
            return nifti.read_header(path)
    return None


def _infer_plane_logits(bundle, plane, model):
    import torch
    slices = triplanar.slice_plane(bundle, plane)
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(slices), 8):
            x = torch.from_numpy(slices[i:i + 8]).float()
            outs.append(model.forward_logits(x).numpy())
    return triplanar.restack(np.concatenate(outs, axis=0), plane)


def _fuse_logits(arrays):
    import torch
    mean = np.mean(np.stack(arrays), axis=0)
    probs = torch.softmax(torch.from_numpy(mean), dim=0).numpy()
    return triplanar.ProbabilityVolume(probs)


def _discover_segs(dir_path):
    found = {}
    for p in sorted(Path(dir_path).rglob("*_seg.nii.gz")):
        found[p.name[:-len("_seg.nii.gz")]] = p
    return found


def _evaluate_one(argv):
    cid, pred_path, gt_path = argv
    pred_arr, _ = nifti.read(pred_path)
    gt_arr, _ = nifti.read(gt_path)
    pred = data.remap_labels(data.LabelVolume(pred_arr.astype(np.int16),
                                              allowed=data.RAW_LABELS))
    gt = data.remap_labels(data.LabelVolume(gt_arr.astype(np.int16),
                                            allowed=data.RAW_LABELS))
    from .metrics import evaluate_region
    pred_masks = data.derive_region_masks(pred)
    gt_masks = data.derive_region_masks(gt)
    rows = []
    for region in ("wt", "tc", "et"):
        m = evaluate_region(getattr(pred_masks, region),
                            getattr(gt_masks, region))
        rows.append([cid, region.upper(), m["dsc"], m["hd95"],
                     m["specificity"], m["sensitivity"]])
    return rows


def cmd_evaluate(args):
    cfg = _load_config(args)
    eval_dir = Path(cfg.out_root) / "evaluation"
    _echo_config(cfg, eval_dir)
    preds = _discover_segs(args.pred_dir)
    gts = _discover_segs(args.gt_dir)
    if args.cases:
        preds = {c: p for c, p in preds.items() if c in args.cases}
        gts = {c: p for c, p in gts.items() if c in args.cases}
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        if only_pred:
            print(f"cases only in pred dir: {', '.join(only_pred)}",
                  file=sys.stderr)
        if only_gt:
            print(f"cases only in gt dir: {', '.join(only_gt)}", file=sys.stderr)
        return 1
    if not preds:
        print("no cases to evaluate", file=sys.stderr)
        return 1

    jobs = [(cid, preds[cid], gts[cid]) for cid in sorted(preds)]
    all_rows = []
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for rows in pool.map(_evaluate_one, jobs):
                all_rows.extend(rows)
    else:
        for job in jobs:
            all_rows.extend(_evaluate_one(job))

    per_case = eval_dir / "per_case.csv"
    with open(per_case, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "region", "dsc", "hd95", "specificity",
                         "sensitivity"])
        writer.writerows(all_rows)

    summary = eval_dir / "summary.csv"
    with open(summary, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["region", "dsc", "hd95", "specificity", "sensitivity"])
        for region in ("WT", "TC", "ET"):
            rows = [r for r in all_rows if r[1] == region]
            means = [float(np.mean([r[i] for r in rows])) for i in (2, 3, 4, 5)]
            writer.writerow([region] + [f"{m:.6f}" for m in means])
    print(f"wrote {per_case} and {summary}")

    if args.overlay:
        overlay_dir = eval_dir / "overlays"
        for cid in sorted(preds):
            _write_overlays(cfg, cid, preds[cid], gts[cid], overlay_dir,
                            args.overlay_planes or list(PLANES))
        print(f"wrote overlays under {overlay_dir}")
    return 0


def _write_overlays(cfg, case_id, pred_path, gt_path, out_dir, planes):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap

    flair_path = Path(cfg.data_root) / case_id / f"{case_id}_flair.nii.gz"
    if not flair_path.exists():
        return
    flair, _ = nifti.read(flair_path)
    pred, _ = nifti.read(pred_path)
    gt, _ = nifti.read(gt_path)
    cmap = ListedColormap([(0, 0, 0, 0), (1, 0, 0, 0.5), (0, 1, 0, 0.5),
                           (0, 0, 1, 0.5), (1, 1, 0, 0.5)])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for plane in planes:
        axis = triplanar.PLANE_AXIS[plane]
        # center on the tumor when one exists
        fg = np.nonzero(gt.take(range(gt.shape[axis]), axis=axis).sum(
            axis=tuple(i for i in range(3) if i != axis)))[0]
        k = int(fg.mean()) if fg.size else gt.shape[axis] // 2
        f_sl = np.take(flair, k, axis=axis)
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        for ax, lab, title in zip(axes, (gt, pred), ("ground truth", "prediction")):
            ax.imshow(f_sl.T, cmap="gray", origin="lower")
            ax.imshow(np.take(lab, k, axis=axis).T, cmap=cmap, origin="lower",
                      vmin=0, vmax=4, interpolation="nearest")
            ax.set_title(f"{case_id} {plane} ({title})")
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(out_dir / f"{case_id}_{plane}.png", dpi=100)
        plt.close(fig)


def _features_dir(cfg):
    return Path(cfg.out_root) / "features"


def _extract_case_features(cfg, case_id, models, heads, clinical):
    bundle, _ = load_preprocessed_case(_preprocessed_dir(cfg), case_id, clinical)
    vecs = {plane: survival.extract_plane_features(bundle, plane, models[plane],
                                                   heads[plane])
            for plane in PLANES}
    fused = survival.fuse_features(vecs["sagittal"], vecs["coronal"],
                                   vecs["axial"])
    return survival.SurvivalSample(case_id=case_id, features=fused,
                                   age=bundle.age,
                                   survival_days=bundle.survival_days)


def cmd_train_surv(args):
    cfg = _load_config(args)
    surv_dir = Path(cfg.out_root) / "survival"
    _echo_config(cfg, surv_dir)
    try:
        models = _load_plane_models(cfg, PLANES)
    except TrisegError as e:
        print(str(e), file=sys.stderr)
        return 1
    heads = survival.make_feature_heads(cfg.network.level_filters[-1], cfg.seed)
    clinical = _read_clinical(cfg)
    feat_dir = _features_dir(cfg)
    feat_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    for cid in args.cases or _list_preprocessed(_preprocessed_dir(cfg)):
        cached = feat_dir / f"{cid}_features.json"
        if cached.exists():
            samples.append(survival.SurvivalSample.load(cached))
            continue
        try:
            sample = _extract_case_features(cfg, cid, models, heads, clinical)
        except Exception as e:
            print(f"feature extraction failed for {cid}: {e}", file=sys.stderr)
            return 1
        sample.save(feat_dir)
        samples.append(sample)

    usable = [s for s in samples if s.survival_days is not None
              and s.age is not None]
    try:
        model, report = survival.train_survival(usable, cfg.survival)
    except TrisegError as e:
        print(str(e), file=sys.stderr)
        return 1
    survival.save_survival_model(surv_dir / "model.pt", model, heads=heads,
                                 seed=cfg.seed)
    (surv_dir / "report.json").write_text(json.dumps(report, indent=2))
    print(f"trained on {report['n_train']} cases; report: {report}")
    return 0


def cmd_predict_surv(args):
    cfg = _load_config(args)
    surv_dir = Path(cfg.out_root) / "survival"
    model_path = surv_dir / "model.pt"
    if not model_path.exists():
        print(f"missing survival model {model_path}", file=sys.stderr)
        return 1
    try:
        models = _load_plane_models(cfg, PLANES)
    except TrisegError as e:
        print(str(e), file=sys.stderr)
        return 1
    model, heads = survival.load_survival_model(model_path,
                                                dropout=cfg.survival.dropout)
    if not heads:
        heads = survival.make_feature_heads(cfg.network.level_filters[-1],
                                            cfg.seed)
    clinical = _read_clinical(cfg)
    out_csv = Path(args.output or surv_dir / "predictions.csv")
    out_csv.parent.mkdir(parents=True, exist_ok=True)

    case_ids = args.cases or _list_preprocessed(_preprocessed_dir(cfg))
    rows, preds, targets = [], [], []
    failures = 0
    for cid in case_ids:
        try:
            sample = _extract_case_features(cfg, cid, models, heads, clinical)
        except Exception as e:
            print(f"prediction failed for {cid}: {e}", file=sys.stderr)
            failures += 1
            continue
        if sample.age is None:
            rows.append([cid, "", "", "missing_age"])
            continue
        days = model.predict_days(sample.features, sample.age)
        cls = survival.classify_survival(max(days, 0.0), model.thresholds)
        rows.append([cid, f"{days:.1f}", cls, ""])
        if sample.survival_days is not None:
            preds.append(days)
            targets.append(sample.survival_days)

    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "predicted_days", "class", "error"])
        writer.writerows(rows)
    print(f"wrote {out_csv}")

    if args.evaluate and targets:
        report = survival.evaluate_survival(preds, targets, model.thresholds)
        print(f"mse={report['mse']:.3f} spearman_r={report['spearman_r']:.3f} "
              f"accuracy={report['accuracy']:.4f}")
    return 1 if failures else 0


def cmd_make_phantoms(args):
    spec = scaled_spec(tuple(args.shape), seed=args.seed or 0)
    ids = write_phantom_dataset(args.root, n_cases=args.cases_n, spec=spec,
                                seed=args.seed or 0)
    print(f"wrote {len(ids)} phantom case(s) under {args.root}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="triseg",
        description="Triplanar brain-tumor segmentation and survival "
                    "prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cases=True):
        p.add_argument("--config", help="run config YAML")
        p.add_argument("--data-root", help="override data root")
        p.add_argument("--out-root", help="override output root")
        p.add_argument("--seed", type=int, help="override seed")
        p.add_argument("--workers", type=int, default=1,
                       help="per-case parallel workers")
        if cases:
            p.add_argument("--cases", nargs="*", help="restrict to case ids")

    p = sub.add_parser("preprocess", help="intensity pipeline + crop manifests")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-seg", help="train one planar segmentation model")
    common(p)
    p.add_argument("--plane", choices=PLANES, required=True)
    p.add_argument("--iterations", type=int, help="override iteration count")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-surv", help="extract features and train the "
                                          "survival regressor")
    common(p)
    p.set_defaults(func=cmd_train_surv)

    p = sub.add_parser("infer", help="triplanar inference to BraTS label files")
    common(p)
    p.add_argument("--planes", nargs="*", choices=PLANES,
                   help="subset of planes (default all three)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="per-case and summary metrics")
    common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--overlay", action="store_true",
                   help="write FLAIR+label overlay images")
    p.add_argument("--overlay-planes", nargs="*", choices=PLANES)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict-surv", help="predict survival days per case")
    common(p)
    p.add_argument("--output", help="output CSV path")
    p.add_argument("--evaluate", action="store_true",
                   help="also report mse/spearman/accuracy when targets exist")
    p.set_defaults(func=cmd_predict_surv)

    p = sub.add_parser("make-phantoms", help="emit a synthetic BraTS-style "
                                             "dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--cases-n", type=int, default=4)
    p.add_argument("--shape", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_phantoms)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrisegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
