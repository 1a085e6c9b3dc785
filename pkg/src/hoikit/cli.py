"""Command-line batch runner.

    hoikit [--config RUN.json] [--seed N] [--jobs N] [--out DIR] COMMAND ...

Commands read a line-delimited JSON manifest of samples (``framepair`` reads
clip directories instead) and write deterministic JSON under ``--out``.
Exit status: 0 all good, 1 hard error (nothing succeeded), 2 partial failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .contact import ContactParams, compute_contact_maps
from .framepair import FramePairError, SelectionThresholds, load_clip, process_clip
from .geom import PointCloud, read_obj, read_xyz, sample_surface, write_pgm
from .hand import (HandParams, HandTemplate, TemplateConfig, balance_resample, contact_label7,
                   default_template, generate_capsule_hand_template, pose_hand)
from .metrics import (MetricReport, diversity, diversity_features, get_extractor, mpvpe,
                      p_fid, part_iou_f1, penetration_depth, penetration_volume)
from .refine import DivergedError, RefineWeights, Scene, TtaConfig, tta_refine

FORMAT_VERSION = "hoikit-output/1"
log = logging.getLogger("hoikit")


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class MetricOptions:
    voxel_size: float = 1.0  # mm
    clusters: int = 20
    extractor: str = "moments-v1"
    min_hits: int = 3  # contacted vertices needed to flag a hand category
    object_points: int = 3000  # surface samples when a sample has no point file


@dataclass(frozen=True)
class RunConfig:
    contact: ContactParams = field(default_factory=ContactParams)
    weights: RefineWeights = field(default_factory=RefineWeights)
    tta: TtaConfig = field(default_factory=TtaConfig)
    selection: SelectionThresholds = field(default_factory=SelectionThresholds)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    template: str | None = None  # path to a template JSON; the built-in one otherwise
    jobs: int = 1
    seed: int = 0

    _SECTIONS = {"contact": ContactParams, "weights": RefineWeights, "tta": TtaConfig,
                 "selection": SelectionThresholds, "metrics": MetricOptions}

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(cls._SECTIONS) - {"template", "jobs", "seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: t(**doc[k]) for k, t in cls._SECTIONS.items() if k in doc}
        for k in ("template", "jobs", "seed"):
            if k in doc:
                kw[k] = doc[k]
        return cls(**kw)

    def to_json(self) -> dict:
        doc = {k: asdict(getattr(self, k)) for k in self._SECTIONS}
        doc["tta"]["betas"] = list(doc["tta"]["betas"])
        doc.update(template=self.template, jobs=self.jobs, seed=self.seed)
        return doc


def substream(seed: int, name: str, *keys) -> int:
    """Independent 63-bit seed for a named purpose (and e.g. a sample id)."""
    h = hashlib.sha256("/".join(map(str, (seed, name) + keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ---------------------------------------------------------------- samples

@dataclass
class SampleRecord:
    id: str
    object_mesh: Path
    gt_params: Path
    object_points: Path | None = None
    sampling: dict | None = None
    pred_params: Path | None = None
    hand_contact: Path | None = None
    object_contact: Path | None = None
    action: str | None = None
    scale: float = 1.0

    @classmethod
    def from_json(cls, doc: dict, base: Path) -> "SampleRecord":
        def path(k):
            v = doc.get(k)
            return None if v is None else (base / v)

        if "id" not in doc or "object_mesh" not in doc or "gt_params" not in doc:
            raise ValueError("sample needs id, object_mesh and gt_params")
        return cls(id=str(doc["id"]), object_mesh=path("object_mesh"), gt_params=path("gt_params"),
                   object_points=path("object_points"), sampling=doc.get("sampling"),
                   pred_params=path("pred_params"), hand_contact=path("hand_contact"),
                   object_contact=path("object_contact"), action=doc.get("action"),
                   scale=float(doc.get("scale", 1.0)))


def read_manifest(path) -> list:
    """Parsed records in file order; unparseable lines become (id, error) tuples."""
    path = Path(path)
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(SampleRecord.from_json(json.loads(line), path.parent))
        except (ValueError, TypeError) as e:
            out.append((f"line{n}", f"bad manifest line {n}: {e}"))
    return out


def _load_bool(path, n: int) -> np.ndarray:
    path = Path(path)
    a = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, ndmin=1)
    a = np.asarray(a).astype(bool).ravel()
    if len(a) != n:
        raise ValueError(f"{path.name}: expected {n} entries, got {len(a)}")
    return a


@dataclass
class Loaded:
    rec: SampleRecord
    obj_mesh: object
    obj_points: PointCloud
    gt: HandParams
    pred: HandParams | None


def load_sample(rec: SampleRecord, cfg: RunConfig) -> Loaded:
    mesh = read_obj(rec.object_mesh)
    if rec.object_points is not None:
        pts = read_xyz(rec.object_points)
    else:
        spec = rec.sampling or {}
        n = int(spec.get("n", cfg.metrics.object_points))
        seed = spec.get("seed")
        seed = substream(cfg.seed, "sampling", rec.id) if seed is None else int(seed)
        pts = sample_surface(mesh, n, np.random.default_rng(seed))
    gt = HandParams.load(rec.gt_params)
    pred = HandParams.load(rec.pred_params) if rec.pred_params is not None else None
    return Loaded(rec, mesh, pts, gt, pred)


def _template(cfg: RunConfig) -> HandTemplate:
    return HandTemplate.load(cfg.template) if cfg.template else default_template()


def _gt_maps(s: Loaded, cfg: RunConfig, tpl: HandTemplate, gt_verts):
    if s.rec.hand_contact is not None and s.rec.object_contact is not None:
        return (_load_bool(s.rec.hand_contact, tpl.n_vertices),
                _load_bool(s.rec.object_contact, len(s.obj_points)))
    c_o, c_h = compute_contact_maps(s.obj_points, gt_verts, cfg.contact)
    return c_h, c_o


# ---------------------------------------------------------------- per-sample jobs

def _job_contact(rec: SampleRecord, cfg: RunConfig) -> dict:
    tpl = _template(cfg)
    s = load_sample(rec, cfg)
    verts = pose_hand(tpl, s.gt).vertices
    c_o, c_h = compute_contact_maps(s.obj_points, verts, cfg.contact)
    label = contact_label7(c_h, tpl.part_label, cfg.metrics.min_hits)
    return {"id": rec.id, "action": rec.action, "scale": rec.scale, "label7": str(label),
            "hand_contact": np.nonzero(c_h)[0].tolist(), "object_contact": np.nonzero(c_o)[0].tolist(),
            "n_hand": int(len(c_h)), "n_object": int(len(c_o))}


def _job_metrics(rec: SampleRecord, cfg: RunConfig) -> dict:
    tpl = _template(cfg)
    s = load_sample(rec, cfg)
    if s.pred is None:
        raise ValueError("sample has no pred_params")
    gt = pose_hand(tpl, s.gt)
    pred = pose_hand(tpl, s.pred)
    c_h_gt, _ = _gt_maps(s, cfg, tpl, gt.vertices)
    _, c_h_pred = compute_contact_maps(s.obj_points, pred.vertices, cfg.contact)
    lab_gt = contact_label7(c_h_gt, tpl.part_label, cfg.metrics.min_hits)
    lab_pred = contact_label7(c_h_pred, tpl.part_label, cfg.metrics.min_hits)
    iou, f1 = part_iou_f1(lab_pred, lab_gt)
    hand_mesh = pred.mesh(tpl)
    row = {"id": rec.id, "action": rec.action, "scale": rec.scale,
           "mpvpe": mpvpe(pred.vertices, gt.vertices),
           "pd": penetration_depth(hand_mesh, s.obj_mesh),
           "pv": penetration_volume(hand_mesh, s.obj_mesh, cfg.metrics.voxel_size),
           "p_iou": iou, "p_f1": f1, "label_gt": str(lab_gt), "label_pred": str(lab_pred)}
    arrays = {"pred_vertices": pred.vertices, "pred_wrist": pred.joints[0], "gt_vertices": gt.vertices}
    return {"row": row, "arrays": arrays}


def _trace_csv(trace) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["iteration", "contact", "pene", "anatomy", "self", "cyc", "total"])
    for i, t in enumerate(trace):
        wr.writerow([i] + [repr(float(v)) for v in (t.contact, t.pene, t.anatomy, t.self, t.cyc, t.total)])
    return buf.getvalue()


def _job_refine(rec: SampleRecord, cfg: RunConfig) -> dict:
    tpl = _template(cfg)
    s = load_sample(rec, cfg)
    if s.pred is None:
        raise ValueError("sample has no pred_params to refine")
    c_h, c_o = _gt_maps(s, cfg, tpl, pose_hand(tpl, s.gt).vertices)
    scene = Scene(s.obj_mesh, s.obj_points, c_h, c_o)
    try:
        best, trace = tta_refine(tpl, s.pred, scene, cfg.weights, cfg.tta)
    except DivergedError as e:
        raise ValueError(f"{e} (after {len(e.trace)} evaluations)") from None
    totals = [t.total for t in trace]
    best_total = min(totals)
    return {"id": rec.id, "params": best.to_json(), "trace_csv": _trace_csv(trace),
            "initial_total": totals[0], "best_total": best_total,
            "best_iteration": int(np.argmin(totals)), "reduction": totals[0] - best_total}


def _call(args):
    fn, rec, cfg = args
    if isinstance(rec, tuple):  # manifest parse failure
        return rec[0], None, rec[1]
    try:
        return rec.id, fn(rec, cfg), None
    except (OSError, ValueError, KeyError, TypeError) as e:
        return rec.id, None, f"{type(e).__name__}: {e}"


def run_samples(fn, records, cfg: RunConfig):
    """Run ``fn`` per record; results come back in manifest order."""
    work = [(fn, r, cfg) for r in records]
    if cfg.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            return list(ex.map(_call, work))
    return [_call(w) for w in work]


# ---------------------------------------------------------------- output helpers

def dump_json(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _envelope(cmd: str, cfg: RunConfig, body: dict) -> dict:
    return dict(body, format=FORMAT_VERSION, command=cmd, config=cfg.to_json())


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _finish(out: Path, cmd: str, errors: list, n_ok: int) -> int:
    _write(out / f"{cmd}_errors.json", dump_json([{"id": i, "error": e} for i, e in errors]))
    for i, e in errors:
        print(f"error: {i}: {e}", file=sys.stderr)
    if not errors:
        return 0
    return 2 if n_ok else 1


def _safe_name(sample_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in sample_id)


# ---------------------------------------------------------------- commands

def cmd_contact(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    results = run_samples(_job_contact, read_manifest(args.manifest), cfg)
    errors, done = [], []
    for sid, res, err in results:
        if err:
            errors.append((sid, err))
            continue
        _write(out / "contact" / f"{_safe_name(sid)}.json", dump_json(_envelope("contact", cfg, res)))
        done.append({"id": sid, "label7": res["label7"]})
    _write(out / "contact.json", dump_json(_envelope("contact", cfg, {"samples": done})))
    return _finish(out, "contact", errors, len(done))


def build_report(rows_arrays: list, cfg: RunConfig) -> MetricReport:
    rows = [r["row"] for r in rows_arrays]
    report = MetricReport(samples=rows)
    n = len(rows)
    if n:
        k = min(cfg.metrics.clusters, n)
        feats = diversity_features([r["arrays"]["pred_vertices"] for r in rows_arrays],
                                   [r["arrays"]["pred_wrist"] for r in rows_arrays])
        report.entropy, report.cluster_size = diversity(feats, k, substream(cfg.seed, "kmeans"))
        report.p_fid = p_fid([r["arrays"]["pred_vertices"] for r in rows_arrays],
                             [r["arrays"]["gt_vertices"] for r in rows_arrays],
                             get_extractor(cfg.metrics.extractor))
        report.meta["clusters_used"] = k
    report.meta["p_iou_categories"] = 7
    return report


def cmd_metrics(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    results = run_samples(_job_metrics, read_manifest(args.manifest), cfg)
    errors = [(sid, err) for sid, res, err in results if err]
    report = build_report([res for _, res, err in results if not err], cfg)
    _write(out / "metrics.json", dump_json(_envelope("metrics", cfg, report.to_json())))
    _write(out / "metrics.txt", report.to_table())
    return _finish(out, "metrics", errors, len(report.samples))


def cmd_refine(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    results = run_samples(_job_refine, read_manifest(args.manifest), cfg)
    errors, summary = [], []
    for sid, res, err in results:
        if err:
            errors.append((sid, err))
            continue
        name = _safe_name(sid)
        _write(out / "refine" / f"{name}.json", dump_json(_envelope("refine", cfg, {"id": sid, "params": res["params"]})))
        _write(out / "refine" / f"{name}_trace.csv", res["trace_csv"])
        summary.append({k: res[k] for k in ("id", "initial_total", "best_total", "best_iteration", "reduction")})
    _write(out / "refine.json", dump_json(_envelope("refine", cfg, {"samples": summary})))
    return _finish(out, "refine", errors, len(summary))


def cmd_framepair(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    errors, done = [], []
    for clip in args.clips:
        clip = Path(clip)
        try:
            res = process_clip(load_clip(clip), cfg.selection, substream(cfg.seed, "ransac", clip.name))
        except (FramePairError, OSError, ValueError) as e:
            errors.append((clip.name, str(e)))
            continue
        doc = res.to_json()
        doc["clip"] = clip.name
        doc["definitions"] = {"i_max": "argmax IoU, earliest on ties",
                              "delta_iou": "backward difference, forward at the first frame"}
        _write(out / "framepair" / f"{clip.name}.json", dump_json(_envelope("framepair", cfg, doc)))
        write_pgm(out / "framepair" / f"{clip.name}_inpaint.pgm", res.inpaint_mask)
        done.append(clip.name)
    return _finish(out, "framepair", errors, len(done))


def cmd_template(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if cfg.template:
        tpl = _template(cfg)
    else:
        tpl = generate_capsule_hand_template(TemplateConfig(seed=cfg.seed))
    doc = _envelope("template", cfg, {"template": tpl.to_json()})
    _write(out / "template.json", dump_json(doc))
    return 0


def cmd_resample(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    results = run_samples(_job_contact, read_manifest(args.manifest), cfg)
    errors = [(sid, err) for sid, res, err in results if err]
    ok = [res for _, res, err in results if not err]
    order = balance_resample([r["label7"] for r in ok], substream(cfg.seed, "resampling")) if ok else []
    body = {"labels": {r["id"]: r["label7"] for r in ok}, "resampled": [ok[i]["id"] for i in order]}
    _write(out / "resample.json", dump_json(_envelope("resample", cfg, body)))
    return _finish(out, "resample", errors, len(ok))


COMMANDS = {"contact": cmd_contact, "metrics": cmd_metrics, "refine": cmd_refine,
            "framepair": cmd_framepair, "template": cmd_template, "resample": cmd_resample}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoikit", description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="RunConfig JSON file")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--jobs", type=int, help="worker processes (overrides the config)")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("contact", "metrics", "refine", "resample"):
        p = sub.add_parser(name)
        p.add_argument("manifest", help="line-delimited JSON sample manifest")
    p = sub.add_parser("framepair")
    p.add_argument("clips", nargs="+", help="clip directories with hand_####.pgm / obj_####.pgm")
    sub.add_parser("template")
    return ap


def resolve_config(args) -> RunConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.jobs is not None:
        doc["jobs"] = args.jobs
    cfg = RunConfig.from_json(doc)
    if cfg.jobs < 1:
        raise ValueError("jobs must be >= 1")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
