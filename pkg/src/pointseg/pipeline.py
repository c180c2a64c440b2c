"""End-to-end experiment orchestration.

The DAG is: synthesize a split -> simulate point annotations and expand them
into partial labels -> stage-1 training per ablation arm -> pseudo-label
generation -> stage-2 co-training of the two networks -> evaluation ->
one report CSV plus figures.

Every stage is content-addressed: its cache key hashes the config sections
the stage depends on plus its upstream keys, so two runs with the same
config reuse artifacts byte-for-byte while any upstream edit invalidates
exactly what it affects.  All randomness is derived from the single run
seed, execution order is fixed, and CSV floats are written with a fixed
format, which together make the final report deterministic.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from . import distill, losses, metrics, nets, synth, tape
from .annotate import simulate_annotation
from .config import ARMS, config_hash
from .errors import NumericError, ValidationError
from .geodesic import build_partition, expand_foreground, geodesic_distance
from .geodesic import precision_recall_of_expansion
from .nets import build_model, load_checkpoint, save_checkpoint
from .tape import Tensor, backward
from .volume import (RegionPartition, Volume3, load_manifest, load_volume,
                     save_annotation, save_volume)

log = logging.getLogger(__name__)

EXPANSION_EPS_GRID = (0.1, 0.2, 0.3, 0.4)
VAL_EVERY = 5
FMT = "%.6f"


# ---------------------------------------------------------------------------
# workspace and cache plumbing


@dataclass(frozen=True)
class Workspace:
    """Directory layout of one experiment output tree."""

    root: str

    def cache_dir(self, stage, key):
        return os.path.join(self.root, "cache", stage, key[:16])

    @property
    def figure_dir(self):
        return os.path.join(self.root, "figures")

    @property
    def report_path(self):
        return os.path.join(self.root, "report.csv")


def _is_done(d):
    return os.path.exists(os.path.join(d, "DONE"))


def _mark_done(d):
    with open(os.path.join(d, "DONE"), "w") as fh:
        fh.write("ok\n")


def _derived_seed(*entropy):
    """Stable 63-bit seed from mixed int/str tokens."""
    ints = []
    for e in entropy:
        if isinstance(e, str):
            ints.extend(e.encode("utf-8"))
        else:
            ints.append(int(e))
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _fmt(v):
    return FMT % v


# ---------------------------------------------------------------------------
# case loading


@dataclass
class CaseData:
    """One case with everything the trainers need, in canonical orientation."""

    case_id: str
    image: Volume3
    gt: np.ndarray
    omega_m: np.ndarray
    part: RegionPartition = None
    q: np.ndarray = None


def _load_split_cases(data_dir, split):
    entries = load_manifest(os.path.join(data_dir, f"{split}.tsv"))
    out = []
    for e in entries:
        img, gt, m = synth.load_case(e, data_dir)
        out.append(CaseData(e.case_id, img, gt, m))
    return out


def _attach_labels(cases, labels_dir):
    for c in cases:
        q = load_volume(os.path.join(labels_dir, f"{c.case_id}_q.pavol")).arr()
        part = RegionPartition(omega_m=c.omega_m, omega_b=q == 0, omega_f=q == 1)
        c.part, c.q = part, q
    return cases


def _full_supervision_labels(cases):
    """Dense GT labels expressed as a partition, for the upper-bound arm."""
    for c in cases:
        part = RegionPartition(omega_m=c.omega_m, omega_b=~c.gt, omega_f=c.gt)
        c.part = part
        c.q = part.to_q().arr()
    return cases


# ---------------------------------------------------------------------------
# stage: data


def ensure_data(ws, cfg):
    """Synthesize the train/val/test split once per (synth, split, seed)."""
    key = config_hash(cfg, ("synth", "split"), extra=("data", cfg.seed))
    d = ws.cache_dir("data", key)
    if not _is_done(d):
        os.makedirs(d, exist_ok=True)
        scfg = replace(cfg.synth, rng_seed=_derived_seed(cfg.seed, "synth"))
        synth.generate_split(scfg, cfg.n_train, cfg.n_val, cfg.n_test, d)
        _mark_done(d)
        log.info("data: generated split at %s", d)
    return d, key


# ---------------------------------------------------------------------------
# stage: annotation + expansion


def ensure_labels(ws, cfg, data_dir, data_key, variant=None):
    """Point annotations and expanded partial labels for every training case.

    Writes per case the annotation text file and the partial label volume,
    plus an expansion-fidelity table over a fixed epsilon grid (the grid
    reuses each case's single geodesic field, so it costs only thresholds).
    """
    variant = variant or cfg.annotate.variant
    key = config_hash(cfg, ("annotate", "expand"),
                      extra=("labels", variant, data_key, cfg.seed))
    d = ws.cache_dir("labels", key)
    if _is_done(d):
        return d, key
    os.makedirs(d, exist_ok=True)
    rows = []
    for c in _load_split_cases(data_dir, "train"):
        acfg = replace(cfg.annotate, variant=variant,
                       rng_seed=_derived_seed(cfg.seed, "annotate", c.case_id))
        ann = simulate_annotation(c.gt, c.omega_m, acfg)
        save_annotation(os.path.join(d, f"{c.case_id}.ann"), ann)
        part, q = build_partition(c.image, c.omega_m, ann, cfg.expand)
        save_volume(os.path.join(d, f"{c.case_id}_q.pavol"), q)
        field = geodesic_distance(c.image, ann.fg, ~part.omega_b, cfg.expand)
        for eps in EXPANSION_EPS_GRID:
            pr, rc = precision_recall_of_expansion(
                expand_foreground(field, eps), c.gt)
            rows.append((c.case_id, _fmt(eps), _fmt(pr), _fmt(rc)))
    _write_csv(os.path.join(d, "expansion.csv"),
               ("case_id", "epsilon", "precision", "recall"), rows)
    _mark_done(d)
    log.info("labels: %s annotations at %s", variant, d)
    return d, key


# ---------------------------------------------------------------------------
# stage-1 training


def _arm_loss_cfg(loss_cfg, arm):
    if arm not in ARMS:
        raise ValidationError(f"unknown arm {arm!r}")
    if arm in ("baseline", "full"):
        return replace(loss_cfg, alpha=0.0, beta=0.0)
    if arm == "mcrf":
        return replace(loss_cfg, beta=0.0)
    if arm == "vm":
        return replace(loss_cfg, alpha=0.0)
    return loss_cfg


def _flip_case(c, flips):
    """Image array, q, and partition in a flipped orientation."""
    if not flips:
        return c.image.arr(), c.q, c.part
    x = np.ascontiguousarray(np.flip(c.image.arr(), axis=flips))
    q = np.ascontiguousarray(np.flip(c.q, axis=flips))
    part = RegionPartition(
        omega_m=np.ascontiguousarray(np.flip(c.part.omega_m, axis=flips)),
        omega_b=np.ascontiguousarray(np.flip(c.part.omega_b, axis=flips)),
        omega_f=np.ascontiguousarray(np.flip(c.part.omega_f, axis=flips)),
    )
    return x, q, part


def _snapshot(model):
    return {k: t.data.copy() for k, t in model.param_items()}


def _restore(model, snap):
    for k, t in model.param_items():
        t.data = snap[k].copy()
        t.grad = None


def _mean_val_dice(model, val_cases):
    scores = [metrics.dice(nets.predict_mask(model, c.image), c.gt)
              for c in val_cases]
    return float(np.mean(scores))


def stage1_train(train_cases, val_cases, cfg, arch, arm, init_seed, out_dir):
    """Train one network on partial labels; returns (best_ckpt, final_ckpt).

    Writes loss_curve.csv (per-epoch term means), val_curve.csv (validation
    Dice every few epochs), and the two checkpoints.  A non-finite loss
    aborts the run but keeps the last completed epoch's parameters, so a
    blown-up run still yields its last good model.
    """
    os.makedirs(out_dir, exist_ok=True)
    loss_cfg = _arm_loss_cfg(cfg.loss, arm)
    tcfg = cfg.train1
    model = build_model(arch, cfg.base_channels, cfg.depth, rng_seed=init_seed)
    opt = nets.init_opt_state(model)
    rng = np.random.default_rng(_derived_seed(cfg.seed, "stage1", arch, arm, init_seed))

    caches = None
    if loss_cfg.alpha > 0:
        caches = {c.case_id: losses.CachedCrf(c.image.arr(), cfg.crf,
                                              valid_mask=c.omega_m)
                  for c in train_cases}

    dims = train_cases[0].image.dims
    loss_rows, val_rows = [], []
    best = {"dice": -1.0, "epoch": -1, "snap": _snapshot(model)}
    last_good = _snapshot(model)
    aborted = False

    for epoch in range(tcfg.max_epochs):
        lr = nets.poly_lr(epoch, tcfg)
        scale = losses.warmup_scale(epoch, loss_cfg.warmup_epochs)
        epoch_cfg = replace(loss_cfg, alpha=loss_cfg.alpha * scale,
                            beta=loss_cfg.beta * scale)
        order = rng.permutation(len(train_cases))
        sums = {"psup": 0.0, "mcrf": 0.0, "vm": 0.0, "total": 0.0}
        try:
            for ci in order:
                c = train_cases[ci]
                flips = tuple(ax for ax in range(3)
                              if tcfg.flip_xyz and rng.random() < 0.5)
                x, q, part = _flip_case(c, flips)
                P = tape.reshape(nets.prob_map(model, Tensor(x[None, None])), dims)
                mcrf_term = None
                if caches is not None and epoch_cfg.alpha > 0:
                    mcrf_term = caches[c.case_id].loss(P, flips=flips)
                terms = losses.stage1_terms(P, q, x, part, epoch_cfg,
                                            kernel=cfg.crf, mcrf_term=mcrf_term)
                total = terms["total"]
                if not np.isfinite(total.data):
                    raise NumericError(f"non-finite loss on case {c.case_id}")
                backward(total)
                nets.sgd_step(model, opt, lr, tcfg)
                for name in sums:
                    t = terms[name]
                    sums[name] += float(t.data) if t is not None else np.nan
        except NumericError as exc:
            log.warning("stage1 %s/%s epoch %d aborted: %s; keeping last good "
                        "parameters", arch, arm, epoch, exc)
            _restore(model, last_good)
            aborted = True
        if aborted:
            break
        last_good = _snapshot(model)
        n = len(train_cases)
        loss_rows.append((str(epoch), _fmt(sums["psup"] / n), _fmt(sums["mcrf"] / n),
                          _fmt(sums["vm"] / n), _fmt(sums["total"] / n)))
        if (epoch + 1) % VAL_EVERY == 0 or epoch == tcfg.max_epochs - 1:
            vd = _mean_val_dice(model, val_cases)
            val_rows.append((str(epoch), _fmt(vd)))
            if vd > best["dice"]:
                best = {"dice": vd, "epoch": epoch, "snap": _snapshot(model)}

    if best["epoch"] < 0:
        # aborted before any validation: score what survived
        best = {"dice": _mean_val_dice(model, val_cases), "epoch": 0,
                "snap": _snapshot(model)}

    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(final_path, model, opt)
    _restore(model, best["snap"])
    best_path = os.path.join(out_dir, "best.ckpt")
    save_checkpoint(best_path, model)
    _write_csv(os.path.join(out_dir, "loss_curve.csv"),
               ("epoch", "psup", "mcrf", "vm", "total"), loss_rows)
    _write_csv(os.path.join(out_dir, "val_curve.csv"),
               ("epoch", "val_dice"), val_rows)
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        fh.write(f"best_epoch = {best['epoch']}\n")
        fh.write(f"best_val_dice = {_fmt(best['dice'])}\n")
        fh.write(f"aborted = {aborted}\n")
    return best_path, final_path


def ensure_stage1(ws, cfg, arch, arm, data, labels, replica=0):
    """Cached stage-1 run; ``replica`` picks an independent initialization."""
    data_dir, data_key = data
    dep_key = data_key if arm == "full" else labels[1]
    key = config_hash(cfg, ("loss", "crf", "train1", "net"),
                      extra=("stage1", arch, arm, replica, dep_key, cfg.seed))
    d = ws.cache_dir("stage1", key)
    if _is_done(d):
        return d, key
    train_cases = _load_split_cases(data_dir, "train")
    if arm == "full":
        _full_supervision_labels(train_cases)
    else:
        _attach_labels(train_cases, labels[0])
    val_cases = _load_split_cases(data_dir, "val")
    init_seed = _derived_seed(cfg.seed, "init", arch, arm, replica)
    stage1_train(train_cases, val_cases, cfg, arch, arm, init_seed, d)
    _mark_done(d)
    log.info("stage1: %s/%s replica %d done", arch, arm, replica)
    return d, key


# ---------------------------------------------------------------------------
# pseudo labels


def pseudo_label_gen(model, cases, out_dir):
    """Hard pseudo labels for every case, persisted as u8 label volumes."""
    os.makedirs(out_dir, exist_ok=True)
    for c in cases:
        pred = nets.predict_mask(model, c.image).astype(np.uint8)
        save_volume(os.path.join(out_dir, f"{c.case_id}_pred.pavol"),
                    Volume3.from_array(pred, spacing=c.image.spacing, kind="label"))


def ensure_pseudo(ws, cfg, stage1, data):
    key = config_hash(cfg, (), extra=("pseudo", stage1[1]))
    d = ws.cache_dir("pseudo", key)
    if not _is_done(d):
        model, _ = load_checkpoint(os.path.join(stage1[0], "best.ckpt"))
        pseudo_label_gen(model, _load_split_cases(data[0], "train"), d)
        _mark_done(d)
    return d, key


# ---------------------------------------------------------------------------
# stage-2 co-training


def scm_train(models, train_cases, val_cases, cfg, dcfg, out_dir):
    """Co-train the two role networks on their own hard labels plus each
    other's softened predictions, with periodic target refresh.

    models maps role "a"/"b" to a stage-1 initialized network.  Writes
    scm_curve.csv (per-epoch kd/self means per role), val_curve.csv
    (validation Dice per role), and best/final checkpoints per role.
    """
    os.makedirs(out_dir, exist_ok=True)
    tcfg = cfg.train2
    roles = distill.ROLES
    opts = {r: nets.init_opt_state(models[r]) for r in roles}
    rng = np.random.default_rng(_derived_seed(cfg.seed, "stage2", repr(dcfg.lam)))
    cases_by_id = {c.case_id: c.image.arr() for c in
                   sorted(train_cases, key=lambda c: c.case_id)}
    case_list = sorted(train_cases, key=lambda c: c.case_id)

    curve_rows, val_rows = [], []
    best = {r: {"dice": -1.0, "epoch": -1, "snap": _snapshot(models[r])}
            for r in roles}
    last_good = {r: _snapshot(models[r]) for r in roles}
    state = None
    aborted = False

    for epoch in range(tcfg.max_epochs):
        if epoch % dcfg.refresh_period == 0:
            state = distill.refresh_caches(models, cases_by_id,
                                           dcfg.temperature, epoch)
        lr = nets.poly_lr(epoch, tcfg)
        order = rng.permutation(len(case_list))
        sums = {r: {"kd": 0.0, "self": 0.0} for r in roles}
        try:
            for ci in order:
                c = case_list[ci]
                for role in roles:
                    flips = tuple(ax for ax in range(3)
                                  if tcfg.flip_xyz and rng.random() < 0.5)
                    x = np.ascontiguousarray(np.flip(c.image.arr(), axis=flips)) \
                        if flips else c.image.arr()
                    total, parts = distill.scm_step(
                        models[role], x, c.case_id, role, state, dcfg,
                        epoch, flips=flips)
                    if not np.isfinite(total.data):
                        raise NumericError(f"non-finite loss on case {c.case_id}")
                    backward(total)
                    nets.sgd_step(models[role], opts[role], lr, tcfg)
                    for name in ("kd", "self"):
                        t = parts[name]
                        sums[role][name] += float(t.data) if t is not None else np.nan
        except NumericError as exc:
            log.warning("stage2 epoch %d aborted: %s; keeping last good "
                        "parameters", epoch, exc)
            for r in roles:
                _restore(models[r], last_good[r])
            aborted = True
        if aborted:
            break
        for r in roles:
            last_good[r] = _snapshot(models[r])
        n = len(case_list)
        curve_rows.append((str(epoch),
                           _fmt(sums["a"]["kd"] / n), _fmt(sums["a"]["self"] / n),
                           _fmt(sums["b"]["kd"] / n), _fmt(sums["b"]["self"] / n)))
        if (epoch + 1) % VAL_EVERY == 0 or epoch == tcfg.max_epochs - 1:
            dices = {r: _mean_val_dice(models[r], val_cases) for r in roles}
            val_rows.append((str(epoch), _fmt(dices["a"]), _fmt(dices["b"])))
            for r in roles:
                if dices[r] > best[r]["dice"]:
                    best[r] = {"dice": dices[r], "epoch": epoch,
                               "snap": _snapshot(models[r])}

    paths = {}
    for r in roles:
        if best[r]["epoch"] < 0:
            best[r] = {"dice": _mean_val_dice(models[r], val_cases), "epoch": 0,
                       "snap": _snapshot(models[r])}
        save_checkpoint(os.path.join(out_dir, f"final_{r}.ckpt"), models[r], opts[r])
        _restore(models[r], best[r]["snap"])
        paths[r] = os.path.join(out_dir, f"best_{r}.ckpt")
        save_checkpoint(paths[r], models[r])
    _write_csv(os.path.join(out_dir, "scm_curve.csv"),
               ("epoch", "kd_a", "self_a", "kd_b", "self_b"), curve_rows)
    _write_csv(os.path.join(out_dir, "val_curve.csv"),
               ("epoch", "val_dice_a", "val_dice_b"), val_rows)
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        for r in roles:
            fh.write(f"best_epoch_{r} = {best[r]['epoch']}\n")
            fh.write(f"best_val_dice_{r} = {_fmt(best[r]['dice'])}\n")
        fh.write(f"aborted = {aborted}\n")
    return paths


def _pair_stage1(ws, cfg, pair, data, labels):
    """Stage-1 runs backing a pairing: distinct archs, or two replicas."""
    if pair == "ab":
        specs = (("net_a", 0), ("net_b", 0))
    elif pair == "aa":
        specs = (("net_a", 0), ("net_a", 1))
    else:
        specs = (("net_b", 0), ("net_b", 1))
    return tuple(ensure_stage1(ws, cfg, arch, "both", data, labels, replica=rep)
                 for arch, rep in specs)


def ensure_stage2(ws, cfg, pair, lam, data, labels):
    s1_a, s1_b = _pair_stage1(ws, cfg, pair, data, labels)
    key = config_hash(cfg, ("distill", "train2", "net"),
                      extra=("stage2", pair, repr(float(lam)),
                             s1_a[1], s1_b[1], cfg.seed))
    d = ws.cache_dir("stage2", key)
    if _is_done(d):
        return d, key
    dcfg = replace(cfg.distill, lam=float(lam), max_epochs=cfg.train2.max_epochs)
    models = {
        "a": load_checkpoint(os.path.join(s1_a[0], "best.ckpt"))[0],
        "b": load_checkpoint(os.path.join(s1_b[0], "best.ckpt"))[0],
    }
    train_cases = _load_split_cases(data[0], "train")
    val_cases = _load_split_cases(data[0], "val")
    scm_train(models, train_cases, val_cases, cfg, dcfg, d)
    _mark_done(d)
    log.info("stage2: pair %s lam %g done", pair, lam)
    return d, key


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model, cases, threshold=0.5):
    """Per-case Dice and ASSD; an empty prediction scores assd as nan so the
    degenerate case stays visible in the report."""
    out = []
    for c in cases:
        pred = nets.predict_mask(model, c.image, threshold)
        dc = metrics.dice(pred, c.gt)
        try:
            sd = metrics.assd(pred, c.gt, spacing=c.image.spacing)
        except ValidationError:
            sd = float("nan")
        out.append(metrics.EvalResult(c.case_id, dc, sd))
    return out


def write_eval_csv(path, results):
    rows = [(r.case_id, _fmt(r.dice), _fmt(r.assd_mm)) for r in results]
    agg = metrics.aggregate(results)
    rows.append(("mean±std",
                 f"{_fmt(agg['dice_mean'])}±{_fmt(agg['dice_std'])}",
                 f"{_fmt(agg['assd_mean'])}±{_fmt(agg['assd_std'])}"))
    _write_csv(path, ("case_id", "dice", "assd_mm"), rows)
    return agg


def ensure_eval(ws, cfg, ckpt_path, ckpt_key, data):
    """Cached test-split evaluation of one checkpoint; returns the aggregate."""
    key = config_hash(cfg, (), extra=("eval", ckpt_key, os.path.basename(ckpt_path),
                                      data[1]))
    d = ws.cache_dir("eval", key)
    csv_path = os.path.join(d, "eval.csv")
    if not _is_done(d):
        os.makedirs(d, exist_ok=True)
        model, _ = load_checkpoint(ckpt_path)
        results = evaluate_model(model, _load_split_cases(data[0], "test"))
        write_eval_csv(csv_path, results)
        _mark_done(d)
    # aggregates are re-derived from the CSV so cached and fresh paths agree
    rows = [ln.split(",") for ln in open(csv_path).read().splitlines()[1:]]
    per_case = [metrics.EvalResult(r[0], float(r[1]), float(r[2]))
                for r in rows if r[0] != "mean±std"]
    return metrics.aggregate(per_case), csv_path


# ---------------------------------------------------------------------------
# full experiment


def run_experiment(cfg, out_dir):
    """Execute every enabled arm and write report.csv plus figures.

    Returns the report rows as a list of dicts, one per evaluated model, in
    a fixed deterministic order.
    """
    ws = Workspace(root=out_dir)
    os.makedirs(out_dir, exist_ok=True)
    data = ensure_data(ws, cfg)
    needs_labels = any(a != "full" for a in cfg.arms) or cfg.stage2
    labels = ensure_labels(ws, cfg, data[0], data[1]) if needs_labels else None

    rows = []

    def add_row(arm, model_name, stage1_dir_key, ckpt_path):
        agg, _ = ensure_eval(ws, cfg, ckpt_path, stage1_dir_key, data)
        rows.append({
            "arm": arm, "model": model_name,
            "dice_mean": agg["dice_mean"], "dice_std": agg["dice_std"],
            "assd_mean": agg["assd_mean"], "assd_std": agg["assd_std"],
        })

    stage1_runs = {}
    for arm in cfg.arms:
        s1 = ensure_stage1(ws, cfg, "net_a", arm, data, labels)
        stage1_runs[(arm, "net_a", 0)] = s1
        add_row(arm, "net_a", s1[1], os.path.join(s1[0], "best.ckpt"))

    if cfg.stage2:
        arch_of = {"a": {"ab": "net_a", "aa": "net_a", "bb": "net_b"},
                   "b": {"ab": "net_b", "aa": "net_a", "bb": "net_b"}}
        for pair in cfg.pairs:
            for s1 in _pair_stage1(ws, cfg, pair, data, labels):
                ensure_pseudo(ws, cfg, s1, data)
            for lam in cfg.lams:
                s2 = ensure_stage2(ws, cfg, pair, lam, data, labels)
                for role in distill.ROLES:
                    add_row(f"scm_{pair}_lam{lam:g}",
                            f"{role}:{arch_of[role][pair]}", s2[1],
                            os.path.join(s2[0], f"best_{role}.ckpt"))

    header = ("arm", "model", "dice_mean", "dice_std", "assd_mean", "assd_std")
    csv_rows = [(r["arm"], r["model"], _fmt(r["dice_mean"]), _fmt(r["dice_std"]),
                 _fmt(r["assd_mean"]), _fmt(r["assd_std"])) for r in rows]
    _write_csv(ws.report_path, header, csv_rows)

    from . import figures
    figures.render_report_figures(ws, rows, labels_dir=labels and labels[0],
                                  stage1_runs=stage1_runs)
    log.info("report: %d rows at %s", len(rows), ws.report_path)
    return rows
