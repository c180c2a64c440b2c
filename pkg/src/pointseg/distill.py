"""Stage-2 training: self and cross monitoring over cached pseudo labels.

Two networks (roles "a" and "b"), each pre-trained in stage 1, continue
training against snapshots of their own and each other's predictions.  Per
role the objective is

    lam * KD(student_soft, other_soft_cached) + (1 - lam) * (CE + Dice)/2

where the KD targets are temperature-softened maps of the *other* network
and the CE/Dice targets are the network's *own* hard argmax labels.  Both
kinds of target live in an ``ScmState`` cache that is refreshed from the
current parameters every ``refresh_period`` epochs; between refreshes they
are constants, which realizes the teacher stop-gradient structurally: no
tape edge ever connects one network's loss to the other's parameters.

Cached maps are stored in the canonical (unflipped) orientation.  Training
steps on flip-augmented inputs pass the flip axes along so the targets are
flipped to match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets, tape
from .errors import ValidationError
from .tape import Tensor
from .volume import Volume3

ROLES = ("a", "b")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    lam: float = 0.5
    refresh_period: int = 20
    max_epochs: int = 100

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.refresh_period < 1:
            raise ValidationError(f"refresh_period must be >= 1, got {self.refresh_period}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class ScmState:
    """Snapshot of both networks' predictions on every training case.

    hard[role][case_id]: uint8 argmax labels; soft[role][case_id]: f32
    temperature-softened foreground maps.  last_refresh is the epoch the
    snapshot was taken at.
    """

    hard: dict
    soft: dict
    last_refresh: int

    def validate(self):
        for table in (self.hard, self.soft):
            if set(table) != set(ROLES):
                raise ValidationError("cache must cover exactly the two roles")
        ids = set(self.hard["a"])
        for role in ROLES:
            if set(self.hard[role]) != ids or set(self.soft[role]) != ids:
                raise ValidationError("cache case sets differ between tables")
            for cid in ids:
                h, s = self.hard[role][cid], self.soft[role][cid]
                if h.shape != s.shape:
                    raise ValidationError(f"cache shape mismatch for case {cid}")
                if h.dtype != np.uint8 or not np.all((h == 0) | (h == 1)):
                    raise ValidationError(f"hard labels must be binary uint8 ({cid})")
                if s.min() < 0.0 or s.max() > 1.0:
                    raise ValidationError(f"soft map out of [0,1] for case {cid}")

    def check_fresh(self, epoch, cfg: DistillConfig):
        if epoch - self.last_refresh >= cfg.refresh_period:
            raise ValidationError(
                f"cache from epoch {self.last_refresh} is stale at epoch {epoch}; "
                "refresh before stepping")


# ---------------------------------------------------------------------------
# soft and hard targets


def _temp_softmax_arrays(z_f, z_b, temperature):
    m = np.maximum(z_f, z_b)
    ef = np.exp((z_f - m) / temperature)
    eb = np.exp((z_b - m) / temperature)
    return ef / (ef + eb)


def temp_softmax(z_f, z_b, temperature):
    """Two-class softmax of foreground/background logits at temperature T."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    if isinstance(z_f, Volume3):
        if not isinstance(z_b, Volume3) or z_b.dims != z_f.dims:
            raise ValidationError("logit volumes must share dims")
        p = _temp_softmax_arrays(z_f.arr(), z_b.arr(), temperature)
        return Volume3.from_array(p.astype(np.float32), spacing=z_f.spacing,
                                  kind="probability")
    z_f, z_b = np.asarray(z_f), np.asarray(z_b)
    if z_f.shape != z_b.shape:
        raise ValidationError("logit arrays must share shape")
    if not (np.isfinite(z_f).all() and np.isfinite(z_b).all()):
        raise ValidationError("logits must be finite")
    return _temp_softmax_arrays(z_f, z_b, temperature)


def student_soft_map(logits: Tensor, temperature):
    """Differentiable temperature-softened foreground map from (1,2,X,Y,Z)
    logits."""
    z = logits * (1.0 / temperature)
    p = tape.take_channel(tape.softmax_channels(z), 1)
    return tape.reshape(p, logits.shape[2:])


def prob_from_logits(logits: Tensor):
    """Standard-softmax foreground map, reshaped to the spatial grid."""
    p = tape.take_channel(tape.softmax_channels(logits), 1)
    return tape.reshape(p, logits.shape[2:])


# ---------------------------------------------------------------------------
# losses


def kd_loss(student_soft, teacher_soft, clamp_eps: float = 1e-6):
    """Mean two-class KL divergence KL(teacher || student).

    The teacher map is a plain array (cached snapshot); gradients reach the
    student only.
    """
    ps = student_soft if isinstance(student_soft, Tensor) else Tensor(np.asarray(student_soft))
    pt = np.asarray(teacher_soft, dtype=ps.dtype)
    if pt.shape != ps.data.shape:
        raise ValidationError(f"teacher shape {pt.shape} != student shape {ps.data.shape}")
    ptc = np.clip(pt, clamp_eps, 1.0 - clamp_eps)
    psc = tape.clamp(ps, clamp_eps, 1.0 - clamp_eps)
    ent = float(np.mean(ptc * np.log(ptc) + (1.0 - ptc) * np.log(1.0 - ptc)))
    cross = tape.mean_all(ptc * tape.log(psc) + (1.0 - ptc) * tape.log(1.0 - psc))
    return ent - cross


def dense_ce(P, y, clamp_eps: float = 1e-6):
    """Cross-entropy against a binary map, averaged over the whole grid."""
    p = P if isinstance(P, Tensor) else Tensor(np.asarray(P))
    yf = np.asarray(y).astype(p.dtype)
    pc = tape.clamp(p, clamp_eps, 1.0 - clamp_eps)
    return -tape.mean_all(yf * tape.log(pc) + (1.0 - yf) * tape.log(1.0 - pc))


def dense_dice(P, y, smooth: float = 1e-5):
    """Soft Dice loss against a binary map over the whole grid."""
    p = P if isinstance(P, Tensor) else Tensor(np.asarray(P))
    yf = np.asarray(y).astype(p.dtype)
    num = 2.0 * tape.sum_all(p * yf) + smooth
    den = tape.sum_all(tape.square(p)) + (float(yf.sum()) + smooth)
    return 1.0 - num / den


def self_loss(P, y_hat, clamp_eps: float = 1e-6, smooth: float = 1e-5):
    """Self-training objective: (CE + Dice)/2 against cached hard labels."""
    y = np.asarray(y_hat)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("pseudo labels must be binary")
    return (dense_ce(P, y, clamp_eps) + dense_dice(P, y, smooth)) * 0.5


# ---------------------------------------------------------------------------
# training step and cache refresh


def _flipped(arr, flips):
    for ax in flips:
        arr = np.flip(arr, axis=ax)
    return arr


def scm_step(model, x, case_id, role, state: ScmState, cfg: DistillConfig,
             epoch, flips=()):
    """Loss graph for one network on one (possibly flipped) training case.

    x is the image array in the augmented orientation; flips names the
    flipped axes so cached targets can be aligned.  Returns (total, parts)
    where parts maps "kd"/"self" to scalar tensors (None when the term's
    weight is zero).
    """
    if role not in ROLES:
        raise ValidationError(f"unknown role {role!r}")
    state.check_fresh(epoch, cfg)
    other = "b" if role == "a" else "a"
    if case_id not in state.hard[role]:
        raise ValidationError(f"case {case_id!r} missing from cache")
    xb = Tensor(np.asarray(x)[None, None])
    logits = nets.forward(model, xb)
    parts = {"kd": None, "self": None}
    total = None
    if cfg.lam > 0:
        teacher = _flipped(state.soft[other][case_id], flips)
        ps = student_soft_map(logits, cfg.temperature)
        parts["kd"] = kd_loss(ps, teacher)
        total = cfg.lam * parts["kd"]
    if cfg.lam < 1:
        yhat = _flipped(state.hard[role][case_id], flips)
        p = prob_from_logits(logits)
        parts["self"] = self_loss(p, yhat)
        term = (1.0 - cfg.lam) * parts["self"]
        total = term if total is None else total + term
    return total, parts


def refresh_caches(models: dict, cases: dict, temperature, epoch) -> ScmState:
    """Recompute both networks' hard and soft maps for every training case.

    cases maps case_id -> canonical image array.  Returns a fresh state;
    the previous one is discarded by the caller (the replace is atomic at
    the object level).
    """
    if set(models) != set(ROLES):
        raise ValidationError("models must be keyed by the two roles")
    hard = {r: {} for r in ROLES}
    soft = {r: {} for r in ROLES}
    for role in ROLES:
        for cid, x in cases.items():
            xb = Tensor(np.asarray(x)[None, None])
            z = nets.forward(models[role], xb).data[0]
            zf, zb = z[1], z[0]
            hard[role][cid] = (zf > zb).astype(np.uint8)
            soft[role][cid] = _temp_softmax_arrays(zf, zb, temperature).astype(np.float32)
    state = ScmState(hard=hard, soft=soft, last_refresh=epoch)
    state.validate()
    return state


def inference(primary, image: Volume3, auxiliary=None, threshold: float = 0.5) -> Volume3:
    """Hard mask from the primary network; optionally average the auxiliary
    network's probabilities before thresholding (ties go to background)."""
    p = nets.predict_prob(primary, image).arr()
    if auxiliary is not None:
        p = 0.5 * (p + nets.predict_prob(auxiliary, image).arr())
    mask = (p > threshold).astype(np.uint8)
    return Volume3.from_array(mask, spacing=image.spacing, kind="label")
