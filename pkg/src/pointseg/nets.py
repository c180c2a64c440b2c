"""Two asymmetric tiny 3D segmentation networks plus their optimizer.

Net-A: plain encoder-decoder; one 3x3x3 conv per scale, strided convs down,
nearest-neighbor upsampling with 1x1x1 channel reducers, skip concatenation.
Net-B: the same trunk with additive attention gates on the skip connections,
so its parameter count strictly exceeds Net-A's at equal base channels.

Output is a 2-channel logit map (channel 1 = foreground) at input resolution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import NumericError, ValidationError
from .tape import Tensor
from .volume import Volume3

ARCHS = ("net_a", "net_b")

_CKPT_MAGIC = b"PACKPT1"


@dataclass
class SegModel:
    arch: str
    base_channels: int
    depth: int
    params: dict = field(default_factory=dict)

    def param_items(self):
        return sorted(self.params.items())


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-2
    max_epochs: int = 60
    momentum: float = 0.99
    weight_decay: float = 3e-5
    poly_power: float = 0.9
    batch: int = 1
    rng_seed: int = 0
    flip_xyz: bool = True
    random_crop: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValidationError("lr0 must be > 0")
        if self.poly_power <= 0:
            raise ValidationError("poly power must be > 0")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if self.batch != 1:
            raise ValidationError("only batch size 1 is supported")


def _channels(base, depth):
    return [base * (2 ** k) for k in range(depth + 1)]


def _conv_specs(arch, base, depth):
    """Ordered (name, cin, cout, k) conv parameter specs; order fixes rng draws."""
    ch = _channels(base, depth)
    specs = [("enc0", 1, ch[0], 3)]
    for k in range(1, depth + 1):
        specs.append((f"down{k}", ch[k - 1], ch[k], 3))
        if k < depth:
            specs.append((f"enc{k}", ch[k], ch[k], 3))
    specs.append(("bott", ch[depth], ch[depth], 3))
    for k in range(depth - 1, -1, -1):
        specs.append((f"red{k}", ch[k + 1], ch[k], 1))
        if arch == "net_b":
            specs.append((f"gate{k}/wg", ch[k], ch[k], 1))
            specs.append((f"gate{k}/wx", ch[k], ch[k], 1))
            specs.append((f"gate{k}/psi", ch[k], 1, 1))
        specs.append((f"dec{k}", 2 * ch[k], ch[k], 3))
    specs.append(("head", ch[0], 2, 1))
    return specs


def build_model(arch, base_channels=4, depth=2, rng_seed=0, dtype=np.float32):
    """He fan-in initialized model; deterministic in (arch, seed)."""
    if arch not in ARCHS:
        raise ValidationError(f"arch must be one of {ARCHS}")
    if base_channels < 1 or depth < 1:
        raise ValidationError("base_channels and depth must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((rng_seed, ARCHS.index(arch))))
    params = {}
    for name, cin, cout, k in _conv_specs(arch, base_channels, depth):
        fan_in = cin * k ** 3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k))
        params[f"{name}/w"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"{name}/b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return SegModel(arch=arch, base_channels=base_channels, depth=depth, params=params)


def count_parameters(model):
    return int(sum(t.data.size for t in model.params.values()))


def _conv(model, name, x, stride=1):
    return tape.conv3d(x, model.params[f"{name}/w"], model.params[f"{name}/b"], stride=stride)


def gated_skip(model, level, g, x):
    """Additive attention gate: x * sigmoid(psi(relu(Wg*g + Wx*x)))."""
    if g.data.shape[2:] != x.data.shape[2:]:
        raise ValidationError("gated_skip requires spatially aligned features")
    a = tape.relu(_conv(model, f"gate{level}/wg", g) + _conv(model, f"gate{level}/wx", x))
    gate = tape.sigmoid(_conv(model, f"gate{level}/psi", a))
    return x * gate


def forward(model, x):
    """Logits (N, 2, X, Y, Z) for input (N, 1, X, Y, Z)."""
    if x.data.ndim != 5 or x.data.shape[1] != 1:
        raise ValidationError(f"expected (N,1,X,Y,Z) input, got {x.data.shape}")
    div = 2 ** model.depth
    if any(s % div for s in x.data.shape[2:]):
        raise ValidationError(
            f"spatial dims {x.data.shape[2:]} not divisible by 2^depth = {div}"
        )
    h = tape.relu(_conv(model, "enc0", x))
    skips = [h]
    for k in range(1, model.depth + 1):
        h = tape.relu(_conv(model, f"down{k}", h, stride=2))
        if k < model.depth:
            h = tape.relu(_conv(model, f"enc{k}", h))
            skips.append(h)
    h = tape.relu(_conv(model, "bott", h))
    for k in range(model.depth - 1, -1, -1):
        h = tape.relu(_conv(model, f"red{k}", h))
        h = tape.nearest_upsample(h, 2)
        s = skips[k]
        if model.arch == "net_b":
            s = gated_skip(model, k, h, s)
        h = tape.relu(_conv(model, f"dec{k}", tape.concat([h, s], axis=1)))
    return _conv(model, "head", h)


def prob_map(model, x):
    """Foreground probability tensor (N,1,X,Y,Z) via channel softmax."""
    return tape.take_channel(tape.softmax_channels(forward(model, x)), 1)


def predict_prob(model, image):
    """Volume3 foreground probability map for a Volume3 intensity image."""
    x = Tensor(image.arr().astype(np.float32)[None, None])
    p = prob_map(model, x)
    return Volume3.from_array(
        p.data[0, 0].astype(np.float32), spacing=image.spacing, kind="probability"
    )


def predict_mask(model, image, threshold=0.5):
    """Hard foreground mask; ties at the threshold go to background."""
    return predict_prob(model, image).arr() > threshold


# ---------------------------------------------------------------------------
# optimizer


def poly_lr(epoch, cfg):
    """lr0 * (1 - e/e_max)^power, reaching 0 at e = e_max."""
    frac = 1.0 - epoch / cfg.max_epochs
    return cfg.lr0 * frac ** cfg.poly_power


def init_opt_state(model):
    return {name: np.zeros_like(t.data) for name, t in model.param_items()}


def sgd_step(model, opt_state, lr, cfg):
    """Momentum SGD with decoupled weight decay.

    v <- momentum*v + g;  p <- p - lr*v - lr*wd*p.  NaN/Inf gradients abort.
    """
    for name, t in model.param_items():
        g = t.grad
        if g is None:
            raise NumericError(f"parameter {name} has no gradient")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        v = opt_state[name]
        v *= cfg.momentum
        v += g
        t.data = t.data - lr * v - lr * cfg.weight_decay * t.data
        t.grad = None


# ---------------------------------------------------------------------------
# checkpoints


def _write_tensor(fh, name, arr):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    a = np.asarray(arr)
    fh.write(struct.pack("<B", a.ndim))
    for d in a.shape:
        fh.write(struct.pack("<I", d))
    fh.write(a.astype("<f4").tobytes())


def save_checkpoint(path, model, opt_state=None):
    """PACKPT1: magic, u32 tensor count, then (name, rank, dims, f32 data)
    records; optimizer velocities under the "opt/" prefix, architecture
    descriptors under "meta/"."""
    records = [
        ("meta/arch", np.float32(ARCHS.index(model.arch)).reshape(1)),
        ("meta/base_channels", np.float32(model.base_channels).reshape(1)),
        ("meta/depth", np.float32(model.depth).reshape(1)),
    ]
    for name, t in model.param_items():
        records.append((name, t.data))
    if opt_state is not None:
        for name in sorted(opt_state):
            records.append((f"opt/{name}", opt_state[name]))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_tensor(fh, name, arr)


def load_checkpoint(path):
    """Returns (SegModel, opt_state or None)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}")
    with fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        raw = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            raw[name] = data.astype(np.float32)
    try:
        arch = ARCHS[int(raw.pop("meta/arch")[0])]
        base = int(raw.pop("meta/base_channels")[0])
        depth = int(raw.pop("meta/depth")[0])
    except KeyError:
        raise ValidationError(f"{path}: missing architecture metadata")
    params = {}
    opt_state = {}
    for name, arr in raw.items():
        if name.startswith("opt/"):
            opt_state[name[4:]] = arr.copy()
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True)
    model = SegModel(arch=arch, base_channels=base, depth=depth, params=params)
    expected = {f"{n}/{s}" for n, _, _, _ in _conv_specs(arch, base, depth) for s in ("w", "b")}
    if set(params) != expected:
        raise ValidationError(f"{path}: parameter set does not match architecture")
    return model, (opt_state or None)
