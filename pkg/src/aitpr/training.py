"""Teacher-forced training: loss, Adam, the epoch loop, and checkpoints.

A dataset is a sequence of (RegionFeatureSet, TokenSequence) pairs; a
scene with several reference captions contributes several pairs.  Every
run is bitwise deterministic in its seed, and a checkpoint restores
enough state (parameters, optimizer moments, shuffle RNG) that resuming
reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from .errors import (
    AlignmentError,
    CompatibilityError,
    ConfigError,
    FormatError,
    NumericError,
    TrainingDiverged,
    VersionError,
)
from .scenes import PAD_ID, TokenSequence

CHECKPOINT_MAGIC = b"AITPRCK1"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    dims: dec.ModelDims
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    mode: dec.FusionMode = dec.FusionMode.LATE
    variant: int = 3
    grad_clip: float = 5.0
    attribute_only_fallback: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}"
            )
        if self.learning_rate < 0 or self.grad_clip <= 0:
            raise ConfigError(
                f"need learning_rate >= 0 and grad_clip > 0, got "
                f"{self.learning_rate}, {self.grad_clip}"
            )
        dec.VariantFlags.variant(self.variant)

    @property
    def flags(self) -> dec.VariantFlags:
        return dec.VariantFlags.variant(self.variant)


def sequence_loss(step_logits, target) -> ad.Tensor:
    """Mean per-token negative log-likelihood; PAD targets excluded.

    ``step_logits[k]`` scores the token at position k+1 given the prefix
    up to position k, so there must be exactly len(target)-1 of them.
    """
    ids = target.ids if isinstance(target, TokenSequence) else tuple(int(i) for i in target)
    if len(step_logits) != len(ids) - 1:
        raise AlignmentError(
            f"{len(step_logits)} logit steps cannot score {len(ids)} target ids "
            f"(need len(target)-1)"
        )
    terms = []
    for logits, tid in zip(step_logits, ids[1:]):
        if tid == PAD_ID:
            continue
        terms.append(ad.pick(ad.log_softmax(logits), tid))
    if not terms:
        raise AlignmentError("target has no non-PAD tokens to score")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, -1.0 / len(terms))


def teacher_forced_loss(feats, target: TokenSequence, mode, flags, params,
                        allow_attribute_only=False) -> ad.Tensor:
    """Roll the decoder along the target and score every next token."""
    s = dec.compute_semantic_vector(feats, params)
    v_x = dec.compute_visual_context(feats, params)
    state = dec.init_state(feats.v_bar, params)
    logits_per_step = []
    for prev in target.ids[:-1]:
        logits, state = dec.step_logits(state, feats, s, v_x, prev, mode, flags,
                                        params, allow_attribute_only)
        logits_per_step.append(logits)
    return sequence_loss(logits_per_step, target)


def clip_gradients(params: dec.ModelParams, threshold: float) -> float:
    """Scale all gradients so their global L2 norm is at most threshold."""
    sq = 0.0
    for _, p in params.named_params():
        sq += float((p.grad ** 2).sum())
    norm = np.sqrt(sq)
    if norm > threshold:
        factor = threshold / norm
        for _, p in params.named_params():
            p.grad *= factor
    return float(norm)


class Adam:
    """Adaptive-moment optimizer over the named parameter arrays.

    Updates mutate parameter ``.data`` buffers in place; they are the
    single sanctioned mutation of tensors in this package.
    """

    def __init__(self, params: dec.ModelParams, learning_rate: float):
        self.lr = learning_rate
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.named_params()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.named_params()}

    def step(self, params: dec.ModelParams):
        self.step_count += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.step_count
        bc2 = 1.0 - ADAM_BETA2 ** self.step_count
        for name, p in params.named_params():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass
class Checkpoint:
    """Everything needed to continue a run bitwise-identically."""

    config: dict
    arrays: dict
    adam_m: dict
    adam_v: dict
    adam_step: int
    rng_state: dict
    epoch: int


@dataclass
class TrainResult:
    params: dec.ModelParams
    loss_trace: list
    checkpoint: Checkpoint


def config_echo(config: TrainConfig) -> dict:
    d = config.dims
    return {
        "dims": {"feat_dim": d.feat_dim, "hidden": d.hidden, "embed": d.embed,
                 "att": d.att, "vocab_size": d.vocab_size},
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "mode": config.mode.value,
        "variant": config.variant,
        "grad_clip": config.grad_clip,
        "attribute_only_fallback": config.attribute_only_fallback,
    }


def config_from_echo(echo: dict) -> TrainConfig:
    dims = dec.ModelDims(**echo["dims"])
    return TrainConfig(
        dims=dims, epochs=echo["epochs"], learning_rate=echo["learning_rate"],
        batch_size=echo["batch_size"], seed=echo["seed"],
        mode=dec.FusionMode.parse(echo["mode"]), variant=echo["variant"],
        grad_clip=echo["grad_clip"],
        attribute_only_fallback=echo.get("attribute_only_fallback", False),
    )


def make_checkpoint(params, opt, config, rng, epoch) -> Checkpoint:
    return Checkpoint(
        config=config_echo(config),
        arrays={name: p.data.copy() for name, p in params.named_params()},
        adam_m={k: a.copy() for k, a in opt.m.items()},
        adam_v={k: a.copy() for k, a in opt.v.items()},
        adam_step=opt.step_count,
        rng_state=rng.bit_generator.state,
        epoch=epoch,
    )


def train(dataset, config: TrainConfig, resume_from: Checkpoint = None) -> TrainResult:
    """Run (or continue) training; returns final params, loss trace, checkpoint.

    Loss of a batch is the mean over its examples.  A non-finite loss or
    a numeric failure inside the forward pass aborts with
    :class:`TrainingDiverged` carrying the checkpoint of the last
    completed epoch.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")

    if resume_from is not None:
        # epochs is a run-length knob, not model identity; everything else
        # must match for a resume to mean anything.
        want = {k: v for k, v in config_echo(config).items() if k != "epochs"}
        have = {k: v for k, v in resume_from.config.items() if k != "epochs"}
        if want != have:
            raise CompatibilityError(
                "checkpoint config does not match the requested training config; "
                f"checkpoint has {have}, requested {want}"
            )
        params = dec.ModelParams(config.dims, resume_from.arrays)
        opt = Adam(params, config.learning_rate)
        opt.m = {k: a.copy() for k, a in resume_from.adam_m.items()}
        opt.v = {k: a.copy() for k, a in resume_from.adam_v.items()}
        opt.step_count = resume_from.adam_step
        rng = np.random.default_rng(0)
        rng.bit_generator.state = resume_from.rng_state
        start_epoch = resume_from.epoch
    else:
        params = dec.init_params(config.dims, config.seed)
        opt = Adam(params, config.learning_rate)
        rng = np.random.default_rng(config.seed)
        start_epoch = 0

    flags = config.flags
    loss_trace = []
    last_good = make_checkpoint(params, opt, config, rng, start_epoch)

    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            accum = {name: np.zeros_like(p.data) for name, p in params.named_params()}
            for idx in batch:
                feats, target = dataset[int(idx)]
                try:
                    with ad.Graph() as g:
                        loss = teacher_forced_loss(
                            feats, target, config.mode, flags, params,
                            config.attribute_only_fallback)
                        loss_val = float(loss.data)
                        if not np.isfinite(loss_val):
                            raise NumericError(f"loss is {loss_val}")
                        g.backward(loss, params=params.param_list())
                except NumericError as exc:
                    raise TrainingDiverged(
                        f"training diverged in epoch {epoch}: {exc}",
                        last_good_checkpoint=last_good,
                        last_good_epoch=last_good.epoch,
                    ) from exc
                epoch_losses.append(loss_val)
                for name, p in params.named_params():
                    accum[name] += p.grad
            for name, p in params.named_params():
                p.grad = accum[name] / len(batch)
            clip_gradients(params, config.grad_clip)
            opt.step(params)
        loss_trace.append(float(np.mean(epoch_losses)))
        last_good = make_checkpoint(params, opt, config, rng, epoch + 1)

    return TrainResult(params=params, loss_trace=loss_trace, checkpoint=last_good)


# ---------------------------------------------------------------------------
# Checkpoint file format, little-endian throughout:
#   8-byte magic "AITPRCK1"
#   uint32 length + UTF-8 JSON header (config echo, epoch, adam_step, counts)
#   per-array records: uint32 name length, name bytes, uint32 rank,
#     uint32 dims[rank], raw float64 data
#   RNG state record: uint32 length + UTF-8 JSON
# Optimizer moments ride along as arrays named "adam_m.*" / "adam_v.*".
# ---------------------------------------------------------------------------


def _write_array(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(
                f"checkpoint {self.path} is truncated at byte {self.off}"
            )
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_array(rd: _Reader):
    name = rd.take(rd.u32()).decode("utf-8")
    rank = rd.u32()
    shape = struct.unpack(f"<{rank}I", rd.take(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(rd.take(8 * count), dtype="<f8").reshape(shape).copy()
    return name, arr


def save_checkpoint(ckpt: Checkpoint, path):
    header = dict(ckpt.config)
    header["epoch"] = ckpt.epoch
    header["adam_step"] = ckpt.adam_step
    n_arrays = len(ckpt.arrays) + len(ckpt.adam_m) + len(ckpt.adam_v)
    header["n_arrays"] = n_arrays
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for name, arr in ckpt.arrays.items():
            _write_array(fh, name, arr)
        for name, arr in ckpt.adam_m.items():
            _write_array(fh, "adam_m." + name, arr)
        for name, arr in ckpt.adam_v.items():
            _write_array(fh, "adam_v." + name, arr)
        rb = json.dumps(ckpt.rng_state).encode("utf-8")
        fh.write(struct.pack("<I", len(rb)))
        fh.write(rb)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data, path)
    magic = rd.take(8)
    if magic != CHECKPOINT_MAGIC:
        if magic[:7] == CHECKPOINT_MAGIC[:7]:
            raise VersionError(
                f"checkpoint {path} has format version {magic[7:].decode('ascii', 'replace')}, "
                f"this build reads version {CHECKPOINT_MAGIC[7:].decode('ascii')}"
            )
        raise FormatError(f"{path} is not a checkpoint file (bad magic {magic!r})")
    try:
        header = json.loads(rd.take(rd.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {path} has an unreadable header: {exc}") from None

    for key in ("epoch", "adam_step", "n_arrays", "dims"):
        if key not in header:
            raise FormatError(f"checkpoint {path} header is missing {key!r}")

    arrays, adam_m, adam_v = {}, {}, {}
    for _ in range(header["n_arrays"]):
        name, arr = _read_array(rd)
        if name.startswith("adam_m."):
            adam_m[name[len("adam_m."):]] = arr
        elif name.startswith("adam_v."):
            adam_v[name[len("adam_v."):]] = arr
        else:
            arrays[name] = arr
    try:
        rng_state = json.loads(rd.take(rd.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {path} has an unreadable RNG record: {exc}") from None

    param_names = {name for name, _ in dec._PARAM_SHAPES}
    if set(arrays) != param_names:
        missing = sorted(param_names - set(arrays))
        raise FormatError(f"checkpoint {path} is missing parameter arrays: {missing}")
    if set(adam_m) != param_names or set(adam_v) != param_names:
        raise VersionError(
            f"checkpoint {path} lacks optimizer moments for every parameter; "
            "it was written before moments were stored and cannot seed a resume"
        )

    epoch = header.pop("epoch")
    adam_step = header.pop("adam_step")
    header.pop("n_arrays")
    return Checkpoint(config=header, arrays=arrays, adam_m=adam_m, adam_v=adam_v,
                      adam_step=adam_step, rng_state=rng_state, epoch=epoch)
