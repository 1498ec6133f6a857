"""
Model Service
Speech encoder, classifier and projection heads, character text encoder,
the three training objectives, the Adam training loop, finite-difference
gradient checking and the checkpoint format.
"""

import hashlib
import json
import logging
import math
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import (
    ArtifactIOError,
    CapabilityError,
    DataValidationError,
    ParseError,
    UndefinedLossError,
)
from src.core.metrics import RunMetrics
from src.services import nn
from src.services.corpus import CorpusManifest, Split
from src.services.features import AugmentPolicy, MelSpectrogram, spec_augment
from src.services.losses import alignment_with_grad, cross_entropy_with_grad, supcon_with_grad

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LSIMCKPT"
CHECKPOINT_VERSION = 1

# index 0 is UNK; printable ASCII 32..126 maps to 1..95
VOCAB_SIZE = 96


class Loss(str, Enum):
    CE = "CE"
    SUPCON = "SupCon"
    MULTIMODAL = "Multimodal"


class ConvBlock(BaseModel):
    model_config = ConfigDict(frozen=True)

    out_channels: int = Field(gt=0)
    kernel: int = Field(default=3, gt=0)
    stride: int = Field(default=2, gt=0)


class EncoderConfig(BaseModel):
    """Architecture of the speech encoder, heads and text encoder."""

    model_config = ConfigDict(frozen=True)

    conv_blocks: tuple[ConvBlock, ...] = Field(
        default=(ConvBlock(out_channels=8), ConvBlock(out_channels=16), ConvBlock(out_channels=32)),
        min_length=1,
    )
    embed_dim: int = Field(default=64, ge=2)
    pool: tuple[int, int] = (4, 4)
    proj_dim: int = Field(default=32, ge=1)
    char_dim: int = Field(default=16, ge=1)
    text_hidden: int = Field(default=32, ge=1)
    text_encoder: Literal["conv", "rnn"] = "conv"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    loss: Loss = Loss.CE
    lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=128, ge=1)
    epochs: int = Field(default=20, ge=0)
    alpha: float = Field(default=3e-2, ge=0)
    tau: float = Field(default=0.1, gt=0)
    seed: int = 0
    # None: on for SupCon, off otherwise
    augment: bool | None = None
    augment_policy: AugmentPolicy = AugmentPolicy()
    dtype: Literal["float32", "float64"] = "float32"


@dataclass
class ModelParams:
    """All trainable weights plus what is needed to interpret them."""

    encoder: EncoderConfig
    languages: tuple[str, ...]
    weights: dict[str, np.ndarray]
    seed: int = 0
    trained_with: Loss | None = None
    loss_trace: tuple[float, ...] = ()

    def __post_init__(self):
        for name, value in self.weights.items():
            if not np.all(np.isfinite(value)):
                raise DataValidationError(f"weight {name} has non-finite values")

    @property
    def dtype(self) -> np.dtype:
        return self.weights["fc.weight"].dtype

    @property
    def n_languages(self) -> int:
        return len(self.languages)

    def astype(self, dtype) -> "ModelParams":
        return replace(self, weights={k: v.astype(dtype) for k, v in self.weights.items()})

    def checksum(self) -> str:
        """SHA-256 of the serialized checkpoint; used as model_id."""
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


@dataclass(frozen=True)
class Example:
    """One training item: spectrogram data, label index and optional text."""

    spec: np.ndarray
    label: int
    text: str | None = None


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def init_params(
    encoder: EncoderConfig,
    languages: Sequence[str],
    seed: int | np.random.Generator = 0,
    dtype: str = "float32",
) -> ModelParams:
    """He-normal weights, zero biases, drawn in a fixed order from one generator."""
    if not languages:
        raise DataValidationError("cannot build a classifier over zero languages")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}

    c_in = 1
    for k, block in enumerate(encoder.conv_blocks):
        fan_in = c_in * block.kernel * block.kernel
        weights[f"conv{k}.weight"] = _he(
            rng, (block.out_channels, c_in, block.kernel, block.kernel), fan_in
        )
        weights[f"conv{k}.bias"] = np.zeros(block.out_channels)
        c_in = block.out_channels
    flat = c_in * encoder.pool[0] * encoder.pool[1]
    weights["fc.weight"] = _he(rng, (encoder.embed_dim, flat), flat)
    weights["fc.bias"] = np.zeros(encoder.embed_dim)

    weights["ce.weight"] = _he(rng, (len(languages), encoder.embed_dim), encoder.embed_dim)
    weights["ce.bias"] = np.zeros(len(languages))
    weights["proj.weight"] = _he(rng, (encoder.proj_dim, encoder.embed_dim), encoder.embed_dim)
    weights["proj.bias"] = np.zeros(encoder.proj_dim)

    weights["text.embedding"] = rng.standard_normal((VOCAB_SIZE, encoder.char_dim)) / math.sqrt(
        encoder.char_dim
    )
    hidden = encoder.text_hidden
    if encoder.text_encoder == "conv":
        weights["text.seq.weight"] = _he(rng, (hidden, 3 * encoder.char_dim), 3 * encoder.char_dim)
        weights["text.seq.bias"] = np.zeros(hidden)
    else:
        weights["text.seq.input_weight"] = rng.standard_normal(
            (hidden, encoder.char_dim)
        ) / math.sqrt(encoder.char_dim)
        weights["text.seq.hidden_weight"] = rng.standard_normal((hidden, hidden)) / math.sqrt(
            2.0 * hidden
        )
        weights["text.seq.bias"] = np.zeros(hidden)
    weights["text.fc.weight"] = _he(rng, (encoder.embed_dim, hidden), hidden)
    weights["text.fc.bias"] = np.zeros(encoder.embed_dim)

    seed_value = seed if isinstance(seed, int) else 0
    return ModelParams(
        encoder=encoder,
        languages=tuple(languages),
        weights={k: v.astype(dtype) for k, v in weights.items()},
        seed=seed_value,
    )


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def _spec_array(spec: MelSpectrogram | np.ndarray, dtype) -> np.ndarray:
    data = spec.data if isinstance(spec, MelSpectrogram) else spec
    data = np.asarray(data, dtype=dtype)
    if data.ndim != 2 or data.shape[1] < 1:
        raise DataValidationError(f"spectrogram must be [channels x frames], got {data.shape}")
    return data


def _speech_forward(params: ModelParams, data: np.ndarray):
    w = params.weights
    act = data[None, :, :]
    block_caches = []
    for k, block in enumerate(params.encoder.conv_blocks):
        pre, conv_cache = nn.conv2d_forward(
            act, w[f"conv{k}.weight"], w[f"conv{k}.bias"], block.stride
        )
        act, relu_cache = nn.relu_forward(pre)
        nn.check_finite(act, f"conv{k}")
        block_caches.append((conv_cache, relu_cache))
    pooled, pool_cache = nn.adaptive_max_pool_forward(act, *params.encoder.pool)
    h, fc_cache = nn.linear_forward(pooled.reshape(-1), w["fc.weight"], w["fc.bias"])
    nn.check_finite(h, "fc")
    z, norm_cache = nn.l2_normalize_forward(h, "fc")
    return z, (block_caches, pooled.shape, pool_cache, fc_cache, norm_cache)


def _speech_backward(params: ModelParams, cache, dz: np.ndarray, grads: dict[str, np.ndarray]):
    w = params.weights
    block_caches, pooled_shape, pool_cache, fc_cache, norm_cache = cache
    dh = nn.l2_normalize_backward(dz, norm_cache)
    dflat, dweight, dbias = nn.linear_backward(dh, w["fc.weight"], fc_cache)
    grads["fc.weight"] += dweight
    grads["fc.bias"] += dbias
    dact = nn.adaptive_max_pool_backward(dflat.reshape(pooled_shape), pool_cache)
    for k in reversed(range(len(block_caches))):
        conv_cache, relu_cache = block_caches[k]
        dpre = nn.relu_backward(dact, relu_cache)
        dact, dweight, dbias = nn.conv2d_backward(
            dpre,
            w[f"conv{k}.weight"],
            conv_cache,
            params.encoder.conv_blocks[k].stride,
            need_dx=k > 0,
        )
        grads[f"conv{k}.weight"] += dweight
        grads[f"conv{k}.bias"] += dbias


def char_indices(text: str) -> np.ndarray:
    return np.array([ord(ch) - 31 if 32 <= ord(ch) < 127 else 0 for ch in text], dtype=np.intp)


def _text_forward(params: ModelParams, text: str):
    if not text:
        raise DataValidationError("text must be non-empty")
    w = params.weights
    indices = char_indices(text)
    chars, _ = nn.embedding_forward(w["text.embedding"], indices)
    if params.encoder.text_encoder == "conv":
        hidden, seq_cache = nn.char_conv_forward(chars, w["text.seq.weight"], w["text.seq.bias"])
    else:
        hidden, seq_cache = nn.rnn_forward(
            chars, w["text.seq.input_weight"], w["text.seq.hidden_weight"], w["text.seq.bias"]
        )
    nn.check_finite(hidden, "text.seq")
    pooled, pool_cache = nn.sequence_max_pool_forward(hidden)
    h, fc_cache = nn.linear_forward(pooled, w["text.fc.weight"], w["text.fc.bias"])
    nn.check_finite(h, "text.fc")
    t, norm_cache = nn.l2_normalize_forward(h, "text.fc")
    return t, (indices, seq_cache, pool_cache, fc_cache, norm_cache)


def _text_backward(params: ModelParams, cache, dt: np.ndarray, grads: dict[str, np.ndarray]):
    w = params.weights
    indices, seq_cache, pool_cache, fc_cache, norm_cache = cache
    dh = nn.l2_normalize_backward(dt, norm_cache)
    dpooled, dweight, dbias = nn.linear_backward(dh, w["text.fc.weight"], fc_cache)
    grads["text.fc.weight"] += dweight
    grads["text.fc.bias"] += dbias
    dhidden = nn.sequence_max_pool_backward(dpooled, pool_cache)
    if params.encoder.text_encoder == "conv":
        dchars, dweight, dbias = nn.char_conv_backward(dhidden, w["text.seq.weight"], seq_cache)
        grads["text.seq.weight"] += dweight
    else:
        dchars, dinput, dhidden_w, dbias = nn.rnn_backward(
            dhidden, w["text.seq.input_weight"], w["text.seq.hidden_weight"], seq_cache
        )
        grads["text.seq.input_weight"] += dinput
        grads["text.seq.hidden_weight"] += dhidden_w
    grads["text.seq.bias"] += dbias
    grads["text.embedding"] += nn.embedding_backward(
        dchars, w["text.embedding"].shape, indices, dchars.dtype
    )


def _ce_head_forward(params: ModelParams, z: np.ndarray):
    act, relu_cache = nn.relu_forward(z)
    w = params.weights
    logits, fc_cache = nn.linear_forward(act, w["ce.weight"], w["ce.bias"])
    nn.check_finite(logits, "ce")
    return logits, (relu_cache, fc_cache)


def _ce_head_backward(params: ModelParams, cache, dlogits, grads) -> np.ndarray:
    relu_cache, fc_cache = cache
    dact, dweight, dbias = nn.linear_backward(dlogits, params.weights["ce.weight"], fc_cache)
    grads["ce.weight"] += dweight
    grads["ce.bias"] += dbias
    return nn.relu_backward(dact, relu_cache)


def _proj_forward(params: ModelParams, z: np.ndarray):
    h, fc_cache = nn.linear_forward(z, params.weights["proj.weight"], params.weights["proj.bias"])
    nn.check_finite(h, "proj")
    q, norm_cache = nn.l2_normalize_forward(h, "proj")
    return q, (fc_cache, norm_cache)


def _proj_backward(params: ModelParams, cache, dq, grads) -> np.ndarray:
    fc_cache, norm_cache = cache
    dh = nn.l2_normalize_backward(dq, norm_cache)
    dz, dweight, dbias = nn.linear_backward(dh, params.weights["proj.weight"], fc_cache)
    grads["proj.weight"] += dweight
    grads["proj.bias"] += dbias
    return dz


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


def encode_speech(params: ModelParams, spec: MelSpectrogram | np.ndarray) -> np.ndarray:
    """Unit-norm speech embedding M_e(x)."""
    return _speech_forward(params, _spec_array(spec, params.dtype))[0]


def encode_text(params: ModelParams, text: str) -> np.ndarray:
    """Unit-norm text embedding in the speech embedding space."""
    return _text_forward(params, text)[0]


def classify(params: ModelParams, spec: MelSpectrogram | np.ndarray) -> tuple[int, np.ndarray]:
    """(argmax language index, softmax probabilities); ties go to the lowest index."""
    if params.trained_with == Loss.SUPCON:
        raise CapabilityError("params trained with SupCon have no trained classifier head")
    z = encode_speech(params, spec)
    logits, _ = _ce_head_forward(params, z)
    logits = logits.astype(np.float64)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    return int(np.argmax(probs)), probs


# --------------------------------------------------------------------------
# Objectives
# --------------------------------------------------------------------------


def _zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.weights.items()}


class Objective(Protocol):
    def value_and_grad(
        self, params: ModelParams, batch: Sequence[Example]
    ) -> tuple[float, dict[str, np.ndarray]]: ...

    def value(self, params: ModelParams, batch: Sequence[Example]) -> float: ...


def _check_batch(batch: Sequence[Example]) -> None:
    if not batch:
        raise DataValidationError("empty batch")


class CrossEntropyObjective:
    """Batch-mean cross-entropy of the classifier head on speech embeddings."""

    def value_and_grad(self, params, batch):
        _check_batch(batch)
        grads = _zero_grads(params)
        scale = 1.0 / len(batch)
        total = 0.0
        for example in batch:
            z, speech_cache = _speech_forward(params, _spec_array(example.spec, params.dtype))
            logits, head_cache = _ce_head_forward(params, z)
            value, dlogits = cross_entropy_with_grad(logits, example.label)
            total += value
            dz = _ce_head_backward(params, head_cache, dlogits * scale, grads)
            _speech_backward(params, speech_cache, dz, grads)
        return total / len(batch), grads

    def value(self, params, batch):
        return self.value_and_grad(params, batch)[0]


class SupConObjective:
    """Supervised contrastive loss on the normalized projection head."""

    def __init__(self, tau: float = 0.1):
        self.tau = tau

    def value_and_grad(self, params, batch):
        _check_batch(batch)
        grads = _zero_grads(params)
        speech_caches, proj_caches, projected = [], [], []
        for example in batch:
            z, speech_cache = _speech_forward(params, _spec_array(example.spec, params.dtype))
            q, proj_cache = _proj_forward(params, z)
            speech_caches.append(speech_cache)
            proj_caches.append(proj_cache)
            projected.append(q)
        labels = np.array([example.label for example in batch])
        value, dq = supcon_with_grad(np.stack(projected), labels, self.tau)
        for i in range(len(batch)):
            dz = _proj_backward(params, proj_caches[i], dq[i], grads)
            _speech_backward(params, speech_caches[i], dz, grads)
        return value, grads

    def value(self, params, batch):
        return self.value_and_grad(params, batch)[0]


class MultimodalObjective:
    """
    Shared-head CE on speech and on text, plus alpha times the cosine distance
    between the speech and text embeddings; each term is a batch mean.
    """

    def __init__(self, alpha: float = 3e-2):
        if alpha < 0:
            raise DataValidationError(f"alpha must be >= 0, got {alpha}")
        self.alpha = alpha

    def _run(self, params, batch, grads):
        _check_batch(batch)
        scale = 1.0 / len(batch)
        speech_total = text_total = align_total = 0.0
        for example in batch:
            if example.text is None:
                raise DataValidationError("multimodal loss needs text for every example")
            z, speech_cache = _speech_forward(params, _spec_array(example.spec, params.dtype))
            t, text_cache = _text_forward(params, example.text)
            speech_logits, speech_head = _ce_head_forward(params, z)
            text_logits, text_head = _ce_head_forward(params, t)
            speech_ce, dspeech_logits = cross_entropy_with_grad(speech_logits, example.label)
            text_ce, dtext_logits = cross_entropy_with_grad(text_logits, example.label)
            align, dz_align, dt_align = alignment_with_grad(z, t)
            speech_total += speech_ce
            text_total += text_ce
            align_total += align
            if grads is None:
                continue
            dz = _ce_head_backward(params, speech_head, dspeech_logits * scale, grads)
            dt = _ce_head_backward(params, text_head, dtext_logits * scale, grads)
            dz = dz + (self.alpha * scale) * dz_align
            dt = dt + (self.alpha * scale) * dt_align
            _speech_backward(params, speech_cache, dz, grads)
            _text_backward(params, text_cache, dt, grads)
        n = len(batch)
        return speech_total / n, text_total / n, align_total / n

    def terms(self, params, batch) -> tuple[float, float, float]:
        """(speech CE, text CE, mean cosine distance) without gradients."""
        return self._run(params, batch, None)

    def value_and_grad(self, params, batch):
        grads = _zero_grads(params)
        speech_ce, text_ce, align = self._run(params, batch, grads)
        return speech_ce + text_ce + self.alpha * align, grads

    def value(self, params, batch):
        speech_ce, text_ce, align = self.terms(params, batch)
        return speech_ce + text_ce + self.alpha * align


def objective_for(config: TrainConfig) -> Objective:
    if config.loss == Loss.CE:
        return CrossEntropyObjective()
    if config.loss == Loss.SUPCON:
        return SupConObjective(config.tau)
    return MultimodalObjective(config.alpha)


def loss_multimodal(params: ModelParams, batch: Sequence[Example], alpha: float = 3e-2) -> float:
    return MultimodalObjective(alpha).value(params, batch)


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------


class Adam:
    def __init__(
        self,
        weights: Mapping[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in weights.items()}
        self.v = {name: np.zeros_like(value) for name, value in weights.items()}

    def step(self, weights: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            weights[name] -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def _training_examples(
    manifest: CorpusManifest,
    features: Mapping[str, MelSpectrogram],
    config: TrainConfig,
) -> tuple[list[str], list[Example]]:
    utterances = manifest.utterances(Split.TRAIN)
    if not utterances:
        raise DataValidationError("train split is empty")
    missing = [u.id for u in utterances if u.id not in features]
    if missing:
        raise DataValidationError(
            f"{len(missing)} train utterances have no features, first: {missing[0]}"
        )
    if config.loss == Loss.MULTIMODAL:
        no_text = [u.id for u in utterances if not u.text]
        if no_text:
            raise DataValidationError(
                f"multimodal training needs text on every train record; "
                f"{len(no_text)} lack it, first: {no_text[0]}"
            )
    languages = sorted({u.language for u in utterances})
    label_of = {lang: i for i, lang in enumerate(languages)}
    examples = [
        Example(spec=features[u.id].data, label=label_of[u.language], text=u.text)
        for u in utterances
    ]
    return languages, examples


def _augmented(spec: np.ndarray, policy: AugmentPolicy, seed: int) -> np.ndarray:
    channels, frames = spec.shape
    policy = policy.model_copy(
        update={
            "seed": seed,
            "freq_width_max": min(policy.freq_width_max, channels),
            "time_width_max": min(policy.time_width_max, frames),
        }
    )
    return spec_augment(MelSpectrogram(data=spec, n_mels=channels), policy).data


def train(
    manifest: CorpusManifest,
    features: Mapping[str, MelSpectrogram],
    config: TrainConfig = TrainConfig(),
    encoder: EncoderConfig = EncoderConfig(),
    metrics: RunMetrics | None = None,
) -> ModelParams:
    """
    Train on the manifest's train split with Adam over shuffled mini-batches.

    One generator seeded from config.seed drives initialization, shuffling and
    augmentation, so a fixed seed reproduces the result bit for bit.
    """
    languages, examples = _training_examples(manifest, features, config)
    rng = np.random.default_rng(config.seed)
    params = init_params(encoder, languages, rng, dtype=config.dtype)
    params.seed = config.seed
    if config.epochs == 0:
        logger.info("0 epochs requested, returning initialized params")
        return params

    objective = objective_for(config)
    augment = config.augment if config.augment is not None else config.loss == Loss.SUPCON
    optimizer = Adam(params.weights, config.lr)
    logger.info(
        f"Training {config.loss.value} on {len(examples)} utterances over "
        f"{len(languages)} languages for {config.epochs} epochs"
    )

    trace: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        batch_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            if augment:
                batch = [
                    replace(
                        ex,
                        spec=_augmented(ex.spec, config.augment_policy, int(rng.integers(2**31))),
                    )
                    for ex in batch
                ]
            try:
                value, grads = objective.value_and_grad(params, batch)
            except UndefinedLossError as e:
                logger.warning(f"Skipping batch in epoch {epoch}: {e.message}")
                continue
            optimizer.step(params.weights, grads)
            batch_losses.append(value)
        if not batch_losses:
            raise UndefinedLossError(f"every batch in epoch {epoch} had an undefined loss")
        epoch_loss = math.fsum(batch_losses) / len(batch_losses)
        trace.append(epoch_loss)
        logger.info(f"Epoch {epoch}/{config.epochs} loss {epoch_loss:.6f}")
        if metrics is not None:
            metrics.epoch_loss.labels(epoch=str(epoch)).set(epoch_loss)

    params.trained_with = config.loss
    params.loss_trace = tuple(trace)
    return params


def grad_check(
    params: ModelParams,
    loss_fn: Objective,
    batch: Sequence[Example],
    epsilon: float = 1e-5,
    fraction: float = 0.01,
    seed: int = 0,
) -> float:
    """
    Max relative error between analytic and central-difference gradients over
    a random sample of coordinates, evaluated in double precision.
    """
    params = params.astype(np.float64)
    batch = [replace(ex, spec=np.asarray(ex.spec, dtype=np.float64)) for ex in batch]
    _, grads = loss_fn.value_and_grad(params, batch)

    names = list(params.weights)
    sizes = np.array([params.weights[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    n_sample = max(1, math.ceil(fraction * total))
    picks = np.sort(np.random.default_rng(seed).choice(total, size=n_sample, replace=False))

    worst = 0.0
    for flat_index in picks:
        k = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        name = names[k]
        local = int(flat_index - offsets[k])
        coords = params.weights[name].reshape(-1)
        original = coords[local]
        coords[local] = original + epsilon
        plus = loss_fn.value(params, batch)
        coords[local] = original - epsilon
        minus = loss_fn.value(params, batch)
        coords[local] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        analytic = float(grads[name].reshape(-1)[local])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, error)
    logger.debug(f"grad_check sampled {n_sample} of {total} coordinates, max error {worst:.3e}")
    return worst


# --------------------------------------------------------------------------
# Checkpoint
# --------------------------------------------------------------------------


def _config_echo(params: ModelParams) -> dict:
    return {
        "encoder": params.encoder.model_dump(mode="json"),
        "languages": list(params.languages),
        "seed": params.seed,
        "trained_with": params.trained_with.value if params.trained_with else None,
        "loss_trace": list(params.loss_trace),
    }


def checkpoint_bytes(params: ModelParams) -> bytes:
    """
    Layout (little-endian): magic, u32 version, u32 length + JSON config echo,
    u32 tensor count, then per tensor u32 name length, name, u32 rank,
    u32 dims, float32 data.
    """
    echo = json.dumps(_config_echo(params), sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(echo)), echo]
    parts.append(struct.pack("<I", len(params.weights)))
    for name, value in params.weights.items():
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path: str | Path) -> str:
    """Write the checkpoint and return its model_id."""
    data = checkpoint_bytes(params)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {e}") from e
    model_id = hashlib.sha256(data).hexdigest()
    logger.info(f"Wrote checkpoint {path} (model_id {model_id[:12]})")
    return model_id


@dataclass
class _Reader:
    data: bytes
    path: Path
    pos: int = field(default=0)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(raw, path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a langsim checkpoint")
    version, echo_len = reader.u32(2)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        echo = json.loads(reader.take(echo_len))
        encoder = EncoderConfig(**echo["encoder"])
        languages = tuple(echo["languages"])
        seed = int(echo.get("seed", 0))
        trained_with = echo.get("trained_with")
        trained_with = Loss(trained_with) if trained_with else None
        loss_trace = tuple(float(v) for v in echo.get("loss_trace", ()))
    except (json.JSONDecodeError, AttributeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: bad config echo ({e!r})") from e
    (count,) = reader.u32()
    weights: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.u32()
        name = reader.take(name_len).decode()
        (rank,) = reader.u32()
        shape = reader.u32(rank) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        weights[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(
            np.float32
        )
    if reader.pos != len(raw):
        raise ParseError(f"{path}: {len(raw) - reader.pos} trailing bytes")
    return ModelParams(
        encoder=encoder,
        languages=languages,
        weights=weights,
        seed=seed,
        trained_with=trained_with,
        loss_trace=loss_trace,
    )
