"""Dual-stream HER2 scoring model with latent feature hallucination.

A student encoder reads H&E patches; a frozen, pretrained teacher encoder
reads the paired IHC patch during training only. A residual hallucinator
maps student features into the teacher's latent space, two light decoder
heads tie those features to nuclei density and membrane masks, and an
attention gate fuses the morphological and hallucinated streams for the
classifier. Inference needs the student path only.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import InvalidArgumentError, InvalidShapeError, Tensor
from .lgdt import load_checkpoint
from .optim import Parameter

ENCODER_WIDTHS = (16, 32, 64, 64)
POOL_AFTER_STAGE = (True, True, False, False)  # 3xHxW -> 64 x H/4 x W/4
FEATURE_CHANNELS = ENCODER_WIDTHS[-1]
NUM_CLASSES = 4


class NotPretrainedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class VariantFlags:
    hallucination: bool = False
    attention: bool = False
    nuclei_aux: bool = False
    membrane_aux: bool = False


VARIANT_FLAGS = {
    "A": VariantFlags(),
    "B": VariantFlags(hallucination=True),
    "C": VariantFlags(hallucination=True, attention=True),
    "D": VariantFlags(hallucination=True, attention=True, nuclei_aux=True),
    "E": VariantFlags(hallucination=True, attention=True, membrane_aux=True),
    "F": VariantFlags(hallucination=True, attention=True,
                      nuclei_aux=True, membrane_aux=True),
}
BASELINE_VARIANTS = ("ihc_unimodal", "image_concat", "feature_concat")
ALL_VARIANTS = tuple(VARIANT_FLAGS) + BASELINE_VARIANTS


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Every parameter draws from its own named stream, so initialization is
    # independent of which other components a variant instantiates.
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])))


class ModelGraph:
    """Parameter store plus the forward passes for one model variant."""

    def __init__(self, variant: str, seed: int, joint_teacher: bool = False,
                 inference_only: bool = False):
        if variant not in ALL_VARIANTS:
            raise InvalidArgumentError(f"unknown variant {variant!r}")
        self.variant = variant
        self.flags = VARIANT_FLAGS.get(variant, VariantFlags())
        self.seed = seed
        self.joint_teacher = joint_teacher
        self.inference_only = inference_only
        self.params: dict[str, Parameter] = {}
        self.teacher_loaded = False

        if variant == "ihc_unimodal":
            self._build_encoder("teacher", in_channels=3, trainable=True)
            self._add("teacher.head.weight", (FEATURE_CHANNELS, NUM_CLASSES))
            self._add("teacher.head.bias", (NUM_CLASSES,))
            return
        if variant == "image_concat":
            self._build_encoder("student", in_channels=6, trainable=True)
            self._add("classifier.weight", (FEATURE_CHANNELS, NUM_CLASSES))
            self._add("classifier.bias", (NUM_CLASSES,))
            return
        if variant == "feature_concat":
            self._build_encoder("student", in_channels=3, trainable=True)
            self._build_encoder("teacher", in_channels=3, trainable=True)
            self._build_fusion(2 * FEATURE_CHANNELS)
            self._add("classifier.weight", (2 * FEATURE_CHANNELS, NUM_CLASSES))
            self._add("classifier.bias", (NUM_CLASSES,))
            self.teacher_loaded = True  # trained from scratch alongside the student
            return

        self._build_encoder("student", in_channels=3, trainable=True)
        if self.flags.hallucination:
            if not inference_only:
                self._build_encoder("teacher", in_channels=3, trainable=joint_teacher)
                if joint_teacher:
                    # End-to-end teacher training needs its own supervision head.
                    self._add("teacher.head.weight", (FEATURE_CHANNELS, NUM_CLASSES))
                    self._add("teacher.head.bias", (NUM_CLASSES,))
                    self.teacher_loaded = True
            c = FEATURE_CHANNELS
            self._add("hallucinator.conv1.weight", (c, c, 3, 3))
            self._add("hallucinator.conv1.bias", (c,))
            self._add("hallucinator.conv2.weight", (c, c, 3, 3), zero=True)
            self._add("hallucinator.conv2.bias", (c,), zero=True)
        if not inference_only:
            if self.flags.nuclei_aux:
                self._add("decoder.nuclei.weight", (1, FEATURE_CHANNELS, 1, 1))
                self._add("decoder.nuclei.bias", (1,))
            if self.flags.membrane_aux:
                self._add("decoder.membrane.weight", (1, FEATURE_CHANNELS, 1, 1))
                self._add("decoder.membrane.bias", (1,))
        fused = (2 if self.flags.hallucination else 1) * FEATURE_CHANNELS
        if self.flags.attention:
            self._build_fusion(fused)
        self._add("classifier.weight", (fused, NUM_CLASSES))
        self._add("classifier.bias", (NUM_CLASSES,))

    # -- construction ---------------------------------------------------------

    def _add(self, name: str, shape, zero: bool = False, trainable: bool = True):
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter {name!r}")
        if zero or name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])
            std = float(np.sqrt(2.0 / fan_in))
            data = (_param_rng(self.seed, name).standard_normal(shape) * std
                    ).astype(np.float32)
        self.params[name] = Parameter(name, Tensor(data, requires_grad=trainable))

    def _build_encoder(self, prefix: str, in_channels: int, trainable: bool):
        c_in = in_channels
        for i, width in enumerate(ENCODER_WIDTHS, start=1):
            self._add(f"{prefix}.conv{i}.weight", (width, c_in, 3, 3), trainable=trainable)
            self._add(f"{prefix}.conv{i}.bias", (width,), trainable=trainable)
            c_in = width

    def _build_fusion(self, channels: int):
        hidden = channels // 4
        self._add("fusion.mlp1.weight", (channels, hidden))
        self._add("fusion.mlp1.bias", (hidden,))
        self._add("fusion.mlp2.weight", (hidden, channels))
        self._add("fusion.mlp2.bias", (channels,))
        self._add("fusion.spatial.weight", (1, channels, 1, 1))
        self._add("fusion.spatial.bias", (1,))

    def _p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        if trainable_only:
            return [p for p in self.params.values() if p.tensor.requires_grad]
        return list(self.params.values())

    # -- forward pieces --------------------------------------------------------

    def _encode(self, prefix: str, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise InvalidShapeError(f"expected NCHW input, got {x.shape}")
        expected = self._p(f"{prefix}.conv1.weight").shape[1]
        if x.shape[1] != expected:
            raise InvalidShapeError(
                f"{prefix} encoder expects {expected} channels, got {x.shape[1]}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise InvalidShapeError(f"spatial dims must be divisible by 4, got {x.shape}")
        out = x
        for i in range(1, len(ENCODER_WIDTHS) + 1):
            out = ad.conv2d(out, self._p(f"{prefix}.conv{i}.weight"),
                            self._p(f"{prefix}.conv{i}.bias"), stride=1, padding=1)
            out = ad.relu(out)
            if POOL_AFTER_STAGE[i - 1]:
                out = ad.maxpool2d(out, 2)
        return out

    def encode_student(self, x_he: Tensor) -> Tensor:
        return self._encode("student", x_he)

    def encode_teacher(self, x_ihc: Tensor) -> Tensor:
        if not self.teacher_loaded:
            raise NotPretrainedError(
                "teacher weights not loaded; run teacher pretraining first")
        return self._encode("teacher", x_ihc)

    def hallucinate(self, z_he: Tensor) -> Tensor:
        h = ad.conv2d(z_he, self._p("hallucinator.conv1.weight"),
                      self._p("hallucinator.conv1.bias"), padding=1)
        h = ad.relu(h)
        h = ad.conv2d(h, self._p("hallucinator.conv2.weight"),
                      self._p("hallucinator.conv2.bias"), padding=1)
        return z_he + h

    def decode_nuclei(self, z: Tensor) -> Tensor:
        return ad.relu(ad.conv2d(z, self._p("decoder.nuclei.weight"),
                                 self._p("decoder.nuclei.bias")))

    def decode_membrane(self, z: Tensor) -> Tensor:
        return ad.sigmoid(ad.conv2d(z, self._p("decoder.membrane.weight"),
                                    self._p("decoder.membrane.bias")))

    def fuse(self, z_he: Tensor, z_aux: Tensor | None = None):
        """Concatenate streams and, when enabled, gate with attention.

        Returns (fused, attention); attention is None for plain concat.
        """
        if z_aux is not None and z_he.shape != z_aux.shape:
            raise InvalidShapeError(
                f"stream shapes differ: {z_he.shape} vs {z_aux.shape}")
        cat = ad.concat([z_he, z_aux], axis=1) if z_aux is not None else z_he
        if not self.flags.attention and self.variant != "feature_concat":
            return cat, None
        n, c = cat.shape[0], cat.shape[1]
        avg_stats = cat.mean(axes=(2, 3))
        max_stats = cat.max(axes=(2, 3))
        def mlp(stats):
            h = ad.relu(ad.dense(stats, self._p("fusion.mlp1.weight"),
                                 self._p("fusion.mlp1.bias")))
            return ad.dense(h, self._p("fusion.mlp2.weight"),
                            self._p("fusion.mlp2.bias"))
        channel_logit = mlp(avg_stats) + mlp(max_stats)
        spatial_logit = ad.conv2d(cat, self._p("fusion.spatial.weight"),
                                  self._p("fusion.spatial.bias"))
        attention = ad.sigmoid(ad.reshape(channel_logit, (n, c, 1, 1)) + spatial_logit)
        return cat * attention, attention

    def classify(self, fused: Tensor) -> Tensor:
        pooled = fused.mean(axes=(2, 3))
        return ad.dense(pooled, self._p("classifier.weight"), self._p("classifier.bias"))

    def _teacher_head(self, z: Tensor) -> Tensor:
        pooled = z.mean(axes=(2, 3))
        return ad.dense(pooled, self._p("teacher.head.weight"), self._p("teacher.head.bias"))

    # -- full passes ------------------------------------------------------------

    def forward_train(self, x_he: Tensor, x_ihc: Tensor | None = None,
                      teacher_features: Tensor | None = None) -> dict[str, Tensor]:
        """One training pass; disabled components are absent from the result."""
        if self.variant == "ihc_unimodal":
            return {"logits": self._teacher_head(self._encode("teacher", x_ihc))}
        if self.variant == "image_concat":
            x = ad.concat([x_he, x_ihc], axis=1)
            return {"logits": self.classify(self._encode("student", x))}
        if self.variant == "feature_concat":
            z_s = self.encode_student(x_he)
            z_t = self._encode("teacher", x_ihc)
            fused, _ = self.fuse(z_s, z_t)
            return {"logits": self.classify(fused)}

        out: dict[str, Tensor] = {}
        z_he = self.encode_student(x_he)
        z_hat = None
        if self.flags.hallucination:
            if teacher_features is not None:
                z_t = teacher_features.detach()
            else:
                z_t = self.encode_teacher(x_ihc)
                if self.joint_teacher:
                    out["teacher_logits"] = self._teacher_head(z_t)
            z_hat = self.hallucinate(z_he)
            out["halluc_features"] = z_hat
            out["teacher_features"] = z_t
            if self.flags.nuclei_aux:
                out["nuclei_pred"] = self.decode_nuclei(z_hat)
            if self.flags.membrane_aux:
                out["membrane_pred"] = self.decode_membrane(z_hat)
        fused, _ = self.fuse(z_he, z_hat)
        out["logits"] = self.classify(fused)
        return out

    def forward_infer(self, x_he: Tensor) -> Tensor:
        """H&E-only inference: never touches teacher or decoder parameters."""
        z_he = self.encode_student(x_he)
        z_hat = self.hallucinate(z_he) if self.flags.hallucination else None
        fused, _ = self.fuse(z_he, z_hat)
        return self.classify(fused)

    # -- state ------------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        """Fill every own parameter from ``state``; extra entries are ignored."""
        for name, p in self.params.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.tensor.shape:
                raise CheckpointError(
                    f"{name!r}: checkpoint shape {arr.shape} != model {p.tensor.shape}")
            p.tensor.data = arr.copy()

    def load_teacher(self, ckpt_path):
        """Load frozen teacher weights from a pretraining checkpoint."""
        state = load_checkpoint(ckpt_path)
        for name, p in self.params.items():
            if not name.startswith("teacher."):
                continue
            if name not in state:
                raise NotPretrainedError(
                    f"teacher checkpoint {ckpt_path} is missing {name!r}")
            p.tensor.data = np.asarray(state[name], dtype=np.float32).copy()
            if not self.joint_teacher:
                p.tensor.requires_grad = False
        self.teacher_loaded = True


def detect_variant(state: dict[str, np.ndarray]) -> str:
    """Recover the inference architecture from checkpoint parameter names."""
    names = set(state)
    has = lambda prefix: any(n.startswith(prefix) for n in names)
    if has("hallucinator."):
        return "C" if has("fusion.") else "B"
    if has("teacher.head.") and not has("student."):
        return "ihc_unimodal"
    if has("teacher.") and has("student."):
        return "feature_concat"
    if "student.conv1.weight" in names and state["student.conv1.weight"].shape[1] == 6:
        return "image_concat"
    if has("student."):
        return "A"
    raise CheckpointError("unrecognizable checkpoint contents")
