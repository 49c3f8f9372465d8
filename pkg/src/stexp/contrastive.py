"""Symmetric contrastive objective over patch/spot pairs and the training loop.

Within a batch of N matched pairs, the similarity matrix between the two
unit-norm embedding sets is divided by the temperature and scored against
the identity label matrix with cross-entropy in both directions; the loss
is the average of the two directions. Matched pairs sit on the diagonal,
the N^2 - N off-diagonal entries are the negatives.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from .data import ProcessedDataset, Slide, batch_sampler
from .diffcore import ParamSet, Tensor

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-5


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic snapshot dict."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 40
    learning_rate: float = 1e-3
    temperature: float = 1.0
    learn_temperature: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("TrainConfig: batch_size must be >= 2")
        if self.temperature <= 0:
            raise ValueError("TrainConfig: temperature must be positive")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "temperature": self.temperature,
            "learn_temperature": self.learn_temperature,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _check_unit_rows(h: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(np.asarray(h, dtype=np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise ValueError(f"{name}: row {int(bad[0])} has norm {norms[bad[0]]:.6f}, expected 1 +/- {UNIT_NORM_TOL}")


def similarity(h_a: np.ndarray, h_b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of pre-normalized rows (a plain dot product)."""
    h_a, h_b = np.asarray(h_a), np.asarray(h_b)
    if h_a.ndim != 2 or h_b.ndim != 2 or h_a.shape[1] != h_b.shape[1]:
        raise ValueError(f"similarity: incompatible shapes {h_a.shape} and {h_b.shape}")
    _check_unit_rows(h_a, "similarity: first argument")
    _check_unit_rows(h_b, "similarity: second argument")
    return h_a @ h_b.T


def _symmetric_ce(sim: Tensor, inv_tau) -> Tensor:
    """(CE over rows + CE over columns) / 2 against diagonal targets."""
    n = sim.shape[0]
    targets = np.arange(n)
    logits = dc.scale(sim, inv_tau)
    loss_image = dc.mean(dc.cross_entropy_with_index_targets(logits, targets))
    loss_spot = dc.mean(dc.cross_entropy_with_index_targets(dc.transpose(logits), targets))
    return dc.scale(dc.add(loss_image, loss_spot), 0.5)


def loss_from_similarity(sim: np.ndarray, tau: float) -> float:
    """Symmetric cross-entropy loss from a precomputed similarity matrix."""
    sim = np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"loss_from_similarity: expected square matrix, got {sim.shape}")
    if sim.shape[0] < 2:
        raise ValueError("loss_from_similarity: need at least 2 pairs")
    if tau <= 0:
        raise ValueError("loss_from_similarity: temperature must be positive")
    node = _symmetric_ce(dc.constant(sim), 1.0 / tau)
    return float(node.data.reshape(()))


def clip_loss(h_patch: np.ndarray, h_spot: np.ndarray, tau: float = 1.0) -> float:
    """Symmetric contrastive loss for matched patch/spot embedding rows."""
    h_patch, h_spot = np.asarray(h_patch), np.asarray(h_spot)
    if h_patch.shape != h_spot.shape:
        raise ValueError(f"clip_loss: shape mismatch {h_patch.shape} vs {h_spot.shape}")
    if h_patch.shape[0] < 2:
        raise ValueError("clip_loss: need at least 2 pairs")
    return loss_from_similarity(h_patch @ h_spot.T, tau)


def _inv_tau_term(params: ParamSet, cfg: TrainConfig):
    if cfg.learn_temperature:
        return dc.exp(dc.scale(params["temp.log_tau"], -1.0))
    return 1.0 / cfg.temperature


def build_loss_graph(
    params: ParamSet,
    patch_input: Tensor,
    expression: Tensor,
    coords: np.ndarray,
    enc_cfg: enc.EncoderConfig,
    train_cfg: TrainConfig,
) -> Tensor:
    """Full training graph: both encoders, similarity, symmetric cross-entropy."""
    h_patch = enc.project(enc.encode_patch(patch_input, params, enc_cfg), params, "img_proj")
    h_spot = enc.encode_spots(expression, coords, params, enc_cfg)
    sim = dc.matmul(h_patch, dc.transpose(h_spot))
    return _symmetric_ce(sim, _inv_tau_term(params, train_cfg))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParamSet
    manifest: dict
    history: list[float] = field(default_factory=list)

    @property
    def encoder_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig.from_dict(self.manifest["encoder"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.manifest["train"])


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> None:
    """Write manifest.json plus a little-endian float32 blob tiled by the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, t in ckpt.params.items():
        arr = t.data.astype("<f4")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
                "frozen": ckpt.params.is_frozen(name),
            }
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = dict(ckpt.manifest)
    manifest["params"] = {"dtype": "<f4", "total_bytes": offset, "entries": entries}
    manifest["loss_history"] = list(ckpt.history)
    (directory / "params.f32").write_bytes(b"".join(chunks))
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "params.f32").read_bytes()
    layout = manifest["params"]
    if len(blob) != layout["total_bytes"]:
        raise ValueError(f"checkpoint blob is {len(blob)} bytes, manifest declares {layout['total_bytes']}")
    params = ParamSet()
    expected_offset = 0
    for entry in layout["entries"]:
        if entry["offset"] != expected_offset:
            raise ValueError(f"checkpoint manifest offsets do not tile the blob at {entry['name']}")
        arr = np.frombuffer(
            blob, dtype=layout["dtype"], count=int(np.prod(entry["shape"])), offset=entry["offset"]
        ).reshape(entry["shape"]).copy()
        params.add(entry["name"], arr, frozen=entry["frozen"])
        expected_offset += entry["nbytes"]
    if expected_offset != layout["total_bytes"]:
        raise ValueError("checkpoint manifest offsets do not tile the blob exactly")
    history = manifest.get("loss_history", [])
    return Checkpoint(params=params, manifest=manifest, history=history)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _epoch_seed(seed: int, slide_index: int, epoch: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(slide_index, epoch)).generate_state(1)[0])


def _slide_batch_inputs(slide: Slide, batch: np.ndarray, cfg: enc.EncoderConfig):
    raw = slide.patches if slide.patches is not None else slide.features
    patch_input = enc.prepare_patch_input(raw[batch], cfg)
    return patch_input, slide.expression[batch], slide.coords[batch]


def fit(dataset: ProcessedDataset, train_cfg: TrainConfig, enc_cfg: enc.EncoderConfig) -> Checkpoint:
    """Adam on the symmetric contrastive loss over per-slide batches.

    Deterministic under a fixed seed: parameter init, batch order, and all
    updates derive from train_cfg.seed. Aborts with a diagnostic snapshot if
    the loss leaves the finite range.
    """
    train_slides = dataset.train_slides()
    if not train_slides:
        raise ValueError("fit: dataset has no training slides")
    if dataset.slides[0].gene_num != enc_cfg.hvg_num:
        raise ValueError(
            f"fit: dataset has {dataset.slides[0].gene_num} genes, encoder expects {enc_cfg.hvg_num}"
        )
    too_small = [s.slide_id for s in train_slides if s.spot_num < train_cfg.batch_size]
    if too_small:
        raise ValueError(f"fit: batch_size={train_cfg.batch_size} exceeds spot count of {too_small}")

    params = enc.init_params(
        enc_cfg,
        train_cfg.seed,
        learn_temperature=train_cfg.learn_temperature,
        init_log_tau=float(np.log(train_cfg.temperature)),
    )
    moments1 = {n: np.zeros_like(params[n].data) for n in params.trainable_names()}
    moments2 = {n: np.zeros_like(params[n].data) for n in params.trainable_names()}
    step = 0
    history: list[float] = []

    for epoch in range(train_cfg.epochs):
        epoch_losses: list[float] = []
        for slide_index, slide in enumerate(train_slides):
            for batch in batch_sampler(slide, train_cfg.batch_size, _epoch_seed(train_cfg.seed, slide_index, epoch)):
                patch_input, expression, coords = _slide_batch_inputs(slide, batch, enc_cfg)

                def graph(p, inputs):
                    return build_loss_graph(p, inputs[0], inputs[1], coords, enc_cfg, train_cfg)

                value, grads = dc.evaluate_with_gradients(graph, params, [patch_input, expression])
                loss = float(value.data.reshape(()))
                if not np.isfinite(loss):
                    snapshot = {
                        "epoch": epoch,
                        "step": step,
                        "slide_id": slide.slide_id,
                        "loss": loss,
                        "recent_epoch_losses": history[-5:],
                        "param_norms": {n: float(np.linalg.norm(params[n].data)) for n in params.names()},
                    }
                    raise TrainingDiverged(f"fit: loss became {loss} at epoch {epoch} step {step}", snapshot)

                step += 1
                b1, b2 = train_cfg.beta1, train_cfg.beta2
                for name, g in grads.items():
                    m = moments1[name]
                    v = moments2[name]
                    m += (1.0 - b1) * (g - m)
                    v += (1.0 - b2) * (g * g - v)
                    m_hat = m / (1.0 - b1**step)
                    v_hat = v / (1.0 - b2**step)
                    params[name].data -= train_cfg.learning_rate * m_hat / (np.sqrt(v_hat) + train_cfg.epsilon)
                epoch_losses.append(loss)
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, train_cfg.epochs, mean_loss)

    manifest = {
        "encoder": enc_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "preprocess": dataset.manifest,
        "seed": train_cfg.seed,
        "epochs_completed": train_cfg.epochs,
        "final_loss": history[-1] if history else None,
    }
    return Checkpoint(params=params, manifest=manifest, history=history)
