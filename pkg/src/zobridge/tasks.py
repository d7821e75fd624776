"""Desk-scale synthetic tasks, dataset generation/IO, and the oracle baseline.

Task A (``task_a_smooth``) routes a 2-D latent code through a known smooth
map registered both as an opaque stage and as a differentiable oracle twin,
so zeroth-order training can be compared against exact first-order training
on the same pipeline.

Task B (``task_b_bitstring``) mirrors the staged structure with discrete
objects: bitstrings drawn from a low-dimensional generative process, an
autoencoder over them, and an opaque middle that decodes, discretizes,
featurizes (substring counts) and embeds before the predictor front. The
training split is kept small relative to the 2^n object space so the
data-limited regime is real.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import backend as K
from .errors import DatasetFormatError
from .pipeline import PipelineState
from .rng import Rng
from .stages import (CompositeStage, DISCRETE, MlpStage, OpaqueStage,
                     SmoothMapStage, ThresholdStage, make_reparameterized_middle)
from .train import (RunMetrics, SupervisedTask, TrainConfig, exact_grad_fn,
                    stage2_train)
from .zo import ZoConfig

VECTOR = "vector"
BITSTRING = "bitstring"

_BITSTRING_RE = re.compile(r"[01]+")


@dataclass(frozen=True)
class TaskPreset:
    name: str
    seed: int
    n_train: int
    n_test: int
    noise_std: float
    property_def: str
    widths: dict = field(default_factory=dict)
    bit_length: int = 0
    gen_latent_dim: int = 0
    embed_dim: int = 0
    recon_accuracy_target: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "noise_std": self.noise_std,
            "property_def": self.property_def,
            "widths": {k: list(v) for k, v in self.widths.items()},
            "bit_length": self.bit_length,
            "gen_latent_dim": self.gen_latent_dim,
            "embed_dim": self.embed_dim,
            "recon_accuracy_target": self.recon_accuracy_target,
        }

    @staticmethod
    def from_dict(d: dict) -> "TaskPreset":
        return TaskPreset(
            name=d["name"], seed=int(d["seed"]), n_train=int(d["n_train"]),
            n_test=int(d["n_test"]), noise_std=float(d["noise_std"]),
            property_def=d["property_def"],
            widths={k: [int(w) for w in v] for k, v in d["widths"].items()},
            bit_length=int(d.get("bit_length", 0)),
            gen_latent_dim=int(d.get("gen_latent_dim", 0)),
            embed_dim=int(d.get("embed_dim", 0)),
            recon_accuracy_target=float(d.get("recon_accuracy_target", 0.0)))


def preset_task_a(seed: int = 0, n_train: int = 256, n_test: int = 512,
                  noise_std: float = 0.05) -> TaskPreset:
    return TaskPreset(
        name="task_a_smooth", seed=seed, n_train=n_train, n_test=n_test,
        noise_std=noise_std,
        property_def="linear readout of the smooth middle map, plus noise",
        widths={"encoder": [4, 8, 2], "tail": [3, 8, 1]})


def preset_task_b(seed: int = 0, n_train: int = 200, n_test: int = 2000,
                  noise_std: float = 0.1) -> TaskPreset:
    return TaskPreset(
        name="task_b_bitstring", seed=seed, n_train=n_train, n_test=n_test,
        noise_std=noise_std,
        property_def="nonlinear function of substring-count features, plus noise",
        widths={"encoder": [16, 32, 6], "decoder": [6, 32, 16],
                "front": [8, 8], "tail": [8, 8, 1]},
        bit_length=16, gen_latent_dim=4, embed_dim=8,
        recon_accuracy_target=0.95)


PRESETS = {
    "task_a_smooth": preset_task_a,
    "task_b_bitstring": preset_task_b,
}


@dataclass(frozen=True)
class SampleRecord:
    object: np.ndarray
    y: float


@dataclass
class Dataset:
    kind: str               # "vector" | "bitstring"
    objects: np.ndarray     # (N, d) float64; bitstrings are 0.0/1.0 entries
    y: np.ndarray           # (N, 1) float64

    def __len__(self) -> int:
        return self.objects.shape[0]

    def records(self):
        for i in range(len(self)):
            yield SampleRecord(self.objects[i], float(self.y[i, 0]))

    def pairs(self):
        return [(self.objects[i], self.y[i]) for i in range(len(self))]


# ---------------------------------------------------------------------------
# Task A: smooth opaque middle with an analytic oracle twin


def _task_a_map(z: np.ndarray) -> np.ndarray:
    return np.array([z[0] * z[0], z[0] * z[1], np.sin(z[1])])


def _task_a_jacobian(z: np.ndarray) -> np.ndarray:
    return np.array([[2.0 * z[0], 0.0],
                     [z[1], z[0]],
                     [0.0, np.cos(z[1])]])


def task_a_middle_opaque() -> OpaqueStage:
    """The smooth map registered as a forward-only black box."""
    return OpaqueStage(_task_a_map, 2, 3, name="smooth_black_box")


def task_a_middle_oracle() -> SmoothMapStage:
    """The same map with its analytic Jacobian exposed (oracle twin)."""
    return SmoothMapStage(_task_a_map, _task_a_jacobian, 2, 3, name="smooth_oracle")


def _task_a_structure(preset: TaskPreset):
    s = Rng(preset.seed).split(100)
    embed = s.normal_mat(4, 2)          # latent -> observed coordinates
    readout = s.normal(3)               # hidden linear readout of the middle
    return embed, readout


def gen_task_a(preset: TaskPreset, rng: Rng | None = None) -> Dataset:
    """Vectors x = E z with hidden latent z; y = <c, m(z)> + noise."""
    root = rng or Rng(preset.seed)
    embed, readout = _task_a_structure(preset)

    def draw(n: int, latent_stream: int, noise_stream: int):
        lat = root.split(latent_stream).normal_mat(n, 2)
        noise = root.split(noise_stream).normal(n) * preset.noise_std
        xs = lat @ embed.T
        ys = np.array([[float(readout @ _task_a_map(lat[i])) + noise[i]]
                       for i in range(n)])
        return xs, ys

    xs, ys = draw(preset.n_train + preset.n_test, 1, 2)
    train = Dataset(VECTOR, xs[:preset.n_train], ys[:preset.n_train])
    test = Dataset(VECTOR, xs[preset.n_train:], ys[preset.n_train:])
    return train, test


def build_task_a_pipeline(preset: TaskPreset, init_seed: int,
                          oracle: bool = False) -> PipelineState:
    root = Rng(init_seed)
    encoder = MlpStage(preset.widths["encoder"], block_name="u",
                       rng=root.split(31), name="encoder")
    tail = MlpStage(preset.widths["tail"], block_name="w2",
                    rng=root.split(32), name="tail")
    middle = task_a_middle_oracle() if oracle else task_a_middle_opaque()
    return PipelineState(encoder, middle, tail)


# ---------------------------------------------------------------------------
# Task B: bitstring objects, opaque featurizing middle


def _task_b_property(features: np.ndarray) -> float:
    c11, c101, parity, run = features
    return float(np.sin(0.8 * c11) + 0.5 * c101 + 0.3 * np.sqrt(run)
                 - 0.7 * parity)


def task_b_features(bits) -> np.ndarray:
    """Raw featurizer: ("11" count, "101" count, parity, longest equal run)."""
    return K.bit_features(np.ascontiguousarray(bits, dtype=np.float64))


def feature_mask(objects) -> np.ndarray:
    """Drop features constant across the (training) object set."""
    rows = np.stack([task_b_features(o) for o in objects])
    mask = ~np.all(rows == rows[0], axis=0)
    if not mask.any():
        raise ValueError("every feature is constant on this object set")
    return mask


def _task_b_structure(preset: TaskPreset):
    s = Rng(preset.seed).split(200)
    basis = s.normal_mat(preset.bit_length, preset.gen_latent_dim)
    offset = s.normal(preset.bit_length) * 0.3
    embed_w = s.normal_mat(preset.embed_dim, 4) * 1.5
    embed_b = s.normal(preset.embed_dim) * 0.2
    return basis, offset, embed_w, embed_b


def gen_task_b(preset: TaskPreset, rng: Rng | None = None) -> Dataset:
    """Bitstrings thresholded from a low-dim latent; y from raw features."""
    root = rng or Rng(preset.seed)
    basis, offset, _, _ = _task_b_structure(preset)

    def draw(n: int, latent_stream: int, noise_stream: int):
        lat = root.split(latent_stream).normal_mat(n, preset.gen_latent_dim)
        noise = root.split(noise_stream).normal(n) * preset.noise_std
        bits = (lat @ basis.T + offset > 0.0).astype(np.float64)
        ys = np.array([[_task_b_property(task_b_features(bits[i])) + noise[i]]
                       for i in range(n)])
        return bits, ys

    xs, ys = draw(preset.n_train + preset.n_test, 1, 2)
    train = Dataset(BITSTRING, xs[:preset.n_train], ys[:preset.n_train])
    test = Dataset(BITSTRING, xs[preset.n_train:], ys[preset.n_train:])
    return train, test


def build_task_b_pipeline(preset: TaskPreset, train_objects, init_seed: int):
    """Assemble the Task-B pipeline; returns (pipeline, parts dict).

    The middle fuses decoder -> hard threshold -> featurizer -> fixed smooth
    embedding -> predictor front into one opaque block, so discreteness stays
    between continuous boundaries. The decoder keeps its own block `v` (the
    reconstruction path shares the object), the front owns `w1`.
    """
    _, _, embed_w, embed_b = _task_b_structure(preset)
    mask = feature_mask(train_objects)
    n_active = int(mask.sum())
    w_active = np.ascontiguousarray(embed_w[:, mask])
    scale = float(preset.bit_length)

    root = Rng(init_seed)
    encoder = MlpStage(preset.widths["encoder"], block_name="u",
                       rng=root.split(41), name="encoder")
    decoder = MlpStage(preset.widths["decoder"], block_name="v",
                       rng=root.split(42), name="decoder")
    thresholder = ThresholdStage(preset.bit_length)
    featurizer = OpaqueStage(
        lambda bits: task_b_features(bits)[mask],
        preset.bit_length, n_active, in_space=DISCRETE, name="featurizer")
    embedding = OpaqueStage(
        lambda f: np.tanh(w_active @ (f / scale) + embed_b),
        n_active, preset.embed_dim, name="embedding")
    front = MlpStage(preset.widths["front"], activations=["tanh"],
                     block_name="w1", rng=root.split(43), name="front")
    tail = MlpStage(preset.widths["tail"], block_name="w2",
                    rng=root.split(44), name="tail")

    middle = make_reparameterized_middle(
        CompositeStage([decoder, thresholder], name="decode_discretize"),
        CompositeStage([featurizer, embedding], name="featurize_embed"),
        front)
    ps = PipelineState(encoder, middle, tail, recon_decoder=decoder)
    parts = {"encoder": encoder, "decoder": decoder, "thresholder": thresholder,
             "featurizer": featurizer, "embedding": embedding, "front": front,
             "tail": tail, "middle": middle, "feature_mask": mask}
    return ps, parts


def true_feature_embeddings(parts: dict, objects) -> np.ndarray:
    """Embedded ground-truth features (the predictor's Stage-1 inputs)."""
    feat, embed = parts["featurizer"], parts["embedding"]
    return np.stack([embed.forward(feat.forward(o)) for o in objects])


def stage1_tasks_task_b(parts: dict, train: Dataset, test: Dataset,
                        cfg: TrainConfig):
    """Stage-1 fitting problems: autoencoder on objects, predictor on
    ground-truth feature embeddings (no decoding involved, no ZO queries)."""
    ae = SupervisedTask(
        name="ae", stages=[parts["encoder"], parts["decoder"]],
        train_x=train.objects, train_y=train.objects,
        epochs=cfg.epochs_stage1, batch_size=cfg.batch_size_stage1,
        track_recon_accuracy=True)
    pred = SupervisedTask(
        name="predictor", stages=[parts["front"], parts["tail"]],
        train_x=true_feature_embeddings(parts, train.objects),
        train_y=train.y,
        epochs=cfg.epochs_stage1, batch_size=cfg.batch_size_stage1,
        test_x=true_feature_embeddings(parts, test.objects), test_y=test.y)
    return ae, pred


def oracle_fo_train(ps: PipelineState, train: Dataset, test: Dataset,
                    cfg: TrainConfig) -> RunMetrics:
    """First-order baseline: the identical joint loop with exact middle VJPs.

    Only possible when the middle exposes analytic gradients (Task A's
    black box is secretly known); the bitstring featurizer has none.
    """
    if not ps.middle.is_differentiable:
        raise NotImplementedError(
            "first-order oracle training needs the differentiable middle twin; "
            f"middle {ps.middle.name!r} has no true gradients")
    return stage2_train(ps, train.objects, train.y, test.objects, test.y,
                        cfg, ZoConfig(), grad_fn=exact_grad_fn,
                        phase="oracle_fo")


# ---------------------------------------------------------------------------
# Dataset and preset files


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write("object,y\n")
        for i in range(len(ds)):
            if ds.kind == BITSTRING:
                obj = "".join("1" if v > 0.5 else "0" for v in ds.objects[i])
            else:
                obj = ";".join(repr(float(v)) for v in ds.objects[i])
            fh.write(f"{obj},{repr(float(ds.y[i, 0]))}\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != "object,y":
        raise DatasetFormatError("expected header 'object,y'", 1)
    kind = None
    objects: list[np.ndarray] = []
    ys: list[float] = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.rsplit(",", 1)
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise DatasetFormatError("row must be 'object,y'", i)
        obj_str, y_str = parts
        try:
            y = float(y_str)
        except ValueError:
            raise DatasetFormatError(f"bad property value {y_str!r}", i) from None
        if _BITSTRING_RE.fullmatch(obj_str):
            row_kind = BITSTRING
            obj = np.array([1.0 if c == "1" else 0.0 for c in obj_str])
        else:
            row_kind = VECTOR
            try:
                obj = np.array([float(v) for v in obj_str.split(";")])
            except ValueError:
                raise DatasetFormatError(f"bad object field {obj_str!r}", i) from None
        if kind is None:
            kind = row_kind
        elif kind != row_kind:
            raise DatasetFormatError(f"object kind switched to {row_kind}", i)
        if objects and obj.shape != objects[0].shape:
            raise DatasetFormatError(
                f"object width {obj.shape[0]} != {objects[0].shape[0]}", i)
        objects.append(obj)
        ys.append(y)
    if not objects:
        raise DatasetFormatError("no data rows", 2)
    return Dataset(kind, np.stack(objects), np.array(ys).reshape(-1, 1))


def save_preset(preset: TaskPreset, path) -> None:
    with open(path, "w") as fh:
        json.dump(preset.to_dict(), fh, indent=2)
        fh.write("\n")


def load_preset(path) -> TaskPreset:
    with open(path) as fh:
        return TaskPreset.from_dict(json.load(fh))
