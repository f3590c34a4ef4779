"""
Byte-level convolutional malware detector.

embed -> conv1d -> relu -> global max-pool -> dense(2). The embedding is a
separate step so attacks can take gradients with respect to it:
forward(x) == post_embedding(embed(x)).
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from config.settings import DetectorHyperparams, TrainSettings, settings
from mbxlab.container import BinaryImage, detector_view

logger = logging.getLogger(__name__)

BENIGN = 0
MALICIOUS = 1
LABEL_NAMES = {BENIGN: 'benign', MALICIOUS: 'malicious'}

WEIGHT_MAGIC = b'MBXD'
WEIGHT_VERSION = 1
_WEIGHT_HEADER = struct.Struct('<4sI5I')
_TENSOR_COUNT = struct.Struct('<I')

Bytes = Union[bytes, bytearray]


class WeightFileError(ValueError):
    """Raised when a weight file is malformed or does not match the architecture"""


class Objective(str, Enum):
    """Scalar whose gradient attacks follow; both increase toward the target class"""
    BENEFIT = "benefit"
    CROSS_ENTROPY = "ce"


class DetectorModel(nn.Module):
    def __init__(self, hyperparams: Optional[DetectorHyperparams] = None):
        super().__init__()
        self.hyperparams = hyperparams or settings.detector.hyperparams
        hp = self.hyperparams
        self.embedding = nn.Embedding(256, hp.embed_dim)
        self.conv = nn.Conv1d(hp.embed_dim, hp.filters, hp.width, stride=hp.stride)
        self.dense = nn.Linear(hp.filters, 2)

    @property
    def input_cap(self) -> int:
        return self.hyperparams.input_cap

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """(batch, n) byte indices -> (batch, n, d)"""
        return self.embedding(x.long())

    def post_embedding(self, e: torch.Tensor) -> torch.Tensor:
        """(batch, n, d) embeddings -> (batch, 2) logits"""
        h = F.relu(self.conv(e.transpose(1, 2)))
        return self.dense(h.amax(dim=2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.post_embedding(self.embed(x))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass(frozen=True)
class Threshold:
    cutoff: float
    target_fpr: float
    fpr: float
    n_benign: int

    def is_malicious(self, score: float) -> bool:
        return score > self.cutoff

    def to_dict(self) -> Dict[str, float]:
        return {'cutoff': self.cutoff, 'target_fpr': self.target_fpr, 'fpr': self.fpr, 'n_benign': self.n_benign}

    @classmethod
    def from_dict(cls, data: Dict) -> 'Threshold':
        return cls(float(data['cutoff']), float(data['target_fpr']), float(data.get('fpr', 0.0)),
                   int(data.get('n_benign', 0)))


@dataclass(frozen=True)
class Classification:
    label: int
    score: float

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


@dataclass
class TrainReport:
    epochs: List[Dict[str, float]]

    @property
    def final_val_accuracy(self) -> Optional[float]:
        return self.epochs[-1].get('val_accuracy') if self.epochs else None


# ==================== CONSTRUCTION ====================

def init_model(seed: int, hyperparams: Optional[DetectorHyperparams] = None) -> DetectorModel:
    """Deterministic initialization; the global torch rng is left untouched"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DetectorModel(hyperparams)
        for module in (model.conv, model.dense):
            bound = 1.0 / np.sqrt(module.weight[0].numel())
            nn.init.uniform_(module.weight, -bound, bound)
            nn.init.uniform_(module.bias, -bound, bound)
        nn.init.uniform_(model.embedding.weight, -1.0, 1.0)
    return model.eval()


# ==================== INPUT ====================

def to_tensor(views: Sequence[Bytes], cap: int) -> torch.Tensor:
    """Zero-padded (batch, cap) uint8 tensor from detector views"""
    out = np.zeros((len(views), cap), dtype=np.uint8)
    for i, view in enumerate(views):
        data = np.frombuffer(bytes(view[:cap]), dtype=np.uint8)
        out[i, :len(data)] = data
    return torch.from_numpy(out)


def embed(model: DetectorModel, view: Bytes) -> torch.Tensor:
    """(cap, d) embedding of one padded view"""
    with torch.no_grad():
        return model.embed(to_tensor([view], model.input_cap))[0]


def post_embedding(model: DetectorModel, e: torch.Tensor) -> Tuple[torch.Tensor, float]:
    """Logits and probability-malicious for one (n, d) embedding"""
    with torch.no_grad():
        logits = model.post_embedding(e.unsqueeze(0))[0]
    return logits, float(torch.softmax(logits, dim=0)[MALICIOUS])


def objective_value(logits: torch.Tensor, objective: Objective, target: int) -> torch.Tensor:
    """
    Scalar that grows as the model moves toward target.

    BENEFIT is logit[target] - logit[source]; CROSS_ENTROPY is the negated
    cross-entropy against target.
    """
    if objective == Objective.BENEFIT:
        return logits[..., target] - logits[..., 1 - target]
    return -F.cross_entropy(logits.reshape(-1, 2), torch.full((logits.reshape(-1, 2).shape[0],), target))


def grad_wrt_embedding(model: DetectorModel, e: torch.Tensor, objective: Objective = Objective.BENEFIT,
                       target: int = BENIGN) -> torch.Tensor:
    """
    Gradient of the objective with respect to every embedding entry.

    Args:
        model: Detector
        e: (n, d) embedding, typically from embed()
        objective: Objective to differentiate
        target: Class the attacker moves toward

    Returns:
        (n, d) tensor, same dtype as e
    """
    e = e.detach().clone().requires_grad_(True)
    value = objective_value(model.post_embedding(e.unsqueeze(0))[0], objective, target)
    (grad,) = torch.autograd.grad(value.sum(), e)
    return grad


def logits_for(model: DetectorModel, view: Bytes) -> torch.Tensor:
    with torch.no_grad():
        return model(to_tensor([view], model.input_cap))[0]


# ==================== SCORING ====================

def score_views(model: DetectorModel, views: Sequence[Bytes], batch_size: int = 64) -> np.ndarray:
    """Probability-malicious per view, batched"""
    scores = []
    with torch.no_grad():
        for start in range(0, len(views), batch_size):
            batch = to_tensor(views[start:start + batch_size], model.input_cap)
            scores.append(torch.softmax(model(batch), dim=1)[:, MALICIOUS].numpy())
    return np.concatenate(scores) if scores else np.zeros(0, dtype=np.float32)


def score_view(model: DetectorModel, view: Bytes) -> float:
    return float(score_views(model, [view])[0])


def classify(model: DetectorModel, image: BinaryImage, threshold: Threshold) -> Classification:
    """Score detector_view(image) and label it by the calibrated cutoff"""
    score = score_view(model, detector_view(image, model.input_cap))
    return Classification(MALICIOUS if threshold.is_malicious(score) else BENIGN, score)


def accuracy(model: DetectorModel, views: Sequence[Bytes], labels: Sequence[int], batch_size: int = 64,
             cutoff: float = 0.5) -> float:
    if not len(views):
        return 0.0
    predicted = (score_views(model, views, batch_size) > cutoff).astype(int)
    return float(np.mean(predicted == np.asarray(labels)))


# ==================== CALIBRATION ====================

def cutoff_for_fpr(benign_scores: Sequence[float], target_fpr: float) -> Threshold:
    """
    Smallest benign score whose strict-greater FPR stays within target_fpr.

    With fewer than 1/target_fpr samples this is the maximum benign score.
    """
    if not 0 < target_fpr < 1:
        raise ValueError(f"target_fpr must be in (0, 1), got {target_fpr}")
    scores = np.sort(np.asarray(benign_scores, dtype=np.float64))[::-1]
    if not len(scores):
        raise ValueError("calibration needs at least one benign score")
    allowed = int(np.floor(target_fpr * len(scores)))
    cutoff = float(scores[min(allowed, len(scores) - 1)])
    fpr = float(np.mean(scores > cutoff))
    return Threshold(cutoff, target_fpr, fpr, len(scores))


def calibrate_threshold(model: DetectorModel, benign_views: Sequence[Bytes],
                        target_fpr: Optional[float] = None) -> Threshold:
    target_fpr = settings.detector.train.target_fpr if target_fpr is None else target_fpr
    if len(benign_views) < 1 / target_fpr:
        logger.warning(f"{len(benign_views)} benign samples for FPR {target_fpr}: cutoff is the max benign score")
    threshold = cutoff_for_fpr(score_views(model, benign_views), target_fpr)
    logger.info(f"Calibrated cutoff {threshold.cutoff:.6f} (FPR {threshold.fpr:.4%} on {threshold.n_benign})")
    return threshold


def true_positive_rate(model: DetectorModel, malicious_views: Sequence[Bytes], threshold: Threshold) -> float:
    if not len(malicious_views):
        return 0.0
    return float(np.mean(score_views(model, malicious_views) > threshold.cutoff))


# ==================== TRAINING ====================

def _optimizer(model: DetectorModel, train_settings: TrainSettings) -> torch.optim.Optimizer:
    if train_settings.optimizer == 'sgd':
        return torch.optim.SGD(model.parameters(), lr=train_settings.learning_rate,
                               momentum=train_settings.momentum)
    return torch.optim.Adam(model.parameters(), lr=train_settings.learning_rate)


def train(model: DetectorModel, views: Sequence[Bytes], labels: Sequence[int], seed: int = 0,
          train_settings: Optional[TrainSettings] = None, epochs: Optional[int] = None,
          val: Optional[Tuple[Sequence[Bytes], Sequence[int]]] = None) -> TrainReport:
    """
    Minimize cross-entropy; deterministic given seed.

    Args:
        model: Model to train in place
        views: Detector views of the training images
        labels: 0 benign, 1 malicious
        seed: Shuffling seed
        train_settings: Optimizer settings (defaults from settings)
        epochs: Overrides train_settings.epochs
        val: Optional (views, labels) scored after every epoch

    Returns:
        TrainReport with one row per epoch
    """
    from mbxlab.base_attack import timed

    train_settings = train_settings or settings.detector.train
    epochs = epochs or train_settings.epochs
    dataset = TensorDataset(to_tensor(views, model.input_cap), torch.as_tensor(list(labels), dtype=torch.long))
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(dataset, batch_size=train_settings.batch_size, shuffle=True, generator=generator)
    optimizer = _optimizer(model, train_settings)

    report = TrainReport([])
    for epoch in range(1, epochs + 1):
        with timed(logger, f"epoch {epoch}"):
            model.train()
            total, correct, loss_sum = 0, 0, 0.0
            for x, y in loader:
                optimizer.zero_grad()
                logits = model(x)
                loss = F.cross_entropy(logits, y)
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * len(y)
                correct += int((logits.argmax(dim=1) == y).sum())
                total += len(y)
            model.eval()

        row = {'epoch': epoch, 'loss': loss_sum / max(total, 1), 'train_accuracy': correct / max(total, 1)}
        if val is not None:
            row['val_accuracy'] = accuracy(model, val[0], val[1])
        report.epochs.append(row)
        logger.info(f"epoch {epoch}/{epochs}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != 'epoch'))
    return report


# ==================== WEIGHT FILE ====================

def _hyperparam_tuple(hp: DetectorHyperparams) -> Tuple[int, ...]:
    return hp.embed_dim, hp.filters, hp.width, hp.stride, hp.input_cap


def weights_to_bytes(model: DetectorModel) -> bytes:
    """
    Layout: magic, u32 version, 5 x u32 hyperparams, u32 tensor count, then per
    tensor u16 name length, utf-8 name, u8 ndim, ndim x u32 dims, f32 LE data.
    """
    state = model.state_dict()
    out = [_WEIGHT_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, *_hyperparam_tuple(model.hyperparams)),
           _TENSOR_COUNT.pack(len(state))]
    for name, tensor in state.items():
        raw = name.encode()
        array = tensor.detach().cpu().numpy().astype('<f4')
        out.append(struct.pack('<H', len(raw)) + raw + struct.pack('<B', array.ndim))
        out.append(struct.pack(f'<{array.ndim}I', *array.shape))
        out.append(array.tobytes(order='C'))
    return b''.join(out)


def weights_from_bytes(data: bytes) -> DetectorModel:
    try:
        magic, version, *hp_values = _WEIGHT_HEADER.unpack_from(data, 0)
        if magic != WEIGHT_MAGIC:
            raise WeightFileError(f"bad magic {magic!r}")
        if version != WEIGHT_VERSION:
            raise WeightFileError(f"unsupported weight file version {version}")
        hp = DetectorHyperparams(**dict(zip(('embed_dim', 'filters', 'width', 'stride', 'input_cap'), hp_values)))
        model = DetectorModel(hp)
        expected = model.state_dict()

        pos = _WEIGHT_HEADER.size
        (count,) = _TENSOR_COUNT.unpack_from(data, pos)
        pos += _TENSOR_COUNT.size
        if count != len(expected):
            raise WeightFileError(f"expected {len(expected)} tensors, found {count}")

        loaded = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', data, pos)
            name = data[pos + 2:pos + 2 + name_len].decode()
            pos += 2 + name_len
            (ndim,) = struct.unpack_from('<B', data, pos)
            shape = struct.unpack_from(f'<{ndim}I', data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(data):
                raise WeightFileError(f"tensor {name} truncated")
            array = np.frombuffer(data, dtype='<f4', count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name not in expected or tuple(expected[name].shape) != tuple(shape):
                raise WeightFileError(f"tensor {name} {tuple(shape)} does not match the architecture")
            loaded[name] = torch.from_numpy(array.astype(np.float32))
        if pos != len(data):
            raise WeightFileError(f"{len(data) - pos} trailing bytes")
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        if isinstance(e, WeightFileError):
            raise
        raise WeightFileError(f"malformed weight file: {e}")

    model.load_state_dict(loaded)
    return model.eval()


def save_model(model: DetectorModel, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(weights_to_bytes(model))
    logger.info(f"Saved detector to {path} ({model.parameter_count()} parameters)")


def load_model(path: Path) -> DetectorModel:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise WeightFileError(f"weight file not found: {path}")
    return weights_from_bytes(data)


def fingerprint(model: DetectorModel) -> str:
    """Short stable digest of the weights, used in score cache keys"""
    return hashlib.md5(weights_to_bytes(model)).hexdigest()[:16]
