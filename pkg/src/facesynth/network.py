"""Small face CNNs trained from scratch with softmax loss.

``CNN_S`` and ``CNN_L`` follow the two layer tables of the recognition
pipeline; any other stack can be given as an explicit layer list.  Layers are
tuples: ``("conv", out_channels)`` (3x3, stride 1, same padding, ReLU),
``("maxpool",)`` (2x2, stride 2, ceil mode), ``("avgpool", k)`` (stride 1),
``("fc", out_dim)`` (ReLU), ``("dropout", rate)`` and ``("softmax", classes)``.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

CNN_S_LAYERS = [
    ("conv", 16), ("conv", 16), ("maxpool",),
    ("conv", 32), ("maxpool",),
    ("conv", 48), ("maxpool",),
    ("fc", 160),
]
CNN_L_LAYERS = [
    ("conv", 32), ("conv", 64), ("maxpool",),
    ("conv", 64), ("conv", 128), ("maxpool",),
    ("conv", 96), ("conv", 192), ("maxpool",),
    ("conv", 128), ("conv", 256), ("maxpool",),
    ("conv", 160), ("conv", 320), ("avgpool", 7),
]
CNN_L_POOL5_DROPOUT = 0.4

CHECKPOINT_MAGIC = b"FSNT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"loss became non-finite at iteration {iteration}")


@dataclass
class NetConfig:
    architecture: str = "CNN_S"  # CNN_S, CNN_L or custom
    num_classes: int = 2
    in_channels: int = 1
    input_size: int = 100
    width: float = 1.0  # channel multiplier for reduced variants
    dropout: float | None = None  # None: 0.4 after pool5 for CNN_L, nothing for CNN_S
    layers: list | None = None

    def layer_list(self) -> list:
        if self.layers is not None:
            body = [tuple(l) for l in self.layers]
        elif self.architecture == "CNN_S":
            body = list(CNN_S_LAYERS)
        elif self.architecture == "CNN_L":
            body = list(CNN_L_LAYERS)
        else:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.width != 1.0:
            body = [(k, max(1, int(round(v[0] * self.width)))) if k in ("conv", "fc") else (k, *v)
                    for k, *v in body]
        body = [l for l in body if l[0] not in ("dropout", "softmax")]
        rate = self.dropout
        if rate is None and self.architecture == "CNN_L" and self.layers is None:
            rate = CNN_L_POOL5_DROPOUT
        if rate:
            body.append(("dropout", rate))
        body.append(("softmax", self.num_classes))
        return body

    @property
    def feature_dim(self) -> int:
        _, c, s = [x for x in shape_chain(self) if x[0][0] not in ("dropout", "softmax")][-1]
        return c * s * s


def shape_chain(config: NetConfig) -> list:
    """Validate the layer list; returns ``(layer, channels, spatial_size)`` after each layer."""
    c, s = config.in_channels, config.input_size
    flat = False
    chain = []
    for layer in config.layer_list():
        kind = layer[0]
        if kind == "conv":
            if flat:
                raise ShapeError("conv after a fully connected layer")
            c = layer[1]
        elif kind == "maxpool":
            s = math.ceil(s / 2)
        elif kind == "avgpool":
            if layer[1] > s:
                raise ShapeError(f"avgpool {layer[1]} on a {s}x{s} map")
            s = s - layer[1] + 1
        elif kind == "fc":
            flat, c, s = True, layer[1], 1
        elif kind == "softmax":
            c, s = layer[1], 1
        elif kind != "dropout":
            raise ShapeError(f"unknown layer {layer!r}")
        chain.append((layer, c, s))
    return chain


class Network(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        shape_chain(config)
        self.config = config
        layers = config.layer_list()
        blocks = []
        flat = False
        c, s = config.in_channels, config.input_size
        for layer in layers:
            kind = layer[0]
            if kind == "conv":
                blocks += [nn.Conv2d(c, layer[1], 3, stride=1, padding=1), nn.ReLU()]
                c = layer[1]
            elif kind == "maxpool":
                blocks.append(nn.MaxPool2d(2, stride=2, ceil_mode=True))
                s = math.ceil(s / 2)
            elif kind == "avgpool":
                blocks.append(nn.AvgPool2d(layer[1], stride=1))
                s = s - layer[1] + 1
            elif kind == "fc":
                if not flat:
                    blocks.append(nn.Flatten())
                    flat = True
                blocks += [nn.Linear(c * s * s, layer[1]), nn.ReLU()]
                c, s = layer[1], 1
        self.features = nn.Sequential(*blocks, nn.Flatten())
        self.feature_dim = c * s * s
        drop = [l[1] for l in layers if l[0] == "dropout"]
        self.dropout = nn.Dropout(drop[0]) if drop else nn.Identity()
        self.classifier = nn.Linear(self.feature_dim, config.num_classes)

    def prepare(self, batch) -> torch.Tensor:
        """(N, H, W, C) numpy or (N, C, H, W) tensor -> tensor at the network input size."""
        x = batch
        if isinstance(x, np.ndarray):
            if x.ndim == 3:
                x = x[:, :, :, None]
            x = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        x = x.to(next(self.parameters()).dtype)
        size = self.config.input_size
        if x.shape[-1] != size or x.shape[-2] != size:
            x = F.interpolate(x, size=(size, size), mode="area")
        return x

    def forward(self, x):
        feats = self.features(x)
        return self.classifier(self.dropout(feats)), feats


def he_init_(net: Network, seed: int) -> Network:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                std = math.sqrt(2.0 / fan_in)
                if m is net.classifier:
                    # near-uniform initial predictions
                    std = 0.01 / math.sqrt(fan_in)
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * std)
                m.bias.zero_()
    return net


def build_network(config: NetConfig, seed: int = 0) -> Network:
    return he_init_(Network(config), seed)


def forward(net: Network, batch, train: bool = False):
    """Logits and feature-layer activations; dropout only in train mode."""
    net.train(train)
    x = net.prepare(batch)
    if train:
        return net(x)
    with torch.no_grad():
        return net(x)


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    lr_step: int = 4000
    lr_gamma: float = 0.1
    max_iterations: int = 10000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        presets = {
            "cnn_s": dict(base_lr=0.001, lr_step=4000, max_iterations=10_000),
            "cnn_l_nirvis": dict(base_lr=0.01, lr_step=8000, max_iterations=20_000),
            "cnn_l_lfw": dict(base_lr=0.01, lr_step=120_000, max_iterations=200_000),
        }
        return cls(**{**presets[name.lower()], **overrides})

    def lr_at(self, iteration: int) -> float:
        # dividing by 1/gamma keeps decimal schedules exact (0.001 -> 0.0001, not 0.00010000000000000002)
        return self.base_lr / (1.0 / self.lr_gamma) ** (iteration // self.lr_step)


@dataclass
class TrainResult:
    network: Network
    trace: list = field(default_factory=list)  # (iteration, lr, loss)

    def trace_csv(self) -> str:
        rows = ["iteration,lr,loss"] + [f"{i},{lr:.10g},{loss:.10g}" for i, lr, loss in self.trace]
        return "\n".join(rows) + "\n"


@contextlib.contextmanager
def deterministic_mode(threads: int = 1):
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def sgd_step(params, velocities, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum * v - lr * (grad + weight_decay * p);  p <- p + v."""
    with torch.no_grad():
        for p, v in zip(params, velocities):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            v.mul_(momentum).sub_(lr * (g + weight_decay * p))
            p.add_(v)


def _batch_order(n: int, batch_size: int, seed: int):
    gen = np.random.Generator(np.random.Philox(seed))
    while True:
        perm = gen.permutation(n)
        for k in range(0, n - n % batch_size if n >= batch_size else n, batch_size):
            yield perm[k:k + batch_size]


def train(net: Network, images, labels, config: TrainConfig, prefetch: bool = False,
          log_every: int = 0) -> TrainResult:
    """Minibatch SGD on softmax cross-entropy.

    ``images`` is an (N, H, W, C) array or a callable mapping an index array to
    such a batch (e.g. rendering composites lazily).  With ``prefetch`` the next
    batch is assembled on a worker thread while the current one trains.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= net.config.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    fetch = images if callable(images) else (lambda ix: images[ix])
    order = _batch_order(labels.size, config.batch_size, config.seed)
    params = [p for p in net.parameters()]
    velocities = [torch.zeros_like(p) for p in params]
    torch.manual_seed(config.seed)  # dropout masks
    trace = []

    def next_batch():
        ix = next(order)
        return ix, fetch(ix)

    pool = ThreadPoolExecutor(max_workers=1) if prefetch else None
    pending = pool.submit(next_batch) if pool else None
    try:
        for it in range(config.max_iterations):
            ix, batch = pending.result() if pool else next_batch()
            if pool:
                pending = pool.submit(next_batch)
            net.train(True)
            logits, _ = net(net.prepare(batch))
            loss = F.cross_entropy(logits, torch.from_numpy(labels[ix]))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(it)
            for p in params:
                p.grad = None
            loss.backward()
            lr = config.lr_at(it)
            sgd_step(params, velocities, lr, config.momentum, config.weight_decay)
            trace.append((it, lr, value))
            if log_every and it % log_every == 0:
                log.info("iter %d lr %.3g loss %.4f", it, lr, value)
    finally:
        if pool:
            pool.shutdown(wait=True, cancel_futures=True)
    net.train(False)
    return TrainResult(net, trace)


def accuracy(net: Network, images, labels, batch_size: int = 256) -> float:
    preds = []
    for k in range(0, len(labels), batch_size):
        logits, _ = forward(net, images[k:k + batch_size])
        preds.append(logits.argmax(1).numpy())
    return float(np.mean(np.concatenate(preds) == np.asarray(labels)))


# ----------------------------------------------------------- gradient check


def _activation_pattern(net: Network, x) -> list:
    """ReLU on/off masks and max-pool winners; a change means a kink was crossed."""
    pattern = []

    def relu_hook(_, inputs, __):
        pattern.append(inputs[0] > 0)

    def pool_hook(module, inputs, __):
        _, idx = F.max_pool2d(inputs[0], module.kernel_size, module.stride,
                              ceil_mode=module.ceil_mode, return_indices=True)
        pattern.append(idx)

    handles = []
    for m in net.modules():
        if isinstance(m, nn.ReLU):
            handles.append(m.register_forward_hook(relu_hook))
        elif isinstance(m, nn.MaxPool2d):
            handles.append(m.register_forward_hook(pool_hook))
    try:
        with torch.no_grad():
            net(x)
    finally:
        for h in handles:
            h.remove()
    return pattern


def _same_pattern(a, b) -> bool:
    return all(torch.equal(u, v) for u, v in zip(a, b))


def gradient_check(net: Network, images, labels, samples_per_tensor: int = 5, h: float = 1e-3,
                   seed: int = 0) -> float:
    """Max relative error between autograd and central differences, in double precision.

    Runs in eval mode so dropout is off.  Coordinates whose +-h perturbation
    flips a ReLU or a max-pool winner are skipped and another one is drawn,
    since the finite difference is meaningless across a kink.
    """
    net = _double_copy(net)
    net.eval()
    x = net.prepare(np.asarray(images, dtype=np.float64))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))

    def loss_value():
        with torch.no_grad():
            return float(F.cross_entropy(net(x)[0], y))

    net.zero_grad()
    F.cross_entropy(net(x)[0], y).backward()
    center = _activation_pattern(net, x)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in net.parameters():
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        checked = 0
        for k in rng.permutation(flat.numel()):
            if checked == samples_per_tensor:
                break
            orig = float(flat[k])
            flat[k] = orig + h
            up, up_pattern = loss_value(), _activation_pattern(net, x)
            flat[k] = orig - h
            down, down_pattern = loss_value(), _activation_pattern(net, x)
            flat[k] = orig
            if not (_same_pattern(center, up_pattern) and _same_pattern(center, down_pattern)):
                continue
            checked += 1
            numeric = (up - down) / (2 * h)
            analytic = float(grad[k])
            scale = max(abs(numeric), abs(analytic))
            if scale > 1e-10:
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def _double_copy(net: Network) -> Network:
    clone = Network(net.config)
    clone.load_state_dict(net.state_dict())
    return clone.double()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: Network, path) -> None:
    """Magic, version, JSON config echo, then named little-endian float32 blobs."""
    cfg = json.dumps(asdict(net.config), sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    state = net.state_dict()
    out.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, n_cfg = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    cfg = json.loads(data[pos:pos + n_cfg])
    pos += n_cfg
    if cfg.get("layers") is not None:
        cfg["layers"] = [tuple(l) for l in cfg["layers"]]
    net = Network(NetConfig(**cfg))
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    net.load_state_dict(state)
    net.eval()
    return net


# ------------------------------------------------------------- features


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def extract_features(net: Network, images, use_self_syn_avg: bool = False, batch_size: int = 256) -> np.ndarray:
    """Feature-layer activations, one row per image.

    ``images`` is an (N, H, W, C) array, or a list of ``CanonicalImage`` when
    averaging: each image is then replaced by its 32 Self-Synthesis variants,
    whose features are averaged and L2-normalized.
    """
    if not use_self_syn_avg:
        arr = images if isinstance(images, np.ndarray) else np.stack([im.pixels for im in images])
        out = [forward(net, arr[k:k + batch_size])[1].double().numpy() for k in range(0, len(arr), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, net.feature_dim))
    from .synthesis import self_synthesis_images

    rows = []
    for im in images:
        variants = np.stack([v.pixels for v in self_synthesis_images(im)])
        feats = forward(net, variants)[1].double().numpy()
        rows.append(l2_normalize(feats.mean(axis=0)))
    return np.stack(rows) if rows else np.zeros((0, net.feature_dim))
