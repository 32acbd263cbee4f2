"""DR-CapsNet: conv backbone, PrimaryCaps, ClassCaps with dynamic routing.

Conventions fixed here and relied on elsewhere:

* primary capsules are flattened in row-major ``(m, n, o)`` order, where the
  primary conv channel ``o * D1 + d`` holds component ``d`` of type ``o``;
* votes use the pose as a row vector, ``u_hat[i, j] = u[i] @ W[i, j]`` with
  ``W[i, j]`` of shape ``[D1, D2]``;
* routing logits start at zero on every forward pass.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError
from .tensor import Tensor


@dataclass
class CapsNetConfig:
    in_channels: int = 1
    image_height: int = 28
    image_width: int = 28
    conv1_channels: int = 256
    conv1_kernel: int = 9
    primary_kernel: int = 9
    primary_stride: int = 2
    num_types: int = 1          # O
    primary_dim: int = 2        # D1
    class_dim: int = 4          # D2
    num_classes: int = 10       # J
    routing_iterations: int = 3
    detach_couplings: bool = False
    decoder: bool = False
    decoder_hidden: tuple = (512, 1024)
    caps_init_std: float = 0.01

    def __post_init__(self):
        self.decoder_hidden = tuple(self.decoder_hidden)
        for name in ("in_channels", "conv1_channels", "conv1_kernel", "primary_kernel",
                     "primary_stride", "num_types", "primary_dim", "class_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be >= 2")
        if self.routing_iterations < 1:
            raise ConfigError(f"routing iterations must be >= 1, got {self.routing_iterations}")
        self.grid_shape()

    def grid_shape(self) -> tuple:
        """Spatial size (M, N) of the primary capsule grid."""
        k1, k2, s = self.conv1_kernel, self.primary_kernel, self.primary_stride
        need = k1 + k2 - 1
        h1, w1 = self.image_height - k1 + 1, self.image_width - k1 + 1
        if h1 < k2 or w1 < k2:
            raise ConfigError(
                f"input {self.image_height}x{self.image_width} too small for conv1 k={k1} "
                f"followed by primary k={k2}; need at least {need}x{need}")
        return (h1 - k2) // s + 1, (w1 - k2) // s + 1

    @property
    def num_primary(self) -> int:
        m, n = self.grid_shape()
        return m * n * self.num_types

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


def num_primary_caps(bottleneck_channels: int, capsule_dim: int) -> int:
    """Number of channel-wise primary capsules a bottleneck of S channels yields."""
    if capsule_dim < 1:
        raise ConfigError(f"capsule dimension must be >= 1, got {capsule_dim}")
    if bottleneck_channels < 0:
        raise ConfigError(f"bottleneck size must be >= 0, got {bottleneck_channels}")
    return bottleneck_channels // capsule_dim


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ForwardResult(NamedTuple):
    class_poses: Tensor      # [B, J, D2]
    couplings: Tensor        # [B, I, J]
    primary_poses: Tensor    # [B, I, D1]
    votes: Tensor            # [B, I, J, D2]


class CapsNetModel:
    """Parameters plus the forward pass of a DR-CapsNet.

    ``params`` is an ordered dict of leaf tensors; the names double as
    checkpoint keys.
    """

    PRUNABLE = ("conv1.weight", "primary.weight", "caps.W")

    def __init__(self, config: CapsNetConfig, seed: int = 0, dtype=None, rng=None):
        self.config = config
        dtype = np.dtype(dtype or T.default_dtype())
        rng = rng if rng is not None else np.random.default_rng(seed)
        c = config
        od = c.num_types * c.primary_dim
        p = {}
        p["conv1.weight"] = _glorot(rng, (c.conv1_channels, c.in_channels, c.conv1_kernel, c.conv1_kernel),
                                    c.in_channels * c.conv1_kernel ** 2, c.conv1_channels * c.conv1_kernel ** 2, dtype)
        p["conv1.bias"] = np.zeros(c.conv1_channels, dtype)
        p["primary.weight"] = _glorot(rng, (od, c.conv1_channels, c.primary_kernel, c.primary_kernel),
                                      c.conv1_channels * c.primary_kernel ** 2, od * c.primary_kernel ** 2, dtype)
        p["primary.bias"] = np.zeros(od, dtype)
        p["caps.W"] = (rng.standard_normal((c.num_primary, c.num_classes, c.primary_dim, c.class_dim))
                       * c.caps_init_std).astype(dtype)
        if c.decoder:
            sizes = [c.num_classes * c.class_dim, *c.decoder_hidden,
                     c.in_channels * c.image_height * c.image_width]
            for n, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
                p[f"decoder.fc{n}.weight"] = _glorot(rng, (fi, fo), fi, fo, dtype)
                p[f"decoder.fc{n}.bias"] = np.zeros(fo, dtype)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    # -- parameter plumbing -------------------------------------------------
    @property
    def dtype(self):
        return self.params["caps.W"].dtype

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def prunable_names(self) -> list:
        return [n for n in self.PRUNABLE if n in self.params]

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        unknown = set(state) - set(self.params)
        if missing or unknown:
            raise ShapeError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected shape {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "CapsNetModel":
        """Deep copy of the model in another precision."""
        clone = object.__new__(CapsNetModel)
        clone.config = self.config
        clone.params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return clone

    def copy(self) -> "CapsNetModel":
        return self.astype(self.dtype)

    # -- forward --------------------------------------------------------------
    def _as_batch(self, images) -> Tensor:
        x = T.as_tensor(images) if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=self.dtype)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, c.image_height, c.image_width):
            raise ConfigError(
                f"expected images [B,{c.in_channels},{c.image_height},{c.image_width}], got {x.shape}")
        return x

    def run(self, images, r: Optional[int] = None, detach_couplings: Optional[bool] = None) -> ForwardResult:
        r = self.config.routing_iterations if r is None else r
        detach = self.config.detach_couplings if detach_couplings is None else detach_couplings
        x = self._as_batch(images)
        poses = primary_caps_forward(x, self)
        votes = compute_votes(poses, self.params["caps.W"])
        class_poses, couplings = dynamic_routing(votes, r, detach_couplings=detach)
        return ForwardResult(class_poses, couplings, poses, votes)


def primary_caps_forward(images, model: CapsNetModel) -> Tensor:
    """Conv1 (ReLU) then the PrimaryCaps conv, reshaped to squashed poses [B, I, D1]."""
    c, p = model.config, model.params
    h = T.relu(T.conv2d(images, p["conv1.weight"], p["conv1.bias"], stride=1))
    h = T.conv2d(h, p["primary.weight"], p["primary.bias"], stride=c.primary_stride)
    b, _, m, n = h.shape
    poses = h.reshape(b, c.num_types, c.primary_dim, m, n).transpose(0, 3, 4, 1, 2)
    return T.squash(poses.reshape(b, m * n * c.num_types, c.primary_dim))


def compute_votes(poses, W) -> Tensor:
    """u_hat[b, i, j] = poses[b, i] @ W[i, j]."""
    poses, W = T.as_tensor(poses), T.as_tensor(W)
    if poses.ndim == 2:
        poses = poses.reshape((1,) + poses.shape)
    if W.ndim != 4 or poses.shape[1] != W.shape[0] or poses.shape[2] != W.shape[2]:
        raise ShapeError(f"poses {poses.shape} incompatible with W {W.shape} (expected [I,J,D1,D2])")
    return T.einsum("bid,ijde->bije", poses, W)


def dynamic_routing(votes, r: int, detach_couplings: bool = False, return_trace: bool = False):
    """Routing-by-agreement over votes [B, I, J, D2].

    Runs r iterations of: softmax over j of the logits, weighted vote sum,
    squash, agreement update. The agreement update after the last pose is
    skipped since nothing downstream reads it. Returns the last class poses
    and the couplings used to produce them. With ``return_trace`` a third
    element lists per-iteration ``(b, c, s, u)`` arrays.
    """
    if r < 1:
        raise ConfigError(f"routing iterations r must be >= 1, got {r}")
    votes = T.as_tensor(votes)
    if votes.ndim == 3:
        votes = votes.reshape((1,) + votes.shape)
    b_, i_, j_, _ = votes.shape
    logits = T.zeros((b_, i_, j_), dtype=votes.dtype)
    trace = []
    for it in range(r):
        c = T.softmax_lastdim(logits)
        c_used = c.detach() if detach_couplings else c
        s = T.einsum("bij,bijd->bjd", c_used, votes)
        u = T.squash(s)
        if return_trace:
            trace.append((logits.data.copy(), c.data.copy(), s.data.copy(), u.data.copy()))
        if it < r - 1:
            logits = logits + T.einsum("bjd,bijd->bij", u, votes)
    if return_trace:
        return u, c, trace
    return u, c


def capsnet_forward(batch, model: CapsNetModel, r: Optional[int] = None):
    """Full encoder pass; returns ``(class_poses [B,J,D2], couplings [B,I,J])``."""
    out = model.run(batch, r)
    return out.class_poses, out.couplings


def class_norms(class_poses) -> np.ndarray:
    data = class_poses.data if isinstance(class_poses, Tensor) else np.asarray(class_poses)
    return np.sqrt((data.astype(np.float64) ** 2).sum(axis=-1))


def predict(class_poses) -> np.ndarray:
    """Index of the longest class capsule; ties go to the lowest index."""
    norms = class_norms(class_poses)
    return np.argmax(norms, axis=-1)


def decoder_forward(model: CapsNetModel, class_poses, labels) -> Tensor:
    """Mask all but the selected class capsule and reconstruct the image, [B, C*H*W]."""
    c = model.config
    if not c.decoder:
        raise UsageError("decoder is disabled in this model's configuration")
    class_poses = T.as_tensor(class_poses)
    if class_poses.ndim == 2:
        class_poses = class_poses.reshape((1,) + class_poses.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    mask = np.zeros(class_poses.shape[:2] + (1,), dtype=class_poses.dtype)
    mask[np.arange(len(labels)), labels, 0] = 1
    h = (class_poses * mask).reshape(class_poses.shape[0], -1)
    n_layers = len(c.decoder_hidden) + 1
    for n in range(1, n_layers + 1):
        h = h @ model.params[f"decoder.fc{n}.weight"] + model.params[f"decoder.fc{n}.bias"]
        h = T.relu(h) if n < n_layers else T.sigmoid(h)
    return h
