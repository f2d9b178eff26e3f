"""Policy networks, gradients, Adam with decoupled weight decay, and snapshot files.

Four architectures share one layout: an image trunk, an image embedding FC,
an optional inventory-vector embedding FC, and a two-layer head::

    frame -> trunk -> ReLU -> flatten -> FC(img_embed) --\\
                                                          concat -> ReLU -> FC(hidden) -> ReLU -> FC(A)
    vector ------------------------> FC(vec_embed) ----/

``width_divisor`` shrinks every channel count and FC width (4 gives the
quarter-width configs used in tests and desk-scale runs).

Gradients come from torch autograd; :func:`grad_check` is an independent
central-difference oracle for them.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ARCHS = ("dqn", "impala", "deep_impala", "double_deep_impala")
NUM_ACTIONS = 130
VECTOR_DIM = 187
FRAME_HW = 64

SNAPSHOT_MAGIC = b"CBSNAP01"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Static description of one architecture at a given width."""

    name: str
    stage_channels: Tuple[int, ...]
    blocks_per_stage: int
    fixup: bool
    img_embed: int
    vec_embed: int
    hidden: int

    @classmethod
    def from_name(cls, name: str, width_divisor: int = 1) -> "ArchSpec":
        if name not in ARCHS:
            raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHS}")
        if width_divisor < 1:
            raise ValueError("width_divisor must be >= 1")

        def w(c: int) -> int:
            return max(1, c // width_divisor)

        if name == "dqn":
            return cls(name, (w(32), w(64), w(64)), 0, False, w(1024), w(128), w(1024))
        if name == "impala":
            return cls(name, (w(32), w(64), w(64)), 2, False, w(1024), w(128), w(1024))
        if name == "deep_impala":
            return cls(name, (w(32), w(64), w(64), w(64)), 2, True, w(1024), w(128), w(1024))
        return cls(name, (w(64), w(128), w(128), w(128)), 2, True, w(2048), w(256), w(2048))


DQN_LAYERS = ((8, 4), (4, 2), (3, 1))  # (kernel, stride), no padding


def trunk_output_shape(spec: ArchSpec, hw: int = FRAME_HW) -> Tuple[int, int, int]:
    """Shape of the trunk output for a square ``hw`` input, traced by arithmetic."""
    if spec.name == "dqn":
        for k, s in DQN_LAYERS:
            hw = (hw - k) // s + 1
        return spec.stage_channels[-1], hw, hw
    for _ in spec.stage_channels:
        hw = (hw + 2 * 1 - 3) // 2 + 1  # 3x3 pool, stride 2, padding 1
    return spec.stage_channels[-1], hw, hw


class ResidualBlock(nn.Module):
    """x + conv(relu(conv(relu(x)))) with 3x3 "same" convolutions."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.relu(self.conv1(F.relu(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.residual(x)


class FixupBlock(nn.Module):
    """Residual block without normalization, using Fixup scalar biases and a scale.

    The branch is ``relu -> +b1 -> conv1 -> +b2 -> relu -> +b3 -> conv2 -> *scale -> +b4``.
    With conv2 zero-initialized the branch outputs exactly zero at init.
    """

    def __init__(self, channels: int, num_blocks: int):
        super().__init__()
        self.num_blocks = num_blocks
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bias1 = nn.Parameter(torch.zeros(1))
        self.bias2 = nn.Parameter(torch.zeros(1))
        self.bias3 = nn.Parameter(torch.zeros(1))
        self.bias4 = nn.Parameter(torch.zeros(1))
        self.scale = nn.Parameter(torch.ones(1))

    def reset_fixup(self) -> None:
        # two convs per branch: He init scaled by L^(-1/(2m-2)) = L^(-1/2)
        nn.init.kaiming_uniform_(self.conv1.weight, nonlinearity="relu")
        with torch.no_grad():
            self.conv1.weight.mul_(self.num_blocks ** -0.5)
        nn.init.zeros_(self.conv2.weight)
        for p in (self.bias1, self.bias2, self.bias3, self.bias4):
            nn.init.zeros_(p)
        nn.init.ones_(self.scale)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.relu(x) + self.bias1)
        out = self.conv2(F.relu(out + self.bias2) + self.bias3)
        return out * self.scale + self.bias4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.residual(x)


class ImpalaStage(nn.Module):
    """conv 3x3 -> max pool 3x3/2 -> residual blocks."""

    def __init__(self, in_ch: int, out_ch: int, blocks: int, fixup: bool, total_blocks: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        make = (lambda: FixupBlock(out_ch, total_blocks)) if fixup else (lambda: ResidualBlock(out_ch))
        self.blocks = nn.ModuleList([make() for _ in range(blocks)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(self.conv(x), 3, stride=2, padding=1)
        for block in self.blocks:
            x = block(x)
        return x


class PolicyNetwork(nn.Module):
    """f(s, .): action scores for a 64x64 frame and an optional inventory vector.

    Args:
        arch: One of :data:`ARCHS`.
        num_actions: Output width.
        vector_dim: Inventory vector length, or 0 for an image-only network.
        width_divisor: Divides every channel count and FC width.
    """

    def __init__(self, arch: str, num_actions: int = NUM_ACTIONS, vector_dim: int = VECTOR_DIM, width_divisor: int = 1):
        super().__init__()
        self.arch = arch
        self.num_actions = num_actions
        self.vector_dim = vector_dim
        self.width_divisor = width_divisor
        self.spec = spec = ArchSpec.from_name(arch, width_divisor)
        if arch == "dqn":
            layers, in_ch = [], 3
            for out_ch, (k, s) in zip(spec.stage_channels, DQN_LAYERS):
                layers.append(nn.Conv2d(in_ch, out_ch, k, stride=s))
                in_ch = out_ch
            self.convs = nn.ModuleList(layers)
            self.stages = nn.ModuleList()
        else:
            total = spec.blocks_per_stage * len(spec.stage_channels)
            chans = (3,) + spec.stage_channels
            self.convs = nn.ModuleList()
            self.stages = nn.ModuleList(
                [ImpalaStage(chans[i], chans[i + 1], spec.blocks_per_stage, spec.fixup, total) for i in range(len(spec.stage_channels))]
            )
        c, h, w = trunk_output_shape(spec)
        self.img_fc = nn.Linear(c * h * w, spec.img_embed)
        self.vec_fc = nn.Linear(vector_dim, spec.vec_embed) if vector_dim > 0 else None
        concat = spec.img_embed + (spec.vec_embed if vector_dim > 0 else 0)
        self.hidden_fc = nn.Linear(concat, spec.hidden)
        self.out_fc = nn.Linear(spec.hidden, num_actions)

    @property
    def has_vector_head(self) -> bool:
        return self.vec_fc is not None

    def trunk(self, frames: torch.Tensor) -> torch.Tensor:
        x = frames
        if self.arch == "dqn":
            for i, conv in enumerate(self.convs):
                x = conv(x)
                if i < len(self.convs) - 1:
                    x = F.relu(x)
            return x
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, frames: torch.Tensor, vectors: Optional[torch.Tensor] = None) -> torch.Tensor:
        if frames.dim() != 4 or tuple(frames.shape[1:]) != (3, FRAME_HW, FRAME_HW):
            raise ValueError(f"expected frames of shape (B, 3, {FRAME_HW}, {FRAME_HW}), got {tuple(frames.shape)}")
        x = torch.flatten(F.relu(self.trunk(frames)), 1)
        x = self.img_fc(x)
        if self.has_vector_head:
            if vectors is None:
                raise ValueError("this network needs inventory vectors")
            if tuple(vectors.shape) != (frames.shape[0], self.vector_dim):
                raise ValueError(f"expected vectors of shape ({frames.shape[0]}, {self.vector_dim}), got {tuple(vectors.shape)}")
            x = torch.cat([x, self.vec_fc(vectors)], dim=1)
        elif vectors is not None:
            raise ValueError("image-only network received inventory vectors")
        x = F.relu(self.hidden_fc(F.relu(x)))
        return self.out_fc(x)

    def fixup_blocks(self) -> List[FixupBlock]:
        return [m for m in self.modules() if isinstance(m, FixupBlock)]

    def reset_parameters(self, generator: torch.Generator) -> None:
        """He-uniform weights and zero biases everywhere, then the Fixup scheme."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=generator)))
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                    if m.bias is not None:
                        nn.init.zeros_(m.bias)
            for block in self.fixup_blocks():
                block.reset_fixup()

    def config(self) -> Dict[str, int | str]:
        return {
            "arch": self.arch,
            "num_actions": self.num_actions,
            "vector_dim": self.vector_dim,
            "width_divisor": self.width_divisor,
        }


def build_network(
    arch: str,
    num_actions: int = NUM_ACTIONS,
    vector_dim: int = VECTOR_DIM,
    seed: int = 0,
    width_divisor: int = 1,
) -> PolicyNetwork:
    """Construct and initialize a network; the same seed gives identical parameters."""
    net = PolicyNetwork(arch, num_actions, vector_dim, width_divisor)
    gen = torch.Generator().manual_seed(int(seed))
    net.reset_parameters(gen)
    return net


# ----------------------------------------------------------------- gradients
def backward(net: nn.Module, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Gradients of ``loss`` for every named parameter; unused ones get zeros.

    Raises:
        FloatingPointError: if the loss is not finite.
    """
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite loss {loss.item()!r}")
    params = dict(net.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(params.items(), grads)
    }


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst_param: str
    worst_index: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    net: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    num_params: int = 1000,
    eps: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare autograd against central differences on randomly chosen scalars.

    ``loss_fn`` recomputes the loss from the network's current parameters.
    Parameters are sampled uniformly over all scalar entries of the network.
    """
    params = [(n, p) for n, p in net.named_parameters()]
    sizes = np.array([p.numel() for _, p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(num_params, total), replace=False)

    grads = backward(net, loss_fn())
    analytic, numeric, labels = [], [], []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[k]
            idx = int(flat - offsets[k])
            view = p.view(-1)
            orig = view[idx].item()
            view[idx] = orig + eps
            plus = loss_fn().item()
            view[idx] = orig - eps
            minus = loss_fn().item()
            view[idx] = orig
            numeric.append((plus - minus) / (2 * eps))
            analytic.append(grads[name].reshape(-1)[idx].item())
            labels.append((name, idx))
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    err = relative_error(analytic, numeric, floor)
    worst = int(np.argmax(err))
    return GradCheckResult(float(err[worst]), len(picks), labels[worst][0], labels[worst][1], analytic, numeric)


# ---------------------------------------------------------------------- adam
@dataclass
class AdamState:
    """First/second moments per parameter name and the step counter."""

    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, net: nn.Module) -> "AdamState":
        return cls(
            m={n: torch.zeros_like(p) for n, p in net.named_parameters()},
            v={n: torch.zeros_like(p) for n, p in net.named_parameters()},
        )


@torch.no_grad()
def adam_step(
    net: nn.Module,
    grads: Dict[str, torch.Tensor],
    state: AdamState,
    lr: float = 6.25e-5,
    weight_decay: float = 1e-5,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update in place, with weight decay decoupled from the moments.

    Each parameter is first shrunk by ``1 - lr * weight_decay`` and then moved by
    the bias-corrected Adam step.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in net.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        denom = (v / c2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return state


# ----------------------------------------------------------------- snapshots
def save_snapshot(net: PolicyNetwork, path: Union[str, Path], extra: Optional[Dict] = None) -> None:
    """Write ``magic | u32 header length | JSON header | float32 LE tensors``."""
    tensors = [(n, t.detach().to(torch.float32).contiguous().cpu()) for n, t in net.state_dict().items()]
    header = {
        "format_version": SNAPSHOT_VERSION,
        **net.config(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, t in tensors:
        buf.write(t.numpy().astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_snapshot_header(path: Union[str, Path]) -> Dict:
    with open(path, "rb") as fh:
        if fh.read(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_snapshot(path: Union[str, Path]) -> Tuple[PolicyNetwork, Dict]:
    """Inverse of :func:`save_snapshot`; returns the network and the header."""
    data = Path(path).read_bytes()
    if not data.startswith(SNAPSHOT_MAGIC):
        raise ValueError(f"{path}: not a snapshot file")
    pos = len(SNAPSHOT_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + n])
    pos += n
    if header.get("format_version") != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {header.get('format_version')}")
    net = PolicyNetwork(header["arch"], header["num_actions"], header["vector_dim"], header["width_divisor"])
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = pos + 4 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated at tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos = end
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    net.load_state_dict(state)
    return net, header


def parameter_count(module: nn.Module, conv_only: bool = False) -> int:
    if conv_only:
        return sum(p.numel() for m in module.modules() if isinstance(m, nn.Conv2d) for p in m.parameters(recurse=False))
    return sum(p.numel() for p in module.parameters())
