"""
FiLM-conditioned convolutional image tokenizer.

A stride-2 stem followed by MBConv-style blocks (1x1 expand, depthwise
conv, 1x1 project) turns each frame into a 9x9 feature map, flattened
row-major into 81 tokens. Every block is conditioned on the instruction
through a FiLM layer whose scale and shift producers start at zero, so an
untrained conditioned backbone computes exactly what the unconditioned
one does.

The instruction itself is embedded with a frozen hashing-trick bag of
word unigrams and bigrams.
"""
import functools
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from ..core import numerics as F
from ..core.config import BackboneConfig, FilmInit
from ..core.errors import ContractError, DimensionError
from ..core.module import Module
from ..core.numerics import Adam, Tensor
from ..core.utils import SeedStream, normalize_text, stable_hash
from .layers import ChannelLayerNorm, Conv2d, Linear

logger = logging.getLogger(__name__)

NUM_FRAME_TOKENS = 81


@functools.lru_cache(maxsize=4096)
def _embedding_cached(text: str, dim: int) -> Tuple[float, ...]:
    words = normalize_text(text).split()
    if not words:
        raise ContractError("Instruction must contain at least one word")
    grams = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
    vector = np.zeros(dim, dtype=np.float64)
    for gram in grams:
        vector[stable_hash(gram, dim)] += 1.0
    vector /= np.linalg.norm(vector)
    return tuple(vector.tolist())


def embed_instruction(text: str, dim: int = 64) -> np.ndarray:
    """
    Embed an instruction as an L2-normalised hashed n-gram count vector.

    Args:
        text: Instruction; normalised to lowercase words first
        dim: Embedding length

    Returns:
        Array of shape [dim]

    Raises:
        ContractError: the text contains no words

    Examples:
        >>> e = embed_instruction("pick coke can")
        >>> round(float((e * e).sum()), 6)
        1.0
    """
    if not isinstance(text, str):
        raise ContractError(f"Instruction must be text, got {type(text).__name__}")
    return np.asarray(_embedding_cached(text, dim), dtype=np.float64)


class FiLM(Module):
    """Feature-wise modulation ``feat * (1 + gamma(e)) + beta(e)``."""

    def __init__(self, context_dim: int, channels: int, rng: np.random.Generator, init: FilmInit):
        super().__init__()
        zero = init == FilmInit.IDENTITY
        self.gamma = self.add_module("gamma", Linear(context_dim, channels, rng, zero_init=zero))
        self.beta = self.add_module("beta", Linear(context_dim, channels, rng, zero_init=zero))

    def __call__(self, feat: Tensor, context: Tensor) -> Tensor:
        batch, channels = feat.shape[0], feat.shape[1]
        gamma = self.gamma(context).reshape(batch, channels, 1, 1)
        beta = self.beta(context).reshape(batch, channels, 1, 1)
        return feat * (gamma + 1.0) + beta


class MBConvBlock(Module):
    """Inverted-residual block with channel layer norm and a FiLM output stage."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        expand_ratio: int,
        context_dim: int,
        rng: np.random.Generator,
        film_init: FilmInit,
        kernel_size: int = 3,
        padding: int = 1,
    ):
        super().__init__()
        hidden = in_channels * expand_ratio
        self.residual = in_channels == out_channels and stride == 1 and padding * 2 == kernel_size - 1
        self.expand = self.add_module("expand", Conv2d(in_channels, hidden, 1, rng))
        self.expand_norm = self.add_module("expand_norm", ChannelLayerNorm(hidden))
        self.depthwise = self.add_module(
            "depthwise",
            Conv2d(hidden, hidden, kernel_size, rng, stride=stride, padding=padding, groups=hidden),
        )
        self.depthwise_norm = self.add_module("depthwise_norm", ChannelLayerNorm(hidden))
        self.project = self.add_module("project", Conv2d(hidden, out_channels, 1, rng))
        self.project_norm = self.add_module("project_norm", ChannelLayerNorm(out_channels))
        self.film = self.add_module("film", FiLM(context_dim, out_channels, rng, film_init))

    def __call__(self, x: Tensor, context: Optional[Tensor]) -> Tensor:
        h = F.silu(self.expand_norm(self.expand(x)))
        h = F.silu(self.depthwise_norm(self.depthwise(h)))
        h = self.project_norm(self.project(h))
        if context is not None:
            h = self.film(h, context)
        return h + x if self.residual else h


class FiLMBackbone(Module):
    """
    Image tokenizer producing a [B, 81, d_token] token block per frame.

    Calling without a context runs the unconditioned network (FiLM layers
    skipped), which is what the warm-start phase trains.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.stem = self.add_module("stem", Conv2d(3, config.stem_channels, 3, rng, stride=2, padding=1))
        self.stem_norm = self.add_module("stem_norm", ChannelLayerNorm(config.stem_channels))
        self.blocks: List[MBConvBlock] = []
        channels = config.stem_channels
        for index, (out, stride) in enumerate(zip(config.block_channels, config.block_strides)):
            block = MBConvBlock(
                channels, out, stride, config.expand_ratio, config.instruction_dim, rng, config.film_init
            )
            self.blocks.append(self.add_module(f"block{index}", block))
            channels = out
        _, _, final_kernel = config.spatial_plan()
        padding = 1 if config.final_input_size() == config.grid_size else 0
        final = MBConvBlock(
            channels, config.d_token, 1, config.expand_ratio, config.instruction_dim, rng,
            config.film_init, kernel_size=final_kernel, padding=padding,
        )
        self.blocks.append(self.add_module(f"block{len(self.blocks)}", final))

    def feature_map(self, images: Tensor, context: Optional[Tensor] = None) -> Tensor:
        """
        Run the convolutional trunk.

        Args:
            images: [B, 3, H, W] pixels in [0, 1]
            context: [B, instruction_dim] instruction embeddings, or None

        Returns:
            [B, d_token, 9, 9] feature map
        """
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (3, size, size):
            raise DimensionError(f"Backbone expects [B, 3, {size}, {size}] images", images.shape)
        h = F.silu(self.stem_norm(self.stem(images - 0.5)))
        for block in self.blocks:
            h = block(h, context)
        return h

    def __call__(self, images: Tensor, context: Optional[Tensor] = None) -> Tensor:
        fmap = self.feature_map(images, context)
        batch, channels = fmap.shape[0], fmap.shape[1]
        return F.transpose(fmap.reshape(batch, channels, -1), (0, 2, 1))

    def film_parameters(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.named_parameters() if ".film." in name}

    def trunk_state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters of the unconditioned trunk (everything except FiLM)."""
        return {name: value for name, value in self.state_dict().items() if ".film." not in name}


def encode_frame(frame: Tensor, embedding: np.ndarray, backbone: FiLMBackbone) -> Tensor:
    """
    Encode one frame into its 81 pre-reduction tokens.

    Args:
        frame: [3, H, W] image
        embedding: Instruction embedding
        backbone: Image tokenizer

    Returns:
        Tensor of shape [81, d_token]
    """
    if frame.ndim != 3:
        raise DimensionError("encode_frame expects a single [3, H, W] frame", frame.shape)
    context = Tensor(np.asarray(embedding)[None, :])
    return backbone(frame.reshape(1, *frame.shape), context).reshape(NUM_FRAME_TOKENS, -1)


def init_backbone(
    config: BackboneConfig,
    seed: int,
    warm_start: Optional[str] = None,
) -> FiLMBackbone:
    """
    Build a backbone with seeded He-style conv weights and zero FiLM producers.

    Args:
        config: Backbone configuration; ``film_init="naive"`` gives random FiLM weights
        seed: Initialisation seed
        warm_start: Optional ``.npz`` written by ``pretrain_backbone``

    Raises:
        FileNotFoundError: ``warm_start`` does not exist
    """
    backbone = FiLMBackbone(config, SeedStream(seed).rng("backbone"))
    if warm_start is not None:
        if not os.path.exists(warm_start):
            raise FileNotFoundError(f"Warm-start file not found: {warm_start}")
        with np.load(warm_start) as archive:
            state = {name: archive[name] for name in archive.files}
        backbone.load_state_dict(state, strict=False)
        logger.info("Loaded %d warm-start tensors from %s", len(state), warm_start)
    return backbone


def pooled_targets(frames: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool [N, 3, H, W] frames onto a grid x grid map (area bins)."""
    height, width = frames.shape[2], frames.shape[3]
    rows = np.linspace(0, height, grid + 1).astype(int)
    cols = np.linspace(0, width, grid + 1).astype(int)
    summed = np.add.reduceat(np.add.reduceat(frames, rows[:-1], axis=2), cols[:-1], axis=3)
    counts = np.outer(np.diff(rows), np.diff(cols))
    return summed / counts


def pretrain_backbone(
    frames: np.ndarray,
    config: BackboneConfig,
    steps: int,
    seed: int,
    path: str,
    batch: int = 8,
    lr: float = 1e-3,
    progress: bool = True,
) -> List[float]:
    """
    Self-supervised warm start of the unconditioned trunk.

    A 1x1 linear decoder reconstructs a 9x9 average-pooled copy of each
    frame from the trunk's feature map under an MSE loss. The trained trunk
    parameters are saved to ``path`` for ``init_backbone(warm_start=...)``.

    Args:
        frames: [N, 3, H, W] frames in [0, 1]
        config: Backbone configuration
        steps: Optimizer steps
        seed: Seed for initialisation and batch order
        path: Output ``.npz`` path
        batch: Frames per step
        lr: Adam learning rate
        progress: Show a progress bar

    Returns:
        The loss after each step
    """
    stream = SeedStream(seed).child("pretrain")
    backbone = FiLMBackbone(config, stream.rng("backbone"))
    decoder = Linear(config.d_token, 3, stream.rng("decoder"))
    params = dict(backbone.named_parameters())
    params.update({f"decoder.{k}": v for k, v in decoder.named_parameters()})
    params = {k: v for k, v in params.items() if ".film." not in k}
    optimizer = Adam(params, lr=lr)
    targets = pooled_targets(np.asarray(frames, dtype=np.float64), config.grid_size)
    targets = targets.reshape(targets.shape[0], 3, -1).transpose(0, 2, 1)
    rng = stream.rng("batches")
    losses = []
    for _ in tqdm(range(steps), desc="pretrain", disable=not progress):
        idx = rng.choice(len(frames), size=min(batch, len(frames)), replace=False)
        optimizer.zero_grad()
        tokens = backbone(Tensor(frames[idx]))
        loss = F.mse_loss(decoder(tokens), targets[idx])
        F.backward(loss)
        optimizer.step()
        losses.append(loss.item())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savez(path, **backbone.trunk_state_dict())
    logger.info("Warm-start trunk saved to %s (final loss %.4f)", path, losses[-1] if losses else float("nan"))
    return losses
