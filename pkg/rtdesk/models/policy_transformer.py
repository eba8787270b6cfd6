"""
Decoder-only Transformer policy over a history of frame token blocks.

Each frame is encoded independently (FiLM backbone then TokenLearner) into
a block of tokens; the blocks of the history window are laid out
frame-major, projected to the model width, given learned absolute
position embeddings and passed through pre-norm self-attention layers
whose mask lets a token attend to its own frame and to older frames only.
The outputs of each frame are mean-pooled and mapped to 11 x 256 action
logits.

Ablation variants share the trunk: a Gaussian/MSE continuous head, an
autoregressive head that conditions dimension d on tokens 0..d-1, no
self-attention, and no history.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core import numerics as F
from ..core.action_codec import (
    MODE_INDEX,
    NUM_CONTINUOUS,
    NUM_DIMENSIONS,
    ActionSpaceSpec,
    ActionVector,
    TokenizedAction,
    detokenize,
    tokenize,
)
from ..core.config import ActionMode, DecodeMode, PolicyConfig
from ..core.errors import ConfigError, ContractError, DimensionError
from ..core.module import Module
from ..core.numerics import Tensor
from ..core.utils import SeedStream
from .film_backbone import FiLMBackbone, embed_instruction, init_backbone
from .layers import Embedding, LayerNorm, Linear
from .token_learner import TokenLearner

logger = logging.getLogger(__name__)

NUM_MODES = len(ActionMode)
MASKED_SCORE = -1e9


def frame_causal_mask(num_frames: int, tokens_per_frame: int) -> np.ndarray:
    """Boolean [S, S] mask, True where query slot i may NOT attend to key slot j."""
    frame_of = np.arange(num_frames * tokens_per_frame) // tokens_per_frame
    return frame_of[None, :] > frame_of[:, None]


class SelfAttentionLayer(Module):
    """Pre-norm multi-head self-attention followed by a feed-forward block."""

    def __init__(self, width: int, num_heads: int, ffn_mult: int, rng: np.random.Generator):
        super().__init__()
        self.width = width
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.attn_norm = self.add_module("attn_norm", LayerNorm(width))
        self.qkv = self.add_module("qkv", Linear(width, 3 * width, rng))
        self.out = self.add_module("out", Linear(width, width, rng))
        self.ffn_norm = self.add_module("ffn_norm", LayerNorm(width))
        self.ffn_in = self.add_module("ffn_in", Linear(width, width * ffn_mult, rng))
        self.ffn_out = self.add_module("ffn_out", Linear(width * ffn_mult, width, rng))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        batch, seq, width = x.shape
        qkv = self.qkv(self.attn_norm(x)).reshape(batch, seq, 3, self.num_heads, self.head_dim)
        qkv = F.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = F.matmul(q, F.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.head_dim))
        weights = F.softmax(F.masked_fill(scores, mask, MASKED_SCORE), axis=-1)
        attended = F.transpose(F.matmul(weights, v), (0, 2, 1, 3)).reshape(batch, seq, width)
        x = x + self.out(attended)
        return x + self.ffn_out(F.silu(self.ffn_in(self.ffn_norm(x))))


class PolicyModel(Module):
    """
    The full policy: image tokenizer, TokenLearner, Transformer and action head.

    Args:
        config: Architecture configuration (immutable after construction)
        seed: Initialisation seed
        spec: Action space used to decode tokens
        warm_start: Optional backbone warm-start ``.npz``
    """

    def __init__(
        self,
        config: Optional[PolicyConfig] = None,
        seed: int = 0,
        spec: Optional[ActionSpaceSpec] = None,
        warm_start: Optional[str] = None,
    ):
        super().__init__()
        self.config = config or PolicyConfig()
        self.spec = spec or ActionSpaceSpec()
        self.seed = seed
        self.warm_start = warm_start
        cfg = self.config
        stream = SeedStream(seed).child("policy")
        d_token = cfg.backbone.d_token

        self.backbone: FiLMBackbone = self.add_module("backbone", init_backbone(cfg.backbone, seed, warm_start))
        self.token_learner = self.add_module(
            "token_learner",
            TokenLearner(d_token, stream.rng("token_learner"), num_output_tokens=cfg.tokens_per_frame),
        )
        self.input_proj = self.add_module("input_proj", Linear(d_token, cfg.width, stream.rng("input_proj")))
        self.position = self.add_module(
            "position", Embedding(cfg.sequence_length, cfg.width, stream.rng("position"))
        )
        self.layers: List[SelfAttentionLayer] = []
        if cfg.use_transformer:
            for index in range(cfg.num_layers):
                layer = SelfAttentionLayer(cfg.width, cfg.num_heads, cfg.ffn_mult, stream.rng(f"layer{index}"))
                self.layers.append(self.add_module(f"layer{index}", layer))
        self.final_norm = self.add_module("final_norm", LayerNorm(cfg.width))

        head_rng = stream.rng("head")
        if cfg.continuous_head:
            self.mean_head = self.add_module("mean_head", Linear(cfg.width, NUM_CONTINUOUS, head_rng))
            self.logvar_head = self.add_module("logvar_head", Linear(cfg.width, NUM_CONTINUOUS, head_rng))
            self.mode_head = self.add_module("mode_head", Linear(cfg.width, NUM_MODES, head_rng))
        else:
            self.head = self.add_module("head", Linear(cfg.width, cfg.action_dims * cfg.vocab, head_rng))
        if cfg.autoregressive_actions:
            self.prefix_embedding = self.add_module(
                "prefix_embedding", Embedding(cfg.action_dims * cfg.vocab, cfg.width, stream.rng("prefix"))
            )
            self.prefix_mlp = []
            for index in range(cfg.ar_decoder_layers):
                layer = Linear(cfg.width, cfg.width, stream.rng(f"prefix_mlp{index}"), bias=False)
                self.prefix_mlp.append(self.add_module(f"prefix_mlp{index}", layer))
        logger.debug("Built %r with %d parameters", cfg, self.num_parameters())

    # ------------------------------------------------------------------
    # Encoding
    # ------------------------------------------------------------------

    def embed(self, instruction: str) -> np.ndarray:
        return embed_instruction(instruction, self.config.backbone.instruction_dim)

    def encode_frames(self, images, embeddings: np.ndarray) -> Tensor:
        """
        Encode a batch of frames into post-reduction token blocks.

        Args:
            images: [B, 3, H, W] pixels in [0, 1]
            embeddings: [B, instruction_dim] instruction embeddings

        Returns:
            [B, tokens_per_frame, d_token]
        """
        images = F.as_tensor(images)
        tokens = self.backbone(images, Tensor(np.asarray(embeddings)))
        return self.token_learner(tokens)

    def encode_frame(self, frame, instruction: str) -> Tensor:
        """Encode one [3, H, W] frame; the unit of work the token cache stores."""
        frame = F.as_tensor(frame)
        if frame.ndim != 3:
            raise DimensionError("encode_frame expects a single [3, H, W] frame", frame.shape)
        block = self.encode_frames(frame.reshape(1, *frame.shape), self.embed(instruction)[None, :])
        return block.reshape(self.config.tokens_per_frame, -1)

    def forward_from_tokens(self, blocks: Tensor, positions: Optional[Embedding] = None) -> Tensor:
        """
        Run the sequence model over frame token blocks.

        Args:
            blocks: [B, F, T, d_token] token blocks, oldest frame first
            positions: Optional position table overriding the model's own,
                for sequences longer than the configured window

        Returns:
            [B, F, width] per-frame pooled features
        """
        if blocks.ndim != 4:
            raise DimensionError("forward_from_tokens expects [B, F, T, d] blocks", blocks.shape)
        batch, frames, per_frame, d_token = blocks.shape
        seq = frames * per_frame
        table = positions or self.position
        if seq > table.table.shape[0]:
            raise DimensionError(
                f"Sequence of {seq} tokens exceeds the {table.table.shape[0]} position slots", blocks.shape
            )
        x = self.input_proj(blocks.reshape(batch, seq, d_token)) + table(np.arange(seq))
        if self.layers:
            mask = frame_causal_mask(frames, per_frame)
            for layer in self.layers:
                x = layer(x, mask)
        x = self.final_norm(x)
        return x.reshape(batch, frames, per_frame, self.config.width).mean(axis=2)

    # ------------------------------------------------------------------
    # Heads
    # ------------------------------------------------------------------

    def action_logits(self, pooled: Tensor) -> Tensor:
        """Categorical logits [..., 11, 256] from pooled features [..., width]."""
        if self.config.continuous_head:
            raise ConfigError("Model has a continuous head; use continuous_outputs")
        lead = pooled.shape[:-1]
        return self.head(pooled).reshape(*lead, self.config.action_dims, self.config.vocab)

    def continuous_outputs(self, pooled: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Gaussian head outputs.

        Returns:
            Tuple of (means squashed into the action bounds, log-variances,
            3-way mode logits)
        """
        if not self.config.continuous_head:
            raise ConfigError("Model was built without continuous_head")
        mid = self.spec.midpoint()
        half = (self.spec.upper - self.spec.lower) / 2.0
        mean = F.tanh(self.mean_head(pooled)) * half + mid
        return mean, self.logvar_head(pooled), self.mode_head(pooled)

    def _prefix_context(self, prefix_emb: Tensor) -> Tensor:
        h = prefix_emb
        for index, layer in enumerate(self.prefix_mlp):
            h = layer(h)
            if index < len(self.prefix_mlp) - 1:
                h = F.relu(h)
        return h

    def _dimension_head(self, dims: Sequence[int]) -> Tuple[Tensor, Tensor]:
        cfg = self.config
        weight = F.transpose(self.head.weight.reshape(cfg.width, cfg.action_dims, cfg.vocab), (1, 0, 2))
        bias = self.head.bias.reshape(cfg.action_dims, 1, cfg.vocab)
        dims = list(dims)
        return F.take(weight, dims, axis=0), F.take(bias, dims, axis=0)

    def teacher_forced_logits(self, pooled: Tensor, targets: np.ndarray) -> Tensor:
        """
        Autoregressive logits for every dimension given ground-truth prefixes.

        Args:
            pooled: [N, width] features
            targets: [N, 11] action tokens

        Returns:
            [N, 11, 256] where dimension d conditions on ``targets[:, :d]``
        """
        self._require_autoregressive()
        cfg = self.config
        targets = np.asarray(targets, dtype=np.int64)
        offsets = np.arange(cfg.action_dims) * cfg.vocab
        emb = self.prefix_embedding(targets + offsets)
        exclusive = Tensor(np.tril(np.ones((cfg.action_dims, cfg.action_dims)), k=-1))
        context = self._prefix_context(F.matmul(exclusive, emb))
        hidden = F.transpose(context + pooled.reshape(pooled.shape[0], 1, cfg.width), (1, 0, 2))
        weight, bias = self._dimension_head(range(cfg.action_dims))
        return F.transpose(F.matmul(hidden, weight) + bias, (1, 0, 2))

    def autoregressive_logits(self, pooled: Tensor, prefix: np.ndarray) -> Tensor:
        """
        Logits of the next dimension given a prefix of decoded tokens.

        Args:
            pooled: [N, width] features
            prefix: [N, d] tokens of dimensions 0..d-1, d < 11

        Returns:
            [N, 256] logits of dimension d
        """
        self._require_autoregressive()
        cfg = self.config
        prefix = np.asarray(prefix, dtype=np.int64).reshape(pooled.shape[0], -1)
        d = prefix.shape[1]
        if d >= cfg.action_dims:
            raise ContractError(f"Prefix of length {d} leaves no dimension to predict")
        hidden = pooled
        if d:
            emb = self.prefix_embedding(prefix + np.arange(d) * cfg.vocab)
            hidden = pooled + self._prefix_context(emb.sum(axis=1))
        weight, bias = self._dimension_head([d])
        return F.matmul(hidden, weight.reshape(cfg.width, cfg.vocab)) + bias.reshape(1, cfg.vocab)

    def _require_autoregressive(self) -> None:
        if not self.config.autoregressive_actions:
            raise ConfigError("Model was built without autoregressive_actions")

    # ------------------------------------------------------------------
    # Decoding and losses
    # ------------------------------------------------------------------

    def decode(
        self,
        pooled: Tensor,
        mode: Union[DecodeMode, str] = DecodeMode.GREEDY,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[TokenizedAction, ActionVector]:
        """
        Turn the newest frame's pooled features into an action.

        Args:
            pooled: [width] or [1, width] features of the newest frame
            mode: Greedy argmax or seeded sampling
            rng: Generator used when sampling

        Returns:
            Tuple of (tokens, decoded action)
        """
        mode = DecodeMode(mode)
        rng = rng if rng is not None else np.random.default_rng(0)
        pooled = pooled.reshape(1, self.config.width)
        if self.config.continuous_head:
            mean, _, mode_logits = self.continuous_outputs(pooled)
            values = np.clip(mean.data[0].astype(np.float64), self.spec.lower, self.spec.upper)
            choice = _choose(mode_logits.data[0], mode, rng)
            action = ActionVector(np.append(values, choice))
            return tokenize(action, self.spec), action
        if self.config.autoregressive_actions:
            prefix: List[int] = []
            for d in range(self.config.action_dims):
                logits = self.autoregressive_logits(pooled, np.asarray([prefix], dtype=np.int64))
                row = logits.data[0]
                prefix.append(_choose(row[:NUM_MODES] if d == MODE_INDEX else row, mode, rng))
            tokens = TokenizedAction(prefix)
        else:
            tokens = select_action(self.action_logits(pooled)[0], mode, rng=rng)
        return tokens, detokenize(tokens, self.spec)

    def loss(
        self,
        pooled: Tensor,
        tokens: np.ndarray,
        values: np.ndarray,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """
        Training loss of whichever head the model carries.

        Args:
            pooled: [B, F, width] features
            tokens: [B, F, 11] target tokens
            values: [B, F, 11] target continuous actions
            mask: [B, F] weights, 0 for padded frames
        """
        if self.config.continuous_head:
            mean, logvar, mode_logits = self.continuous_outputs(pooled)
            return continuous_loss(mean, logvar, mode_logits, values, mask)
        if self.config.autoregressive_actions:
            flat = pooled.reshape(-1, self.config.width)
            flat_tokens = np.asarray(tokens).reshape(-1, NUM_DIMENSIONS)
            flat_mask = None if mask is None else np.asarray(mask).reshape(-1)
            return bc_loss(self.teacher_forced_logits(flat, flat_tokens), flat_tokens, flat_mask)
        return bc_loss(self.action_logits(pooled), tokens, mask)

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def save(self, path: str, metadata: Optional[Dict] = None, optimizer=None) -> None:
        from ..core.checkpoint import save_checkpoint

        save_checkpoint(path, self, optimizer=optimizer, metadata=metadata)

    @classmethod
    def load(cls, path: str) -> "PolicyModel":
        from ..core.checkpoint import load_checkpoint

        return load_checkpoint(path).model

    def __repr__(self) -> str:
        return f"PolicyModel({self.config!r}, parameters={self.num_parameters()})"


def _choose(logits: np.ndarray, mode: DecodeMode, rng: np.random.Generator) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if mode == DecodeMode.GREEDY:
        return int(np.argmax(logits))
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


def pad_history(frames: Sequence, length: int) -> List:
    """Left-pad a short history by repeating its oldest frame; keep the newest ``length``."""
    frames = list(frames)
    if not frames:
        raise ContractError("History needs at least one frame")
    if len(frames) >= length:
        return frames[-length:]
    return [frames[0]] * (length - len(frames)) + frames


def _window(model: PolicyModel, frames: Sequence) -> List:
    cfg = model.config
    if len(frames) != cfg.history_length:
        raise DimensionError(
            f"Policy expects exactly {cfg.history_length} frames", (len(frames),)
        )
    return list(frames) if cfg.use_history else list(frames[-1:])


def trunk(model: PolicyModel, frames: Sequence, instruction: str) -> Tensor:
    """Pooled features [F, width], encoding every frame on its own."""
    blocks = [model.encode_frame(frame, instruction) for frame in _window(model, frames)]
    per_frame, d_token = blocks[0].shape
    stacked = F.concat([b.reshape(1, 1, per_frame, d_token) for b in blocks], axis=1)
    return model.forward_from_tokens(stacked)[0]


def forward(model: PolicyModel, frames: Sequence, instruction: str) -> Tensor:
    """
    Per-frame action logits for a history window.

    Args:
        model: Categorical-head policy
        frames: Exactly ``history_length`` [3, H, W] frames, oldest first
            (see ``pad_history`` for episode starts)
        instruction: Instruction text

    Returns:
        [F, 11, 256] logits, F = history_length (1 without history); the
        logits of frame t depend only on frames up to t
    """
    return model.action_logits(trunk(model, frames, instruction))


def forward_continuous(model: PolicyModel, frames: Sequence, instruction: str) -> Tuple[Tensor, Tensor, Tensor]:
    """Means, log-variances and mode logits per frame of the continuous-head ablation."""
    if not model.config.continuous_head:
        raise ConfigError("forward_continuous requires continuous_head")
    return model.continuous_outputs(trunk(model, frames, instruction))


def forward_autoregressive(model: PolicyModel, frames: Sequence, instruction: str, prefix: Sequence[int]) -> Tensor:
    """
    Next-dimension logits [256] for the newest frame given a token prefix.

    Raises:
        ConfigError: the model has no autoregressive head
        ContractError: the prefix already covers all 11 dimensions
    """
    if not model.config.autoregressive_actions:
        raise ConfigError("forward_autoregressive requires autoregressive_actions")
    if len(prefix) >= model.config.action_dims:
        raise ContractError(f"Prefix of length {len(prefix)} leaves no dimension to predict")
    pooled = trunk(model, frames, instruction)[-1:]
    return model.autoregressive_logits(pooled, np.asarray([list(prefix)], dtype=np.int64))[0]


def bc_loss(logits: Tensor, targets, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean cross-entropy over frames x action dimensions.

    Args:
        logits: [..., F, 11, 256]
        targets: [..., F, 11] tokens
        mask: Optional [..., F] frame weights; padded frames carry 0

    Raises:
        IndexError: a target token lies outside the vocabulary
    """
    targets = np.asarray(targets, dtype=np.int64)
    dims, vocab = logits.shape[-2], logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError("bc_loss targets do not match logits", logits.shape, targets.shape)
    weights = None
    if mask is not None:
        weights = np.repeat(np.asarray(mask, dtype=np.float64).reshape(-1), dims)
    return F.cross_entropy(logits.reshape(-1, vocab), targets.reshape(-1), weights)


def continuous_loss(
    mean: Tensor,
    logvar: Tensor,
    mode_logits: Tensor,
    values,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    MSE on the means, Gaussian NLL for the variances, cross-entropy on the mode.

    The variance term sees the squared error as a constant, so the means
    are trained by the MSE alone.
    """
    values = np.asarray(values, dtype=np.float64)
    target = values[..., :NUM_CONTINUOUS]
    frame_w = np.ones(values.shape[:-1]) if mask is None else np.asarray(mask, dtype=np.float64)
    w = np.broadcast_to(frame_w[..., None], target.shape)
    mse = F.mse_loss(mean, target, w)
    sq_err = F.as_tensor((mean.data - target) ** 2)
    nll = (logvar + sq_err * F.exp(F.neg(logvar))) * 0.5
    nll = (nll * w).sum() * (1.0 / w.sum())
    modes = values[..., MODE_INDEX].astype(np.int64).reshape(-1)
    ce = F.cross_entropy(mode_logits.reshape(-1, NUM_MODES), modes, frame_w.reshape(-1))
    return mse + nll + ce


def select_action(
    logits,
    mode: Union[DecodeMode, str] = DecodeMode.GREEDY,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> TokenizedAction:
    """
    Choose tokens from the newest frame's logits.

    Greedy takes the per-dimension argmax (lowest index wins ties); sample
    draws from the per-dimension softmax with a seeded generator. The mode
    dimension only considers its three legal tokens.

    Args:
        logits: [F, 11, 256] or [11, 256] logits (Tensor or array)
        mode: "greedy" or "sample"
        seed: Seed for sampling when ``rng`` is not given
        rng: Generator for sampling
    """
    mode = DecodeMode(mode)
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim == 3:
        data = data[-1]
    if data.ndim != 2 or data.shape[0] != NUM_DIMENSIONS:
        raise DimensionError("select_action expects [.., 11, V] logits", data.shape)
    rng = rng if rng is not None else np.random.default_rng(seed)
    tokens = []
    for d in range(NUM_DIMENSIONS):
        row = data[d, :NUM_MODES] if d == MODE_INDEX else data[d]
        tokens.append(_choose(row, mode, rng))
    return TokenizedAction(tokens)
