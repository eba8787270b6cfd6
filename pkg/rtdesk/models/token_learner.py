"""
Learned spatial-attention compression of per-frame tokens.

Each output token is a convex combination of the input tokens; the
weights come from a softmax over positions of a content-dependent score
map produced by a small MLP that sees every token together with the
mean of all tokens of the frame.
"""
import numpy as np

from ..core import numerics as F
from ..core.errors import DimensionError
from ..core.module import Module
from ..core.numerics import Tensor
from .film_backbone import NUM_FRAME_TOKENS
from .layers import LayerNorm, Linear

NUM_LEARNED_TOKENS = 8


class TokenLearner(Module):
    """
    Reduce [B, num_input_tokens, d] token blocks to [B, num_output_tokens, d].

    The scorer is a two-layer MLP applied per position over the token
    concatenated with the frame's mean token; the concatenation is computed
    as the sum of two projections.
    """

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        hidden_dim: int = 32,
        num_input_tokens: int = NUM_FRAME_TOKENS,
        num_output_tokens: int = NUM_LEARNED_TOKENS,
    ):
        super().__init__()
        self.dim = dim
        self.num_input_tokens = num_input_tokens
        self.num_output_tokens = num_output_tokens
        self.norm = self.add_module("norm", LayerNorm(dim))
        self.token_proj = self.add_module("token_proj", Linear(dim, hidden_dim, rng))
        self.context_proj = self.add_module("context_proj", Linear(dim, hidden_dim, rng, bias=False))
        self.score = self.add_module("score", Linear(hidden_dim, num_output_tokens, rng))

    def attention(self, tokens: Tensor) -> Tensor:
        """Spatial weight maps [B, num_input_tokens, num_output_tokens], normalised over positions."""
        normed = self.norm(tokens)
        context = normed.mean(axis=1, keepdims=True)
        hidden = F.relu(self.token_proj(normed) + self.context_proj(context))
        return F.softmax(self.score(hidden), axis=1)

    def __call__(self, tokens: Tensor) -> Tensor:
        return reduce(tokens, self)


def reduce(tokens: Tensor, learner: TokenLearner) -> Tensor:
    """
    Soft-select ``num_output_tokens`` tokens per frame.

    Args:
        tokens: [B, 81, d] or [81, d] pre-reduction tokens
        learner: TokenLearner parameters

    Returns:
        [B, 8, d] (or [8, d] for unbatched input) where
        ``out[i] = sum_s alpha_i(s) * tokens[s]``

    Raises:
        DimensionError: the input token count or width is wrong
    """
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    if tokens.ndim != 3 or tokens.shape[1:] != (learner.num_input_tokens, learner.dim):
        raise DimensionError(
            f"TokenLearner expects [B, {learner.num_input_tokens}, {learner.dim}] tokens", tokens.shape
        )
    alpha = learner.attention(tokens)
    out = F.matmul(F.transpose(alpha, (0, 2, 1)), tokens)
    return out.reshape(learner.num_output_tokens, learner.dim) if single else out
