"""Image tokenizer, TokenLearner and the policy transformer."""

from .film_backbone import FiLMBackbone, init_backbone, pretrain_backbone
from .policy_transformer import PolicyModel
from .token_learner import TokenLearner

__all__ = ["FiLMBackbone", "init_backbone", "pretrain_backbone", "PolicyModel", "TokenLearner"]
