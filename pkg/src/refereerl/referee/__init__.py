from .base import CATEGORIES, Referee, RefereeQuery, RefereeVerdict, RewardScalars
from .llm import EndpointConfig, LLMReferee, TransportError, load_prompt, parse_category, render_messages
from .oracle import BinaryReferee, NoisyReferee, OracleReferee

__all__ = [
    "CATEGORIES",
    "BinaryReferee",
    "EndpointConfig",
    "LLMReferee",
    "NoisyReferee",
    "OracleReferee",
    "Referee",
    "RefereeQuery",
    "RefereeVerdict",
    "RewardScalars",
    "TransportError",
    "load_prompt",
    "parse_category",
    "render_messages",
]
