from .heuristic import Candidate, HeuristicProposer, propose_heuristic
from .remote import (
    CallBudget,
    ChatClient,
    EndpointConfig,
    PlausibilityVerdict,
    RemoteProposer,
    parse_verdict,
    plausibility_gate,
    propose_remote,
    render_prompt,
)
from .tools import Expression, ProposalContext, ToolInterface, build_context

__all__ = [
    "CallBudget",
    "Candidate",
    "ChatClient",
    "EndpointConfig",
    "Expression",
    "HeuristicProposer",
    "PlausibilityVerdict",
    "ProposalContext",
    "RemoteProposer",
    "ToolInterface",
    "build_context",
    "parse_verdict",
    "plausibility_gate",
    "propose_heuristic",
    "propose_remote",
    "render_prompt",
]
