"""Multi-stage decentralized matching with uncertain acceptance: simulator,
learned cutoff strategies, baselines and fairness/welfare metrics."""

from .market import (Arm, AgentProfile, AgentView, ArmPreferenceModel, ContractViolation, DomainError,
                     MatchOutcome, StrategyDecision, expected_payoff, latent_utility, ranked_preferences,
                     run_multistage_match, utility_preferences)
from .variational import (AcceptanceSurface, Candidate, brute_force_optimal, greedy_cutoff, greedy_select,
                          uncertainty_measure, variational_loss)

__version__ = "0.1.0"
