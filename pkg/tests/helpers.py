# shared fixtures for the test modules
import numpy as np

from stagematch.learning import FittedAcceptanceModel


FOUR_ARM_YAML = """\
stages: 2
seed: 0
arms:
  - {id: 0, score: 2.0, fits: [1.0, 1.0, 0.5]}
  - {id: 1, score: 2.0, fits: [0.5, 0.5, 0.0]}
  - {id: 2, score: 2.0, fits: [0.0, 0.0, 1.0]}
  - {id: 3, score: 1.0, fits: [0.2, 0.5, 0.8]}
agents:
  - {id: 0, quota: 2, penalty: 5}
  - {id: 1, quota: 1, penalty: 5}
  - {id: 2, quota: 1, penalty: 5}
preferences:
  kind: ranked
  rankings: {0: [2, 0, 1], 1: [1, 0, 2], 2: [0, 2, 1], 3: [0, 1, 2]}
"""


class LinearLogOdds(FittedAcceptanceModel):
    """Closed-form log-odds a*s + b*v + c, for checking the derived quantities."""

    def __init__(self, a, b, c, v_min=0.0, v_max=1.0):
        super().__init__(1.0, 1.0, np.zeros(1), np.zeros(1), np.zeros(1), 1.0, v_min, v_max)
        self.coef = (a, b, c)

    def log_odds(self, state, score):
        a, b, c = self.coef
        return a * np.asarray(state, float) + b * np.asarray(score, float) + c

    def log_odds_grid(self, states, scores):
        return self.log_odds(np.asarray(states, float)[:, None], np.asarray(scores, float)[None, :])
