"""Model-based RL toolkit for vehicle dynamics: probabilistic ensemble
dynamics learning, disagreement-based uncertainty, and one sampling-based MPC
for both active exploration and uncertainty-aware deployment, verified
against a built-in ground-truth simulator."""

__version__ = "0.1.0"
