"""Actor-critic laboratory: MSE and residual-variance critics, PPO and SAC, diagnostics."""
from avec.config import RunConfig, load_config
from avec.critic import CriticLossSpec, alpha_loss, bias_correct, mse_loss, residual_variance_loss

__version__ = "0.1.0"
__all__ = ["RunConfig", "load_config", "CriticLossSpec", "mse_loss", "residual_variance_loss", "alpha_loss",
           "bias_correct"]
