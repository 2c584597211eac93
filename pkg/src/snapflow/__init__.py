"""One-step action generation by shortcut self-distillation of a flow-matching policy."""

from .flow import euler_sample, flow_map, interpolate, one_nfe_sample
from .network import NetConfig, VelocityNet, init_params
from .oracle import MixtureSpec, conditional_covariance, marginal_velocity

__all__ = [
    "MixtureSpec",
    "NetConfig",
    "VelocityNet",
    "conditional_covariance",
    "euler_sample",
    "flow_map",
    "init_params",
    "interpolate",
    "marginal_velocity",
    "one_nfe_sample",
]
