"""Semi-supervised federated training of sparse spatial MoE task heads."""
from .data import FrozenBackbone, WorldConfig, generate_world
from .federation import FLConfig, aggregate_fedavg, run_federation, soft_mixture
from .moe import HeadConfig, TaskHead
from .optim import OptimConfig
from .ssl import SSLConfig

__version__ = "0.1.0"
