from dataclasses import asdict, dataclass
from typing import Any, Dict, Tuple

from config import DEFAULT_ADAM_EPS, DEFAULT_BALANCE_WEIGHT, DEFAULT_BETAS, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE, DEFAULT_SEED
from packages.helpers.errors import ConfigError
from packages.model.model_config import strict_from_dict


@dataclass
class TrainConfig:
    lr: float = DEFAULT_LEARNING_RATE
    betas: Tuple[float, float] = DEFAULT_BETAS
    eps: float = DEFAULT_ADAM_EPS
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = 1
    lambda_balance: float = DEFAULT_BALANCE_WEIGHT
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        # lr == 0 is accepted so a frozen run can be compared against the initial weights
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError(f"only batch size 1 is supported, got {self.batch_size}")
        if self.lambda_balance < 0:
            raise ConfigError(f"lambda_balance must be non-negative, got {self.lambda_balance}")

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["betas"] = list(self.betas)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        return strict_from_dict(cls, values, "train")
