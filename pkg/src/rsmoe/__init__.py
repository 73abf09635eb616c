__all__ = [
    "ablation",
    "app",
    "checkpoint",
    "config",
    "dataset",
    "decoder",
    "gradcheck",
    "lora",
    "metrics",
    "moe",
    "optim",
    "scenes",
    "training",
    "vision",
    "vocab",
]
