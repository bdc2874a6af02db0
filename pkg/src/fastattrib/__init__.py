"""Fast data attribution for conditional diffusion models: unlearning-based
teacher scores distilled into a cosine embedding by learning to rank."""

__version__ = "0.1.0"
