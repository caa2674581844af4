"""Patient cardiac prototypes: contrastive patient embeddings, hypernetwork
classifiers, patient similarity and prototype-based dataset distillation."""

__version__ = "0.1.0"
