"""Pipeline services: numerics, model, losses, feature selection, data, training and evaluation."""
