"""End-to-end pipeline: configuration, model assembly, training, evaluation, tooling."""
