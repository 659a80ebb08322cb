"""Core modules: trace model, learning stages, policy store, enforcer, service, evaluation, CLI."""
