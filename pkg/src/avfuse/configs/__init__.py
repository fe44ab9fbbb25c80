"""Built-in experiment specs (TOML)."""
