from .config import ConfigError, RunConfig, resolve_config
